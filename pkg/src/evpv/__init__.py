"""Fleet charging from workplace PV: MILP scheduling, baselines and MPC."""

__version__ = "0.1.0"

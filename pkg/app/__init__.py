"""Open Dicke model solvers: exact, mean-field, cumulant and nuHOPS trajectories."""

__version__ = "0.1.0"

"""Random walk in i.i.d. uniformly elliptic random environment: exact solvers and estimators."""

__version__ = "0.1.0"

"""Station-level metro vulnerability from disruption data via propensity score matching."""

__version__ = "0.1.0"

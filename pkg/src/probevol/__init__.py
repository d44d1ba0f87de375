"""Hourly traffic volume estimation from probe vehicle counts.

The package provides a numpy feed-forward network trained with Adam, the
84-column feature encoding of probe, speed, weather, road and calendar data,
baseline estimators, evaluation metrics, a synthetic data generator and a
leave-one-station-out evaluation harness.
"""

__version__ = "0.1.0"

"""Desk-scale simulator and error-estimator toolkit for census
disclosure-avoidance pipelines: synthetic enumeration data, noisy
measurements on an optimized geographic spine, TopDown-style
post-processing, household swapping, and unbiased error estimators."""

__version__ = "0.1.0"

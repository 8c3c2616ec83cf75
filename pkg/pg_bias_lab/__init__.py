# ABOUTME: This file marks the pg_bias_lab directory as a Python package.
# ABOUTME: It exposes the package version recorded in run manifests.

__version__ = "0.3.0"

# ABOUTME: This file marks the Tests directory as a Python package.
# ABOUTME: It enables pytest to discover and run tests in this directory.
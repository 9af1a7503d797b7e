"""Tooling for defining, deploying, exercising, and fault-testing private
blockchain test networks."""

__version__ = "0.1.0"

"""Overdraft early-warning laboratory: simulation, features, learners, backtests and RCT."""

__version__ = "0.1.0"

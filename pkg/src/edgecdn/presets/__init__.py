"""Scenario files reproducing the reference experiments."""

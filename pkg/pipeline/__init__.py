"""Artifacts, plots and the forcesim command line."""

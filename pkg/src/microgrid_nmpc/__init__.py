"""Microgrid dispatch by mixed-integer NMPC over QC relaxations of AC power flow."""

__version__ = "0.1.0"

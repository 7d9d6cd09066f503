"""Voltage-stretch simulation and inverse-nonlinearity compensation for
dielectric elastomer actuators.

Submodules are imported on demand (``from deacomp import ivp``) so that the
command-line tool can pin BLAS threading before numpy loads.
"""
__version__ = "0.1.0"

__all__ = ["physics", "ivp", "nn", "baselines", "curves", "signals", "cli", "errors"]

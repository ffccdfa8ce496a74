"""
Encountered-type haptic display simulator and analysis toolkit.

Simulated impedance device, Shore-hardness plate contact, tap spectral
features, staircase psychophysics and the ANOVA used to analyse them.
"""

__version__ = "0.3.0"

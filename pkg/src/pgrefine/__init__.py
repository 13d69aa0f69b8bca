"""Refine rough path-gain estimates into accurate heatmaps with a small U-Net.

Modules
-------
geodata
    Elevation rasters, TX-centred tiles, rotation and terrain profiles.
propagate
    Rough and oracle path-gain generators built on FSPL, knife-edge
    diffraction and a two-ray ground term.
sounder
    PN-sequence channel sounding and link-budget calibration of captures.
dataset
    Scenario construction, normalisation, splits and sample directories.
unet
    A numpy U-Net with manual backpropagation and Adam training.
evalkit
    Error metrics, baseline comparison and experiment runners.
cli
    The ``pgrefine`` command-line entry point.
"""

__version__ = "0.1.0"

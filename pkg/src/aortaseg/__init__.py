"""Aorta segmentation, diameter measurement and aneurysm detection.

Volumetric segmentation with a from-scratch 3D U-Net, slice-wise ellipse
fitting with tilt-corrected diameters, threshold-based aneurysm calls, and a
synthetic-phantom corpus for end-to-end verification. The convolution core
is a compiled extension with a numpy fallback (see aortaseg.backend).
"""

from .backend import backend_name, have_compiled, set_num_threads

__version__ = "0.1.0"

__all__ = ["backend_name", "have_compiled", "set_num_threads", "__version__"]

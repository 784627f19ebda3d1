"""Compiled numerical kernels.

The extension ``_conv3d`` is optional; :mod:`lacare.nn.backend` falls back
to the numpy implementation when it is not built.
"""

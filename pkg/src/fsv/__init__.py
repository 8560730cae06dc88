"""Desk-scale reference implementation of a fast video generation stack.

Subpackages: ``numerics`` (autodiff, RNG, tensor files), ``geometry``,
``autoencoder``, ``vf_align``, ``dit``, ``flow``, ``upsampler``, ``harness``.
"""
__version__ = "0.1.0"

"""
Oseen Shell Lab Application Package

This package contains the numerical laboratory for exterior flow past a
translating and rotating obstacle:
- wake weights and decay envelopes
- fundamental-solution kernels and manufactured reference fields
- spherical-shell meshes and Taylor-Hood solves with the artificial
  boundary condition
- verification studies and reports, driven from the command line
"""

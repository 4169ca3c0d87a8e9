"""Projected ridge-function surrogates for parametric maps with Gaussian inputs.

Modules
-------
randlinalg     matrix-free randomized symmetric eigensolvers
gaussianfield  Matern-type Gaussian fields and their covariance actions
parametricmap  parametric maps with exact Jacobian actions (incl. a nonlinear PDE)
subspaces      active subspace, KLE, POD bases and projection diagnostics
surrogate      projected neural networks and their training
experiment     configuration, array store and the ``ridgeline`` CLI
"""
__version__ = "0.1.0"

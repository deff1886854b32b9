"""Function-preserving transforms for quantizing toy transformer models.

Modules:

- :mod:`fptlab.numerics` - deterministic linear algebra, Hadamard, Cayley, L_p norms
- :mod:`fptlab.model` - the toy decoder, its forward pass and quantizer locations
- :mod:`fptlab.quant` - fake quantization and L_p range setting
- :mod:`fptlab.transforms` - the transforms, their merges and preservation checks
- :mod:`fptlab.optimize` - local L_p and end-to-end student-teacher optimization
- :mod:`fptlab.harness` - quantization settings, sensitivity sweeps, the fit pipeline
"""
__version__ = "0.1.0"

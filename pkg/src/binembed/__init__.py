"""Binary embedding retrieval toolkit.

Turns float embedding vectors into short multi-bit binary codes with a
recurrent binarization model, and searches them with integer kernels
(popcount over bit planes, or per-slot lookup tables) that reproduce the
full-precision cosine ordering of the decoded codes.

Layout:

- ``embstore``: float embedding / pair / ground-truth file formats and
  synthetic benchmark generation
- ``model``: the recurrent binarization network (forward, straight-through
  backward, checkpoints)
- ``trainer``: contrastive training with a momentum encoder and a negative
  queue, plus the backward-compatible variant
- ``codec``: bit-plane and packed-nibble layouts, scaled-integer view,
  norm quantization, code segment files
- ``kernels``: distance kernels (reference, bitwise, SDC lookup, float)
  with numba and pure-numpy backends
- ``index``: flat and IVF index structures over packed codes
- ``evaluate`` / ``experiment`` / ``cli``: recall metrics, kernel
  benchmarks, end-to-end experiment driver, command line front end
"""

__version__ = "0.1.0"

"""
LFFN Detection Bench

Layer-weakening feature fusion detector built from explicit forward and
backward kernels, with stochastic NMS, VOC-style evaluation, analytical cost
counting, a bench CLI and a FastAPI service.
"""

__version__ = "1.0.0"

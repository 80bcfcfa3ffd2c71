"""Translating intermediate features between heterogeneous agent modalities.

A frozen intrinsic encoder places every feature map in a small code space,
a router maps (neighbor, ego) code pairs to expert weights, and a bank of
expert parameter sets is collapsed into a single translator per pair.
"""

__version__ = "0.1.0"

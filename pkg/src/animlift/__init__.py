"""Category-agnostic 2D-to-3D skeleton lifting.

Modules: :mod:`geometry` (rotations, projection, Procrustes),
:mod:`kinematics` (FK and IK refinement), :mod:`dataset` (synthetic corpus and
file formats), :mod:`model` (the lifting network), :mod:`training`,
:mod:`metrics` and :mod:`cli`.
"""

__version__ = "0.1.0"

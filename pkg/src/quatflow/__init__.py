"""Geometric flow matching on the unit-quaternion sphere, a 3D coordinate
tokenizer, scene-annotation geometry with VQA templating, and a robot
action-chunk data pipeline, all backed by numpy/scipy.
"""

from . import errors, flow, rotation

__all__ = ["errors", "flow", "rotation"]

__version__ = "0.1.0"

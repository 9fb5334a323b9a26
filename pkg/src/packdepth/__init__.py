"""Self-supervised monocular depth and ego-motion with 3D packing / unpacking networks."""

from .depthnet import PackNet, PackNetConfig
from .geometry import CameraIntrinsics, RigidTransform
from .posenet import PoseNet

__version__ = "0.1.0"
__all__ = ["CameraIntrinsics", "PackNet", "PackNetConfig", "PoseNet", "RigidTransform"]

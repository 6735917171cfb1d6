"""voxdistill: sparse voxel sequence detection with cross-architecture distillation.

A desk-scale, fully trainable pipeline: point clouds are voxelized, voxels
are partitioned into Morton-ordered window sequences, encoded by either a
distance-adaptive attention teacher or a selective state-space student, then
densified by confidence-gated diffusion and decoded by a sparse detection
head. Knowledge transfers from teacher to student through coordinate-aligned
feature losses, span-head KL, and gated logit distillation. An analytic
cost model covers both encoder families.
"""

__version__ = "0.1.0"

from .autodiff import Shape, Tape, Tensor, backward
from .optim import AdamW, ParamStore

__all__ = ["Shape", "Tape", "Tensor", "backward", "AdamW", "ParamStore", "__version__"]

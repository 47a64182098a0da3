"""Diffeomorphic shape interpolation with varifold matching and skeleton priors."""

from .flowfield import VelocityField, velocity, velocity_jacobian
from .losses import (
    FlowModel, LossWeights, Problem, Schedule,
    full_loss, full_loss_and_grads, loss_varifold, train,
)
from .meshio import TriMesh, load_mesh, normalize_to_unit_cube, save_mesh, to_varifold
from .metrics import auc, chamfer, conformal_distortion, extract_correspondence, geodesic_error
from .networks import MlpParams, arcnet, qnet, siren_init
from .odesolve import TimeGrid, Trajectory, ode_solve, ode_solve_batch, ode_solve_with_frames
from .skeleton import PoseParams, Skeleton, fwd_kinematics, slerp_pose
from .varifold import (
    CompressionConfig, KernelConfig, VarifoldSurface,
    compress, distance, inner_product,
)

__version__ = "0.1.0"

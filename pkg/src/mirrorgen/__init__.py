"""Mirror-reflection inpainting with a dual-branch latent diffusion model,
plus the synthetic data, rendering and evaluation tooling around it."""

from .codec import PatchCodec, decode, encode
from .conditioning import DepthNormalizer, build_condition, normalize_depth
from .diffusion import make_schedule, q_sample, sample
from .model import DualBranchModel, UNetConfig, build
from .pipeline import MirrorInpainter, inpaint
from .training import TrainConfig, run_training

__version__ = "0.1.0"

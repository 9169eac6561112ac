"""Desk-scale video diffusion with motion-based denoising-step reuse."""

__version__ = "0.1.0"

from .diffusion import DenoiserUNet, NoiseSchedule, make_schedule  # noqa: F401
from .motion import MotionNets, apply_motion, normalize_motion, raw_motion  # noqa: F401
from .metrics import HistogramSpec, nmi, ssim  # noqa: F401
from .pipeline import (BenchReport, GenerationResult, ModelStack,  # noqa: F401
                       PipelineConfig, generate_baseline, generate_reuse,
                       load_stack, run_bench)
from .selector import SelectorNet, gt_switch_step, predict_switch  # noqa: F401
from .video import LatentCodec, MotionSpec, VideoClip, generate_clip  # noqa: F401

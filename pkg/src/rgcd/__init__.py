"""Reward-guided latent consistency distillation on a toy latent space."""
from .codec import LatentCodec
from .config import RunConfig, load_config, parse_config
from .consistency import ConsistencyModel, distill_lcd, multistep_sample
from .data import make_dataset
from .diffusion import TeacherDenoiser, build_schedule
from .lrm import LatentRewardModel, distill_rg_lcd_lrm, pretrain_lrm
from .reward import ExpertRM, distill_rg_lcd, make_expert

__version__ = "0.1.0"

__all__ = [
    "LatentCodec", "RunConfig", "load_config", "parse_config", "ConsistencyModel", "distill_lcd",
    "multistep_sample", "make_dataset", "TeacherDenoiser", "build_schedule", "LatentRewardModel",
    "distill_rg_lcd_lrm", "pretrain_lrm", "ExpertRM", "distill_rg_lcd", "make_expert",
]

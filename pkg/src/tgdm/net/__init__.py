"""Network architectures for both stages."""
from tgdm.net.config import ConfigError, NetConfig
from tgdm.net.model import (
    CKPT_MAGIC,
    GDM,
    PSM,
    CheckpointError,
    TGDMNet,
    build_model,
    build_stage1,
    load_checkpoint,
    save_checkpoint,
)
from tgdm.net.points import sample_features, scatter_features
from tgdm.net.unet import LightUNet, ResBlock, ResUNet

__all__ = [
    "CKPT_MAGIC", "GDM", "PSM", "CheckpointError", "ConfigError", "LightUNet", "NetConfig", "ResBlock",
    "ResUNet", "TGDMNet", "build_model", "build_stage1", "load_checkpoint", "sample_features",
    "save_checkpoint", "scatter_features",
]

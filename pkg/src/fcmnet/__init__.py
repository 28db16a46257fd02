"""Numpy backbone with feature-complementary mapping and multi-kernel perception blocks.

Submodules: ``tensor`` (ops and tape), ``blocks`` (FCM, MKP, downsampling),
``accounting`` (parameter and MAC audit), ``backbone`` (configurable network
and training smoke test), ``verification`` (oracles and gradient checks) and
``cli``.
"""
from .accounting import CountReport, audit_model, count_params_decoupled, count_params_standard
from .backbone import (
    Backbone,
    BackboneConfig,
    StageConfig,
    ablation_variant,
    build_backbone,
    channels_config,
    default_config,
    load_config,
    loads_config,
    tiny_config,
    train_demo,
)
from .blocks import FCM, MKP, DecoupledDownsample, FcmConfig, MkpConfig, load_archive, save_archive
from .errors import AuditError, ConfigError, DivergenceError, ShapeError, UsageError
from .tensor import ConvSpec, Tape, Tensor4, backward
from .verification import gradcheck, naive_conv2d, receptive_field_probe

__version__ = "0.1.0"

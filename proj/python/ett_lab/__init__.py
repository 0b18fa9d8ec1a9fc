"""Python bindings for the ett_lab C++ core."""

from ._core import (
    EttError,
    Model,
    caption_roundtrips,
    default_settings,
    generate_sample,
    geneval_score,
    gradcheck,
    gradcheck_ops,
    psnr_from_mse,
    render_caption,
    run_stage,
)

__all__ = [
    "EttError",
    "Model",
    "caption_roundtrips",
    "default_settings",
    "generate_sample",
    "geneval_score",
    "gradcheck",
    "gradcheck_ops",
    "psnr_from_mse",
    "render_caption",
    "run_stage",
]

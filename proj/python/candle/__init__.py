from ._candle import (
    CandleError,
    Model,
    dwt2_haar,
    encode_synthetic,
    generate_scene,
    gradcheck,
    idwt2_haar,
    load_features,
    patch_consistency,
    psnr,
    read_container,
    read_ppm,
    save_features,
    ssim,
    write_container,
    write_ppm,
)

__all__ = [
    "CandleError",
    "Model",
    "dwt2_haar",
    "encode_synthetic",
    "generate_scene",
    "gradcheck",
    "idwt2_haar",
    "load_features",
    "patch_consistency",
    "psnr",
    "read_container",
    "read_ppm",
    "save_features",
    "ssim",
    "write_container",
    "write_ppm",
]

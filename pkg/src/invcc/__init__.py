"""Invertible MR coil compression with a normalizing flow."""

from .classic import CompressionMatrix, compress_apply, compression_error, decompress_apply, gcc_fit, scc_fit
from .datagen import PhantomSpec, load_mcs, make_dataset, make_mask, make_phantom, save_mcs
from .estimators import FlowCompressor, GCCCompressor, SCCCompressor
from .flow import FlowModel, compress, load_checkpoint, model_forward, model_inverse, recover, save_checkpoint
from .metrics import evaluate, psnr, ssim
from .ndcore import ComplexImage, Domain, fft2c, ifft2c, sos
from .train import TrainConfig, Variant, loss_total, train

__version__ = "0.1.0"

__all__ = [
    "ComplexImage", "CompressionMatrix", "Domain", "FlowCompressor", "FlowModel", "GCCCompressor",
    "PhantomSpec", "SCCCompressor", "TrainConfig", "Variant", "compress", "compress_apply",
    "compression_error", "decompress_apply", "evaluate", "fft2c", "gcc_fit", "ifft2c", "load_checkpoint",
    "load_mcs", "loss_total", "make_dataset", "make_mask", "make_phantom", "model_forward", "model_inverse",
    "psnr", "recover", "save_checkpoint", "save_mcs", "scc_fit", "sos", "ssim", "train",
]

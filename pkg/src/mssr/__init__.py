"""Multi-scale residual and dense super-resolution networks on a small numpy autograd engine."""

from .data import DatasetManifest, ImageBuffer, ManifestEntry, SeededRng, load_manifest, read_image, write_image
from .evaluation import MetricReport, TileConfig, evaluate, infer, self_ensemble, split_by_camera, tiled_infer
from .metrics import psnr, ssim
from .models import (
    ComputationGraph, NetworkSpec, audit_graph, build_network, build_preset, count_parameters, preset,
    receptive_field, tiny_msdn, tiny_msrn,
)
from .tensor import Tensor, backward, conv2d, gradcheck
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ComputationGraph", "DatasetManifest", "ImageBuffer", "ManifestEntry", "MetricReport",
    "NetworkSpec", "SeededRng", "Tensor", "TileConfig", "TrainConfig", "audit_graph", "backward",
    "build_network", "build_preset", "conv2d", "count_parameters", "evaluate", "gradcheck", "infer",
    "load_checkpoint", "load_manifest", "preset", "psnr", "read_image", "receptive_field", "save_checkpoint",
    "self_ensemble", "split_by_camera", "ssim", "tiled_infer", "tiny_msdn", "tiny_msrn", "train", "write_image",
]

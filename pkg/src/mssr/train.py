"""Adam training loop, learning-rate schedule, configs and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as te
from .augment import apply_geometric, center_crop, crop_patch, sample_augmentation
from .data import SeededRng, load_float, load_manifest
from .metrics import psnr, ssim
from .models import ComputationGraph, NetworkSpec, build_network, preset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BETA1, BETA2, EPSILON = 0.9, 0.999, 1e-8


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimizer


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 1e-4
    decay_factor: float = 0.2
    decay_start: int = 60_000_000
    decay_interval: int = 10_000_000


def lr_at(update: int, schedule: LrSchedule) -> float:
    """Constant until ``decay_start``; from there multiplied by ``decay_factor`` once per interval."""
    if update < 0:
        raise ValueError("update must be non-negative")
    if update < schedule.decay_start:
        return schedule.initial
    steps = (update - schedule.decay_start) // schedule.decay_interval + 1
    return schedule.initial * schedule.decay_factor**steps


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainConfig:
    model: str = "msrn"
    loss: str = "l1"
    patch_size: int = 64
    batch_size: int = 16
    updates: int = 10_000
    lr_initial: float = 1e-4
    lr_decay_factor: float = 0.2
    lr_decay_start: int | None = None  # default: 60% of updates
    lr_decay_interval: int | None = None  # default: 10% of updates
    seed: int = 0
    data_manifest: str = ""
    ckpt_dir: str = "checkpoints"
    eval_interval: int = 1000
    # optional architecture overrides on top of the preset
    blocks: tuple[int, int, int] | None = None
    filters: tuple[int, int, int] | None = None
    downscale: tuple[int, int, int] | None = None
    upscale: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.loss = self.loss.lower()
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be l1 or l2, got {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patch_size < 4 or self.patch_size % 4:
            raise ValueError(f"patch_size must be a positive multiple of 4, got {self.patch_size}")
        if self.updates < 0 or self.eval_interval < 0:
            raise ValueError("updates and eval_interval must be non-negative")

    @property
    def schedule(self) -> LrSchedule:
        start = self.lr_decay_start if self.lr_decay_start is not None else int(0.6 * self.updates)
        interval = self.lr_decay_interval if self.lr_decay_interval is not None else max(1, int(0.1 * self.updates))
        return LrSchedule(self.lr_initial, self.lr_decay_factor, start, interval)

    def network_spec(self) -> NetworkSpec:
        spec = preset(self.model)
        changes = {}
        if self.blocks is not None:
            changes["blocks_per_space"] = tuple(None if b < 0 else b for b in self.blocks)
        if self.filters is not None:
            changes["filters_per_space"] = tuple(None if f < 0 else f for f in self.filters)
        if self.downscale is not None:
            d2, d4a, d4b = self.downscale
            changes["downscale_filters"] = (d2, (d4a, d4b))
        if self.upscale is not None:
            u2, u4a, u4b = self.upscale
            changes["upscale_channel_plan"] = ((u2,), (u4a, u4b))
        return spec.replace(**changes) if changes else spec

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if v is None:
                continue
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("blocks", "filters", "downscale", "upscale"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


_INT_TRIPLES = {"blocks", "filters", "downscale", "upscale"}


def parse_config(text: str) -> TrainConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in _INT_TRIPLES:
            parts = [p.strip() for p in value.split(",")]
            if len(parts) != 3:
                raise ValueError(f"config line {lineno}: {key} needs three comma-separated integers")
            values[key] = tuple(-1 if p in ("-", "") else int(p) for p in parts)
        elif key in ("model", "loss", "data_manifest", "ckpt_dir"):
            values[key] = value
        elif key in ("lr_initial", "lr_decay_factor"):
            values[key] = float(value)
        else:
            values[key] = int(float(value)) if "e" in value.lower() else int(value)
    return TrainConfig(**values)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    cfg = parse_config(path.read_text())
    # relative paths in a config file are relative to the file
    if cfg.data_manifest and not Path(cfg.data_manifest).is_absolute():
        cfg.data_manifest = str(path.parent / cfg.data_manifest)
    if not Path(cfg.ckpt_dir).is_absolute():
        cfg.ckpt_dir = str(path.parent / cfg.ckpt_dir)
    return cfg


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState
    update: int
    config: dict
    spec: dict
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> ComputationGraph:
        graph = build_network(NetworkSpec.from_dict(self.spec), seed=None)
        load_parameters(graph, self.params)
        return graph


def load_parameters(graph: ComputationGraph, params: dict[str, np.ndarray]) -> None:
    expected = dict(graph.parameters())
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(f"parameter mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in expected.items():
        if t.shape != params[name].shape:
            raise CheckpointError(f"{name}: stored shape {params[name].shape} != model shape {t.shape}")
        t.data[...] = params[name]


def snapshot(graph: ComputationGraph, adam: AdamState, update: int, config: dict) -> Checkpoint:
    params = {name: t.data.copy() for name, t in graph.parameters()}
    state = AdamState(
        {k: v.copy() for k, v in adam.m.items()},
        {k: v.copy() for k, v in adam.v.items()},
        adam.t, adam.beta1, adam.beta2, adam.eps,
    )
    return Checkpoint(params, state, update, dict(config), graph.spec.to_dict())


_BLOBS = ("params", "adam_m", "adam_v")


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    """Write ``manifest.json`` plus little-endian float32 blobs; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(ckpt.params)
    entries, offset = [], 0
    for name in names:
        arr = ckpt.params[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.size * 4})
        offset += arr.size * 4
    sources = {
        "params": ckpt.params,
        "adam_m": ckpt.adam.m,
        "adam_v": ckpt.adam.v,
    }
    for blob in _BLOBS:
        src = sources[blob]
        chunks = []
        for name in names:
            arr = src.get(name)
            if arr is None:
                arr = np.zeros_like(ckpt.params[name])
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        (directory / f"{blob}.bin").write_bytes(b"".join(chunks))
    manifest = {
        "format_version": ckpt.version,
        "dtype": "float32-le",
        "update": ckpt.update,
        "adam": {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "config": ckpt.config,
        "spec": ckpt.spec,
        "tensors": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"{directory}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{directory}: checkpoint format {version} is not supported (expected {CHECKPOINT_VERSION})")
    if manifest.get("dtype") != "float32-le":
        raise CheckpointError(f"{directory}: unsupported dtype tag {manifest.get('dtype')!r}")
    blobs = {}
    for blob in _BLOBS:
        raw = (directory / f"{blob}.bin").read_bytes()
        arrays = {}
        for e in manifest["tensors"]:
            start, nbytes = e["offset"], e["nbytes"]
            expected = int(np.prod(e["shape"])) * 4
            if nbytes != expected or start + nbytes > len(raw):
                raise CheckpointError(
                    f"{directory / (blob + '.bin')}: blob for parameter {e['name']!r} is truncated or corrupt "
                    f"(need bytes {start}..{start + expected}, file has {len(raw)})"
                )
            arrays[e["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=start) \
                .astype(np.float32).reshape(e["shape"])
        total = sum(e["nbytes"] for e in manifest["tensors"])
        if len(raw) != total:
            raise CheckpointError(f"{directory / (blob + '.bin')}: size {len(raw)} != expected {total}")
        blobs[blob] = arrays
    a = manifest["adam"]
    adam = AdamState(blobs["adam_m"], blobs["adam_v"], a["t"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(blobs["params"], adam, manifest["update"], manifest["config"], manifest["spec"], version)


# ---------------------------------------------------------------------------
# training


@dataclass
class Pair:
    id: str
    lr: np.ndarray  # (3, h, w) float32
    hr: np.ndarray


def load_pairs(manifest_path: str | Path) -> tuple[list[Pair], list[Pair]]:
    """Training and validation pairs; entries without a split tag count as training data."""
    manifest = load_manifest(manifest_path, require_hr=True)
    train_pairs, val_pairs = [], []
    for e in manifest:
        lr, hr = load_float(e.lr_path)[0], load_float(e.hr_path)[0]
        if lr.shape != hr.shape:
            raise ValueError(f"{e.id}: LR {lr.shape} and HR {hr.shape} differ in size")
        target = val_pairs if e.split in ("val", "valid", "validation") else train_pairs
        if e.split in ("", "train", "val", "valid", "validation"):
            target.append(Pair(e.id, lr, hr))
    return train_pairs, val_pairs


class BatchSampler:
    """Deterministic patch batches: epoch-wise shuffled images, random crops, random flips/rotations."""

    def __init__(self, pairs: list[Pair], patch: int, batch: int, rng: SeededRng):
        if not pairs:
            raise TrainingError("training set is empty")
        self.pairs, self.patch, self.batch = pairs, patch, batch
        self.shuffle_rng = rng.derive("shuffle")
        self.crop_rng = rng.derive("crop")
        self.augment_rng = rng.derive("augment")
        self._pool: list[int] = []

    def _next_index(self) -> int:
        if not self._pool:
            self._pool = self.shuffle_rng.permutation(len(self.pairs)).tolist()[::-1]
        return self._pool.pop()

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for _ in range(self.batch):
            pair = self.pairs[self._next_index()]
            lr, hr = crop_patch(pair.lr, pair.hr, self.patch, self.crop_rng)
            t = sample_augmentation(self.augment_rng)
            xs.append(apply_geometric(t, lr))
            ys.append(apply_geometric(t, hr))
        return np.stack(xs), np.stack(ys)


def curve_metrics(model: ComputationGraph, pairs: list[Pair], crop: int = 64) -> tuple[float, float]:
    """Mean PSNR/SSIM of plain forward passes on centre crops."""
    div = model.spec.size_divisor if model.spec else 1
    ps, ss = [], []
    for p in pairs:
        c = (min(crop, *p.lr.shape[1:]) // div) * div
        lr, hr = center_crop(p.lr, c), center_crop(p.hr, c)
        sr = np.clip(model(lr[None]), 0.0, 1.0)
        ps.append(psnr(sr, hr[None]))
        ss.append(ssim(sr, hr[None]) if c >= 11 else float("nan"))
    return float(np.mean(ps)), float(np.mean(ss))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: ComputationGraph
    log: list[dict]
    losses: list[float]


def train(
    config: TrainConfig,
    pairs: tuple[list[Pair], list[Pair]] | None = None,
    progress: Callable[[dict], None] | None = None,
    save: bool = True,
) -> TrainResult:
    """Run ``config.updates`` Adam updates; evaluate and checkpoint every ``eval_interval``.

    ``pairs`` (train, validation) may be given directly; otherwise they are
    read from ``config.data_manifest``. Curve records are appended to
    ``curve.csv`` in the checkpoint directory.
    """
    train_pairs, val_pairs = pairs if pairs is not None else load_pairs(config.data_manifest)
    rng = SeededRng(config.seed)
    spec = config.network_spec()
    if config.patch_size % spec.size_divisor:
        raise ValueError(f"patch_size {config.patch_size} must be divisible by {spec.size_divisor}")
    model = build_network(spec, rng)
    sampler = BatchSampler(train_pairs, config.patch_size, config.batch_size, rng)
    schedule = config.schedule
    adam = AdamState()
    named = dict(model.parameters())
    weights = {name: t.data for name, t in named.items()}
    ckpt_dir = Path(config.ckpt_dir)
    records: list[dict] = []
    losses: list[float] = []
    cfg_echo = config.to_dict()
    mode = config.loss.upper()
    curve_path = ckpt_dir / "curve.csv"
    if save:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        curve_path.write_text("update,lr,loss,psnr,ssim\n")

    def checkpoint(update: int) -> Checkpoint:
        ck = snapshot(model, adam, update, cfg_echo)
        if save:
            save_checkpoint(ck, ckpt_dir)
        return ck

    def record(update: int, window: list[float]):
        rec = {"update": update, "lr": lr_at(max(update - 1, 0), schedule),
               "loss": float(np.mean(window)) if window else float("nan")}
        if val_pairs:
            rec["psnr"], rec["ssim"] = curve_metrics(model, val_pairs)
        else:
            rec["psnr"] = rec["ssim"] = float("nan")
        records.append(rec)
        if save:
            with curve_path.open("a") as fh:
                fh.write(f"{rec['update']},{rec['lr']:.6g},{rec['loss']:.8f},{rec['psnr']:.6f},{rec['ssim']:.6f}\n")
        if progress is not None:
            progress(rec)
        log.info("update %d loss %.6f psnr %.3f ssim %.4f", update, rec["loss"], rec["psnr"], rec["ssim"])

    last = checkpoint(0) if save else None
    window: list[float] = []
    for update in range(config.updates):
        x, y = sampler.next()
        model.zero_grad()
        out = model.forward(x)
        loss = te.loss(mode, out, te.Tensor(y))
        value = float(loss.data.reshape(()))
        if not math.isfinite(value):
            where = f"; last checkpoint kept in {ckpt_dir}" if save else ""
            raise TrainingError(f"non-finite loss at update {update + 1}{where}")
        te.backward(loss)
        adam_step(adam, weights, {n: t.grad for n, t in named.items()}, lr_at(update, schedule))
        losses.append(value)
        window.append(value)
        done = update + 1
        if config.eval_interval and done % config.eval_interval == 0:
            record(done, window)
            window = []
            last = checkpoint(done)
    if not records or records[-1]["update"] != config.updates:
        record(config.updates, window)
    if last is None or last.update != config.updates:
        last = checkpoint(config.updates)
    return TrainResult(last, model, records, losses)

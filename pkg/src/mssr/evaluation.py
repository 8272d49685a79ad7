"""Self-ensemble, tiled inference and dataset-level PSNR/SSIM reports."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import ALL_TRANSFORMS, apply_geometric, invert_geometric
from .data import DatasetManifest, ImageError, ManifestEntry, load_float
from .metrics import SSIM_WINDOW, psnr, ssim
from .models import ComputationGraph, receptive_field_radius

log = logging.getLogger(__name__)

Model = Callable[[np.ndarray], np.ndarray]


class TilingError(ValueError):
    pass


def self_ensemble(model: Model, image: np.ndarray) -> np.ndarray:
    """Average of the model over the 8 flip/rotation variants, each mapped back before averaging."""
    image = np.asarray(image)
    acc = np.zeros(image.shape, dtype=np.float64)
    for t in ALL_TRANSFORMS:
        out = model(apply_geometric(t, image))
        acc += invert_geometric(t, np.asarray(out))
    return (acc / len(ALL_TRANSFORMS)).astype(image.dtype)


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TileConfig:
    tile: int = 256
    overlap: int = 32


def _size_divisor(model) -> int:
    spec = getattr(model, "spec", None)
    return spec.size_divisor if spec is not None else 4


def _tile_origins(length: int, tile: int, overlap: int) -> list[int]:
    if length <= tile:
        return [0]
    step = tile - 2 * overlap
    origins = list(range(0, length - tile, step)) + [length - tile]
    return sorted(set(origins))


def _cuts(origins: list[int], tile: int, length: int) -> list[tuple[int, int]]:
    """Half-open output span owned by each tile: seams at midpoints of consecutive overlaps."""
    spans = []
    for i, o in enumerate(origins):
        lo = 0 if i == 0 else (origins[i - 1] + tile + o) // 2
        hi = length if i == len(origins) - 1 else (o + tile + origins[i + 1]) // 2
        spans.append((lo, hi))
    return spans


def tiled_infer(model: Model, image: np.ndarray, cfg: TileConfig, radius: float | None = None) -> np.ndarray:
    """Run ``model`` tile by tile and stitch the central regions.

    Tiles are clipped to the image (edge tiles shift inward), so every tile
    border is either an image border or at least ``overlap`` pixels away from
    the pixels it contributes. With ``overlap`` no smaller than the model's
    receptive-field radius the result matches a whole-image forward pass.
    ``image`` height and width must already be multiples of the model's size
    divisor (see :func:`infer` for padding).
    """
    image = np.asarray(image)
    div = max(4, _size_divisor(model))
    if cfg.tile <= 0 or cfg.tile % div:
        raise TilingError(f"tile size {cfg.tile} must be a positive multiple of {div}")
    if cfg.overlap <= 0 or cfg.overlap % 4:
        raise TilingError(f"overlap {cfg.overlap} must be a positive multiple of 4")
    if 2 * cfg.overlap >= cfg.tile:
        raise TilingError(f"tile {cfg.tile} must exceed twice the overlap {cfg.overlap}")
    h, w = image.shape[-2:]
    if h % div or w % div:
        raise TilingError(f"image size {h}x{w} must be a multiple of {div}; pad it first")
    if radius is None and isinstance(model, ComputationGraph):
        radius = receptive_field_radius(model)
    ys, xs = _tile_origins(h, cfg.tile, cfg.overlap), _tile_origins(w, cfg.tile, cfg.overlap)
    if (len(ys) > 1 or len(xs) > 1) and radius is not None and cfg.overlap < radius:
        raise TilingError(
            f"overlap {cfg.overlap} is below the model's receptive-field radius {math.ceil(radius)}; "
            f"use at least {4 * math.ceil(math.ceil(radius) / 4)}"
        )
    if len(ys) == 1 and len(xs) == 1:
        return np.asarray(model(image))
    th, tw = min(cfg.tile, h), min(cfg.tile, w)
    out = None
    for y0, (ya, yb) in zip(ys, _cuts(ys, th, h)):
        for x0, (xa, xb) in zip(xs, _cuts(xs, tw, w)):
            piece = np.asarray(model(image[..., y0:y0 + th, x0:x0 + tw]))
            if out is None:
                out = np.zeros(piece.shape[:-2] + (h, w), dtype=piece.dtype)
            out[..., ya:yb, xa:xb] = piece[..., ya - y0:yb - y0, xa - x0:xb - x0]
    return out


def pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = image.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if min(h, w) > max(ph, pw) else "symmetric"
    return np.pad(image, pad, mode=mode), (h, w)


def infer(model: Model, image: np.ndarray, ensemble: bool = False, tiling: TileConfig | None = None) -> np.ndarray:
    """Super-resolve one (1, 3, h, w) image of any size: reflect-pad, run, crop back."""
    padded, (h, w) = pad_to_multiple(np.asarray(image), max(4, _size_divisor(model)))

    def run(x):
        if tiling is not None:
            radius = receptive_field_radius(model) if isinstance(model, ComputationGraph) else None
            return tiled_infer(model, x, tiling, radius)
        return model(x)

    out = self_ensemble(run, padded) if ensemble else run(padded)
    return np.ascontiguousarray(out[..., :h, :w])


# ---------------------------------------------------------------------------
# reports


@dataclass
class ImageScore:
    id: str
    psnr: float
    ssim: float
    split: str


@dataclass
class MetricReport:
    images: list[ImageScore] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @staticmethod
    def _mean(values: list[float]) -> float:
        return sum(values) / len(values) if values else float("nan")

    def mean(self, split: str | None = None) -> tuple[float, float]:
        chosen = [s for s in self.images if split is None or s.split == split]
        return self._mean([s.psnr for s in chosen]), self._mean([s.ssim for s in chosen])

    @property
    def splits(self) -> list[str]:
        return sorted({s.split for s in self.images})

    def records(self) -> list[dict]:
        """Per-image records in manifest order, then the overall mean, then per-split means."""
        rows = [{"kind": "image", "id": s.id, "psnr": s.psnr, "ssim": s.ssim, "split": s.split} for s in self.images]
        p, q = self.mean()
        rows.append({"kind": "mean", "id": "all", "psnr": p, "ssim": q, "split": "*"})
        for split in self.splits:
            p, q = self.mean(split)
            rows.append({"kind": "mean", "id": split, "psnr": p, "ssim": q, "split": split})
        return rows

    def to_text(self) -> str:
        lines = []
        for r in self.records():
            lines.append(f"{r['kind']:<5} {r['id']:<24} psnr={r['psnr']:.4f} ssim={r['ssim']:.4f} split={r['split']}")
        for id_, reason in self.skipped:
            lines.append(f"skip  {id_:<24} {reason}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        """TSV (columns ``kind id psnr ssim split``) or JSON when ``path`` ends in ``.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = self.records()
        if path.suffix == ".json":
            payload = {"records": [{k: _jsonable(v) for k, v in r.items()} for r in rows],
                       "skipped": [{"id": i, "reason": r} for i, r in self.skipped]}
            path.write_text(json.dumps(payload, indent=2) + "\n")
            return
        lines = ["kind\tid\tpsnr\tssim\tsplit"]
        for r in rows:
            lines.append(f"{r['kind']}\t{r['id']}\t{r['psnr']!r}\t{r['ssim']!r}\t{r['split']}")
        for id_, reason in self.skipped:
            lines.append(f"skipped\t{id_}\tnan\tnan\t{reason}")
        path.write_text("\n".join(lines) + "\n")


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


def read_report(path: str | Path) -> list[dict]:
    rows = []
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        kind, id_, p, s, split = line.split("\t")
        rows.append({"kind": kind, "id": id_, "psnr": float(p), "ssim": float(s), "split": split})
    return rows


def _split_label(entry: ManifestEntry) -> str:
    return f"cam{entry.camera_tag}" if entry.camera_tag is not None else (entry.split or "-")


def evaluate(
    model: Model,
    manifest: DatasetManifest,
    ensemble: bool = True,
    tiling: TileConfig | None = None,
    y_channel: bool = False,
    outputs: str | Path | None = None,
) -> MetricReport:
    """Score ``model`` on every LR/HR pair; pairs of different sizes are skipped and listed."""
    from .data import write_image

    report = MetricReport()
    for entry in manifest:
        if entry.hr_path is None:
            raise ValueError(f"entry {entry.id!r} has no HR image to compare against")
        try:
            lr, hr = load_float(entry.lr_path), load_float(entry.hr_path)
        except (OSError, ImageError) as exc:
            raise ImageError(f"{entry.id}: {exc}") from exc
        if lr.shape != hr.shape:
            reason = f"size mismatch LR {lr.shape[2]}x{lr.shape[3]} vs HR {hr.shape[2]}x{hr.shape[3]}"
            log.warning("skipping %s: %s", entry.id, reason)
            report.skipped.append((entry.id, reason))
            continue
        sr = np.clip(infer(model, lr, ensemble=ensemble, tiling=tiling), 0.0, 1.0)
        if outputs is not None:
            write_image(sr, Path(outputs) / f"{entry.id}.png")
        score_ssim = ssim(sr, hr, y_channel) if min(hr.shape[2:]) >= SSIM_WINDOW else float("nan")
        report.images.append(ImageScore(entry.id, psnr(sr, hr, y_channel), score_ssim, _split_label(entry)))
    return report


def split_by_camera(manifest: DatasetManifest) -> tuple[DatasetManifest, DatasetManifest]:
    """Partition into camera-1 and camera-2 entries, preserving order."""
    first, second = [], []
    for e in manifest:
        if e.camera_tag == 1:
            first.append(e)
        elif e.camera_tag == 2:
            second.append(e)
        elif e.camera_tag is None:
            raise ValueError(f"entry {e.id!r} has no camera tag")
        else:
            raise ValueError(f"entry {e.id!r} has camera tag {e.camera_tag}; only cameras 1 and 2 are split")
    return DatasetManifest(first, manifest.root), DatasetManifest(second, manifest.root)

"""Image I/O, dataset manifests and seeded random streams.

All randomness in the package goes through :class:`SeededRng`. A stream is
a PCG64 bit generator seeded with ``seed XOR fnv1a64(stream_name)``; every
derived quantity (uniforms, integers, normals, booleans) is computed here from
the raw 64-bit outputs so that results do not depend on the numpy version's
``Generator`` sampling routines.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class ImageError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# randomness


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class SeededRng:
    """Reproducible random stream over PCG64 raw output."""

    def __init__(self, seed: int, name: str = ""):
        self.seed = int(seed) & _MASK64
        self.name = name
        self._bits = np.random.PCG64(self.seed ^ fnv1a64(name))

    def derive(self, name: str) -> "SeededRng":
        return SeededRng(self.seed, f"{self.name}/{name}" if self.name else name)

    def raw(self, size: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(size), dtype=np.uint64).reshape(-1)

    def uniform(self, size: int | tuple = 1) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        return ((self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def integers(self, high: int, size: int = 1) -> np.ndarray:
        """Unbiased integers in ``[0, high)`` by rejection on the raw stream."""
        if high <= 0:
            raise ValueError("high must be positive")
        high = int(high)
        limit = (1 << 64) - ((1 << 64) % high)
        out: list[int] = []
        while len(out) < size:
            for v in self.raw(size - len(out)).tolist():
                if v < limit:
                    out.append(v % high)
        return np.asarray(out[:size], dtype=np.int64)

    def randint(self, high: int) -> int:
        return int(self.integers(high, 1)[0])

    def bits(self, size: int) -> np.ndarray:
        return (self.raw(size) >> np.uint64(63)).astype(bool)

    def normal(self, shape: tuple, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (z * std).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by our own integer draws
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)


def derive_stream(rng: SeededRng | int, name: str) -> SeededRng:
    """Independent named substream of ``rng`` (or of a bare integer seed)."""
    if isinstance(rng, SeededRng):
        return rng.derive(name)
    return SeededRng(int(rng), name)


# ---------------------------------------------------------------------------
# images


def to_float(pixels: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> float32 1x3xHxW in [0, 1]."""
    return (pixels.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)[None].copy()


def to_bytes(image: np.ndarray) -> np.ndarray:
    """float 1x3xHxW (or 3xHxW) in [0, 1] -> uint8 HxWx3."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ImageError("expected a single image (batch size 1)")
        arr = arr[0]
    arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0)
    return arr.astype(np.uint8).transpose(1, 2, 0).copy()


@dataclass
class ImageBuffer:
    pixels: np.ndarray  # uint8, (height, width, 3)

    def __post_init__(self):
        p = self.pixels
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] != 3:
            raise ImageError(f"expected uint8 pixels of shape (h, w, 3), got {p.dtype} {p.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def as_float(self) -> np.ndarray:
        return to_float(self.pixels)

    @classmethod
    def from_float(cls, image: np.ndarray) -> "ImageBuffer":
        return cls(to_bytes(image))


_SIXTEEN_BIT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


def read_image(path: str | Path) -> ImageBuffer:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in _SIXTEEN_BIT_MODES or mode.startswith("I;16"):
                raise ImageError(f"{path}: unsupported bit depth (mode {mode}); only 8-bit images are accepted")
            if mode in ("RGBA", "LA", "PA"):
                im = im.convert("RGBA").convert("RGB")
            elif mode != "RGB":
                im = im.convert("RGB")
            pixels = np.asarray(im, dtype=np.uint8).copy()
    except ImageError:
        raise
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ImageError(f"{path}: cannot decode image ({exc})") from exc
    return ImageBuffer(pixels)


def write_image(buffer: ImageBuffer | np.ndarray, path: str | Path) -> None:
    pixels = buffer.pixels if isinstance(buffer, ImageBuffer) else np.asarray(buffer)
    if pixels.dtype != np.uint8:
        pixels = to_bytes(pixels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="RGB").save(path)


def load_float(path: str | Path) -> np.ndarray:
    return read_image(path).as_float()


# ---------------------------------------------------------------------------
# manifests

_CAMERA_RE = re.compile(r"^cam(\d+)[_-]", re.IGNORECASE)


def camera_from_name(name: str) -> int | None:
    m = _CAMERA_RE.match(Path(name).name)
    return int(m.group(1)) if m else None


@dataclass
class ManifestEntry:
    id: str
    lr_path: Path
    hr_path: Path | None
    camera_tag: int | None
    split: str = ""


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def select(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split], self.root)

    def write(self, path: str | Path) -> None:
        """Write as TSV with paths made relative to the new file's directory when possible."""
        path = Path(path)
        base = path.parent.resolve()

        def rel(p: Path | None) -> str:
            if p is None:
                return "-"
            p = Path(p).resolve()
            try:
                return str(p.relative_to(base))
            except ValueError:
                return str(p)

        lines = ["# id\tlr_path\thr_path\tcamera_tag\tsplit"]
        for e in self.entries:
            tag = "-" if e.camera_tag is None else str(e.camera_tag)
            lines.append("\t".join([e.id, rel(e.lr_path), rel(e.hr_path), tag, e.split or "-"]))
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")


_MISSING = {"", "-"}


def load_manifest(path: str | Path, require_hr: bool = False, check_files: bool = True) -> DatasetManifest:
    """Parse a tab-separated manifest.

    Columns: ``id lr_path hr_path camera_tag split``; trailing columns may be
    omitted and ``-`` marks an absent value. Paths are relative to the
    manifest's directory. A missing camera tag is inferred from a ``camN_``
    prefix of the id or the LR file name.
    """
    path = Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = [c.strip() for c in raw.rstrip("\n").split("\t")]
        if len(cols) < 2 or len(cols) > 5 or cols[0] in _MISSING or cols[1] in _MISSING:
            raise ManifestError(f"{path}:{lineno}: cannot parse line {raw!r}")
        cols += [""] * (5 - len(cols))
        id_, lr, hr, tag, split = cols
        if id_ in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {id_!r}")
        seen.add(id_)
        if tag in _MISSING:
            camera = camera_from_name(id_)
            if camera is None:
                camera = camera_from_name(lr)
        else:
            m = re.fullmatch(r"(?:cam)?(\d+)", tag, re.IGNORECASE)
            if not m:
                raise ManifestError(f"{path}:{lineno}: bad camera tag {tag!r}")
            camera = int(m.group(1))
        hr_path = None if hr in _MISSING else root / hr
        if require_hr and hr_path is None:
            raise ManifestError(f"{path}:{lineno}: entry {id_!r} has no HR path")
        entry = ManifestEntry(id_, root / lr, hr_path, camera, "" if split in _MISSING else split)
        if check_files:
            for p in (entry.lr_path, entry.hr_path):
                if p is not None and not p.is_file():
                    raise ManifestError(f"{path}:{lineno}: entry {id_!r}: missing file {p}")
        entries.append(entry)
    return DatasetManifest(entries, root)

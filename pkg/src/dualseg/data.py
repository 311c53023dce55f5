"""Paired-tile data pipeline.

Tiles carry an optical raster, a single-band elevation raster and a dense
label map. The elevation band is min-max normalized per tile; the optical
raster is scaled to [0, 1] and optionally standardized with ImageNet
statistics depending on the trunk family. A small synthetic generator
produces tiles whose labels depend on a chosen modality mix, which makes
modality-missing degradation measurable by construction.

On-disk formats are deliberately simple and lossless: P6/P5 netpbm for
8-bit rasters, and a tiny binary container (magic ``RSTR``, dtype code,
channel/height/width header, little-endian payload) for float rasters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_RASTER_MAGIC = b"RSTR"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("<u1")}
_DTYPE_FOR = {np.dtype("float32"): 0, np.dtype("uint16"): 1, np.dtype("uint8"): 2}

_CLASS_COLORS = np.array(
    [
        (0.90, 0.15, 0.15),
        (0.15, 0.85, 0.20),
        (0.15, 0.25, 0.90),
        (0.85, 0.80, 0.15),
        (0.80, 0.20, 0.85),
        (0.20, 0.85, 0.85),
        (0.60, 0.60, 0.60),
        (0.95, 0.55, 0.15),
    ],
    dtype=np.float32,
)


@dataclass
class TilePair:
    """One co-registered sample: optical raster, elevation raster, labels."""

    rgb: np.ndarray  # [C, H, W] float32
    dsm: np.ndarray  # [1, H, W] float32
    labels: np.ndarray  # [H, W] int64
    tile_id: str

    def __post_init__(self) -> None:
        if self.rgb.shape[-2:] != self.dsm.shape[-2:] or self.rgb.shape[-2:] != self.labels.shape[-2:]:
            raise ValueError(
                f"tile {self.tile_id}: raster shapes disagree "
                f"(rgb {self.rgb.shape}, dsm {self.dsm.shape}, labels {self.labels.shape})"
            )

    @property
    def size(self) -> tuple[int, int]:
        return self.labels.shape[-2], self.labels.shape[-1]


@dataclass
class SamplePatch:
    rgb: np.ndarray
    aux: np.ndarray
    labels: np.ndarray
    top: int
    left: int
    flip_h: bool
    flip_v: bool


@dataclass
class SyntheticSpec:
    tiles: int
    tile_size: int = 64
    classes: int = 6
    mode: str = "joint"  # rgb_only | aux_only | joint
    region_cells: int = 4
    rgb_noise: float = 0.3
    dsm_noise: float = 0.01

    def __post_init__(self) -> None:
        if self.mode not in ("rgb_only", "aux_only", "joint"):
            raise ValueError(f"unknown synthetic mode {self.mode!r}")
        if self.classes > len(_CLASS_COLORS):
            raise ValueError(f"synthetic generator supports up to {len(_CLASS_COLORS)} classes")
        if self.tile_size % self.region_cells != 0:
            raise ValueError("tile_size must be a multiple of region_cells")


# -- normalization -----------------------------------------------------------


def normalize_dsm(dsm: np.ndarray) -> np.ndarray:
    """Per-tile min-max to [0, 1]; a constant tile maps to all zeros."""
    dsm = dsm.astype(np.float32)
    lo = float(dsm.min())
    hi = float(dsm.max())
    if hi == lo:
        return np.zeros_like(dsm)
    return (dsm - lo) / (hi - lo)


def normalize_rgb(rgb: np.ndarray, family: str) -> np.ndarray:
    """Scale to [0, 1]; ImageNet-standardize 3-channel input for dinov2-like trunks."""
    out = rgb.astype(np.float32)
    if np.issubdtype(rgb.dtype, np.integer) or out.max() > 1.0:
        out = out / 255.0
    if family == "dinov2-like" and out.shape[0] == 3:
        out = (out - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]
    return out


def denormalize_rgb(rgb: np.ndarray, family: str) -> np.ndarray:
    """Inverse of the standardization step of :func:`normalize_rgb` (back to [0, 1])."""
    if family == "dinov2-like" and rgb.shape[0] == 3:
        return rgb * IMAGENET_STD[:, None, None] + IMAGENET_MEAN[:, None, None]
    return rgb.astype(np.float32)


def normalize_pair(pair: TilePair, family: str) -> TilePair:
    return TilePair(
        rgb=normalize_rgb(pair.rgb, family),
        dsm=normalize_dsm(pair.dsm),
        labels=pair.labels,
        tile_id=pair.tile_id,
    )


# -- augmentation ------------------------------------------------------------


def random_crop_flip(pair: TilePair, crop: int, rng: np.random.Generator) -> SamplePatch:
    """Same window and the same flips for all three rasters."""
    h, w = pair.size
    if crop > min(h, w):
        raise ValueError(f"crop {crop} larger than tile {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)

    def cut(raster: np.ndarray) -> np.ndarray:
        window = raster[..., top : top + crop, left : left + crop]
        if flip_h:
            window = window[..., ::-1]
        if flip_v:
            window = window[..., ::-1, :]
        return np.ascontiguousarray(window)

    return SamplePatch(cut(pair.rgb), cut(pair.dsm), cut(pair.labels), top, left, flip_h, flip_v)


# -- synthetic tiles ---------------------------------------------------------


def _blocky_field(rng: np.random.Generator, cells: int, size: int, values: int) -> np.ndarray:
    """Piecewise-constant integer field from an upsampled random cell grid."""
    grid = rng.integers(0, values, size=(cells, cells))
    return np.repeat(np.repeat(grid, size // cells, axis=0), size // cells, axis=1)


def synth_dataset(spec: SyntheticSpec, seed: int) -> list[TilePair]:
    """Deterministic synthetic tiles for the requested modality dependence.

    joint: class id is painted into both rasters (a noisy color and a
    clean height band), rgb_only/aux_only: the other raster is noise that
    is independent of the labels.
    """
    rng = np.random.default_rng(seed)
    tiles = []
    k = spec.classes
    for idx in range(spec.tiles):
        labels = _blocky_field(rng, spec.region_cells, spec.tile_size, k)
        if spec.mode in ("joint", "rgb_only"):
            rgb = _CLASS_COLORS[labels].transpose(2, 0, 1).copy()
            rgb += rng.normal(0.0, spec.rgb_noise, size=rgb.shape)
            rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
        else:  # labels carry no optical signal
            rgb = rng.uniform(0.0, 1.0, size=(3, spec.tile_size, spec.tile_size)).astype(np.float32)
        if spec.mode in ("joint", "aux_only"):
            height = (labels.astype(np.float32) + 0.5) / k
            dsm = height[None] + rng.normal(0.0, spec.dsm_noise, size=(1,) + labels.shape)
            dsm = dsm.astype(np.float32)
        else:  # random relief, independent of the labels
            dsm = rng.uniform(0.0, 1.0, size=(1, spec.tile_size, spec.tile_size))
            dsm = dsm.astype(np.float32)
        tiles.append(TilePair(rgb, dsm, labels.astype(np.int64), f"synth{idx:04d}"))
    return tiles


# -- raster files ------------------------------------------------------------


def write_netpbm(path: Path, arr: np.ndarray) -> None:
    """P6 for [3, H, W] uint8, P5 for [H, W] uint8/uint16."""
    if arr.ndim == 3 and arr.shape[0] == 3:
        if arr.dtype != np.uint8:
            raise ValueError("P6 rasters must be uint8")
        h, w = arr.shape[1:]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode())
            f.write(arr.transpose(1, 2, 0).tobytes())
    elif arr.ndim == 2:
        maxval = 255 if arr.dtype == np.uint8 else 65535
        h, w = arr.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
            payload = arr if arr.dtype == np.uint8 else arr.astype(">u2")
            f.write(payload.tobytes())
    else:
        raise ValueError(f"cannot write shape {arr.shape} as netpbm")


def read_netpbm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic == b"P6":
        arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
        return arr.reshape(h, w, 3).transpose(2, 0, 1).copy()
    if magic == b"P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
        return arr.reshape(h, w).astype(np.uint16 if maxval >= 256 else np.uint8)
    raise ValueError(f"unsupported netpbm magic {magic!r} in {path}")


def write_raster_bin(path: Path, arr: np.ndarray) -> None:
    """Binary container: RSTR magic, dtype code, C/H/W, little-endian payload."""
    arr3 = arr if arr.ndim == 3 else arr[None]
    dtype = np.dtype(arr3.dtype)
    if dtype not in _DTYPE_FOR:
        raise ValueError(f"unsupported raster dtype {dtype}")
    code = _DTYPE_FOR[dtype]
    c, h, w = arr3.shape
    with open(path, "wb") as f:
        f.write(_RASTER_MAGIC)
        f.write(struct.pack("<BIII", code, c, h, w))
        f.write(arr3.astype(_DTYPE_CODES[code]).tobytes())


def read_raster_bin(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _RASTER_MAGIC:
        raise ValueError(f"{path} is not a raster container")
    code, c, h, w = struct.unpack("<BIII", data[4:17])
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    arr = np.frombuffer(data, dtype=_DTYPE_CODES[code], count=c * h * w, offset=17)
    return arr.reshape(c, h, w).copy()


def _read_raster(path: Path) -> np.ndarray:
    if path.suffix in (".ppm", ".pgm"):
        return read_netpbm(path)
    return read_raster_bin(path)


def read_classes(path: Path) -> list[tuple[int, str, tuple[int, int, int]]]:
    """classes.txt rows: ``<id> <name> <r>,<g>,<b>``."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cid, name, palette = line.split()
        r, g, b = (int(v) for v in palette.split(","))
        rows.append((int(cid), name, (r, g, b)))
    return rows


def decode_palette_labels(color_labels: np.ndarray, palette: dict[tuple[int, int, int], int]) -> np.ndarray:
    """Map color-coded labels [3, H, W] to class ids; unknown colors are errors."""
    h, w = color_labels.shape[1:]
    flat = color_labels.transpose(1, 2, 0).reshape(-1, 3)
    out = np.full(h * w, -1, dtype=np.int64)
    for color, cid in palette.items():
        out[np.all(flat == np.array(color, dtype=flat.dtype), axis=1)] = cid
    if (out < 0).any():
        bad = int(np.argmax(out < 0))
        raise ValueError(
            f"label color {tuple(int(v) for v in flat[bad])} at pixel {bad} not in the palette"
        )
    return out.reshape(h, w)


def write_dataset(root: Path, split: str, tiles: list[TilePair], classes: list[tuple[int, str, tuple[int, int, int]]]) -> None:
    directory = Path(root) / split
    directory.mkdir(parents=True, exist_ok=True)
    for pair in tiles:
        if pair.rgb.dtype == np.uint8 and pair.rgb.shape[0] == 3:
            write_netpbm(directory / f"{pair.tile_id}.rgb.ppm", pair.rgb)
        else:
            write_raster_bin(directory / f"{pair.tile_id}.rgb.bin", pair.rgb.astype(np.float32))
        write_raster_bin(directory / f"{pair.tile_id}.dsm.bin", pair.dsm.astype(np.float32))
        write_netpbm(directory / f"{pair.tile_id}.labels.pgm", pair.labels.astype(np.uint8))
    classes_file = Path(root) / "classes.txt"
    if not classes_file.exists():
        lines = [f"{cid} {name} {r},{g},{b}" for cid, name, (r, g, b) in classes]
        classes_file.write_text("\n".join(lines) + "\n")


def load_dataset(root: Path, split: str) -> list[TilePair]:
    """Read ``<root>/<split>/<tile_id>.{rgb,dsm,labels}.<ext>`` tile groups."""
    directory = Path(root) / split
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset split directory not found: {directory}")
    classes_path = Path(root) / "classes.txt"
    palette = None
    if classes_path.exists():
        palette = {color: cid for cid, _, color in read_classes(classes_path)}
    tiles = []
    rgb_files = sorted(p for p in directory.iterdir() if ".rgb." in p.name)
    if not rgb_files:
        raise FileNotFoundError(f"no tiles found under {directory}")
    for rgb_path in rgb_files:
        tile_id = rgb_path.name.split(".rgb.")[0]
        dsm_path = _find_raster(directory, tile_id, "dsm")
        labels_path = _find_raster(directory, tile_id, "labels")
        rgb = _read_raster(rgb_path).astype(np.float32)
        dsm = _read_raster(dsm_path).astype(np.float32)
        if dsm.ndim == 2:
            dsm = dsm[None]
        labels_raw = _read_raster(labels_path)
        if labels_raw.ndim == 3 and labels_raw.shape[0] == 3:
            if palette is None:
                raise ValueError(f"color-coded labels for {tile_id} need classes.txt")
            labels = decode_palette_labels(labels_raw.astype(np.int64), palette)
        else:
            labels = np.asarray(labels_raw, dtype=np.int64).reshape(labels_raw.shape[-2:])
        tiles.append(TilePair(rgb, dsm, labels, tile_id))
    return tiles


def _find_raster(directory: Path, tile_id: str, kind: str) -> Path:
    for ext in ("bin", "ppm", "pgm"):
        candidate = directory / f"{tile_id}.{kind}.{ext}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing {kind} raster for tile {tile_id} in {directory}")


# -- sliding-window inference ------------------------------------------------


def _window_starts(extent: int, crop: int, stride: int) -> list[int]:
    if extent <= crop:
        return [0]
    starts = list(range(0, extent - crop + 1, stride))
    if starts[-1] != extent - crop:
        starts.append(extent - crop)  # shift the last window inward
    return starts


@torch.no_grad()
def sliding_window_inference(
    model,
    rgb: torch.Tensor,
    aux: torch.Tensor,
    crop: int,
    stride: int,
    batch_windows: int = 8,
) -> torch.Tensor:
    """Average overlapping-window logits over a full (normalized) tile.

    ``rgb``/``aux`` are [C, H, W]; returns [num_classes, H, W]. Tiles
    smaller than the crop are zero-padded for the forward pass and the
    padding is sliced away again, so it never reaches the caller.
    """
    if stride > crop:
        raise ValueError(f"stride {stride} must not exceed crop {crop}")
    h, w = rgb.shape[-2:]
    pad_h = max(0, crop - h)
    pad_w = max(0, crop - w)
    if pad_h or pad_w:
        rgb = torch.nn.functional.pad(rgb, (0, pad_w, 0, pad_h))
        aux = torch.nn.functional.pad(aux, (0, pad_w, 0, pad_h))
    ph, pw = rgb.shape[-2:]
    windows = [
        (top, left)
        for top in _window_starts(ph, crop, stride)
        for left in _window_starts(pw, crop, stride)
    ]
    logits_sum: torch.Tensor | None = None
    counts = torch.zeros(1, ph, pw)
    for i in range(0, len(windows), batch_windows):
        chunk = windows[i : i + batch_windows]
        rgb_batch = torch.stack([rgb[:, t : t + crop, l : l + crop] for t, l in chunk])
        aux_batch = torch.stack([aux[:, t : t + crop, l : l + crop] for t, l in chunk])
        out = model(rgb_batch, aux_batch)
        if logits_sum is None:
            logits_sum = torch.zeros(out.shape[1], ph, pw, dtype=out.dtype)
        for (t, l), win_logits in zip(chunk, out):
            logits_sum[:, t : t + crop, l : l + crop] += win_logits
            counts[:, t : t + crop, l : l + crop] += 1.0
    assert logits_sum is not None
    if (counts < 1).any():
        raise RuntimeError("sliding-window coverage hole")  # unreachable by construction
    return (logits_sum / counts)[:, :h, :w]

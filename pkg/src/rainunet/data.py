"""Sequence records, the RUNT tensor file format, preprocessing stages
(modality selection, cleansing, center crop) and a synthetic rain-movie
generator used for desk-scale experiments.

A record pairs a 4-frame multi-channel satellite movie with a 32-frame
binary rain mask on a 15-minute grid. Records hold plain numpy arrays;
the autodiff Tensor type is reserved for differentiable compute.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


class FormatError(ValueError):
    """Malformed RUNT file, manifest, or checkpoint."""


# ---------------------------------------------------------------------------
# RUNT tensor files: magic, u8 version, u8 dtype code, u8 ndim,
# ndim little-endian u32 extents, then the row-major payload.

_MAGIC = b"RUNT"
_VERSION = 1
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def runt_encode(arr) -> bytes:
    arr = np.ascontiguousarray(getattr(arr, "data", arr))
    if arr.dtype not in _DTYPE_TO_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype}; use f32, f64 or u8")
    if arr.ndim < 1:
        raise FormatError("0-d tensors cannot be stored")
    if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise FormatError("refusing to store non-finite values")
    code = _DTYPE_TO_CODE[arr.dtype]
    head = _MAGIC + bytes([_VERSION, code, arr.ndim])
    head += b"".join(struct.pack("<I", s) for s in arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def runt_decode(blob: bytes) -> np.ndarray:
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}")
    if len(blob) < 7:
        raise FormatError("truncated header")
    version, code, ndim = blob[4], blob[5], blob[6]
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    off = 7
    if len(blob) < off + 4 * ndim:
        raise FormatError("truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    dtype = _CODE_TO_DTYPE[code]
    expected = off + int(np.prod(shape)) * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"payload length {len(blob)} != expected {expected}")
    return np.frombuffer(blob[off:], dtype=dtype).reshape(shape).copy()


def tensor_file_write(t, path) -> None:
    Path(path).write_bytes(runt_encode(t))


def tensor_file_read(path) -> np.ndarray:
    return runt_decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# channels

IR_CHANNELS = ("IR_016", "IR_039", "IR_087", "IR_097", "IR_108", "IR_120", "IR_134")
VIS_CHANNELS = ("VIS_006", "VIS_008")
WV_CHANNELS = ("WV_062", "WV_073")
CANONICAL_CHANNELS = IR_CHANNELS + VIS_CHANNELS + WV_CHANNELS

_MODALITY = {name: "IR" for name in IR_CHANNELS}
_MODALITY.update({name: "VIS" for name in VIS_CHANNELS})
_MODALITY.update({name: "WV" for name in WV_CHANNELS})


@dataclass(frozen=True)
class ChannelSet:
    names: tuple[str, ...]

    def __post_init__(self):
        for n in self.names:
            if n not in _MODALITY:
                raise FormatError(f"unknown channel {n!r}")
        if len(set(self.names)) != len(self.names):
            raise FormatError("duplicate channel names")

    def modalities(self) -> tuple[str, ...]:
        return tuple(_MODALITY[n] for n in self.names)

    def indices(self) -> list[int]:
        return [CANONICAL_CHANNELS.index(n) for n in self.names]

    def __len__(self):
        return len(self.names)


CHANNEL_SETS = {
    "ir": ChannelSet(IR_CHANNELS),
    "ir+vis": ChannelSet(IR_CHANNELS + VIS_CHANNELS),
    "ir+wv": ChannelSet(IR_CHANNELS + WV_CHANNELS),
    "ir+vis+wv": ChannelSet(CANONICAL_CHANNELS),
}
DEFAULT_CHANNEL_SET = CHANNEL_SETS["ir+vis"]


# ---------------------------------------------------------------------------
# records

IN_FRAMES = 4
OUT_FRAMES = 32


@dataclass
class SequenceRecord:
    input: np.ndarray   # (C, 4, H, W) float32, values in [0, 1]
    target: np.ndarray  # (32, H, W) uint8, binary rain mask
    region: str
    start_time: int     # seconds, multiple of 900 (15-minute grid)

    def __post_init__(self):
        if self.input.ndim != 4 or self.input.shape[1] != IN_FRAMES:
            raise FormatError(f"input must be (C,{IN_FRAMES},H,W), got {self.input.shape}")
        if self.target.ndim != 3 or self.target.shape[0] != OUT_FRAMES:
            raise FormatError(f"target must be ({OUT_FRAMES},H,W), got {self.target.shape}")
        if self.target.dtype != np.uint8 or self.target.max(initial=0) > 1:
            raise FormatError("target must be a binary uint8 mask")
        if self.start_time % 900 != 0:
            raise FormatError("start_time must sit on the 15-minute grid")

    @property
    def positive_count(self) -> int:
        return int(self.target.sum())


def select_modalities(rec: SequenceRecord, channels: ChannelSet) -> np.ndarray:
    """Extract the requested channels, in set order. Only valid on records
    that still carry the full canonical channel stack."""
    if rec.input.shape[0] != len(CANONICAL_CHANNELS):
        raise FormatError(
            f"record has {rec.input.shape[0]} channels, expected the canonical "
            f"{len(CANONICAL_CHANNELS)} before modality selection"
        )
    return rec.input[channels.indices()].copy()


def cleansing_filter(records, threshold: int = 100):
    """Drop records whose 32-frame positive-pixel total is below the
    threshold (non-rainy sequences). Returns (kept, removed_count)."""
    kept = [r for r in records if r.positive_count >= threshold]
    return kept, len(records) - len(kept)


def center_crop_window(side: int, factor: int) -> tuple[int, int]:
    """Bounds [lo, hi) of the central crop window. The target region is a
    sixth of the frame per axis; the window is ``factor`` target regions wide."""
    if not 1 <= factor <= 6:
        raise FormatError(f"crop factor must be in [1, 6], got {factor}")
    if side % 6 != 0:
        raise FormatError(f"frame side {side} not divisible by 6")
    window = (side // 6) * factor
    lo = (side - window) // 2
    return lo, lo + window


def bilinear_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes with bilinear interpolation, sampling
    source coordinates at (i + 0.5) * scale - 0.5, clamped to the frame."""

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, rw = axis(frames.shape[-2], out_h)
    c0, c1, cw = axis(frames.shape[-1], out_w)
    rows = frames[..., r0, :] * (1.0 - rw)[:, None] + frames[..., r1, :] * rw[:, None]
    out = rows[..., c0] * (1.0 - cw) + rows[..., c1] * cw
    return out.astype(frames.dtype)


def center_crop_resize(frames: np.ndarray, factor: int) -> np.ndarray:
    """Crop the central window (``factor`` target-region widths) and resize
    back to the full frame. Factor 6 is the whole frame and a bitwise
    identity. Applies to input movies only; targets are already at target
    region scale."""
    side = frames.shape[-1]
    if frames.shape[-2] != side:
        raise FormatError(f"expected square frames, got {frames.shape[-2:]}")
    lo, hi = center_crop_window(side, factor)
    if factor == 6:
        return frames.copy()
    return bilinear_resize(frames[..., lo:hi, lo:hi], side, side)


# ---------------------------------------------------------------------------
# synthetic rain movies

TOTAL_FRAMES = IN_FRAMES + OUT_FRAMES

# per-channel rendering of the rain field into fake radiances:
# (gain, offset, blur sigma); IR channels mid blur, VIS sharp, WV heavy blur
_CHANNEL_RENDER = {
    "IR_016": (1.00, 0.05, 1.2), "IR_039": (0.90, 0.10, 1.4),
    "IR_087": (1.10, 0.00, 1.0), "IR_097": (0.80, 0.15, 1.6),
    "IR_108": (1.20, 0.05, 1.1), "IR_120": (0.95, 0.20, 1.3),
    "IR_134": (0.85, 0.10, 1.5),
    "VIS_006": (1.30, 0.00, 0.6), "VIS_008": (1.25, 0.05, 0.7),
    "WV_062": (0.70, 0.25, 2.4), "WV_073": (0.75, 0.20, 2.6),
}


@dataclass
class SynthConfig:
    sequences: int = 16
    size: int = 66
    blob_count: tuple[int, int] = (1, 4)
    velocity: tuple[float, float] = (0.0, 1.5)   # pixels per frame
    radius: tuple[float, float] = (3.0, 7.0)
    rain_threshold: float = 0.4
    seed: int = 0

    def validate(self) -> None:
        if self.sequences < 1:
            raise FormatError("need at least one sequence")
        if self.size < 8:
            raise FormatError("spatial size too small")
        lo, hi = self.blob_count
        if lo < 0 or hi < lo:
            raise FormatError(f"degenerate blob count range {self.blob_count}")
        lo, hi = self.velocity
        if lo < 0 or hi < lo:
            raise FormatError(f"degenerate velocity range {self.velocity}")
        lo, hi = self.radius
        if lo <= 0 or hi < lo:
            raise FormatError(f"degenerate radius range {self.radius}")
        if self.rain_threshold <= 0:
            raise FormatError("rain threshold must be positive")


def _rain_field(size, blobs, frame):
    """Sum of advected Gaussian blobs at one time step."""
    field = np.zeros((size, size), dtype=np.float64)
    if not blobs:
        return field
    yy, xx = np.mgrid[0:size, 0:size]
    for cy, cx, vy, vx, radius in blobs:
        py = cy + vy * frame
        px = cx + vx * frame
        field += np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2.0 * radius**2))
    return field


def synth_generate(cfg: SynthConfig) -> list[SequenceRecord]:
    """Deterministic per seed. Gaussian rain blobs drift with a constant
    per-sequence velocity across all 36 frames: the first 4 render the 11
    satellite channels (per-channel gain/offset/blur of the rain field,
    normalized to [0,1]), the last 32 threshold the field into the mask, so
    rain seen in the inputs continues along its track into the targets."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    records = []
    for i in range(cfg.sequences):
        n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
        blobs = []
        for _ in range(n_blobs):
            cy, cx = rng.uniform(0, cfg.size, size=2)
            speed = rng.uniform(cfg.velocity[0], cfg.velocity[1])
            angle = rng.uniform(0, 2 * np.pi)
            radius = rng.uniform(cfg.radius[0], cfg.radius[1])
            blobs.append((cy, cx, speed * np.sin(angle), speed * np.cos(angle), radius))

        fields = [_rain_field(cfg.size, blobs, f) for f in range(TOTAL_FRAMES)]
        inputs = np.zeros((len(CANONICAL_CHANNELS), IN_FRAMES, cfg.size, cfg.size), dtype=np.float32)
        for c, name in enumerate(CANONICAL_CHANNELS):
            gain, offset, sigma = _CHANNEL_RENDER[name]
            raw = np.stack([gaussian_filter(fields[f], sigma) * gain + offset
                            for f in range(IN_FRAMES)])
            span = raw.max() - raw.min()
            inputs[c] = 0.0 if span == 0 else (raw - raw.min()) / span
        target = np.stack([fields[IN_FRAMES + f] >= cfg.rain_threshold
                           for f in range(OUT_FRAMES)]).astype(np.uint8)
        records.append(SequenceRecord(
            input=inputs,
            target=target,
            region=f"R{i % 3}",
            start_time=900 * 36 * i,
        ))
    return records


# ---------------------------------------------------------------------------
# dataset directories: one input/target RUNT pair per record plus a
# line-oriented manifest (version header, then tab-separated
# key / positive count / region / start time)

MANIFEST_NAME = "manifest.txt"
_MANIFEST_HEADER = "RUNM\tv1"


@dataclass(frozen=True)
class ManifestEntry:
    key: str
    positive_count: int
    region: str
    start_time: int


def save_dataset(records, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        key = f"seq{i:05d}"
        tensor_file_write(rec.input.astype(np.float32), out / f"{key}_input.runt")
        tensor_file_write(rec.target, out / f"{key}_target.runt")
        entries.append(ManifestEntry(key, rec.positive_count, rec.region, rec.start_time))
    write_manifest(out / MANIFEST_NAME, entries)
    return out / MANIFEST_NAME


def write_manifest(path, entries) -> None:
    lines = [_MANIFEST_HEADER]
    lines += [f"{e.key}\t{e.positive_count}\t{e.region}\t{e.start_time}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise FormatError(f"bad manifest header in {path}")
    entries = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"bad manifest line: {line!r}")
        entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2], int(parts[3])))
    return entries


def load_dataset(manifest_path) -> list[SequenceRecord]:
    base = Path(manifest_path).parent
    records = []
    for e in read_manifest(manifest_path):
        rec = SequenceRecord(
            input=tensor_file_read(base / f"{e.key}_input.runt"),
            target=tensor_file_read(base / f"{e.key}_target.runt"),
            region=e.region,
            start_time=e.start_time,
        )
        if rec.positive_count != e.positive_count:
            raise FormatError(
                f"{e.key}: manifest positive count {e.positive_count} != "
                f"recomputed {rec.positive_count}"
            )
        records.append(rec)
    return records

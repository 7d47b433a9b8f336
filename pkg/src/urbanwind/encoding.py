"""RGB encoding of velocity sequences, speed colormaps and the ``.wnd`` format.

``.wnd`` layout (little-endian)::

    b"WND1"
    u32 H, u32 W, u32 T
    f32 u_in, f32 L, f32 u_max, f32 dt
    occupancy bitfield, row-major, MSB first, padded to a whole byte
    T frames, each an f32 u-plane followed by an f32 v-plane (row-major)
"""
from __future__ import annotations

import io
import itertools
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import FlowSequence, GridSpec, SimConfig, VelocityField, conditioning_frame

MAGIC = b"WND1"
HEADER = struct.Struct("<4s3I4f")


class WndFormatError(ValueError):
    """Malformed ``.wnd`` input; ``offset`` is the byte where parsing failed."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ChannelMap:
    """Assignment of quantities u, v, b (fluid mask) to RGB channel indices."""

    u: int = 0
    v: int = 1
    b: int = 2

    def __post_init__(self):
        if sorted((self.u, self.v, self.b)) != [0, 1, 2]:
            raise ValueError("channel map must be a permutation of (0, 1, 2)")

    @classmethod
    def from_string(cls, s: str) -> "ChannelMap":
        """Parse e.g. ``"uvb"`` (R=u, G=v, B=b) or ``"bvu"``."""
        s = s.lower()
        if sorted(s) != ["b", "u", "v"]:
            raise ValueError(f"invalid channel order {s!r}")
        return cls(u=s.index("u"), v=s.index("v"), b=s.index("b"))

    def __str__(self) -> str:
        out = [""] * 3
        out[self.u], out[self.v], out[self.b] = "u", "v", "b"
        return "".join(out)


ALL_CHANNEL_MAPS = tuple(ChannelMap.from_string("".join(p)) for p in itertools.permutations("uvb"))


def _encode_frame(u, v, fluid, u_max, cmap: ChannelMap) -> np.ndarray:
    rgb = np.empty(u.shape + (3,))
    rgb[..., cmap.u] = u / u_max
    rgb[..., cmap.v] = v / u_max
    rgb[..., cmap.b] = fluid
    return rgb


def encode(seq: FlowSequence, cmap: ChannelMap = ChannelMap()) -> list[np.ndarray]:
    """T+1 encoded frames; frame 0 is the conditioning frame."""
    cfg = seq.config
    if cfg.u_max <= 0:
        raise ValueError("u_max must be positive")
    occ = seq.occupancy if seq.occupancy is not None else np.zeros(cfg.grid.shape, np.uint8)
    fluid = 1.0 - occ.astype(float)
    cond = conditioning_frame(occ, cfg)
    out = [_encode_frame(cond.u, cond.v, fluid, cfg.u_max, cmap)]
    peak = 0.0
    for f in seq.frames:
        peak = max(peak, float(np.abs(f.u).max()), float(np.abs(f.v).max()))
        out.append(_encode_frame(f.u, f.v, fluid, cfg.u_max, cmap))
    if peak > cfg.u_max:
        warnings.warn(f"velocity component {peak:.3g} m/s exceeds u_max={cfg.u_max}; clamping")
        for rgb in out:
            for ch in (cmap.u, cmap.v):
                np.clip(rgb[..., ch], -1.0, 1.0, out=rgb[..., ch])
    return out


def decode(frames: list[np.ndarray], cmap: ChannelMap, u_max: float,
           grid: GridSpec | None = None, dt: float = 1.0) -> FlowSequence:
    """Inverse of :func:`encode`; u_in is read back from the conditioning frame."""
    if u_max <= 0:
        raise ValueError("u_max must be positive")
    cond, rest = frames[0], frames[1:]
    occ = (cond[..., cmap.b] <= 0.5).astype(np.uint8)
    fluid = occ == 0
    u_in = float(cond[..., cmap.u][fluid].mean() * u_max) if fluid.any() else 0.0
    H, W = cond.shape[:2]
    grid = grid or GridSpec(H, W, float(W))
    cfg = SimConfig(u_in=min(max(u_in, 0.0), u_max), grid=grid, T=len(rest), dt=dt, u_max=u_max)
    vf = [VelocityField(f[..., cmap.u] * u_max, f[..., cmap.v] * u_max) for f in rest]
    return FlowSequence(vf, conditioning_frame(occ, cfg), cfg, occ)


def quantize8(rgb: np.ndarray, cmap: ChannelMap = ChannelMap()) -> np.ndarray:
    """Map an encoded frame to uint8 (velocity [-1, 1] -> [0, 255], mask {0,1} -> {0,255})."""
    out = np.empty(rgb.shape, dtype=np.uint8)
    for ch in (cmap.u, cmap.v):
        out[..., ch] = np.round((np.clip(rgb[..., ch], -1, 1) + 1.0) * 127.5).astype(np.uint8)
    out[..., cmap.b] = np.where(rgb[..., cmap.b] > 0.5, 255, 0).astype(np.uint8)
    return out


def dequantize8(img: np.ndarray, cmap: ChannelMap = ChannelMap()) -> np.ndarray:
    rgb = np.empty(img.shape, dtype=float)
    for ch in (cmap.u, cmap.v):
        rgb[..., ch] = img[..., ch] / 127.5 - 1.0
    rgb[..., cmap.b] = (img[..., cmap.b] > 127).astype(float)
    return rgb


# ---------------------------------------------------------------------------
# cool-warm colormap

# control points of a diverging blue -> light grey -> red table
_COOLWARM_POINTS = np.array([
    [0.00, 59, 76, 192],
    [0.125, 98, 130, 234],
    [0.25, 141, 176, 254],
    [0.375, 184, 208, 249],
    [0.50, 221, 221, 221],
    [0.625, 245, 196, 173],
    [0.75, 244, 154, 123],
    [0.875, 222, 96, 77],
    [1.00, 180, 4, 38],
])


def coolwarm_lut(n: int = 256) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    lut = np.stack([np.interp(t, _COOLWARM_POINTS[:, 0], _COOLWARM_POINTS[:, k])
                    for k in (1, 2, 3)], axis=-1)
    return np.round(lut).astype(np.uint8)


COOLWARM = coolwarm_lut()


def render_speed_colormap(field: VelocityField, occupancy, u_max: float) -> np.ndarray:
    """Speed magnitude / u_max through the 256-entry LUT; buildings black."""
    speed = np.hypot(field.u, field.v) / u_max
    idx = np.clip(np.round(speed * 255.0), 0, 255).astype(np.int64)
    img = COOLWARM[idx].copy()
    occ = np.asarray(occupancy).astype(bool)
    img[occ] = 0
    return img


def write_png(path, img: np.ndarray, flip: bool = True) -> None:
    """Write an H x W x 3 uint8 image; row 0 goes to the bottom when ``flip``."""
    from PIL import Image

    arr = np.ascontiguousarray(img[::-1] if flip else img)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


# ---------------------------------------------------------------------------
# .wnd binary format


def wnd_size(H: int, W: int, T: int) -> int:
    return HEADER.size + (H * W + 7) // 8 + T * 2 * H * W * 4


def to_wnd_bytes(seq: FlowSequence) -> bytes:
    cfg = seq.config
    H, W = cfg.grid.shape
    occ = seq.occupancy if seq.occupancy is not None else np.zeros((H, W), np.uint8)
    buf = io.BytesIO()
    buf.write(HEADER.pack(MAGIC, H, W, seq.T, cfg.u_in, cfg.grid.L, cfg.u_max, cfg.dt))
    buf.write(np.packbits(occ.astype(bool).ravel(), bitorder="big").tobytes())
    for f in seq.frames:
        buf.write(np.asarray(f.u, dtype="<f4").tobytes())
        buf.write(np.asarray(f.v, dtype="<f4").tobytes())
    return buf.getvalue()


def from_wnd_bytes(data: bytes) -> FlowSequence:
    if len(data) < HEADER.size:
        raise WndFormatError("truncated header", len(data))
    magic, H, W, T, u_in, L, u_max, dt = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise WndFormatError(f"bad magic {magic!r}", 0)
    if H == 0 or W == 0:
        raise WndFormatError("zero grid size", 4)
    expected = wnd_size(H, W, T)
    if len(data) != expected:
        raise WndFormatError(f"expected {expected} bytes for {H}x{W}x{T}, got {len(data)}",
                             min(len(data), expected))
    off = HEADER.size
    nbits = (H * W + 7) // 8
    bits = np.frombuffer(data, dtype=np.uint8, count=nbits, offset=off)
    occ = np.unpackbits(bits, bitorder="big")[:H * W].reshape(H, W).astype(np.uint8)
    off += nbits
    planes = np.frombuffer(data, dtype="<f4", count=T * 2 * H * W, offset=off)
    planes = planes.reshape(T, 2, H, W).astype(np.float64)
    try:
        cfg = SimConfig(u_in=float(u_in), grid=GridSpec(H, W, float(L)), T=T, dt=float(dt),
                        u_max=float(u_max))
    except ValueError as exc:
        raise WndFormatError(f"invalid header values: {exc}", 16) from exc
    return FlowSequence.from_arrays(planes[:, 0], planes[:, 1], cfg, occ)


def save_wnd(path, seq: FlowSequence) -> None:
    Path(path).write_bytes(to_wnd_bytes(seq))


def load_wnd(path) -> FlowSequence:
    return from_wnd_bytes(Path(path).read_bytes())

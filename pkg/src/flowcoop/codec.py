"""Feature-flow compression and the bit-exact ``FFLW`` packet format.

Layout (little-endian)::

    header   magic "FFLW" | version u8 | flags u8 | t_ref u64 (us)
             | pose 4 x f32 (x, y, z, yaw) | dims 3 x u16 (C, H, W)
             | bits u8 | stride u8
    mask     ceil(Hm * Wm / 8) bytes, row-major, MSB first     (flag bit1)
    feature  quantized: scale f32 + ceil(n * b / 8) code bytes  (flag bit0)
             raw:       n x f32
    deriv    same encoding; when masked only the elements inside  (flag bit2)
             set mask patches are present, patch by patch in
             row-major order, channel-major within a patch

Codes are b-bit two's complement, packed MSB first and zero-padded to a
byte boundary per tensor. Average-Byte accounting counts everything after
the header.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .featurizer import FeatureGrid, GridConfig
from .flow import FeatureFlow
from .geometry import Pose2

MAGIC = b"FFLW"
VERSION = 1
FLAG_QUANTIZED = 0x01
FLAG_MASKED = 0x02
FLAG_DERIV = 0x04
HEADER = struct.Struct("<4sBBQ4f3HBB")
HEADER_SIZE = HEADER.size  # 38
RAW_BITS = 32


class PacketError(ValueError):
    """Malformed or truncated packet."""


# -- quantization --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    dims: tuple[int, ...]
    bits: int
    scale: np.float32
    codes: np.ndarray  # int32, flattened row-major

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def _check_bits(bits: int) -> None:
    if not 2 <= bits <= 16:
        raise ValueError(f"bits must be in [2, 16], got {bits}")


def quantize(t, bits: int = 6) -> QuantizedTensor:
    """Symmetric linear quantization with alpha = max |t| and round-half-to-even."""
    _check_bits(bits)
    arr = np.asarray(t.data if isinstance(t, FeatureGrid) else t, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    qmax = 2 ** (bits - 1) - 1
    alpha = float(np.max(np.abs(arr))) if arr.size else 0.0
    scale = np.float32(alpha / qmax)
    if scale == 0:
        return QuantizedTensor(arr.shape, bits, np.float32(0.0), np.zeros(arr.size, dtype=np.int32))
    # x * qmax / alpha == x / s(alpha), without rounding s first
    x = np.clip(arr.astype(np.float64), -alpha, alpha) * (qmax / alpha)
    codes = np.clip(np.rint(x), -qmax, qmax).astype(np.int32)
    return QuantizedTensor(arr.shape, bits, scale, codes.ravel())


def dequantize(q: QuantizedTensor) -> np.ndarray:
    if q.codes.size and np.max(np.abs(q.codes)) > q.qmax:
        raise ValueError("code outside the representable range")
    return (q.codes.astype(np.float64) * float(q.scale)).astype(np.float32).reshape(q.dims)


def quantize_dequantize(t, bits: int = 6) -> np.ndarray:
    return dequantize(quantize(t, bits))


# -- bit packing -----------------------------------------------------------------


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    codes = np.asarray(codes, dtype=np.int64).ravel()
    u = codes & ((1 << bits) - 1)
    shifts = np.arange(bits - 1, -1, -1)
    bitarr = ((u[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bitarr).tobytes()


def unpack_codes(buf: bytes, n: int, bits: int) -> np.ndarray:
    nbytes = packed_size(n, bits)
    if len(buf) < nbytes:
        raise PacketError("truncated code block")
    bitarr = np.unpackbits(np.frombuffer(buf[:nbytes], dtype=np.uint8))
    if bitarr[n * bits:].any():
        raise PacketError("nonzero padding bits")
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    u = bitarr[: n * bits].reshape(n, bits).astype(np.int64) @ weights
    return np.where(u >= 1 << (bits - 1), u - (1 << bits), u).astype(np.int32)


def packed_size(n: int, bits: int) -> int:
    return (n * bits + 7) // 8


# -- attention mask --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BitMask:
    bits: np.ndarray  # bool (Hm, Wm)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.bits.shape)

    @property
    def nbytes(self) -> int:
        return packed_size(self.bits.size, 1)

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits.astype(np.uint8).ravel()).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, dims: tuple[int, int]) -> "BitMask":
        n = dims[0] * dims[1]
        nbytes = packed_size(n, 1)
        if len(buf) < nbytes:
            raise PacketError("truncated mask")
        flat = np.unpackbits(np.frombuffer(buf[:nbytes], dtype=np.uint8))
        if flat[n:].any():
            raise PacketError("nonzero padding bits in mask")
        return cls(flat[:n].astype(bool).reshape(dims))


def _stride(H: int, W: int, Hm: int, Wm: int) -> int:
    if Hm <= 0 or Wm <= 0 or H % Hm or W % Wm or H // Hm != W // Wm:
        raise ValueError(f"grid ({H}, {W}) is not an integer multiple of mask ({Hm}, {Wm})")
    return H // Hm


def attention_mask(f_prev: FeatureGrid, f_curr: FeatureGrid, mask_dims: tuple[int, int], threshold: float = 0.0) -> BitMask:
    """Mark patches whose summed absolute feature change exceeds ``threshold``."""
    if f_prev.dims != f_curr.dims:
        raise ValueError("dimension mismatch")
    _, H, W = f_curr.dims
    Hm, Wm = mask_dims
    s = _stride(H, W, Hm, Wm)
    diff = np.abs(f_prev.data.astype(np.float64) - f_curr.data.astype(np.float64)).sum(axis=0)
    patch = diff.reshape(Hm, s, Wm, s).sum(axis=(1, 3))
    return BitMask(patch > threshold)


def _expand(mask: BitMask, H: int, W: int) -> np.ndarray:
    s = _stride(H, W, *mask.dims)
    return np.repeat(np.repeat(mask.bits, s, axis=0), s, axis=1)


def apply_mask(deriv: FeatureGrid, mask: BitMask) -> FeatureGrid:
    _, H, W = deriv.dims
    return deriv.like(np.where(_expand(mask, H, W)[None], deriv.data, np.float32(0.0)))


def _masked_order(dims: tuple[int, int, int], mask: BitMask) -> np.ndarray:
    """Flat (C, H, W) indices of transmitted elements, in payload order."""
    C, H, W = dims
    s = _stride(H, W, *mask.dims)
    ks, ls = np.nonzero(mask.bits)  # row-major over patches
    if len(ks) == 0:
        return np.zeros(0, dtype=np.int64)
    c, dy, dx = np.meshgrid(np.arange(C), np.arange(s), np.arange(s), indexing="ij")
    rows = ks[:, None] * s + dy.ravel()[None]
    cols = ls[:, None] * s + dx.ravel()[None]
    return (c.ravel()[None] * H * W + rows * W + cols).ravel()


# -- spatial compression ---------------------------------------------------------


def _pool_dims(dims, sx: int, sc: int) -> tuple[int, int, int]:
    C, H, W = dims
    if sx < 1 or sc < 1 or H % sx or W % sx or C % sc:
        raise ValueError(f"dims {dims} not divisible by spatial {sx} / channel {sc}")
    return C // sc, H // sx, W // sx


def spatial_compress(f: FeatureGrid, sx: int = 1, sc: int = 1) -> FeatureGrid:
    """Average-pool ``sx x sx`` spatial blocks and ``sc``-channel groups."""
    if sx == 1 and sc == 1:
        return f
    c, h, w = _pool_dims(f.dims, sx, sc)
    pooled = f.data.astype(np.float64).reshape(c, sc, h, sx, w, sx).mean(axis=(1, 3, 5))
    grid = GridConfig(f.grid.x_range, f.grid.y_range, f.grid.z_range, f.grid.cell * sx, c)
    return FeatureGrid(pooled, grid, f.frame)


def spatial_decompress(f: FeatureGrid, sx: int, sc: int, target_dims: tuple[int, int, int],
                       grid: GridConfig | None = None) -> FeatureGrid:
    """Nearest-neighbour upsample and broadcast channel groups back to ``target_dims``."""
    if _pool_dims(target_dims, sx, sc) != f.dims:
        raise ValueError(f"{f.dims} cannot decompress to {target_dims} with sx={sx}, sc={sc}")
    if sx == 1 and sc == 1:
        return f
    up = np.repeat(np.repeat(np.repeat(f.data, sc, axis=0), sx, axis=1), sx, axis=2)
    if grid is None:
        grid = GridConfig(f.grid.x_range, f.grid.y_range, f.grid.z_range, f.grid.cell / sx, target_dims[0])
    return FeatureGrid(up, grid, f.frame)


# -- packets -------------------------------------------------------------------


@dataclass(frozen=True)
class CodecOptions:
    bits: int | None = 6  # None: raw float32
    use_mask: bool = False
    mask_threshold: float = 0.0


@dataclass(frozen=True, eq=False)
class DecodedPacket:
    flow: FeatureFlow | None  # None when no derivative was sent
    base: FeatureGrid
    pose: Pose2
    pose_z: float
    t_ref: int
    bits: int | None
    mask: BitMask | None


def _encode_tensor(arr: np.ndarray, bits: int | None, index: np.ndarray | None = None) -> tuple[bytes, np.ndarray]:
    """Payload bytes and the values the decoder will reconstruct (full tensor)."""
    if bits is None:
        flat = arr.astype("<f4").ravel()
        sent = flat if index is None else flat[index]
        recon = np.zeros_like(flat) if index is not None else flat.copy()
        if index is not None:
            recon[index] = sent
        return sent.tobytes(), recon.reshape(arr.shape).astype(np.float32)
    q = quantize(arr, bits)
    codes = q.codes if index is None else q.codes[index]
    body = struct.pack("<f", q.scale) + pack_codes(codes, bits)
    recon = dequantize(q).ravel()
    if index is not None:
        masked = np.zeros_like(recon)
        masked[index] = recon[index]
        recon = masked
    return body, recon.reshape(arr.shape)


def encode_packet(
    flow: FeatureFlow | FeatureGrid,
    pose: Pose2,
    opts: CodecOptions = CodecOptions(),
    mask: BitMask | None = None,
    t_ref: int | None = None,
    pose_z: float = 0.0,
) -> tuple[bytes, int]:
    """Serialize a flow (or a bare base feature) and return ``(bytes, ab_bytes)``.

    With ``opts.use_mask`` a mask must be supplied (see :func:`attention_mask`);
    it selects which derivative patches are transmitted.
    """
    if isinstance(flow, FeatureGrid):
        base, deriv = flow, None
        if t_ref is None:
            raise ValueError("t_ref is required for a bare feature")
    else:
        base, deriv, t_ref = flow.base, flow.deriv, flow.t_ref
    C, H, W = base.dims
    if max(C, H, W) > 0xFFFF:
        raise ValueError(f"dims {base.dims} exceed 16-bit header fields")
    if opts.bits is not None:
        _check_bits(opts.bits)
    masked = opts.use_mask and deriv is not None
    if opts.use_mask and deriv is not None and mask is None:
        raise ValueError("use_mask requires a mask")
    flags = (FLAG_QUANTIZED if opts.bits is not None else 0) | (FLAG_MASKED if masked else 0) | (FLAG_DERIV if deriv is not None else 0)
    stride = _stride(H, W, *mask.dims) if masked else 0
    if stride > 0xFF:
        raise ValueError("mask stride exceeds 8-bit header field")
    header = HEADER.pack(
        MAGIC, VERSION, flags, int(t_ref),
        float(pose.x), float(pose.y), float(pose_z), float(pose.yaw),
        C, H, W, opts.bits if opts.bits is not None else RAW_BITS, stride,
    )
    parts = [header]
    if masked:
        parts.append(mask.to_bytes())
    parts.append(_encode_tensor(base.data, opts.bits)[0])
    if deriv is not None:
        index = _masked_order(base.dims, mask) if masked else None
        parts.append(_encode_tensor(deriv.data, opts.bits, index)[0])
    buf = b"".join(parts)
    return buf, len(buf) - HEADER_SIZE


def reference_reconstruction(flow: FeatureFlow, opts: CodecOptions, mask: BitMask | None = None) -> tuple[np.ndarray, np.ndarray]:
    """What a receiver reconstructs, computed without serialization."""
    base = _encode_tensor(flow.base.data, opts.bits)[1]
    deriv = flow.deriv.data
    if opts.bits is not None:
        deriv = quantize_dequantize(deriv, opts.bits)
    if opts.use_mask:
        deriv = apply_mask(flow.deriv.like(deriv), mask).data
    return base, np.asarray(deriv, dtype=np.float32)


def _decode_tensor(buf: bytes, pos: int, n: int, bits: int | None, dims) -> tuple[np.ndarray, int]:
    if bits is None:
        end = pos + 4 * n
        if len(buf) < end:
            raise PacketError("truncated raw tensor")
        return np.frombuffer(buf[pos:end], dtype="<f4").astype(np.float32), end
    if len(buf) < pos + 4:
        raise PacketError("truncated scale")
    (scale,) = struct.unpack_from("<f", buf, pos)
    pos += 4
    nbytes = packed_size(n, bits)
    codes = unpack_codes(buf[pos:pos + nbytes], n, bits)
    q = QuantizedTensor((n,), bits, np.float32(scale), codes)
    try:
        return dequantize(q), pos + nbytes
    except ValueError as exc:
        raise PacketError(str(exc)) from exc


def decode_packet(buf: bytes, grid: GridConfig | None = None, frame: str = "") -> DecodedPacket:
    """Inverse of :func:`encode_packet`; masked-out derivative cells come back as zeros."""
    if len(buf) < HEADER_SIZE:
        raise PacketError("truncated header")
    magic, version, flags, t_ref, px, py, pz, pyaw, C, H, W, bits, stride = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise PacketError(f"bad magic {magic!r}")
    if version != VERSION:
        raise PacketError(f"unsupported version {version}")
    qbits = bits if flags & FLAG_QUANTIZED else None
    if qbits is not None and not 2 <= qbits <= 16:
        raise PacketError(f"invalid bit width {qbits}")
    if grid is None:
        grid = GridConfig(x_range=(0.0, float(W)), y_range=(0.0, float(H)), cell=1.0, channels=C)
    elif grid.shape != (C, H, W):
        raise PacketError(f"packet dims {(C, H, W)} do not match grid {grid.shape}")
    n = C * H * W
    pos = HEADER_SIZE
    mask = None
    if flags & FLAG_MASKED:
        if stride == 0 or H % stride or W % stride:
            raise PacketError(f"invalid mask stride {stride}")
        mdims = (H // stride, W // stride)
        mask = BitMask.from_bytes(buf[pos:], mdims)
        pos += mask.nbytes
    base_vals, pos = _decode_tensor(buf, pos, n, qbits, (C, H, W))
    base = FeatureGrid(base_vals.reshape(C, H, W), grid, frame)
    flow = None
    if flags & FLAG_DERIV:
        if mask is not None:
            index = _masked_order((C, H, W), mask)
            vals, pos = _decode_tensor(buf, pos, len(index), qbits, None)
            full = np.zeros(n, dtype=np.float32)
            full[index] = vals
        else:
            full, pos = _decode_tensor(buf, pos, n, qbits, (C, H, W))
        flow = FeatureFlow(base, FeatureGrid(full.reshape(C, H, W), grid, frame), int(t_ref))
    if pos != len(buf):
        raise PacketError(f"{len(buf) - pos} trailing bytes")
    return DecodedPacket(flow, base, Pose2(px, py, pyaw), pz, int(t_ref), qbits, mask)


# -- transmission cost -----------------------------------------------------------


def transmission_cost(form: str, *, num_points: int = 0, num_detections: int = 0,
                      dims: tuple[int, int, int] | None = None, bits: int | None = None,
                      mask_dims: tuple[int, int] | None = None) -> int:
    """Average-Byte cost of one cooperative transmission.

    ``early``: raw (x, y, z, intensity) float32 points; ``late``: eight float32
    per detection; ``middle_feature``: one float32 tensor; ``middle_flow``: a
    feature and a derivative tensor, each ``bits`` wide if quantized (scales
    not included); ``mask``: one bit per mask element.
    """
    if form == "early":
        return 16 * num_points
    if form == "late":
        return 32 * num_detections
    if form == "mask":
        return packed_size(mask_dims[0] * mask_dims[1], 1)
    if dims is None:
        raise ValueError(f"{form} cost needs tensor dims")
    n = math.prod(dims)
    if form == "middle_feature":
        return 4 * n if bits is None else packed_size(n, bits)
    if form == "middle_flow":
        return 2 * (4 * n if bits is None else packed_size(n, bits))
    raise ValueError(f"unknown transmission form {form!r}")

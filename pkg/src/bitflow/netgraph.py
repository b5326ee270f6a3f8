"""Composable binary network blocks, a sequential executor, and the model file.

Two deployment block types:

* ``VggBlock``: clipped binary convolution followed by an integer
  threshold comparison that binarizes the output for the next block.
  A block without thresholds is terminal and emits the 8-bit map itself.
* ``ResnetBlock``: clipped binary convolution, 16-bit fixed-point batch
  norm, then a saturating 8-bit addition with the identity shortcut taken
  from the block's 8-bit input.

``FloatBlock`` carries unconverted float batch-norm tables; it exists so
trained models can be stored before threshold/fixed-point conversion and
is rejected by the executor.

Model file layout (all little-endian): magic ``BDF1``, u16 version,
u16 layer count, per layer a tag byte plus kernel dims (u32 x4), stride
and padding (u32 x4), packed kernel words (u64), and the block's tables;
a CRC-32 of everything before it closes the file. The CRC is checked
before any parsing, so every single-byte corruption is rejected.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .binconv import ConvSpec, conv_fused, conv_i8, conv_float_oracle
from .bitcore import (
    BitPlaneTensor,
    I8FeatureMap,
    PackedKernelSet,
    pack_weights,
    unpack_weights,
    words_per_pixel,
)
from .bnquant import (
    BNParams,
    QBNParams,
    ThresholdParams,
    apply_threshold,
    bn_float,
    bn_q_forward,
    compute_threshold,
    qbn_from_bytes,
    qbn_to_bytes,
    quantize_bn,
    threshold_from_bytes,
    threshold_to_bytes,
)

MAGIC = b"BDF1"
VERSION = 1

_TAG_VGG = 1
_TAG_RESNET = 2
_TAG_FLOATBN = 3


class ModelFormatError(Exception):
    """Raised for malformed, corrupt or unsupported model files."""


class GraphError(Exception):
    """Raised for structurally invalid models or incompatible shapes."""


def _check_identity_shortcut(kernel: PackedKernelSet, spec: ConvSpec) -> None:
    out, fh, fw, cin = kernel.dims
    ph, pw = spec.spatial_pad
    ok = (
        out == cin
        and spec.stride == (1, 1)
        and fh % 2 == 1
        and fw % 2 == 1
        and ph == (fh - 1) // 2
        and pw == (fw - 1) // 2
    )
    if not ok:
        raise GraphError(
            "identity shortcut needs matching channels and a shape-preserving "
            f"convolution; got kernel {kernel.dims}, spec {spec}"
        )


@dataclass(frozen=True, eq=False)
class VggBlock:
    """Conv + threshold binarization; ``thr`` is None for terminal blocks."""

    kernel: PackedKernelSet
    spec: ConvSpec
    thr: ThresholdParams | None = None

    def __post_init__(self):
        if self.thr is not None and self.thr.channels != self.kernel.out_channels:
            raise GraphError(
                f"threshold channels {self.thr.channels} != "
                f"conv output channels {self.kernel.out_channels}"
            )


@dataclass(frozen=True, eq=False)
class ResnetBlock:
    """Conv + quantized batch norm + saturating add with identity shortcut."""

    kernel: PackedKernelSet
    spec: ConvSpec
    qbn: QBNParams

    def __post_init__(self):
        _check_identity_shortcut(self.kernel, self.spec)
        if self.qbn.channels != self.kernel.out_channels:
            raise GraphError(
                f"qbn channels {self.qbn.channels} != "
                f"conv output channels {self.kernel.out_channels}"
            )


@dataclass(frozen=True, eq=False)
class FloatBlock:
    """Conv + float batch-norm record awaiting conversion; ``bn`` None means
    a terminal bare convolution."""

    kernel: PackedKernelSet
    spec: ConvSpec
    bn: BNParams | None = None

    def __post_init__(self):
        if self.bn is not None and self.bn.channels != self.kernel.out_channels:
            raise GraphError(
                f"bn channels {self.bn.channels} != "
                f"conv output channels {self.kernel.out_channels}"
            )


@dataclass(eq=False)
class Model:
    """An ordered sequence of blocks executed front to back."""

    blocks: list

    def __post_init__(self):
        if len(self.blocks) > 0xFFFF:
            raise GraphError("too many layers for the file format")


def run_vgg_block(x, b: VggBlock, threads: int = 1):
    """Run one VGG-style block.

    Packed-bit inputs convolve directly; 8-bit inputs are binarized by
    sign inside the fused convolution. Inner blocks emit packed bits,
    terminal blocks the clipped 8-bit map.
    """
    if isinstance(x, BitPlaneTensor):
        y = conv_i8(x, b.kernel, b.spec, threads=threads)
    elif isinstance(x, I8FeatureMap):
        y = conv_fused(x, None, b.kernel, b.spec, threads=threads)
    else:
        raise GraphError(f"unsupported block input {type(x).__name__}")
    if b.thr is None:
        return y
    return apply_threshold(y, b.thr)


def run_resnet_block(x, b: ResnetBlock, threads: int = 1) -> I8FeatureMap:
    """Run one ResNet-style block; requires an 8-bit input for the shortcut."""
    if not isinstance(x, I8FeatureMap):
        raise GraphError(
            "residual blocks need an 8-bit input; the previous block emits "
            f"{type(x).__name__}"
        )
    y = conv_fused(x, None, b.kernel, b.spec, threads=threads)
    z = bn_q_forward(y, b.qbn)
    if z.dims != x.dims:
        raise GraphError(f"shortcut dims {x.dims} != conv output dims {z.dims}")
    summed = z.values.astype(np.int16) + x.values.astype(np.int16)
    return I8FeatureMap(np.clip(summed, -127, 127).astype(np.int8))


def run_model(model: Model, x: np.ndarray, threads: int = 1) -> I8FeatureMap:
    """Run a model on a real NHWC input.

    The input is binarized by sign into a +-1 8-bit map; blocks then run
    sequentially. The final block must emit an 8-bit map (a terminal VGG
    block or any ResNet block).
    """
    if not model.blocks:
        raise GraphError("model has no layers")
    x = np.asarray(x)
    if x.ndim != 4:
        raise GraphError(f"input must be NHWC, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise GraphError("input must be finite")
    h = I8FeatureMap(np.where(x >= 0, 1, -1).astype(np.int8))
    for i, blk in enumerate(model.blocks):
        if isinstance(blk, VggBlock):
            h = run_vgg_block(h, blk, threads=threads)
        elif isinstance(blk, ResnetBlock):
            h = run_resnet_block(h, blk, threads=threads)
        elif isinstance(blk, FloatBlock):
            raise GraphError(f"layer {i} holds float batch norm; convert it first")
        else:
            raise GraphError(f"layer {i} has unknown type {type(blk).__name__}")
    if not isinstance(h, I8FeatureMap):
        raise GraphError("model must end with a terminal block emitting 8-bit values")
    return h


def run_float_reference(model: Model, x: np.ndarray, mode: str) -> np.ndarray:
    """Float executor for FloatBlock models: dense +-1 convolution, clip,
    real batch norm, sign or shortcut add per ``mode`` (vgg | resnet).

    Independent of the packed engine; used as the whole-pipeline oracle.
    """
    if mode not in ("vgg", "resnet"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    h = np.where(x >= 0, 1.0, -1.0)
    for i, blk in enumerate(model.blocks):
        if not isinstance(blk, FloatBlock):
            raise GraphError(f"layer {i} is not a float block")
        w = unpack_weights(blk.kernel)
        a = np.where(h >= 0, 1, -1).astype(np.int8)
        f = np.clip(conv_float_oracle(a, w, blk.spec).values, -127, 127).astype(
            np.float64
        )
        if blk.bn is None:
            h = f
        elif mode == "vgg":
            h = np.where(bn_float(f, blk.bn) >= 0, 1.0, -1.0)
        else:
            h = np.clip(bn_float(f, blk.bn) + h, -127, 127)
    return h


@dataclass
class ConversionReport:
    """Per-layer diagnostics from float-to-deployment conversion."""

    constant_channels: list  # (layer, channel) pairs with |tau| > 127
    gamma_zero_channels: list  # (layer, channel) pairs degraded to constants

    @property
    def warning_count(self) -> int:
        return len(self.constant_channels) + len(self.gamma_zero_channels)


def convert_model(model: Model, mode: str) -> tuple[Model, ConversionReport]:
    """Convert float batch-norm records to deployment tables.

    ``vgg-threshold`` emits threshold comparisons, ``resnet-qbn`` 16-bit
    fixed-point tables. Blocks without batch norm become terminal VGG
    blocks; already-converted blocks pass through unchanged.
    """
    if mode not in ("vgg-threshold", "resnet-qbn"):
        raise ValueError(f"unknown conversion mode {mode!r}")
    blocks = []
    constant, gzero = [], []
    for i, blk in enumerate(model.blocks):
        if not isinstance(blk, FloatBlock):
            blocks.append(blk)
            continue
        if blk.bn is None:
            blocks.append(VggBlock(blk.kernel, blk.spec, None))
            continue
        gzero_here = np.flatnonzero(blk.bn.gamma == 0)
        gzero.extend((i, int(c)) for c in gzero_here)
        if mode == "vgg-threshold":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                thr = compute_threshold(blk.bn)
            constant.extend(
                (i, int(c))
                for c in np.flatnonzero(np.abs(thr.tau.astype(np.int32)) > 127)
            )
            blocks.append(VggBlock(blk.kernel, blk.spec, thr))
        else:
            qbn, _ = quantize_bn(blk.bn)
            blocks.append(ResnetBlock(blk.kernel, blk.spec, qbn))
    return Model(blocks), ConversionReport(constant, gzero)


# -- serialization -----------------------------------------------------------


def _block_bytes(blk) -> bytes:
    if isinstance(blk, VggBlock):
        tag = _TAG_VGG
    elif isinstance(blk, ResnetBlock):
        tag = _TAG_RESNET
    elif isinstance(blk, FloatBlock):
        tag = _TAG_FLOATBN
    else:
        raise GraphError(f"cannot serialize block type {type(blk).__name__}")
    k, spec = blk.kernel, blk.spec
    out = bytearray()
    out += struct.pack("<B4I4I", tag, *k.dims, *spec.stride, *spec.spatial_pad)
    out += k.words.astype("<u8").tobytes()
    if tag == _TAG_VGG:
        if blk.thr is None:
            out += b"\x00"
        else:
            out += b"\x01" + threshold_to_bytes(blk.thr)
    elif tag == _TAG_RESNET:
        out += qbn_to_bytes(blk.qbn)
    else:
        if blk.bn is None:
            out += b"\x00"
        else:
            out += b"\x01"
            for v in (blk.bn.gamma, blk.bn.beta, blk.bn.mu, blk.bn.sigma):
                out += np.asarray(v, dtype="<f8").tobytes()
    return bytes(out)


def model_to_bytes(model: Model) -> bytes:
    body = MAGIC + struct.pack("<HH", VERSION, len(model.blocks))
    body += b"".join(_block_bytes(b) for b in model.blocks)
    return body + struct.pack("<I", zlib.crc32(body))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("model file truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_block(cur: _Cursor):
    tag, out, fh, fw, cin, sh, sw, ph, pw = cur.unpack("<B4I4I")
    try:
        spec = ConvSpec((sh, sw), (ph, pw))
        wps = words_per_pixel(cin) if cin else 0
        if min(out, fh, fw, cin) <= 0:
            raise ValueError(f"bad kernel dims {(out, fh, fw, cin)}")
        nwords = out * fh * fw * wps
        words = (
            np.frombuffer(cur.take(nwords * 8), dtype="<u8")
            .astype(np.uint64)
            .reshape(out, fh, fw, wps)
        )
        pad = wps * 64 - cin
        kernel = PackedKernelSet((out, fh, fw, cin), words, pad, fh * fw * pad)
        if tag == _TAG_VGG:
            (has_thr,) = cur.unpack("<B")
            if has_thr not in (0, 1):
                raise ValueError("bad threshold flag")
            thr = threshold_from_bytes(cur.take(3 * out), out) if has_thr else None
            return VggBlock(kernel, spec, thr)
        if tag == _TAG_RESNET:
            return ResnetBlock(kernel, spec, qbn_from_bytes(cur.take(1 + 12 * out), out))
        if tag == _TAG_FLOATBN:
            (has_bn,) = cur.unpack("<B")
            if has_bn not in (0, 1):
                raise ValueError("bad batch-norm flag")
            bn = None
            if has_bn:
                tables = [
                    np.frombuffer(cur.take(8 * out), dtype="<f8").astype(np.float64)
                    for _ in range(4)
                ]
                bn = BNParams(*tables)
            return FloatBlock(kernel, spec, bn)
        raise ValueError(f"unknown layer tag {tag}")
    except (ValueError, GraphError) as exc:
        raise ModelFormatError(str(exc)) from exc


def model_from_bytes(buf: bytes) -> Model:
    """Parse a model file; checks magic, version and CRC before structure."""
    if len(buf) < len(MAGIC) + 8:
        raise ModelFormatError("model file too short")
    if buf[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {buf[:4]!r}")
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise ModelFormatError("CRC mismatch, file is corrupt")
    cur = _Cursor(buf[:-4])
    cur.take(4)
    version, nlayers = cur.unpack("<HH")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    blocks = [_read_block(cur) for _ in range(nlayers)]
    if cur.pos != len(cur.buf):
        raise ModelFormatError("trailing bytes after last layer")
    model = Model(blocks)
    _warn_constant_channels(model)
    return model


def _warn_constant_channels(model: Model) -> None:
    for i, blk in enumerate(model.blocks):
        if isinstance(blk, VggBlock) and blk.thr is not None:
            const = np.flatnonzero(np.abs(blk.thr.tau.astype(np.int32)) > 127)
            if const.size:
                warnings.warn(
                    f"layer {i}: thresholds beyond the clipped range make "
                    f"channels {const.tolist()} constant",
                    RuntimeWarning,
                    stacklevel=3,
                )


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())

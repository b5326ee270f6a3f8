"""Binary direct convolution over bit-packed operands.

The convolution is computed in place over the packed layout, one filter
tap at a time, with no im2col/GEMM materialization. Per packed word the
+-1 dot product reduces to ``2 * match_count - bits_in_word``; summing
over the receptive field and subtracting the kernel's fixed
``pad_correction`` yields the exact 32-bit result. Spatial padding uses
all-zero words, which read as -1 pixels under the bit convention.

Two output paths share that accumulation:

* ``conv_i32``: the exact result,
* ``conv_i8``: the exact result clamped once at the end to [-127, +127]
  (clamp-at-end semantics, identical to clipping the final accumulator of
  a training-time forward pass).

``conv_fused`` collapses binarize/pad/convolve into one tiled pass over
the input; tiling and worker count are pure performance knobs and never
change results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bitcore import (
    BitPlaneTensor,
    I8FeatureMap,
    PackedKernelSet,
    pack_activations,
    pack_bitplanes,
)
from .bnquant import ThresholdParams, apply_threshold, threshold_bits

# Padded pixels decode to this value; {-1,+1} codes cannot represent 0.
PAD_VALUE = -1

# Default cache budget for one tile of packed input plus one kernel.
TILE_BYTE_BUDGET = 32 * 1024

I8_MAX = 127
I8_MIN = -127


@dataclass(frozen=True)
class ConvSpec:
    """Stride and spatial padding of a direct convolution."""

    stride: tuple[int, int] = (1, 1)
    spatial_pad: tuple[int, int] = (0, 0)

    def __post_init__(self):
        sh, sw = self.stride
        ph, pw = self.spatial_pad
        if sh < 1 or sw < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if ph < 0 or pw < 0:
            raise ValueError(f"padding must be non-negative, got {self.spatial_pad}")


@dataclass(frozen=True, eq=False)
class I32FeatureMap:
    """NHWC feature map of exact 32-bit +-1 dot products."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.dtype != np.int32:
            raise ValueError(f"expected int32 values, got {self.values.dtype}")
        self.values.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.values.shape)


def output_shape(in_dims, k_dims, spec: ConvSpec) -> tuple[int, int, int, int]:
    """Output dims of a direct convolution; raises on impossible geometry."""
    n, h, w, cin = in_dims
    out, fh, fw, kin = k_dims
    if cin != kin:
        raise ValueError(f"channel mismatch: input {cin}, kernel {kin}")
    sh, sw = spec.stride
    ph, pw = spec.spatial_pad
    oh = (h + 2 * ph - fh) // sh + 1
    ow = (w + 2 * pw - fw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"non-positive output dims {oh}x{ow} for input {h}x{w}, "
            f"filter {fh}x{fw}, stride {spec.stride}, pad {spec.spatial_pad}"
        )
    return n, oh, ow, out


def _pad_words(words: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return words
    n, h, w, wps = words.shape
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, wps), dtype=np.uint64)
    out[:, ph : ph + h, pw : pw + w, :] = words
    return out


_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H8 = np.uint64(0x0101010101010101)

# The multiply-shift horizontal sum only holds totals below 256, so the
# lane-wise word fold ahead of it is limited to 3 words (3 * 64 <= 192).
_MULT_FOLD_WORDS = 3


def _fold_matches(x: np.ndarray) -> np.ndarray:
    """Total set bits over the last (word) axis of a uint64 array.

    Byte-wise counts first (what a SIMD byte-count gives), then either the
    multiply-shift horizontal sum (narrow folds) or pairwise widening
    (wide folds, where the total would overflow a byte).
    """
    t = x >> np.uint64(1)
    t &= _M1
    x = x - t
    t = x >> np.uint64(2)
    t &= _M2
    x &= _M2
    x += t
    t = x >> np.uint64(4)
    x += t
    x &= _M4  # each byte now holds its bit count
    wps = x.shape[-1]
    if wps == 1:
        folded = x[..., 0]
    elif wps <= _MULT_FOLD_WORDS:
        folded = x.sum(axis=-1, dtype=np.uint64)
    else:
        return _drain_lanes(x)
    return ((folded * _H8) >> np.uint64(56)).astype(np.int32)


def _match_counts(padded, kwords_inv, fh, fw, sh, sw, oh, ow) -> np.ndarray:
    """Total XNOR match count per output element, int32 (n, oh, ow, out).

    ``kwords_inv`` holds bit-inverted kernel words, so XOR against the
    input is already XNOR against the kernel. Every tap is counted and
    widened to the 32-bit accumulator separately (the staged data flow).
    """
    n = padded.shape[0]
    out = kwords_inv.shape[0]
    acc = np.zeros((n, oh, ow, out), dtype=np.int32)
    for i in range(fh):
        for j in range(fw):
            slab = padded[
                :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw, :
            ]
            x = np.bitwise_xor(slab[:, :, :, None, :], kwords_inv[:, i, j, :])
            acc += _fold_matches(x)
    return acc


_L16 = np.uint64(0x00FF00FF00FF00FF)
_L32 = np.uint64(0x0000FFFF0000FFFF)
_L64 = np.uint64(0x00000000FFFFFFFF)

# Byte lanes accumulate at most 8 bits per tap, so up to 31 taps can be
# summed lane-wise before a widening drain is due.
_LANE_TAPS = 31


def _drain_lanes(lanes: np.ndarray) -> np.ndarray:
    """Sum per-byte lane counts to int32 totals over words.

    Pairwise widening (8 -> 16 -> 32 -> 64 bit lanes) then one final sum
    across the word axis; the narrow-lane analog of a horizontal add.
    """
    t = (lanes & _L16) + ((lanes >> np.uint64(8)) & _L16)
    t = (t & _L32) + ((t >> np.uint64(16)) & _L32)
    t = (t & _L64) + (t >> np.uint64(32))
    if t.shape[-1] == 1:
        return t[..., 0].astype(np.int32)
    return t.sum(axis=-1, dtype=np.uint64).astype(np.int32)


def _tile_matches(buf, kinv, fh, fw, sh, sw, oh, ow) -> np.ndarray:
    """Match counts for one tile with byte-lane accumulation across taps.

    The fused kernel's inner loop: XNOR, byte-wise bit counts, lane-wise
    adds, and a single widening reduction at the end instead of a 32-bit
    accumulate per tap. Bit-identical to :func:`_match_counts`.
    """
    n = buf.shape[0]
    out, wps = kinv.shape[0], kinv.shape[3]
    shape5 = (n, oh, ow, out, wps)
    xbuf = np.empty(shape5, dtype=np.uint64)
    tbuf = np.empty(shape5, dtype=np.uint64)
    lanes = np.zeros(shape5, dtype=np.uint64)
    acc = None
    pending = 0
    for i in range(fh):
        for j in range(fw):
            slab = buf[
                :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw, :
            ]
            np.bitwise_xor(slab[:, :, :, None, :], kinv[:, i, j, :], out=xbuf)
            np.right_shift(xbuf, np.uint64(1), out=tbuf)
            tbuf &= _M1
            xbuf -= tbuf
            np.right_shift(xbuf, np.uint64(2), out=tbuf)
            tbuf &= _M2
            xbuf &= _M2
            xbuf += tbuf
            np.right_shift(xbuf, np.uint64(4), out=tbuf)
            xbuf += tbuf
            xbuf &= _M4
            lanes += xbuf
            pending += 1
            if pending == _LANE_TAPS:
                drained = _drain_lanes(lanes)
                acc = drained if acc is None else acc + drained
                lanes.fill(0)
                pending = 0
    if pending:
        drained = _drain_lanes(lanes)
        acc = drained if acc is None else acc + drained
    return acc


def _row_chunks(oh: int, threads: int):
    chunk = -(-oh // threads)
    return [(y, min(y + chunk, oh)) for y in range(0, oh, chunk)]


def _match_counts_threaded(padded, kwords_inv, fh, fw, sh, sw, oh, ow, threads):
    if threads <= 1 or oh == 1:
        return _match_counts(padded, kwords_inv, fh, fw, sh, sw, oh, ow)
    n = padded.shape[0]
    acc = np.empty((n, oh, ow, kwords_inv.shape[0]), dtype=np.int32)

    def work(span):
        y0, y1 = span
        rows = padded[:, y0 * sh : (y1 - 1) * sh + fh, :, :]
        acc[:, y0:y1] = _match_counts(rows, kwords_inv, fh, fw, sh, sw, y1 - y0, ow)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, _row_chunks(oh, threads)))
    return acc


def conv_i32(
    x: BitPlaneTensor, k: PackedKernelSet, spec: ConvSpec, threads: int = 1
) -> I32FeatureMap:
    """Exact binary direct convolution.

    Every output element is the +-1 dot product over the receptive field,
    recovered from match counts as 2*(matches - pad_correction) - fh*fw*cin.
    """
    n, oh, ow, out = output_shape(x.dims, k.dims, spec)
    _, fh, fw, cin = k.dims
    padded = _pad_words(x.words, *spec.spatial_pad)
    acc = _match_counts_threaded(
        padded, np.bitwise_not(k.words), fh, fw, *spec.stride, oh, ow, threads
    )
    bias = np.int32(2 * k.pad_correction + fh * fw * cin)
    return I32FeatureMap(2 * acc - bias)


def conv_i8(
    x: BitPlaneTensor, k: PackedKernelSet, spec: ConvSpec, threads: int = 1
) -> I8FeatureMap:
    """Clipped binary convolution: clamp(conv_i32, -127, +127), never -128."""
    wide = conv_i32(x, k, spec, threads)
    return I8FeatureMap(np.clip(wide.values, I8_MIN, I8_MAX).astype(np.int8))


def default_tile_rows(x_dims, k: PackedKernelSet, spec: ConvSpec) -> int:
    """Output rows per tile so one tile of packed input plus the kernel
    fits in the cache budget."""
    _, h, w, cin = x_dims
    _, fh, fw, _ = k.dims
    sh, _ = spec.stride
    _, pw = spec.spatial_pad
    row_bytes = (w + 2 * pw) * k.words_per_site * 8
    kernel_bytes = k.words.size * 8
    budget_rows = (TILE_BYTE_BUDGET - kernel_bytes) // max(row_bytes, 1)
    return max(1, int((budget_rows - fh) // sh + 1))


def conv_fused(
    x_prev: I8FeatureMap,
    thr: ThresholdParams | None,
    k: PackedKernelSet,
    spec: ConvSpec,
    tile_rows: int | None = None,
    threads: int = 1,
) -> I8FeatureMap:
    """Fused binarize/pad/convolve with clipped 8-bit output.

    ``thr`` binarizes the 8-bit input per channel (threshold comparison);
    when absent the input is binarized by sign. The result is bit-identical
    to the staged pipeline (binarize, pack, pad, conv_i8) for every tile
    size and worker count; tiles only bound the packed working set.
    """
    if thr is not None and thr.channels != x_prev.channels:
        raise ValueError(
            f"threshold channels {thr.channels} != input channels {x_prev.channels}"
        )
    n, h, w, cin = x_prev.dims
    _, oh, ow, out = output_shape(x_prev.dims, k.dims, spec)
    _, fh, fw, _ = k.dims
    sh, sw = spec.stride
    ph, pw = spec.spatial_pad
    wps = k.words_per_site
    if tile_rows is None:
        tile_rows = default_tile_rows(x_prev.dims, k, spec)
    tile_rows = max(1, min(tile_rows, oh))
    bias = np.int32(2 * k.pad_correction + fh * fw * cin)
    kinv = np.bitwise_not(k.words)
    result = np.empty((n, oh, ow, out), dtype=np.int8)

    def run_tile(span):
        y0, y1 = span
        r0, r1 = y0 * sh, (y1 - 1) * sh + fh  # padded input row range
        buf = np.zeros((n, r1 - r0, w + 2 * pw, wps), dtype=np.uint64)
        lo, hi = max(r0, ph), min(r1, ph + h)
        if hi > lo:
            rows = x_prev.values[:, lo - ph : hi - ph, :, :]
            bits = (rows >= 0) if thr is None else threshold_bits(rows, thr)
            buf[:, lo - r0 : hi - r0, pw : pw + w, :] = pack_bitplanes(bits)
        acc = _tile_matches(buf, kinv, fh, fw, sh, sw, y1 - y0, ow)
        acc *= 2
        acc -= bias
        np.clip(acc, I8_MIN, I8_MAX, out=acc)
        result[:, y0:y1] = acc.astype(np.int8)

    tiles = [(y, min(y + tile_rows, oh)) for y in range(0, oh, tile_rows)]
    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_tile, tiles))
    else:
        for span in tiles:
            run_tile(span)
    return I8FeatureMap(result)


def staged_conv_i8(
    x_prev: I8FeatureMap,
    thr: ThresholdParams | None,
    k: PackedKernelSet,
    spec: ConvSpec,
    threads: int = 1,
) -> I8FeatureMap:
    """Sequential binarize -> pack -> pad -> convolve -> clamp pipeline.

    Reference for fusion-transparency checks and the staged benchmark
    variant; every step materializes its output.
    """
    if thr is None:
        packed = pack_activations(x_prev.values)
    else:
        packed = apply_threshold(x_prev, thr)
    return conv_i8(packed, k, spec, threads)


def conv_float_oracle(a: np.ndarray, w: np.ndarray, spec: ConvSpec) -> I32FeatureMap:
    """Textbook dense direct convolution of +-1 tensors, for small shapes.

    Ground truth for the packed paths; pads with -1 like the engine.
    """
    a = np.asarray(a)
    w = np.asarray(w)
    if not (np.isin(a, (-1, 1)).all() and np.isin(w, (-1, 1)).all()):
        raise ValueError("oracle operands must be +-1 valued")
    n, oh, ow, out = output_shape(a.shape, w.shape, spec)
    _, fh, fw, _ = w.shape
    sh, sw = spec.stride
    ph, pw = spec.spatial_pad
    ap = np.full(
        (n, a.shape[1] + 2 * ph, a.shape[2] + 2 * pw, a.shape[3]),
        float(PAD_VALUE),
        dtype=np.float64,
    )
    ap[:, ph : ph + a.shape[1], pw : pw + a.shape[2], :] = a
    acc = np.zeros((n, oh, ow, out), dtype=np.float64)
    for i in range(fh):
        for j in range(fw):
            slab = ap[
                :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw, :
            ]
            acc += np.tensordot(slab, w[:, i, j, :], axes=([3], [1]))
    return I32FeatureMap(acc.astype(np.int32))

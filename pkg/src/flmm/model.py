"""Two-tower vision-language toy model with frozen bases and low-rank adapters.

Only the adapter factors (and the optional bridge) are trainable; everything
else is frozen at construction. All operations are pure: they return new
values and never mutate a snapshot.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from flmm.errors import (
    BatchError,
    CheckpointError,
    DegenerateInputError,
    EmptyBankError,
    NumericError,
    ShapeError,
    VocabularyError,
)
from flmm.rng import SplitMix64

# Default toy dimensions; small enough for exhaustive finite-difference checks.
D_V = 16
D_T = 16
D_EMB = 8
RANK = 2
VOCAB = 64
TEMPERATURE = 0.1


@dataclass(frozen=True)
class AdapterPair:
    """Low-rank factors: effective delta is (alpha / rank) * b @ a."""

    a: np.ndarray  # (rank, d_in)
    b: np.ndarray  # (d_out, rank)
    rank: int
    alpha: float

    def __post_init__(self):
        r, d_in = self.a.shape
        d_out, r2 = self.b.shape
        if r != self.rank or r2 != self.rank:
            raise ShapeError(f"adapter factor shapes {self.a.shape}/{self.b.shape} "
                             f"inconsistent with rank {self.rank}")
        if self.rank < 1 or self.rank > min(d_in, d_out):
            raise ShapeError(f"rank {self.rank} outside [1, min({d_in}, {d_out})]")
        if self.alpha <= 0:
            raise ShapeError("alpha must be positive")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.b @ self.a)

    @staticmethod
    def init(d_in: int, d_out: int, rank: int, rng: SplitMix64,
             alpha: float | None = None) -> "AdapterPair":
        """Fresh adapter: a ~ N(0, 0.02^2), b = 0, so the delta starts at zero."""
        a = rng.normal_matrix(rank, d_in, std=0.02)
        b = np.zeros((d_out, rank))
        return AdapterPair(a=a, b=b, rank=rank, alpha=alpha if alpha is not None else 2.0 * rank)


@dataclass(frozen=True)
class TowerParams:
    """Frozen base weight plus its trainable adapter."""

    w_base: np.ndarray  # (d_emb, d_in), never modified
    adapter: AdapterPair

    def effective(self) -> np.ndarray:
        return self.w_base + self.adapter.delta()


@dataclass(frozen=True)
class ModelSnapshot:
    vision: TowerParams
    text: TowerParams
    token_embed: np.ndarray  # (vocab, d_t), frozen
    bridge: np.ndarray | None  # (d_emb, d_emb) or None
    temperature: float
    version: int = 0

    @property
    def d_emb(self) -> int:
        return self.vision.w_base.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.token_embed.shape[0]


@dataclass(frozen=True)
class GradientSet:
    """Partials w.r.t. trainable parameters only; frozen blocks are absent."""

    d_vision_a: np.ndarray
    d_vision_b: np.ndarray
    d_text_a: np.ndarray
    d_text_b: np.ndarray
    d_bridge: np.ndarray | None = None

    def scaled(self, w: float) -> "GradientSet":
        return GradientSet(
            d_vision_a=w * self.d_vision_a,
            d_vision_b=w * self.d_vision_b,
            d_text_a=w * self.d_text_a,
            d_text_b=w * self.d_text_b,
            d_bridge=None if self.d_bridge is None else w * self.d_bridge,
        )

    def add(self, other: "GradientSet") -> "GradientSet":
        if self.d_vision_a.shape != other.d_vision_a.shape:
            raise ShapeError("gradient shapes differ")
        if (self.d_bridge is None) != (other.d_bridge is None):
            raise ShapeError("one gradient set has a bridge block, the other does not")
        return GradientSet(
            d_vision_a=self.d_vision_a + other.d_vision_a,
            d_vision_b=self.d_vision_b + other.d_vision_b,
            d_text_a=self.d_text_a + other.d_text_a,
            d_text_b=self.d_text_b + other.d_text_b,
            d_bridge=None if self.d_bridge is None else self.d_bridge + other.d_bridge,
        )

    @staticmethod
    def zeros_like(snapshot: ModelSnapshot) -> "GradientSet":
        return GradientSet(
            d_vision_a=np.zeros_like(snapshot.vision.adapter.a),
            d_vision_b=np.zeros_like(snapshot.vision.adapter.b),
            d_text_a=np.zeros_like(snapshot.text.adapter.a),
            d_text_b=np.zeros_like(snapshot.text.adapter.b),
            d_bridge=None if snapshot.bridge is None else np.zeros_like(snapshot.bridge),
        )


def init_snapshot(seed: int, d_v: int = D_V, d_t: int = D_T, d_emb: int = D_EMB,
                  rank: int = RANK, vocab: int = VOCAB,
                  temperature: float = TEMPERATURE, with_bridge: bool = True) -> ModelSnapshot:
    """Seeded 'pretrained' snapshot: random frozen bases, zero-delta adapters."""
    rng = SplitMix64(seed)
    w_v = rng.normal_matrix(d_emb, d_v, std=1.0 / np.sqrt(d_v))
    w_t = rng.normal_matrix(d_emb, d_t, std=1.0 / np.sqrt(d_t))
    tok = rng.normal_matrix(vocab, d_t, std=1.0)
    bridge = np.eye(d_emb) if with_bridge else None
    return ModelSnapshot(
        vision=TowerParams(w_base=w_v, adapter=AdapterPair.init(d_v, d_emb, rank, rng)),
        text=TowerParams(w_base=w_t, adapter=AdapterPair.init(d_t, d_emb, rank, rng)),
        token_embed=tok,
        bridge=bridge,
        temperature=temperature,
        version=0,
    )


def _normalize_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero vector before normalization")
    return u / norms[:, None], norms


def _vision_forward(snapshot: ModelSnapshot, xs: np.ndarray):
    """Returns (z, cache) for a batch of image vectors, rows of xs."""
    if xs.shape[1] != snapshot.vision.w_base.shape[1]:
        raise ShapeError(f"image dim {xs.shape[1]} != tower input {snapshot.vision.w_base.shape[1]}")
    y = xs @ snapshot.vision.effective().T
    u = y @ snapshot.bridge.T if snapshot.bridge is not None else y
    z, norms = _normalize_rows(u)
    return z, (xs, y, z, norms)


def _text_forward(snapshot: ModelSnapshot, token_lists: list[list[int]]):
    ts = np.stack([_text_input(snapshot, toks) for toks in token_lists])
    y = ts @ snapshot.text.effective().T
    z, norms = _normalize_rows(y)
    return z, (ts, z, norms)


def _text_input(snapshot: ModelSnapshot, tokens: list[int]) -> np.ndarray:
    if len(tokens) == 0:
        raise DegenerateInputError("empty token list")
    for t in tokens:
        if not 0 <= t < snapshot.vocab_size:
            raise VocabularyError(f"token id {t} outside vocab of {snapshot.vocab_size}")
    return snapshot.token_embed[np.asarray(tokens, dtype=np.intp)].mean(axis=0)


def _normalize_backward(dz: np.ndarray, z: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # z = u / |u|  =>  du = (dz - (dz.z) z) / |u|
    dot = np.sum(dz * z, axis=1, keepdims=True)
    return (dz - dot * z) / norms[:, None]


def _vision_backward(snapshot: ModelSnapshot, cache, dz: np.ndarray):
    """Gradients w.r.t. vision adapter factors and bridge from dL/dz."""
    xs, y, z, norms = cache
    du = _normalize_backward(dz, z, norms)
    if snapshot.bridge is not None:
        dy = du @ snapshot.bridge
        d_bridge = du.T @ y
    else:
        dy = du
        d_bridge = None
    d_weff = dy.T @ xs
    ad = snapshot.vision.adapter
    return ad.scale * (ad.b.T @ d_weff), ad.scale * (d_weff @ ad.a.T), d_bridge


def _text_backward(snapshot: ModelSnapshot, cache, dz: np.ndarray):
    ts, z, norms = cache
    du = _normalize_backward(dz, z, norms)
    d_weff = du.T @ ts
    ad = snapshot.text.adapter
    return ad.scale * (ad.b.T @ d_weff), ad.scale * (d_weff @ ad.a.T)


def encode_image(snapshot: ModelSnapshot, x: np.ndarray) -> np.ndarray:
    """Unit-norm embedding of one image feature vector."""
    z, _ = _vision_forward(snapshot, np.asarray(x, dtype=np.float64)[None, :])
    return z[0]


def encode_text(snapshot: ModelSnapshot, tokens: list[int]) -> np.ndarray:
    """Unit-norm embedding of a bag of token ids (mean of embedding rows)."""
    z, _ = _text_forward(snapshot, [list(tokens)])
    return z[0]


def contrastive_loss_and_grads(snapshot: ModelSnapshot,
                               batch: list[tuple[np.ndarray, list[int]]]
                               ) -> tuple[float, GradientSet]:
    """Symmetric InfoNCE over the batch and its analytic adapter gradients."""
    n = len(batch)
    if n < 2:
        raise BatchError("contrastive loss needs a batch of at least 2")
    xs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    z_v, cache_v = _vision_forward(snapshot, xs)
    z_t, cache_t = _text_forward(snapshot, [list(t) for _, t in batch])

    tau = snapshot.temperature
    s = (z_v @ z_t.T) / tau
    # rows: image -> text, cols: text -> image
    p_row = _softmax(s, axis=1)
    p_col = _softmax(s, axis=0)
    eye = np.eye(n)
    loss = 0.5 * (_cross_entropy(s, axis=1) + _cross_entropy(s, axis=0))
    g = (p_row - eye + p_col - eye) / (2.0 * n)

    dz_v = (g @ z_t) / tau
    dz_t = (g.T @ z_v) / tau
    dva, dvb, dbr = _vision_backward(snapshot, cache_v, dz_v)
    dta, dtb = _text_backward(snapshot, cache_t, dz_t)
    return float(loss), GradientSet(dva, dvb, dta, dtb, dbr)


def _softmax(s: np.ndarray, axis: int) -> np.ndarray:
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def _cross_entropy(s: np.ndarray, axis: int) -> float:
    m = s.max(axis=axis, keepdims=True)
    lse = np.squeeze(m, axis=axis) + np.log(np.exp(s - m).sum(axis=axis))
    return float(np.mean(lse - np.diag(s)))


def sgd_step(snapshot: ModelSnapshot, grads: GradientSet, lr: float) -> ModelSnapshot:
    """One descent step on adapters and bridge; frozen weights untouched."""
    for block in (grads.d_vision_a, grads.d_vision_b, grads.d_text_a, grads.d_text_b,
                  grads.d_bridge):
        if block is not None and not np.all(np.isfinite(block)):
            raise NumericError("non-finite gradient entries")
    v_ad = snapshot.vision.adapter
    t_ad = snapshot.text.adapter
    new_vision = replace(snapshot.vision, adapter=replace(
        v_ad, a=v_ad.a - lr * grads.d_vision_a, b=v_ad.b - lr * grads.d_vision_b))
    new_text = replace(snapshot.text, adapter=replace(
        t_ad, a=t_ad.a - lr * grads.d_text_a, b=t_ad.b - lr * grads.d_text_b))
    bridge = snapshot.bridge
    if bridge is not None and grads.d_bridge is not None:
        bridge = bridge - lr * grads.d_bridge
    return replace(snapshot, vision=new_vision, text=new_text, bridge=bridge)


def alignment_score(snapshot: ModelSnapshot, x: np.ndarray, tokens: list[int]) -> float:
    """Cosine of the two embeddings; in [-1, 1]."""
    return float(encode_image(snapshot, x) @ encode_text(snapshot, tokens))


def retrieve_caption(snapshot: ModelSnapshot, x: np.ndarray,
                     bank: list[list[int]]) -> tuple[int, list[int]]:
    """Best-aligned caption from the bank; ties go to the lowest index."""
    if not bank:
        raise EmptyBankError("caption bank is empty")
    zx = encode_image(snapshot, x)
    z_bank, _ = _text_forward(snapshot, [list(c) for c in bank])
    scores = z_bank @ zx
    idx = int(np.argmax(scores))  # argmax returns the first maximum
    return idx, list(bank[idx])


def caption_scores(snapshot: ModelSnapshot, xs: np.ndarray,
                   bank: list[list[int]]) -> np.ndarray:
    """Score matrix (len(xs), len(bank)) of image-caption alignments."""
    if not bank:
        raise EmptyBankError("caption bank is empty")
    z_v, _ = _vision_forward(snapshot, np.asarray(xs, dtype=np.float64))
    z_bank, _ = _text_forward(snapshot, [list(c) for c in bank])
    return z_v @ z_bank.T


# ---------------------------------------------------------------------------
# Checkpoint format: "FLMM" magic, u16 format version, matrices in fixed
# order (u32 rows, u32 cols, row-major f64 LE), bridge-present u8, then
# temperature f64, version u64, trailing CRC32 of everything before it.
# ---------------------------------------------------------------------------

MAGIC = b"FLMM"
FORMAT_VERSION = 1


def _pack_matrix(m: np.ndarray) -> bytes:
    rows, cols = m.shape
    return struct.pack("<II", rows, cols) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def save_snapshot(snapshot: ModelSnapshot) -> bytes:
    out = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    for m in (snapshot.vision.w_base, snapshot.vision.adapter.a, snapshot.vision.adapter.b,
              snapshot.text.w_base, snapshot.text.adapter.a, snapshot.text.adapter.b,
              snapshot.token_embed):
        out.append(_pack_matrix(m))
    if snapshot.bridge is not None:
        out.append(b"\x01")
        out.append(_pack_matrix(snapshot.bridge))
    else:
        out.append(b"\x00")
    out.append(struct.pack("<d", snapshot.temperature))
    out.append(struct.pack("<Q", snapshot.version))
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def matrix(self) -> np.ndarray:
        rows, cols = struct.unpack("<II", self.take(8))
        flat = np.frombuffer(self.take(8 * rows * cols), dtype="<f8")
        return flat.reshape(rows, cols).astype(np.float64)


def load_snapshot(data: bytes) -> ModelSnapshot:
    if len(data) < 10:
        raise CheckpointError("checkpoint too short")
    body, crc_bytes = data[:-4], data[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    (fmt,) = struct.unpack("<H", r.take(2))
    if fmt != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {fmt}")
    w_v, a_v, b_v, w_t, a_t, b_t, tok = (r.matrix() for _ in range(7))
    (bridge_flag,) = r.take(1)
    bridge = r.matrix() if bridge_flag else None
    (temperature,) = struct.unpack("<d", r.take(8))
    (version,) = struct.unpack("<Q", r.take(8))
    # alpha is not stored; reconstruct via the default alpha = 2 * rank convention
    rank_v, rank_t = a_v.shape[0], a_t.shape[0]
    return ModelSnapshot(
        vision=TowerParams(w_base=w_v, adapter=AdapterPair(a_v, b_v, rank_v, 2.0 * rank_v)),
        text=TowerParams(w_base=w_t, adapter=AdapterPair(a_t, b_t, rank_t, 2.0 * rank_t)),
        token_embed=tok,
        bridge=bridge,
        temperature=temperature,
        version=version,
    )


def frozen_checksum(snapshot: ModelSnapshot) -> int:
    """CRC32 over the frozen blocks; must survive any training/aggregation."""
    acc = zlib.crc32(np.ascontiguousarray(snapshot.vision.w_base, dtype="<f8").tobytes())
    acc = zlib.crc32(np.ascontiguousarray(snapshot.text.w_base, dtype="<f8").tobytes(), acc)
    return zlib.crc32(np.ascontiguousarray(snapshot.token_embed, dtype="<f8").tobytes(), acc)

"""Privacy mechanisms: DP noise on uploads, pairwise-mask secure-aggregation
simulation, training-text sanitization, and output blacklist filtering.

The masking simulation preserves the functional contract (the server learns
only the sum of client deltas); real key agreement and crypto are out of
scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from flmm.aggregation import ClientUpdate
from flmm.errors import MaskingError, NumericError
from flmm.rng import SplitMix64, hash_text, mix_seed


@dataclass(frozen=True)
class PrivacyConfig:
    dp_enabled: bool = False
    clip_norm: float = 1.0
    noise_std: float = 0.0
    masking_enabled: bool = False
    blacklist: frozenset = frozenset()
    sensitive_patterns: frozenset = frozenset()
    refusal_sequence: tuple = (0,)

    def __post_init__(self):
        if self.dp_enabled and self.clip_norm <= 0:
            raise NumericError("clip_norm must be positive when DP is enabled")


def gaussian_mechanism(update: ClientUpdate, cfg: PrivacyConfig,
                       seed: int) -> ClientUpdate:
    """Clip the flattened deltas to L2 norm clip_norm, add N(0, noise_std^2)."""
    names = sorted(update.deltas)
    flats = [update.deltas[n].ravel() for n in names]
    flat = np.concatenate(flats)
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite deltas")
    norm = float(np.linalg.norm(flat))
    scale = min(1.0, cfg.clip_norm / norm) if norm > 0 else 1.0
    flat = flat * scale
    if cfg.noise_std > 0:
        rng = SplitMix64(seed)
        flat = flat + cfg.noise_std * rng.gaussians(flat.size)
    out = {}
    pos = 0
    for n in names:
        size = update.deltas[n].size
        out[n] = flat[pos:pos + size].reshape(update.deltas[n].shape)
        pos += size
    return replace(update, deltas=out)


@dataclass(frozen=True)
class MaskedUpdate:
    client_id: str
    base_version: int
    deltas: dict
    sample_count: int
    submitted_round: int
    mask_round: int


# Fixed-point grid for masking. Deltas and masks are snapped to multiples of
# 2**-GRID_BITS before any mask is applied, so every addition below is an
# exact integer operation inside the float64 mantissa and the masks cancel
# with zero floating-point tolerance. The snapping error (<= 2**-41 per
# entry) is far below every aggregation tolerance in use.
GRID_BITS = 40
_GRID = float(2 ** GRID_BITS)


def quantize_deltas(deltas: dict) -> dict:
    """Snap each delta matrix onto the masking fixed-point grid."""
    return {n: np.round(m * _GRID) / _GRID for n, m in deltas.items()}


def _grid_mask(rng: SplitMix64, shape: tuple) -> np.ndarray:
    """Uniform mask on [-1, 1) with every entry on the fixed-point grid."""
    u = rng.uniforms(shape[0] * shape[1]).reshape(shape)
    return np.round((2.0 * u - 1.0) * _GRID) / _GRID


def pairwise_mask(updates: list[ClientUpdate], round_seed: int) -> list[MaskedUpdate]:
    """Additive masking: each ordered pair (i < j) shares a mask added to i
    and subtracted from j, so the element-wise sum is bit-exactly preserved."""
    if len(updates) < 2:
        raise MaskingError("pairwise masking needs at least two clients")
    ordered = sorted(updates, key=lambda u: u.client_id)
    masked = {u.client_id: quantize_deltas(u.deltas) for u in ordered}
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            ui, uj = ordered[i], ordered[j]
            seed = mix_seed(round_seed, hash_text(ui.client_id), hash_text(uj.client_id))
            rng = SplitMix64(seed)
            for name in sorted(ui.deltas):
                if name not in uj.deltas:
                    continue
                m = _grid_mask(rng, ui.deltas[name].shape)
                masked[ui.client_id][name] += m
                masked[uj.client_id][name] -= m
    return [MaskedUpdate(u.client_id, u.base_version, masked[u.client_id],
                         u.sample_count, u.submitted_round, mask_round=round_seed)
            for u in ordered]


def apply_pairwise_masks(update: ClientUpdate, party_ids: list[str],
                         round_seed: int) -> ClientUpdate:
    """Client-side view of pairwise masking.

    Each client derives the shared pair masks from (round_seed, pair ids)
    alone, so no coordination beyond knowing the participant list is needed.
    Applying this to every participant's update is bit-identical to the
    joint ``pairwise_mask``.
    """
    ordered = sorted(party_ids)
    if len(ordered) < 2:
        raise MaskingError("pairwise masking needs at least two clients")
    deltas = quantize_deltas(update.deltas)
    me = update.client_id
    for other in ordered:
        if other == me:
            continue
        lo, hi = (me, other) if me < other else (other, me)
        rng = SplitMix64(mix_seed(round_seed, hash_text(lo), hash_text(hi)))
        sign = 1.0 if me == lo else -1.0
        for name in sorted(deltas):
            m = _grid_mask(rng, deltas[name].shape)
            deltas[name] += sign * m
    return replace(update, deltas=deltas)


def sanitize_text(tokens: list[int], cfg: PrivacyConfig) -> list[int]:
    """Drop sensitive token ids, keeping the order of the rest."""
    return [t for t in tokens if t not in cfg.sensitive_patterns]


def output_filter(caption: list[int], cfg: PrivacyConfig) -> tuple[list[int], bool]:
    """Replace any caption containing a blacklisted token by the refusal
    sequence; returns (caption, blocked)."""
    if any(t in cfg.blacklist for t in caption):
        return list(cfg.refusal_sequence), True
    return list(caption), False

"""Frequency-aware fingerprint corruption.

Bits are grouped into occurrence-frequency buckets; per-bucket false-negative
and false-positive tendencies of an encoder become sampling weights, and a
seeded sampler swaps ``k_eff`` active bits for ``k_eff`` inactive ones.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from decimal import Decimal
from functools import cached_property
from pathlib import Path

import numpy as np

from .molgraph import FP_BITS, Fingerprint

log = logging.getLogger(__name__)

BUCKET_NAMES = ("very_rare", "rare", "mid", "frequent")
DEFAULT_BOUNDARIES: tuple[tuple[float, float], ...] = ((0.0, 0.01), (0.01, 0.05), (0.05, 0.20), (0.20, 1.0))


def validate_boundaries(boundaries: Sequence[Sequence[float]]) -> tuple[tuple[float, float], ...]:
    """Intervals must tile [0, 1] in order: [lo, hi) each, the last closed at 1."""
    out = tuple((float(lo), float(hi)) for lo, hi in boundaries)
    if not out:
        raise ValueError("need at least one bucket")
    if out[0][0] != 0.0 or out[-1][1] != 1.0:
        raise ValueError("buckets must cover [0, 1]")
    for i, (lo, hi) in enumerate(out):
        if not lo < hi:
            raise ValueError(f"empty or inverted bucket [{lo}, {hi})")
        if i + 1 < len(out) and hi != out[i + 1][0]:
            raise ValueError(f"buckets overlap or leave a gap at {hi}")
    return out


def bit_frequencies(fingerprints: Iterable[Fingerprint], nbits: int = FP_BITS) -> np.ndarray:
    """Fraction of fingerprints in which each bit is on."""
    total = np.zeros(nbits, dtype=np.int64)
    n = 0
    for fp in fingerprints:
        if fp.nbits != nbits:
            raise ValueError("fingerprint length mismatch")
        total += fp.to_array()
        n += 1
    return total / n if n else total.astype(float)


def frequency_histogram(frequencies: np.ndarray, bins: int | Sequence[float] = 20) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of per-bit frequencies (the long tail of rarely active bits)."""
    return np.histogram(np.asarray(frequencies, dtype=float), bins=bins, range=(0.0, 1.0))


def build_buckets(frequencies, boundaries: Sequence[Sequence[float]] = DEFAULT_BOUNDARIES) -> np.ndarray:
    """Bucket index per bit: bucket r holds ``lo_r <= freq < hi_r`` (the last bucket includes 1)."""
    bounds = validate_boundaries(boundaries)
    freq = np.asarray(frequencies, dtype=float)
    if freq.ndim != 1 or np.any((freq < 0) | (freq > 1)) or np.any(np.isnan(freq)):
        raise ValueError("frequencies must be a vector of values in [0, 1]")
    edges = np.array([hi for _, hi in bounds[:-1]])
    return np.searchsorted(edges, freq, side="right").astype(np.int64)


@dataclass(frozen=True, eq=False)
class BucketStats:
    boundaries: tuple[tuple[float, float], ...]
    assignment: np.ndarray
    precision: tuple[float | None, ...]
    recall: tuple[float | None, ...]
    eta_minus: tuple[float, ...]
    eta_plus: tuple[float, ...]
    w_minus: tuple[float, ...] | None = None
    w_plus: tuple[float, ...] | None = None
    flags: tuple[str, ...] = ()
    names: tuple[str, ...] = BUCKET_NAMES

    def __post_init__(self):
        k = len(self.boundaries)
        if self.assignment.min(initial=0) < 0 or self.assignment.max(initial=0) >= k:
            raise ValueError("bucket assignment out of range")
        for name in ("eta_minus", "eta_plus"):
            vals = getattr(self, name)
            if len(vals) != k or any(not 0.0 <= v <= 1.0 for v in vals):
                raise ValueError(f"{name} must have {k} entries in [0, 1]")
        for name in ("w_minus", "w_plus"):
            vals = getattr(self, name)
            if vals is not None and (len(vals) != k or any(v <= 0 for v in vals)):
                raise ValueError(f"{name} must have {k} positive entries")

    @property
    def nbits(self) -> int:
        return self.assignment.size

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(np.bincount(self.assignment, minlength=len(self.boundaries)).tolist())

    def bits_of(self, bucket: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == bucket)

    @cached_property
    def bit_weights(self) -> tuple[np.ndarray, np.ndarray]:
        if self.w_minus is None or self.w_plus is None:
            raise ValueError("weights not derived yet; call derive_weights first")
        return np.asarray(self.w_minus)[self.assignment], np.asarray(self.w_plus)[self.assignment]

    def to_json(self) -> dict:
        buckets = []
        for r, (lo, hi) in enumerate(self.boundaries):
            entry = {
                "name": self.names[r] if r < len(self.names) else f"bucket{r}",
                "bits": self.bits_of(r).tolist(),
                "precision": self.precision[r],
                "recall": self.recall[r],
                "eta_minus": self.eta_minus[r],
                "eta_plus": self.eta_plus[r],
            }
            if self.w_minus is not None:
                entry["w_minus"] = self.w_minus[r]
                entry["w_plus"] = self.w_plus[r]
            buckets.append(entry)
        return {
            "nbits": self.nbits,
            "boundaries": [list(b) for b in self.boundaries],
            "buckets": buckets,
            "flags": list(self.flags),
        }


def estimate_bucket_stats(
    pairs: Iterable[tuple[Fingerprint, Fingerprint]],
    assignment: np.ndarray,
    boundaries: Sequence[Sequence[float]] = DEFAULT_BOUNDARIES,
) -> BucketStats:
    """Pool TP/FP/FN per bucket over ``(predicted, true)`` pairs.

    A bucket with no predicted positives gets ``eta_plus = 1``, one with no
    true positives gets ``eta_minus = 1``; both are recorded in ``flags``.
    """
    bounds = validate_boundaries(boundaries)
    assignment = np.asarray(assignment, dtype=np.int64)
    k = len(bounds)
    tp = np.zeros(k, dtype=np.int64)
    fp = np.zeros(k, dtype=np.int64)
    fn = np.zeros(k, dtype=np.int64)
    for pred, true in pairs:
        if pred.nbits != assignment.size or true.nbits != assignment.size:
            raise ValueError("fingerprint length does not match the bucket assignment")
        p = pred.to_array()
        t = true.to_array()
        tp += np.bincount(assignment[p & t], minlength=k)
        fp += np.bincount(assignment[p & ~t], minlength=k)
        fn += np.bincount(assignment[~p & t], minlength=k)
    precision: list[float | None] = []
    recall: list[float | None] = []
    flags: list[str] = []
    names = BUCKET_NAMES if k == len(BUCKET_NAMES) else tuple(f"bucket{r}" for r in range(k))
    for r in range(k):
        if tp[r] + fp[r]:
            precision.append(tp[r] / (tp[r] + fp[r]))
        else:
            precision.append(None)
            flags.append(f"precision_undefined:{names[r]}")
        if tp[r] + fn[r]:
            recall.append(tp[r] / (tp[r] + fn[r]))
        else:
            recall.append(None)
            flags.append(f"recall_undefined:{names[r]}")
    for flag in flags:
        log.warning("bucket statistics: %s", flag)
    return BucketStats(
        boundaries=bounds,
        assignment=assignment,
        precision=tuple(precision),
        recall=tuple(recall),
        eta_minus=tuple(1.0 if r is None else 1.0 - r for r in recall),
        eta_plus=tuple(1.0 if p is None else 1.0 - p for p in precision),
        flags=tuple(flags),
        names=names,
    )


def _weights(eta: Sequence[float], eps: float, alpha: float) -> tuple[float, ...]:
    lo, hi = min(eta), max(eta)
    if hi == lo:
        return tuple(float(eps) for _ in eta)
    return tuple(eps + alpha * (e - lo) / (hi - lo) for e in eta)


def derive_weights(stats: BucketStats, eps: float = 0.05, alpha: float = 1.0) -> BucketStats:
    """Min-max normalised tendencies scaled by ``alpha`` on top of the floor ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return replace(stats, w_minus=_weights(stats.eta_minus, eps, alpha), w_plus=_weights(stats.eta_plus, eps, alpha))


@dataclass(frozen=True)
class CorruptionConfig:
    p_corr: float = 0.5
    k_min: int = 1
    k_max: int = 8
    lam: float | None = None
    eps: float = 0.05
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_corr <= 1.0:
            raise ValueError("p_corr must be in [0, 1]")
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")
        if self.lam is not None and self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.eps <= 0 or self.alpha < 0:
            raise ValueError("eps must be positive and alpha non-negative")

    @property
    def rate(self) -> float:
        """Poisson rate; half the maximum budget unless set explicitly."""
        return self.lam if self.lam is not None else self.k_max / 2


def clipped_poisson_mean(lam: float, k_min: int, k_max: int) -> float:
    """E[clip(X, k_min, k_max)] for X ~ Poisson(lam)."""
    total = 0.0
    cdf = 0.0
    pmf = math.exp(-lam)
    for k in range(k_max):
        total += min(max(k, k_min), k_max) * pmf
        cdf += pmf
        pmf *= lam / (k + 1)
    return total + k_max * (1.0 - cdf)


def draw_budget(cfg: CorruptionConfig, rng: np.random.Generator) -> int:
    return int(min(max(rng.poisson(cfg.rate), cfg.k_min), cfg.k_max))


def weighted_sample(items: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct items, successive sampling proportional to weight (exponential race)."""
    if k <= 0:
        return items[:0]
    keys = rng.exponential(size=items.size) / weights
    if k >= items.size:
        return np.sort(items)
    return np.sort(items[np.argpartition(keys, k - 1)[:k]])


@dataclass(frozen=True, eq=False)
class CorruptionOutcome:
    fingerprint: Fingerprint
    gate: bool
    k: int
    k_eff: int
    dropped: np.ndarray = field(repr=False)
    added: np.ndarray = field(repr=False)


def corrupt_detailed(f: Fingerprint, stats: BucketStats, cfg: CorruptionConfig, rng: np.random.Generator) -> CorruptionOutcome:
    if f.nbits != stats.nbits:
        raise ValueError("fingerprint length does not match the bucket statistics")
    w_minus, w_plus = stats.bit_weights
    empty = np.zeros(0, dtype=np.int64)
    if rng.random() >= cfg.p_corr:
        return CorruptionOutcome(f, False, 0, 0, empty, empty)
    k = draw_budget(cfg, rng)
    arr = f.to_array()
    active = np.flatnonzero(arr)
    inactive = np.flatnonzero(~arr)
    k_eff = min(k, active.size, inactive.size)
    if k_eff == 0:
        return CorruptionOutcome(f, True, k, 0, empty, empty)
    drop = weighted_sample(active, w_minus[active], k_eff, rng)
    add = weighted_sample(inactive, w_plus[inactive], k_eff, rng)
    out = arr.copy()
    out[drop] = False
    out[add] = True
    return CorruptionOutcome(Fingerprint.from_array(out), True, k, k_eff, drop, add)


def corrupt(f: Fingerprint, stats: BucketStats, cfg: CorruptionConfig, rng: np.random.Generator) -> Fingerprint:
    """Gate, draw a budget, then swap equal numbers of active and inactive bits."""
    return corrupt_detailed(f, stats, cfg, rng).fingerprint


def record_rng(base_seed: int, index: int) -> np.random.Generator:
    """Independent per-record stream: ``base_seed XOR index``."""
    return np.random.default_rng(int(base_seed) ^ int(index))


# --------------------------------------------------------------------------- stats files


def save_stats(stats: BucketStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats.to_json(), indent=1) + "\n")


def _to_float(x) -> float | None:
    return None if x is None else float(x)


def stats_from_json(obj: dict, frequencies: np.ndarray | None = None) -> BucketStats:
    """Build stats from a parsed stats document.

    Tendencies are taken verbatim when given, otherwise ``1 - precision`` and
    ``1 - recall`` computed in decimal arithmetic. Buckets without recall or
    ``eta_minus`` reuse ``eta_plus`` and are flagged. Bit membership comes from
    ``bits``/``bit_range`` entries or, failing that, from ``frequencies``.
    """
    bounds = validate_boundaries(obj.get("boundaries", DEFAULT_BOUNDARIES))
    buckets = obj["buckets"]
    if len(buckets) != len(bounds):
        raise ValueError("number of buckets does not match the boundaries")
    nbits = int(obj.get("nbits", FP_BITS))
    flags = list(obj.get("flags", ()))
    names = tuple(b.get("name", f"bucket{r}") for r, b in enumerate(buckets))

    explicit = any("bits" in b or "bit_range" in b for b in buckets)
    if explicit:
        assignment = np.full(nbits, -1, dtype=np.int64)
        for r, b in enumerate(buckets):
            bits = b["bits"] if "bits" in b else range(*map(int, b["bit_range"]))
            idx = np.asarray(list(bits), dtype=np.int64)
            if np.any(assignment[idx] >= 0):
                raise ValueError("a bit is listed in two buckets")
            assignment[idx] = r
        if np.any(assignment < 0):
            raise ValueError("bucket bit lists do not cover every bit")
    elif frequencies is not None:
        assignment = build_buckets(frequencies, bounds)
    else:
        raise ValueError("stats file has no bit lists; bit frequencies are required")

    eta_m, eta_p, prec, rec = [], [], [], []
    for b in buckets:
        p = b.get("precision")
        r = b.get("recall")
        prec.append(_to_float(p))
        rec.append(_to_float(r))
        if "eta_plus" in b:
            ep = float(b["eta_plus"])
        elif p is not None:
            ep = float(Decimal(1) - Decimal(p))
        else:
            raise ValueError(f"bucket {b.get('name')} lacks precision and eta_plus")
        if "eta_minus" in b:
            em = float(b["eta_minus"])
        elif r is not None:
            em = float(Decimal(1) - Decimal(r))
        else:
            em = ep
            flags.append(f"recall_missing:{b.get('name')}")
        eta_m.append(em)
        eta_p.append(ep)
    w_m = tuple(float(b["w_minus"]) for b in buckets) if all("w_minus" in b for b in buckets) else None
    w_p = tuple(float(b["w_plus"]) for b in buckets) if all("w_plus" in b for b in buckets) else None
    return BucketStats(bounds, assignment, tuple(prec), tuple(rec), tuple(eta_m), tuple(eta_p), w_m, w_p, tuple(flags), names)


def load_stats(path: str | Path, frequencies: np.ndarray | None = None) -> BucketStats:
    obj = json.loads(Path(path).read_text(), parse_float=Decimal)
    return stats_from_json(obj, frequencies)


def packaged_stats_path() -> Path:
    """Published MassSpecGym bucket precisions bundled with the package."""
    return Path(__file__).with_name("data") / "msg_buckets.json"

"""Formula-distance reranking and Top-k evaluation (exact match, Tanimoto, MCES)."""

from __future__ import annotations

import dataclasses
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

from .decoding import Candidate
from .mces import mces_distance
from .molgraph import Fingerprint, Formula, MolecularGraph, canonical_hash, morgan_fingerprint, tanimoto

DEFAULT_KS = (1, 10)
IDENTITY_NOTE = "exact match by canonical graph hash (stands in for InChIKey equality)"


def formula_distance(f1: Formula | str, f2: Formula | str) -> int:
    """Sum of absolute per-element count differences, hydrogens included."""
    if isinstance(f1, str):
        f1 = Formula.parse(f1) if f1 else Formula()
    if isinstance(f2, str):
        f2 = Formula.parse(f2) if f2 else Formula()
    return sum(abs(f1.get(el, 0) - f2.get(el, 0)) for el in set(f1) | set(f2))


def rerank_key(c: Candidate) -> tuple:
    return (c.formula_distance, -c.log_prob, c.hash)


def rerank(candidates: Iterable[Candidate], target_formula: Formula | str) -> list[Candidate]:
    """Order by formula distance, then higher log-probability, then canonical hash."""
    scored = [dataclasses.replace(c, formula_distance=formula_distance(c.formula, target_formula)) for c in candidates]
    return sorted(scored, key=rerank_key)


@dataclass(frozen=True)
class RecordResult:
    id: str
    rank: int | None
    tanimoto: dict[int, float]
    mces: dict[int, int]
    mces_exact: bool = True
    n_candidates: int = 0

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "rank": self.rank,
            "n_candidates": self.n_candidates,
            "tanimoto": {str(k): v for k, v in self.tanimoto.items()},
            "mces": {str(k): v for k, v in self.mces.items()},
            "mces_exact": self.mces_exact,
        }


@dataclass(frozen=True)
class EvalReport:
    ks: tuple[int, ...]
    records: tuple[RecordResult, ...]
    accuracy: dict[int, float] = field(default_factory=dict)
    mean_mces: dict[int, float] = field(default_factory=dict)
    mean_tanimoto: dict[int, float] = field(default_factory=dict)

    @classmethod
    def aggregate(cls, records: Sequence[RecordResult], ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
        n = len(records)
        ks = tuple(ks)
        if n == 0:
            zero = {k: 0.0 for k in ks}
            return cls(ks, (), zero, dict(zero), dict(zero))
        acc = {k: 100.0 * sum(r.rank is not None and r.rank <= k for r in records) / n for k in ks}
        mces = {k: sum(r.mces[k] for r in records) / n for k in ks}
        tani = {k: sum(r.tanimoto[k] for r in records) / n for k in ks}
        return cls(ks, tuple(records), acc, mces, tani)

    def to_json(self) -> dict:
        return {
            "ks": list(self.ks),
            "identity": IDENTITY_NOTE,
            "n_records": len(self.records),
            "accuracy": {str(k): v for k, v in self.accuracy.items()},
            "mces": {str(k): v for k, v in self.mean_mces.items()},
            "tanimoto": {str(k): v for k, v in self.mean_tanimoto.items()},
            "inexact_mces": sum(not r.mces_exact for r in self.records),
            "records": [r.to_json() for r in self.records],
        }

    def table(self) -> str:
        cols = [f"Acc@{k} (%)" for k in self.ks] + [f"MCES@{k}" for k in self.ks] + [f"Tanimoto@{k}" for k in self.ks]
        vals = (
            [f"{self.accuracy[k]:.2f}" for k in self.ks]
            + [f"{self.mean_mces[k]:.2f}" for k in self.ks]
            + [f"{self.mean_tanimoto[k]:.2f}" for k in self.ks]
        )
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
        return f"{head}\n{row}\n(n = {len(self.records)}; {IDENTITY_NOTE})"


def _graph_of(c) -> MolecularGraph:
    return c.graph if isinstance(c, Candidate) else c


def evaluate_record(
    target: MolecularGraph,
    candidates: Sequence[Candidate | MolecularGraph],
    ks: Sequence[int] = DEFAULT_KS,
    record_id: str = "",
    mces_penalty: int = 0,
    fingerprint: Callable[[MolecularGraph], Fingerprint] = morgan_fingerprint,
    time_budget: float | None = 2.0,
    node_budget: int | None = None,
) -> RecordResult:
    """Top-k metrics for one target against its already-ordered candidates."""
    ks = tuple(sorted(ks))
    top = [_graph_of(c) for c in candidates[: ks[-1]]]
    target_hash = canonical_hash(target)
    rank = None
    for i, g in enumerate(top, 1):
        h = candidates[i - 1].hash if isinstance(candidates[i - 1], Candidate) else canonical_hash(g)
        if h == target_hash:
            rank = i
            break
    fp_t = fingerprint(target)
    sims = [tanimoto(fp_t, fingerprint(g)) for g in top]
    dists: list[int] = []
    exact_flags: list[bool] = []
    best = None
    for g in top:
        # a candidate that cannot beat the running minimum may stop at its bound
        res = mces_distance(target, g, threshold=best, time_budget=time_budget, node_budget=node_budget)
        dists.append(res.value)
        exact_flags.append(res.exact)
        if res.exact and (best is None or res.value < best):
            best = res.value
    tani: dict[int, float] = {}
    mces: dict[int, int] = {}
    exact = True
    for k in ks:
        if not top[:k]:
            tani[k] = 0.0
            mces[k] = target.num_bonds + mces_penalty
            continue
        tani[k] = max(sims[:k])
        i = min(range(min(k, len(dists))), key=lambda j: (dists[j], j))
        mces[k] = dists[i]
        exact = exact and exact_flags[i]
    return RecordResult(record_id, rank, tani, mces, exact, len(candidates))


def evaluate(
    records: Iterable[tuple[MolecularGraph, Sequence[Candidate | MolecularGraph]]],
    ks: Sequence[int] = DEFAULT_KS,
    mces_penalty: int = 0,
    ids: Sequence[str] | None = None,
) -> EvalReport:
    results = []
    for n, (target, cands) in enumerate(records):
        rid = ids[n] if ids is not None else str(n)
        results.append(evaluate_record(target, cands, ks, rid, mces_penalty))
    return EvalReport.aggregate(results, ks)

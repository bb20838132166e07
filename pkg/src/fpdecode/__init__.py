"""Fingerprint-to-structure decoding toolkit.

Molecular graphs and Morgan fingerprints, a hex-continuation SELFIES-style
grammar, bucketed fingerprint corruption, structure-aware decoder losses,
constrained beam search with a small reference model, and formula-reranked
evaluation.
"""

__version__ = "0.1.0"

from .molgraph import (  # noqa: E402
    Atom,
    Fingerprint,
    Formula,
    MolecularGraph,
    ProbFingerprint,
    canonical_hash,
    formula_of,
    morgan_fingerprint,
    tanimoto,
)
from .selfies import Vocabulary, decode, encode  # noqa: E402

__all__ = [
    "Atom",
    "Fingerprint",
    "Formula",
    "MolecularGraph",
    "ProbFingerprint",
    "Vocabulary",
    "canonical_hash",
    "decode",
    "encode",
    "formula_of",
    "morgan_fingerprint",
    "tanimoto",
]

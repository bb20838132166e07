"""Small fingerprint-conditioned autoregressive scorer with factor-composed token embeddings.

Token embedding (gates are fixed per token)::

    h = e_part[part] + e_elem[elem] + e_bond[bond]
        + [q > 0] e_rb[q] + [d >= 0] e_digit[d] + [count >= tau] e_res[class]

The prefix is pooled with learned relative-offset scalars, the condition enters
as a linear bias, and one tanh layer feeds the output projection::

    u_t = sum_{i<=t} gamma[t-i] h_i / (t+1)
    z_t = tanh(u_t A + f W_c + p_t + b) W_o + b_o

Gradients are written out by hand; training uses Adam.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corruption import BucketStats, CorruptionConfig, corrupt
from .molgraph import FP_BITS, Fingerprint
from .selfies import DEFAULT_TAU, Part, Vocabulary
from .structure_loss import LossBreakdown, LossWeights, decoder_loss_from_logits, factor_tables

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fpdecode-checkpoint"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("e_part", "e_elem", "e_bond", "e_rb", "e_digit", "e_res", "gamma", "pos", "A", "W_c", "b", "W_o", "b_o")


@dataclass(frozen=True, eq=False)
class TokenIndex:
    """Per-token factor indices and gates, fixed by the vocabulary and corpus counts."""

    part: np.ndarray
    elem: np.ndarray
    bond: np.ndarray
    rb: np.ndarray
    digit: np.ndarray
    res: np.ndarray
    rb_gate: np.ndarray
    digit_gate: np.ndarray
    res_gate: np.ndarray
    n_elem: int
    n_res: int

    @classmethod
    def build(cls, vocab: Vocabulary, tau: int = DEFAULT_TAU) -> TokenIndex:
        tables = factor_tables(vocab)
        v = len(vocab)
        part = np.array([int(f.part) for f in vocab.factors])
        bond = np.array([int(f.bond_prefix) for f in vocab.factors])
        rb = np.array([f.rb_order if f.part in (Part.RING, Part.BRANCH) else 0 for f in vocab.factors])
        digit = np.array([f.hex_digit if f.part is Part.HEX else -1 for f in vocab.factors])
        res = np.asarray(vocab.canonical_index)
        counts = np.asarray(vocab.class_counts)[res] if v else np.zeros(0)
        return cls(
            part=part,
            elem=tables.category["elem"],
            bond=bond,
            rb=rb,
            digit=np.maximum(digit, 0),
            res=res,
            rb_gate=(rb > 0).astype(float),
            digit_gate=(digit >= 0).astype(float),
            res_gate=(counts >= tau).astype(float),
            n_elem=len(tables.labels["elem"]),
            n_res=len(vocab.canonical_keys),
        )


def _b64(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _unb64(obj: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(obj["data"]), dtype="<f8").reshape(obj["shape"]).copy()


class FactorEmbeddingModel:
    """Reference scoring model; immutable once training has finished."""

    def __init__(self, vocab: Vocabulary, params: dict[str, np.ndarray], index: TokenIndex, max_len: int):
        self.vocab = vocab
        self.params = params
        self.index = index
        self.max_len = max_len
        self._table: np.ndarray | None = None

    @classmethod
    def initialize(
        cls,
        vocab: Vocabulary,
        hidden: int = 64,
        max_len: int = 64,
        tau: int = DEFAULT_TAU,
        nbits: int = FP_BITS,
        seed: int = 0,
        init_scale: float = 0.1,
    ) -> FactorEmbeddingModel:
        if len(vocab) == 0:
            raise ValueError("empty vocabulary")
        index = TokenIndex.build(vocab, tau)
        rng = np.random.default_rng(seed)

        def normal(*shape, scale=init_scale):
            return rng.normal(0.0, scale, size=shape)

        params = {
            "e_part": normal(len(Part), hidden),
            "e_elem": normal(index.n_elem, hidden),
            "e_bond": normal(3, hidden),
            "e_rb": normal(4, hidden),
            "e_digit": normal(16, hidden),
            "e_res": normal(index.n_res, hidden),
            "gamma": np.ones(max_len + 1),
            "pos": normal(max_len + 1, hidden),
            "A": normal(hidden, hidden, scale=1.0 / math.sqrt(hidden)),
            "W_c": normal(nbits, hidden),
            "b": np.zeros(hidden),
            # zero output layer: logits start uniform, so initial CE is ln|V|
            "W_o": np.zeros((hidden, len(vocab))),
            "b_o": np.zeros(len(vocab)),
        }
        return cls(vocab, params, index, max_len)

    @property
    def hidden(self) -> int:
        return self.params["A"].shape[0]

    @property
    def nbits(self) -> int:
        return self.params["W_c"].shape[0]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward pieces

    def token_table(self, params: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """All token embeddings, one row per vocabulary id."""
        if params is None and self._table is not None:
            return self._table
        p = self.params if params is None else params
        ix = self.index
        table = (
            p["e_part"][ix.part]
            + p["e_elem"][ix.elem]
            + p["e_bond"][ix.bond]
            + ix.rb_gate[:, None] * p["e_rb"][ix.rb]
            + ix.digit_gate[:, None] * p["e_digit"][ix.digit]
            + ix.res_gate[:, None] * p["e_res"][ix.res]
        )
        if params is None:
            self._table = table
        return table

    def _mix(self, length: int, gamma: np.ndarray) -> np.ndarray:
        t = np.arange(length)
        offset = t[:, None] - t[None, :]
        mix = np.where(offset >= 0, gamma[np.clip(offset, 0, None)], 0.0)
        return mix / (t[:, None] + 1.0)

    def _condition(self, conditions: np.ndarray) -> np.ndarray:
        return conditions @ self.params["W_c"]

    def forward(self, inputs: np.ndarray, conditions: np.ndarray, params=None, keep: bool = False):
        """Logits for every position of a ``(B, T)`` id batch conditioned on ``(B, nbits)``."""
        p = self.params if params is None else params
        b_sz, length = inputs.shape
        if length > self.max_len + 1:
            raise ValueError(f"sequence length {length} exceeds model limit {self.max_len + 1}")
        table = self.token_table(params)
        emb = table[inputs]
        mix = self._mix(length, p["gamma"])
        u = np.einsum("ti,bih->bth", mix, emb)
        cond = conditions @ p["W_c"]
        pre = u @ p["A"] + cond[:, None, :] + p["pos"][:length] + p["b"]
        hid = np.tanh(pre)
        logits = hid @ p["W_o"] + p["b_o"]
        if keep:
            return logits, {"emb": emb, "mix": mix, "u": u, "hid": hid}
        return logits

    def backward(self, inputs: np.ndarray, conditions: np.ndarray, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        ix = self.index
        emb, mix, u, hid = cache["emb"], cache["mix"], cache["u"], cache["hid"]
        length = inputs.shape[1]
        g: dict[str, np.ndarray] = {}
        g["W_o"] = np.einsum("bth,btv->hv", hid, dlogits)
        g["b_o"] = dlogits.sum(axis=(0, 1))
        dpre = (dlogits @ p["W_o"].T) * (1.0 - hid**2)
        g["A"] = np.einsum("bth,btk->hk", u, dpre)
        du = dpre @ p["A"].T
        g["W_c"] = conditions.T @ dpre.sum(axis=1)
        g["b"] = dpre.sum(axis=(0, 1))
        g["pos"] = np.zeros_like(p["pos"])
        g["pos"][:length] = dpre.sum(axis=0)

        dmix = np.einsum("bth,bih->ti", du, emb)
        t = np.arange(length)
        offset = t[:, None] - t[None, :]
        lower = offset >= 0
        g["gamma"] = np.zeros_like(p["gamma"])
        np.add.at(g["gamma"], offset[lower], (dmix / (t[:, None] + 1.0))[lower])

        demb = np.einsum("ti,bth->bih", mix, du)
        dtable = np.zeros((len(self.vocab), emb.shape[-1]))
        np.add.at(dtable, inputs.reshape(-1), demb.reshape(-1, emb.shape[-1]))
        for name, idx, gate in (
            ("e_part", ix.part, None),
            ("e_elem", ix.elem, None),
            ("e_bond", ix.bond, None),
            ("e_rb", ix.rb, ix.rb_gate),
            ("e_digit", ix.digit, ix.digit_gate),
            ("e_res", ix.res, ix.res_gate),
        ):
            g[name] = np.zeros_like(p[name])
            rows = dtable if gate is None else dtable * gate[:, None]
            np.add.at(g[name], idx, rows)
        return g

    # -- scoring interface

    def score_batch(self, condition: Fingerprint | np.ndarray, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Next-token logits ``(len(prefixes), V)``; all prefixes must share one length."""
        if not prefixes:
            return np.zeros((0, len(self.vocab)))
        length = len(prefixes[0])
        if any(len(x) != length for x in prefixes):
            raise ValueError("prefixes in one batch must have equal length")
        if length > self.max_len:
            raise ValueError(f"prefix length {length} exceeds model limit {self.max_len}")
        p = self.params
        f = condition.to_array().astype(float) if isinstance(condition, Fingerprint) else np.asarray(condition, float)
        seq = np.empty((len(prefixes), length + 1), dtype=np.int64)
        seq[:, 0] = self.vocab.bos
        if length:
            seq[:, 1:] = np.asarray(prefixes, dtype=np.int64)
        emb = self.token_table()[seq]
        weights = p["gamma"][length - np.arange(length + 1)] / (length + 1.0)
        u = np.einsum("i,bih->bh", weights, emb)
        pre = u @ p["A"] + f @ p["W_c"] + p["pos"][length] + p["b"]
        return np.tanh(pre) @ p["W_o"] + p["b_o"]

    def score(self, condition, prefix: Sequence[int]) -> np.ndarray:
        return self.score_batch(condition, [list(prefix)])[0]

    # -- persistence

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "vocab_digest": self.vocab.digest(),
            "vocab": self.vocab.dumps(),
            "max_len": self.max_len,
            "gates": {"res": self.index.res_gate.astype(int).tolist()},
            "params": {name: _b64(self.params[name]) for name in PARAM_NAMES},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocabulary | None = None) -> FactorEmbeddingModel:
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a model checkpoint")
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
        stored = Vocabulary.loads(obj["vocab"])
        if vocab is None:
            vocab = stored
        elif vocab.digest() != obj["vocab_digest"]:
            raise ValueError(f"vocabulary hash mismatch: checkpoint {obj['vocab_digest']}, vocabulary {vocab.digest()}")
        index = TokenIndex.build(vocab)
        res_gate = np.asarray(obj["gates"]["res"], dtype=float)
        if res_gate.shape != index.res_gate.shape:
            raise ValueError("checkpoint gates do not match the vocabulary")
        index = TokenIndex(**{**index.__dict__, "res_gate": res_gate})
        params = {name: _unb64(obj["params"][name]) for name in PARAM_NAMES}
        return cls(vocab, params, index, int(obj["max_len"]))

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary | None = None) -> FactorEmbeddingModel:
        return cls.from_json(json.loads(Path(path).read_text()), vocab)


# -- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    epochs: int = 300
    hidden: int = 64
    tau: int = DEFAULT_TAU
    batch_size: int = 32
    max_len: int = 64
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    corruption: CorruptionConfig | None = None
    init_scale: float = 0.1
    warmup_steps: int = 150
    beta1: float = 0.9

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.hidden < 1 or self.batch_size < 1 or self.max_len < 1 or self.warmup_steps < 0:
            raise ValueError("invalid training configuration")


@dataclass
class TrainResult:
    model: FactorEmbeddingModel
    history: list[LossBreakdown]


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * scale
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _batch(vocab: Vocabulary, seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs, targets (sequence plus EOS) and a validity mask."""
    length = max(len(s) for s in seqs) + 1
    inputs = np.full((len(seqs), length), vocab.pad, dtype=np.int64)
    targets = np.full((len(seqs), length), vocab.pad, dtype=np.int64)
    valid = np.zeros((len(seqs), length), dtype=bool)
    for r, s in enumerate(seqs):
        n = len(s)
        inputs[r, 0] = vocab.bos
        inputs[r, 1 : n + 1] = s
        targets[r, :n] = s
        targets[r, n] = vocab.eos
        valid[r, : n + 1] = True
    return inputs, targets, valid


def _as_ids(vocab: Vocabulary, seq) -> list[int]:
    if isinstance(seq, str):
        return vocab.tokenize(seq)
    seq = list(seq)
    if seq and isinstance(seq[0], str):
        return vocab.ids(seq)
    return [int(i) for i in seq]


def train_reference_model(
    corpus: Sequence[tuple[Fingerprint, Sequence]],
    vocab: Vocabulary,
    cfg: TrainConfig = TrainConfig(),
    stats: BucketStats | None = None,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Minimise token CE plus structural factor CEs over ``corpus``.

    With ``cfg.corruption`` set, conditions are re-corrupted every epoch using
    ``stats``. Residual-embedding gates use ``vocab``'s corpus counts as given.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty training corpus")
    if cfg.corruption is not None and stats is None:
        raise ValueError("online corruption needs bucket statistics")
    seqs = [_as_ids(vocab, s) for _, s in corpus]
    too_long = [i for i, s in enumerate(seqs) if len(s) + 1 > cfg.max_len + 1]
    if too_long:
        raise ValueError(f"records {too_long[:5]} exceed max_len {cfg.max_len}")
    nbits = len(corpus[0][0])
    clean = [f for f, _ in corpus]
    dense = np.stack([f.to_array().astype(float) for f in clean])

    model = FactorEmbeddingModel.initialize(
        vocab, hidden=cfg.hidden, max_len=cfg.max_len, tau=cfg.tau, nbits=nbits, seed=cfg.seed, init_scale=cfg.init_scale
    )
    opt = _Adam(model.params, cfg.lr, b1=cfg.beta1)
    order_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    history: list[LossBreakdown] = []
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.corruption is not None:
            conds = np.stack([corrupt(f, stats, cfg.corruption, noise_rng).to_array().astype(float) for f in clean])
        else:
            conds = dense
        order = order_rng.permutation(len(corpus))
        sums = np.zeros(6)
        n_pos = 0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            inputs, targets, valid = _batch(vocab, [seqs[r] for r in rows])
            model._table = None
            logits, cache = model.forward(inputs, conds[rows], keep=True)
            loss, dlogits = decoder_loss_from_logits(logits, targets, vocab, cfg.weights, valid)
            if not np.isfinite(loss.total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {step}: {loss.as_dict()}; "
                    f"max |logit| = {np.nanmax(np.abs(logits)):.3g}"
                )
            grads = model.backward(inputs, conds[rows], cache, dlogits)
            # linear warmup keeps early Adam steps from overshooting the plateau
            opt.step(model.params, grads, min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0)
            step += 1
            if on_step is not None:
                on_step(step, loss)
            k = int(valid.sum())
            sums += k * np.array([loss.ce, loss.elem, loss.bond, loss.ring, loss.branch, loss.total])
            n_pos += k
        avg = sums / n_pos
        history.append(LossBreakdown(*avg.tolist()))
    model._table = None
    return TrainResult(model, history)


def sequence_loss(model: FactorEmbeddingModel, corpus, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Position-averaged loss of ``model`` on ``corpus`` (no parameter update)."""
    corpus = list(corpus)
    seqs = [_as_ids(model.vocab, s) for _, s in corpus]
    inputs, targets, valid = _batch(model.vocab, seqs)
    conds = np.stack([f.to_array().astype(float) for f, _ in corpus])
    logits = model.forward(inputs, conds)
    loss, _ = decoder_loss_from_logits(logits, targets, model.vocab, weights, valid, grad=False)
    return loss

"""Knowledge-neuron identification by integrated gradients over FFN activations.

Attribution of neuron ``(l, i)`` for target token ``t`` integrates the
gradient of ``P(t)`` along the straight path from the baseline activation to
the observed one, using a right-endpoint Riemann sum with ``N`` steps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, IdentificationError, NumericError, SequenceLengthError, StaleCacheError
from .model import TinyTransformer

Neuron = tuple[int, int]


@dataclass(frozen=True)
class AttributionConfig:
    steps: int = 20
    coarse_ratio: float = 0.2
    share_fraction: float = 0.2
    baseline: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if not 0.0 < self.coarse_ratio < 1.0:
            raise ConfigError("coarse_ratio must lie in (0, 1)")
        if not 0.0 < self.share_fraction <= 1.0:
            raise ConfigError("share_fraction must lie in (0, 1]")
        if not np.isfinite(self.baseline):
            raise ConfigError("baseline must be finite")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def path_points(w_bar: float, steps: int, baseline: float = 0.0) -> np.ndarray:
    """Activation values visited by the Riemann sum, ``j = 1..steps``."""
    j = np.arange(1, steps + 1, dtype=np.float64)
    return baseline + j / steps * (w_bar - baseline)


def riemann_ig(grad_fn, w_bar: float, steps: int, baseline: float = 0.0) -> float:
    """Right-endpoint Riemann estimate of the path integral of ``grad_fn``."""
    total = 0.0
    for point in path_points(w_bar, steps, baseline):
        total += float(grad_fn(point))
    return (w_bar - baseline) / steps * total


def _check_finite(w_bar) -> None:
    if not np.all(np.isfinite(w_bar)):
        raise NumericError("activation to attribute is not finite")


# --- reference path: one full forward per integration step -------------------------

def attribute_neuron(
    model: TinyTransformer,
    tokens: Sequence[int],
    target: int,
    layer: int,
    neuron: int,
    position: int = -1,
    config: AttributionConfig = AttributionConfig(),
) -> float:
    """Integrated-gradient attribution of one neuron at one position.

    ``P`` is the softmax probability of ``target`` at the final position.
    """
    cfg = model.config
    if not 0 <= target < cfg.vocab_size:
        raise ConfigError(f"target token {target} out of vocabulary range")
    if not (0 <= layer < cfg.n_layers and 0 <= neuron < cfg.d_ff):
        raise ConfigError(f"neuron ({layer}, {neuron}) out of range")
    if not -len(tokens) <= position < len(tokens):
        raise ConfigError(f"position {position} out of range")
    _, trace = model.forward(tokens, capture=True)
    w_bar = float(trace.raw[layer][position, neuron])
    _check_finite(w_bar)
    if w_bar == config.baseline:
        return 0.0

    def grad_at(point):
        tape = ad.Tape()
        w = tape.variable(point)
        logits, _ = model.forward(tokens, clamps={(layer, neuron, position): w})
        prob = ad.softmax(ad.take(logits, -1))
        return ad.grad(ad.take(prob, target), [w])[w]

    return riemann_ig(grad_at, w_bar, config.steps, config.baseline)


def greedy_prefixes(model: TinyTransformer, query: Sequence[int], m: int) -> list[list[int]]:
    """Prefixes ``[query, a_1..a_{k-1}]`` for ``k = 1..m`` with greedy ``a``."""
    if m < 1:
        raise ConfigError("answer must have at least one token")
    if len(query) + m - 1 > model.config.max_seq_len:
        raise SequenceLengthError("answer does not fit in the context window")
    gen, _ = model.generate_greedy(query, m - 1, capture=False) if m > 1 else ([], [])
    if len(gen) < m - 1:
        raise SequenceLengthError(f"generation stopped after {len(gen)} of {m} steps")
    seq = list(query)
    return [seq + [int(t) for t in gen[:k]] for k in range(m)]


def attribute_multi_token(
    model: TinyTransformer,
    query: Sequence[int],
    answer: Sequence[int],
    layer: int,
    neuron: int,
    config: AttributionConfig = AttributionConfig(),
    *,
    eoa: int | None = None,
) -> float:
    """Mean per-step attribution for a multi-token answer.

    Step ``k`` scores ``answer[k]`` given the query plus the greedily generated
    tokens so far, at that prefix's final position. Generation stopping on
    ``eoa`` before ``len(answer)`` steps raises :class:`SequenceLengthError`.
    """
    prefixes = _checked_prefixes(model, query, len(answer), eoa)
    vals = [attribute_neuron(model, pre, gt, layer, neuron, -1, config) for pre, gt in zip(prefixes, answer)]
    return float(sum(vals) / len(vals))


def _checked_prefixes(model, query, m, eoa):
    prefixes = greedy_prefixes(model, query, m)
    if eoa is not None:
        for pre in prefixes[1:]:
            if pre[-1] == eoa:
                raise SequenceLengthError("generation reached end-of-answer before the answer was complete")
    return prefixes


# --- batched path: every neuron of a layer in one tape ------------------------------

def attribution_map(
    model: TinyTransformer,
    tokens: Sequence[int],
    target: int,
    config: AttributionConfig = AttributionConfig(),
    neurons: Iterable[Neuron] | None = None,
) -> np.ndarray:
    """Attribution of every neuron at the final position, shape ``(L, d_ff)``.

    Each row of the batched tail recompute clamps a single neuron to a single
    path point, so one gradient call covers ``d_ff * N`` integration samples.
    ``neurons`` restricts the work to a subset; other entries stay 0.
    """
    cfg = model.config
    if not 0 <= target < cfg.vocab_size:
        raise ConfigError(f"target token {target} out of vocabulary range")
    if neurons is None:
        chosen = {l: np.arange(cfg.d_ff) for l in range(cfg.n_layers)}
    else:
        chosen = {}
        for l, i in sorted(set(map(tuple, neurons))):
            if not (0 <= l < cfg.n_layers and 0 <= i < cfg.d_ff):
                raise ConfigError(f"neuron ({l}, {i}) out of range")
            chosen.setdefault(l, []).append(i)
        chosen = {l: np.array(v) for l, v in chosen.items()}
    cache = model.tail_cache(tokens)
    N = config.steps
    out = np.zeros((cfg.n_layers, cfg.d_ff))
    for l, sel in chosen.items():
        F = len(sel)
        cols = np.tile(sel, N)
        rows = np.arange(N * F)
        w_bar = cache.acts[l]
        _check_finite(w_bar)
        pts = np.stack([path_points(float(w_bar[i]), N, config.baseline) for i in sel], axis=1)  # (N, F)
        acts = np.tile(w_bar, (N * F, 1))
        acts[rows, cols] = pts.reshape(-1)
        tape = ad.Tape()
        A = tape.variable(acts)
        prob = ad.softmax(model.tail_logits(cache, l, A))
        picked = ad.sum(ad.take(prob, (rows, np.full(N * F, target))))
        g = ad.grad(picked, [A])[A][rows, cols].reshape(N, F)
        tape.release()
        out[l, sel] = (w_bar[sel] - config.baseline) / N * g.sum(axis=0)
    return out


def multi_token_map(
    model: TinyTransformer,
    query: Sequence[int],
    answer: Sequence[int],
    config: AttributionConfig = AttributionConfig(),
    *,
    eoa: int | None = None,
) -> np.ndarray:
    prefixes = _checked_prefixes(model, query, len(answer), eoa)
    maps = [attribution_map(model, pre, gt, config) for pre, gt in zip(prefixes, answer)]
    return np.mean(maps, axis=0)


# --- thresholding -----------------------------------------------------------------

def coarse_set(attr: np.ndarray, ratio: float) -> frozenset[Neuron]:
    """Neurons whose attribution exceeds ``ratio`` times the map's maximum."""
    cut = ratio * float(np.max(attr))
    ls, is_ = np.nonzero(attr > cut)
    return frozenset(zip(ls.tolist(), is_.tolist()))


def shared_members(coarse: Sequence[frozenset], share: float) -> frozenset[Neuron]:
    """Neurons present in at least ``share * len(coarse)`` coarse sets."""
    need = share * len(coarse)
    counts: dict[Neuron, int] = {}
    for s in coarse:
        for n in s:
            counts[n] = counts.get(n, 0) + 1
    return frozenset(n for n, c in counts.items() if c >= need)


@dataclass(frozen=True)
class KNSet:
    fact_id: str
    members: frozenset
    coarse_sets: tuple = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.members)

    def sorted_members(self) -> list[Neuron]:
        return sorted(self.members)

    def to_record(self) -> dict:
        return {
            "fact": self.fact_id,
            "members": [list(n) for n in self.sorted_members()],
            "coarse_sizes": [len(s) for s in self.coarse_sets],
            "coarse_sets": [[list(n) for n in sorted(s)] for s in self.coarse_sets],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "KNSet":
        members = frozenset(tuple(n) for n in rec["members"])
        coarse = tuple(frozenset(tuple(n) for n in s) for s in rec.get("coarse_sets", []))
        return cls(rec["fact"], members, coarse)


def select_kns(fact_id: str, maps: Sequence[np.ndarray], config: AttributionConfig) -> KNSet:
    coarse = tuple(coarse_set(m, config.coarse_ratio) for m in maps)
    members = shared_members(coarse, config.share_fraction)
    if not members:
        diag = [{"query": q, "coarse_size": len(c), "max_attr": float(np.max(m))} for q, (c, m) in enumerate(zip(coarse, maps))]
        raise IdentificationError(f"no knowledge neurons found for fact {fact_id}", diag)
    return KNSet(fact_id, members, coarse)


def identify_kns(
    model: TinyTransformer,
    fact_id: str,
    queries: Sequence[Sequence[int]],
    answer: Sequence[int],
    config: AttributionConfig = AttributionConfig(),
    *,
    eoa: int | None = None,
) -> KNSet:
    """KN set of a fact from its encoded query prompts and answer tokens."""
    if not queries:
        raise ConfigError("identification needs at least one query")
    maps = [multi_token_map(model, q, answer, config, eoa=eoa) for q in queries]
    return select_kns(fact_id, maps, config)


# --- cache -------------------------------------------------------------------------

class KNCache:
    """Line-delimited KN sets keyed by (checkpoint digest, fact id, config digest)."""

    def __init__(self, path, checkpoint: str, config: AttributionConfig):
        self.path = Path(path)
        self.checkpoint = checkpoint
        self.config_hash = config.digest()
        self._sets: dict[str, KNSet] = {}
        self._failed: dict[str, list] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["checkpoint"] != self.checkpoint or rec["config"] != self.config_hash:
                raise StaleCacheError(f"{self.path} was built for a different checkpoint or attribution config")
            if rec.get("failed"):
                self._failed[rec["fact"]] = rec.get("diagnostics", [])
            else:
                self._sets[rec["fact"]] = KNSet.from_record(rec)

    def __contains__(self, fact_id: str) -> bool:
        return fact_id in self._sets or fact_id in self._failed

    def get(self, fact_id: str) -> KNSet | None:
        return self._sets.get(fact_id)

    @property
    def sets(self) -> dict[str, KNSet]:
        return dict(self._sets)

    @property
    def failed(self) -> dict[str, list]:
        return dict(self._failed)

    def _head(self, fact_id: str) -> dict:
        return {"checkpoint": self.checkpoint, "config": self.config_hash, "fact": fact_id}

    def add(self, kn: KNSet) -> None:
        self._sets[kn.fact_id] = kn

    def add_failure(self, fact_id: str, diagnostics: list) -> None:
        self._failed[fact_id] = diagnostics

    def save(self) -> None:
        """Rewrite the file with records in sorted fact order."""
        lines = []
        for fid in sorted(set(self._sets) | set(self._failed)):
            rec = self._head(fid)
            if fid in self._sets:
                rec.update(self._sets[fid].to_record())
            else:
                rec.update({"failed": True, "diagnostics": self._failed[fid]})
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def sets_by_fact(sets: Iterable[KNSet]) -> dict[str, KNSet]:
    return {s.fact_id: s for s in sets}

"""KN scores, enhance/suppress interventions and the metrics built on them."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BaselineError,
    ConfigError,
    EmptySetError,
    InterventionConflictError,
    SamplingError,
    UndefinedMetricError,
)
from .model import ForwardTrace, HookSpec, TinyTransformer

SHORTCUT_CLASSES = ("TT", "TF", "FT", "FF")
TAU_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)


# --- KN scores ---------------------------------------------------------------------

def score_positions(traces: Sequence[ForwardTrace], mode: str = "steps") -> list[tuple[int, int]]:
    """(trace index, position) pairs scored.

    ``steps``: the final position of every decoding step (the first of which
    is the last prompt token). ``last_prompt``: only the last prompt token.
    """
    if not traces:
        raise EmptySetError("no decoding step was captured")
    if mode == "steps":
        return [(k, t.activations[0].shape[0] - 1) for k, t in enumerate(traces)]
    if mode == "last_prompt":
        return [(0, traces[0].activations[0].shape[0] - 1)]
    raise ConfigError(f"unknown position mode {mode!r}")


def kn_score(traces: Sequence[ForwardTrace], members: Iterable, mode: str = "steps") -> float:
    """Flat mean of the member activations over the scored positions."""
    members = sorted(members)
    if not members:
        raise EmptySetError("KN set is empty")
    vals = [traces[k].activations[l][pos, i] for k, pos in score_positions(traces, mode) for l, i in members]
    return float(np.mean(vals))


@dataclass(frozen=True)
class KNScoreRecord:
    fact_id: str
    context: str
    score: float
    positions: int


# --- interventions -----------------------------------------------------------------

TARGETS = ("w1", "w2", "w12", "wr")
MODES = ("enhance", "suppress")


@dataclass(frozen=True)
class InterventionSpec:
    target: str
    mode: str
    factor: float = 2.0

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ConfigError(f"unknown intervention target {self.target!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown intervention mode {self.mode!r}")
        if self.mode == "enhance" and not self.factor > 1.0:
            raise ConfigError("enhancement factor must exceed 1")

    @property
    def name(self) -> str:
        return f"{self.mode}:{self.target}"


def random_neurons(exclude: Iterable, size: int, n_layers: int, d_ff: int, seed) -> frozenset:
    """``size`` neurons drawn uniformly without replacement outside ``exclude``."""
    banned = set(map(tuple, exclude))
    pool = [(l, i) for l in range(n_layers) for i in range(d_ff) if (l, i) not in banned]
    if size > len(pool):
        raise SamplingError(f"cannot draw {size} neurons from {len(pool)} available")
    digest = hashlib.sha256(repr(seed).encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return frozenset(pool[j] for j in rng.choice(len(pool), size, replace=False))


def intervention_targets(spec: InterventionSpec, omega1, omega2, n_layers: int, d_ff: int, seed) -> frozenset:
    w1, w2 = frozenset(omega1), frozenset(omega2)
    if spec.target == "w1":
        return w1
    if spec.target == "w2":
        return w2
    if spec.target == "w12":
        return w1 | w2
    return random_neurons(w1 | w2, len(w1 | w2), n_layers, d_ff, seed)


class Session:
    """A model plus the hooks every forward of this session applies."""

    def __init__(self, model: TinyTransformer, hooks: Sequence[HookSpec] = ()):
        self.model = model
        self.hooks = tuple(hooks)

    def forward(self, tokens, capture: bool = True):
        return self.model.forward(tokens, list(self.hooks), capture)

    def generate(self, prompt, max_new: int, *, eoa=None, capture: bool = True):
        return self.model.generate_greedy(prompt, max_new, list(self.hooks), eoa=eoa, capture=capture)


def apply_intervention(session: Session, targets: Iterable, mode: str, factor: float = 2.0) -> Session:
    """New session that also scales (enhance) or zeroes (suppress) ``targets``."""
    targets = frozenset(map(tuple, targets))
    cfg = session.model.config
    for l, i in targets:
        if not (0 <= l < cfg.n_layers and 0 <= i < cfg.d_ff):
            raise ConfigError(f"intervention target ({l}, {i}) out of range")
    if mode == "enhance":
        if not factor > 1.0:
            raise ConfigError("enhancement factor must exceed 1")
        hook = HookSpec.scale(targets, factor)
    elif mode == "suppress":
        hook = HookSpec.zero(targets)
    else:
        raise ConfigError(f"unknown intervention mode {mode!r}")
    for h in session.hooks:
        if h.mode in ("scale", "zero") and h.mode != hook.mode and h.targets & targets:
            raise InterventionConflictError(f"neurons {sorted(h.targets & targets)} both enhanced and suppressed")
    return Session(session.model, session.hooks + (hook,))


# --- metrics ------------------------------------------------------------------------

def enhance_ratio(omega_f: Iterable[str], correct_after: Mapping[str, bool]) -> float:
    ids = list(omega_f)
    if not ids:
        raise UndefinedMetricError("ER is undefined for an empty incorrect set")
    return 100.0 * sum(bool(correct_after[i]) for i in ids) / len(ids)


def suppress_ratio(omega_t: Iterable[str], correct_after: Mapping[str, bool]) -> float:
    ids = list(omega_t)
    if not ids:
        raise UndefinedMetricError("SR is undefined for an empty correct set")
    return 100.0 * sum(not correct_after[i] for i in ids) / len(ids)


def compute_er_sr(base, post_enhance: Mapping[str, bool], post_suppress: Mapping[str, bool]) -> tuple[float, float]:
    """(ER, SR) in percent for an ``OmegaPartition`` and the post-intervention correctness maps."""
    return enhance_ratio(base.omega_f, post_enhance), suppress_ratio(base.omega_t, post_suppress)


def delta_ratio(single_hop: float, two_hop: float) -> float:
    if single_hop == 0:
        raise UndefinedMetricError("change ratio is undefined for a zero single-hop score")
    return 100.0 * (two_hop - single_hop) / single_hop


def classify_shortcut(score1: float, score2: float, baseline1: float, baseline2: float, tau: float = 0.7) -> str:
    """Hop ``h`` counts as recalled when ``score_h >= tau * baseline_h``."""
    if not (baseline1 > 0 and baseline2 > 0):
        raise BaselineError("single-hop baselines must be positive")
    if not 0.0 < tau < 1.0:
        raise ConfigError("tau must lie in (0, 1)")
    r1 = score1 >= tau * baseline1
    r2 = score2 >= tau * baseline2
    return ("T" if r1 else "F") + ("T" if r2 else "F")


def is_multi_hop(cls: str) -> bool:
    return cls == "TT"


# --- overlap ----------------------------------------------------------------------

@dataclass(frozen=True)
class OverlapStats:
    size_mean: float
    size_median: float
    size_max: int
    inter_mean: float
    inter_median: float
    inter_max: int
    n_pairs: int


def sample_pairs(n: int, n_pairs: int, seed: int) -> list[tuple[int, int]]:
    """``n_pairs`` distinct unordered index pairs ``(a < b)`` from ``range(n)``."""
    total = n * (n - 1) // 2
    if n_pairs > total:
        raise SamplingError(f"{n_pairs} pairs requested but only {total} exist")
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, n_pairs, replace=False))
    pairs = []
    for k in flat.tolist():
        # invert the row-major enumeration of the strict upper triangle
        r = (math.isqrt(8 * (total - 1 - k) + 1) - 1) // 2
        a = n - 2 - r
        b = a + 1 + k - (total - (r + 1) * (r + 2) // 2)
        pairs.append((a, b))
    return pairs


def pairwise_kn_overlap(kn_sets: Sequence, n_pairs: int, seed: int = 0) -> OverlapStats:
    sets = [frozenset(getattr(s, "members", s)) for s in kn_sets]
    if len(sets) < 2:
        raise SamplingError("need at least two KN sets")
    pairs = sample_pairs(len(sets), n_pairs, seed)
    sizes = np.array([len(s) for s in sets])
    inter = np.array([len(sets[a] & sets[b]) for a, b in pairs])
    return OverlapStats(
        float(sizes.mean()), float(np.median(sizes)), int(sizes.max()),
        float(inter.mean()) if len(inter) else 0.0,
        float(np.median(inter)) if len(inter) else 0.0,
        int(inter.max()) if len(inter) else 0,
        len(pairs),
    )

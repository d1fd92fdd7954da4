import itertools
import statistics

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from knpl.corpus import NO_COT
from knpl.errors import (
    BaselineError,
    ConfigError,
    EmptySetError,
    IdentificationError,
    InterventionConflictError,
    SamplingError,
    UndefinedMetricError,
)
from knpl.kn import AttributionConfig, select_kns
from knpl.model import ForwardTrace, HookSpec
from knpl.probe import (
    InterventionSpec,
    Session,
    apply_intervention,
    classify_shortcut,
    compute_er_sr,
    delta_ratio,
    enhance_ratio,
    intervention_targets,
    is_multi_hop,
    kn_score,
    pairwise_kn_overlap,
    random_neurons,
    sample_pairs,
    score_positions,
    suppress_ratio,
)
from knpl.train import OmegaPartition, decode_two_hop

TRIALS = 60


def fake_traces(rng, n_steps, prompt_len, L=2, F=6):
    acts = []
    for k in range(n_steps):
        T = prompt_len + k
        a = [rng.normal(size=(T, F)) for _ in range(L)]
        acts.append(ForwardTrace(a, a, np.zeros(T, dtype=int)))
    return acts


# --- brute-force oracles ------------------------------------------------------------

def test_kn_score_oracle():
    rng = np.random.default_rng(0)
    for _ in range(TRIALS):
        traces = fake_traces(rng, int(rng.integers(1, 5)), int(rng.integers(2, 6)))
        members = {(int(rng.integers(2)), int(rng.integers(6))) for _ in range(int(rng.integers(1, 6)))}
        total, count = 0.0, 0
        for tr in traces:  # final position of every decoding step
            for l, i in sorted(members):
                total += tr.activations[l][len(tr.activations[l]) - 1][i]
                count += 1
        assert kn_score(traces, members) == pytest.approx(total / count, rel=1e-12, abs=1e-15)
        first = traces[0]
        last = sum(first.activations[l][-1][i] for l, i in members) / len(members)
        assert kn_score(traces, members, "last_prompt") == pytest.approx(last, rel=1e-12, abs=1e-15)


def test_er_sr_oracle():
    rng = np.random.default_rng(1)
    for _ in range(TRIALS):
        ids = [f"q{i}" for i in range(int(rng.integers(2, 30)))]
        correct = rng.random(len(ids)) < 0.5
        correct[0], correct[1] = True, False
        part = OmegaPartition(frozenset(i for i, c in zip(ids, correct) if c),
                              frozenset(i for i, c in zip(ids, correct) if not c))
        post_e = {i: bool(rng.random() < 0.3) for i in ids}
        post_s = {i: bool(rng.random() < 0.6) for i in ids}
        flipped_up = len([i for i in part.omega_f if post_e[i]])
        flipped_down = len([i for i in part.omega_t if not post_s[i]])
        er, sr = compute_er_sr(part, post_e, post_s)
        assert er == 100.0 * flipped_up / len(part.omega_f)
        assert sr == 100.0 * flipped_down / len(part.omega_t)
        assert 0.0 <= er <= 100.0 and 0.0 <= sr <= 100.0


def test_delta_ratio_oracle():
    rng = np.random.default_rng(2)
    for _ in range(TRIALS):
        s, t = rng.uniform(0.01, 5), rng.uniform(-1, 5)
        assert delta_ratio(s, t) == pytest.approx((t - s) / s * 100.0, rel=1e-12)
    assert delta_ratio(2.0, 1.0) == -50.0


def shortcut_oracle(s1, s2, b1, b2, tau):
    return {(True, True): "TT", (True, False): "TF", (False, True): "FT", (False, False): "FF"}[
        (not s1 < tau * b1, not s2 < tau * b2)]


def test_shortcut_oracle():
    rng = np.random.default_rng(3)
    seen = set()
    for _ in range(TRIALS * 4):
        b1, b2 = rng.uniform(0.1, 2, size=2)
        s1, s2 = rng.uniform(0, 2, size=2)
        tau = float(rng.choice([0.5, 0.6, 0.7, 0.8, 0.9]))
        got = classify_shortcut(s1, s2, b1, b2, tau)
        assert got == shortcut_oracle(s1, s2, b1, b2, tau)
        seen.add(got)
    assert seen == {"TT", "TF", "FT", "FF"}
    assert classify_shortcut(0.7, 0.69, 1.0, 1.0, 0.7) == "TF"  # equality counts as recalled
    assert is_multi_hop("TT") and not is_multi_hop("TF")


def test_share_threshold_identification_oracle():
    rng = np.random.default_rng(4)
    for _ in range(TRIALS):
        nq, L, F = int(rng.integers(1, 8)), 2, 5
        maps = [rng.normal(size=(L, F)) for _ in range(nq)]
        for m in maps:
            m.flat[int(rng.integers(L * F))] = 3.0  # ensure a positive maximum
        ratio, share = float(rng.uniform(0.05, 0.9)), float(rng.uniform(0.05, 1.0))
        expected = set()
        for l in range(L):
            for i in range(F):
                hits = sum(1 for m in maps if m[l, i] > ratio * m.max())
                if hits >= share * nq:
                    expected.add((l, i))
        cfg = AttributionConfig(coarse_ratio=ratio, share_fraction=share)
        if expected:
            assert select_kns("f", maps, cfg).members == expected
        else:
            with pytest.raises(IdentificationError):
                select_kns("f", maps, cfg)


def test_overlap_oracle():
    rng = np.random.default_rng(5)
    for trial in range(TRIALS):
        n = int(rng.integers(2, 12))
        sets = [frozenset((int(rng.integers(2)), int(rng.integers(8))) for _ in range(int(rng.integers(0, 6))))
                for _ in range(n)]
        total = n * (n - 1) // 2
        k = int(rng.integers(1, total + 1))
        combos = list(itertools.combinations(range(n), 2))
        picks = sorted(np.random.default_rng(trial).choice(total, k, replace=False).tolist())
        pairs = [combos[j] for j in picks]
        assert sample_pairs(n, k, trial) == pairs
        stats = pairwise_kn_overlap(sets, k, trial)
        sizes = [len(s) for s in sets]
        inter = [len(sets[a] & sets[b]) for a, b in pairs]
        assert stats.size_mean == pytest.approx(statistics.mean(sizes), abs=1e-12)
        assert stats.size_median == statistics.median(sizes)
        assert stats.size_max == max(sizes)
        assert stats.inter_mean == pytest.approx(statistics.mean(inter), abs=1e-12)
        assert stats.inter_median == statistics.median(inter)
        assert stats.inter_max == max(inter)
        assert stats.n_pairs == k


def test_sample_pairs_exhaustive():
    assert sample_pairs(4, 6, 0) == list(itertools.combinations(range(4), 2))
    with pytest.raises(SamplingError):
        sample_pairs(4, 7, 0)
    with pytest.raises(SamplingError):
        pairwise_kn_overlap([frozenset()], 1)


# --- errors and preconditions ----------------------------------------------------

def test_metric_errors():
    with pytest.raises(UndefinedMetricError):
        enhance_ratio([], {})
    with pytest.raises(UndefinedMetricError):
        suppress_ratio([], {})
    with pytest.raises(UndefinedMetricError):
        delta_ratio(0.0, 1.0)
    with pytest.raises(BaselineError):
        classify_shortcut(1, 1, 0.0, 1)
    with pytest.raises(ConfigError):
        classify_shortcut(1, 1, 1, 1, tau=1.0)
    with pytest.raises(EmptySetError):
        kn_score(fake_traces(np.random.default_rng(0), 1, 3), set())
    with pytest.raises(EmptySetError):
        kn_score([], {(0, 0)})
    with pytest.raises(ConfigError):
        InterventionSpec("w3", "enhance")
    with pytest.raises(ConfigError):
        InterventionSpec("w1", "enhance", 1.0)


def test_random_neurons():
    excl = {(0, i) for i in range(10)}
    a = random_neurons(excl, 5, 2, 12, ("seed", "q0001"))
    assert len(a) == 5 and not a & excl
    assert a == random_neurons(excl, 5, 2, 12, ("seed", "q0001"))
    assert a != random_neurons(excl, 5, 2, 12, ("seed", "q0002"))
    with pytest.raises(SamplingError):
        random_neurons(excl, 15, 2, 12, 0)
    w1, w2 = {(0, 1), (1, 2)}, {(1, 2), (1, 3)}
    spec = InterventionSpec("wr", "suppress")
    wr = intervention_targets(spec, w1, w2, 2, 12, 7)
    assert len(wr) == 3 and not wr & (set(w1) | set(w2))
    assert intervention_targets(InterventionSpec("w12", "suppress"), w1, w2, 2, 12, 7) == {(0, 1), (1, 2), (1, 3)}


@settings(max_examples=200)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 10), st.floats(0.01, 10),
       st.sampled_from([0.5, 0.6, 0.7, 0.8, 0.9]), st.integers(-20, 20))
def test_classification_scale_invariance(s1, s2, b1, b2, tau, k):
    c = 2.0**k  # exact in floating point
    assert classify_shortcut(s1, s2, b1, b2, tau) == classify_shortcut(s1 * c, s2 * c, b1 * c, b2 * c, tau)


@settings(max_examples=200)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 10), st.floats(0.01, 10),
       st.floats(0.001, 1000), st.sampled_from([0.5, 0.7, 0.9]))
def test_classification_scale_invariance_general(s1, s2, b1, b2, c, tau):
    for s, b in ((s1, b1), (s2, b2)):
        assume(abs(s - tau * b) > 1e-9 * max(1.0, b))
    assert classify_shortcut(s1, s2, b1, b2, tau) == classify_shortcut(s1 * c, s2 * c, b1 * c, b2 * c, tau)


@settings(max_examples=200)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0.01, 10), st.floats(0.01, 10))
def test_classification_monotone(s1, s2, bump, b1, b2):
    before = classify_shortcut(s1, s2, b1, b2)
    after1 = classify_shortcut(s1 + bump, s2, b1, b2)
    after2 = classify_shortcut(s1, s2 + bump, b1, b2)
    assert not (before[0] == "T" and after1[0] == "F")
    assert not (before[1] == "T" and after2[1] == "F")


# --- mechanical intervention checks on a trained model ---------------------------

@pytest.fixture(scope="module")
def decode(tiny):
    x = tiny.instances[0]

    def run(hooks=()):
        return decode_two_hop(tiny.model, tiny.vocab, x, tiny.world, NO_COT, hooks=list(hooks), capture=True)[3]
    return run


def test_suppress_zeroes_kn_score(tiny, decode):
    targets = {(0, 1), (0, 9), (1, 4), (1, 30)}
    sess = apply_intervention(Session(tiny.model), targets, "suppress")
    traces = decode(sess.hooks)
    assert kn_score(traces, targets) == 0.0
    for tr in traces:
        for l in range(2):
            for i in range(tiny.model.config.d_ff):
                if (l, i) in targets:
                    assert np.all(tr.activations[l][:, i] == 0.0)


def test_enhance_doubles_exactly(tiny, decode):
    targets = {(0, 1), (0, 9), (1, 4)}
    sess = apply_intervention(Session(tiny.model), targets, "enhance", 2.0)
    hooked = decode(sess.hooks)
    base = decode()
    for tr in hooked:
        for l in range(2):
            for i in range(tiny.model.config.d_ff):
                if (l, i) in targets:
                    assert np.array_equal(tr.activations[l][:, i], 2.0 * tr.raw[l][:, i])
                else:
                    assert np.array_equal(tr.activations[l][:, i], tr.raw[l][:, i])
    # before any hook has acted, the forward is untouched
    assert np.array_equal(hooked[0].raw[0], base[0].raw[0])
    for i in range(tiny.model.config.d_ff):
        if (0, i) not in targets:
            assert np.array_equal(hooked[0].activations[0][:, i], base[0].activations[0][:, i])


def test_identity_scale_keeps_kn_score(tiny, decode):
    targets = {(0, 3), (1, 7)}
    base = kn_score(decode(), targets)
    same = kn_score(decode(Session(tiny.model, [HookSpec.scale(targets, 1.0)]).hooks), targets)
    assert same == base


def test_conflicting_interventions_rejected(tiny):
    s = apply_intervention(Session(tiny.model), {(0, 1)}, "enhance")
    with pytest.raises(InterventionConflictError):
        apply_intervention(s, {(0, 1), (0, 2)}, "suppress")
    with pytest.raises(ConfigError):
        apply_intervention(Session(tiny.model), {(5, 1)}, "suppress")
    with pytest.raises(ConfigError):
        apply_intervention(Session(tiny.model), {(0, 1)}, "enhance", 0.5)


def test_score_positions_modes():
    tr = fake_traces(np.random.default_rng(0), 3, 4)
    assert score_positions(tr) == [(0, 3), (1, 4), (2, 5)]
    assert score_positions(tr, "last_prompt") == [(0, 3)]
    with pytest.raises(ConfigError):
        score_positions(tr, "every")

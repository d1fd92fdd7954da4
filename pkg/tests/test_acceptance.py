"""Acceptance criteria 1-11, one test each, printing a PASS/FAIL line per criterion.

The default-configuration pipeline runs once per session (a few minutes on a
single core); criteria 4, 5, 6, 7 and 10 read from that run.
"""

import contextlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from knpl.config import PipelineConfig
from knpl.corpus import NO_COT, read_corpus, render_queries, single_hop_prompt
from knpl.errors import DegenerateSampleError
from knpl.kn import AttributionConfig, attribution_map, riemann_ig
from knpl.pipeline import STAGES, Lab, RunDir, read_jsonl, run_pipeline, run_stage
from knpl.probe import Session, apply_intervention, kn_score
from knpl.report import verify
from knpl.stats import paired_t_test_one_tailed
from knpl.train import decode_two_hop

import test_autodiff
import test_ingest
import test_probe
import test_stats

HERE = Path(__file__).parent
SMALL = HERE / "fixtures" / "small.ini"


@pytest.fixture
def criterion(capsys):
    """``with criterion(n, text) as note:`` prints PASS/FAIL for criterion ``n``."""

    @contextlib.contextmanager
    def run(n, text):
        notes = []
        t0 = time.perf_counter()
        try:
            yield notes.append
        except BaseException as e:
            with capsys.disabled():
                print(f"\nCRITERION {n:>2} FAIL  {text}  [{'; '.join(map(str, notes))}] {type(e).__name__}: {e}")
            raise
        with capsys.disabled():
            print(f"\nCRITERION {n:>2} PASS  {text}  [{'; '.join(map(str, notes))}] ({time.perf_counter() - t0:.1f}s)")
    return run


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Default configuration, all stages, four workers; per-stage wall time recorded."""
    root = tmp_path_factory.mktemp("default_run")
    cfg = PipelineConfig()
    cfg.write(root / "config.ini")
    run = RunDir(root)
    timings = {}
    for stage in STAGES:
        t0 = time.perf_counter()
        run_stage(run, cfg, stage, jobs=4)
        timings[stage] = time.perf_counter() - t0
    return root, cfg, timings


def report_of(root):
    return json.loads((root / "report" / "report.json").read_text())


# --- 1 -------------------------------------------------------------------------

PRIMITIVES = test_autodiff.test_primitive_matches_finite_differences.pytestmark[0].args[1]


def test_c01_gradient_correctness(criterion):
    with criterion(1, "analytic gradients vs central differences, 100 instances per primitive") as note:
        t0 = time.perf_counter()
        worst = 0.0
        for name, build, shapes in PRIMITIVES:
            err = test_autodiff.check_op(build, shapes, np.random.default_rng(test_autodiff.RNG_SEED), n=100)
            worst = max(worst, err)
            assert err <= 1e-4, name
        elapsed = time.perf_counter() - t0
        note(f"{len(PRIMITIVES)} primitives, worst rel err {worst:.2e}, {elapsed:.1f}s")
        assert elapsed < 60


# --- 2 -------------------------------------------------------------------------

def test_c02_integrated_gradients(criterion, tiny):
    with criterion(2, "IG linear exact, quadratic closed form, Riemann convergence on 20 facts") as note:
        rng = np.random.default_rng(0)
        for n in list(range(1, 65)) + [100, 1000, 4096]:
            a, w = rng.normal(size=2) * 5
            assert abs(riemann_ig(lambda _: a, w, n) - a * w) <= 1e-9
            assert abs(riemann_ig(lambda x: 2 * x, w, n) - (n + 1) / n * w * w) <= 1e-9
        note("linear and quadratic for N in 1..64, 100, 1000, 4096")
        steps = [10 * 2**k for k in range(9)]
        facts = tiny.world.facts[:20]
        for f in facts:
            q = tiny.vocab.encode(single_hop_prompt(render_queries(f, tiny.world)[0]))
            tgt = tiny.vocab.encode(tiny.world.name(f.o))[0]
            coarse = attribution_map(tiny.model, q, tgt)
            top = [tuple(x) for x in np.argwhere(coarse >= np.sort(coarse.ravel())[-5])]
            ref = attribution_map(tiny.model, q, tgt, AttributionConfig(steps=4096), neurons=top)
            errs = [np.abs(attribution_map(tiny.model, q, tgt, AttributionConfig(steps=n), neurons=top) - ref)
                    for n in steps]
            assert all(np.all(b <= a) for a, b in zip(errs, errs[1:])), f.id
        note(f"{len(facts)} facts x top-5 neurons, N = 10..2560 against N = 4096")


# --- 3 -------------------------------------------------------------------------

def test_c03_formula_oracles(criterion):
    with criterion(3, "ER/SR, KN score, delta, shortcut class, share threshold, overlap vs brute force") as note:
        for fn in (test_probe.test_er_sr_oracle, test_probe.test_kn_score_oracle, test_probe.test_delta_ratio_oracle,
                   test_probe.test_shortcut_oracle, test_probe.test_share_threshold_identification_oracle,
                   test_probe.test_overlap_oracle):
            fn()
        assert test_probe.TRIALS >= 50
        note(f"{test_probe.TRIALS}+ randomized inputs per formula, exact match")


# --- 4 -------------------------------------------------------------------------

def test_c04_memorization_gate(criterion, default_run):
    root, cfg, timings = default_run
    with criterion(4, "default config reaches >= 95% single-hop recall in < 5 min; pre-filter applied") as note:
        facts = read_jsonl(root / "filter" / "facts.jsonl")
        recall = sum(f["known"] for f in facts) / len(facts)
        note(f"recall {recall:.4f} over {len(facts)} facts, train {timings['train']:.0f}s")
        assert recall >= 0.95
        assert timings["train"] < 300
        part = json.loads((root / "filter" / "partitions.json").read_text())
        kept = set(part["kept"])
        known = {f["fact"] for f in facts if f["known"]}
        for inst in read_corpus(root / "world" / "corpus.jsonl"):
            ok = inst.fact1.id in known and inst.fact2.id in known
            assert (inst.id in kept) == ok
        for stage, name in (("score", "two_hop.jsonl"), ("intervene", "interventions.jsonl"),
                            ("shortcut", "classes.jsonl"), ("conflict", "conflict.jsonl")):
            assert {r["id"] for r in read_jsonl(root / stage / name)} <= kept
        note(f"{len(kept)} of {len(read_corpus(root / 'world' / 'corpus.jsonl'))} instances kept")


# --- 5 -------------------------------------------------------------------------

def test_c05_invariant_assumption(criterion, default_run):
    root, _, _ = default_run
    with criterion(5, "expressing > same-answer non-expressing KN score, paired one-tailed p < 0.05, >= 20 facts") as note:
        recs = read_jsonl(root / "score" / "sanity.jsonl")
        a = [r["expressing"] for r in recs]
        b = [r["non_expressing"] for r in recs]
        res = paired_t_test_one_tailed(a, b)
        note(f"n={res.n} mean {np.mean(a):.3f} vs {np.mean(b):.3f}, t={res.t:.2f}, p={res.p:.2e}")
        assert res.n >= 20 and np.mean(a) > np.mean(b) and res.p < 0.05
        assert report_of(root)["sanity"]["p"] == res.p


# --- 6 -------------------------------------------------------------------------

def test_c06_intervention_directionality(criterion, default_run):
    root, _, _ = default_run
    with criterion(6, "SR(w12) > SR(wr), ER(w12) > ER(wr), SR(w12) >= SR(w1), SR(w2); pooled over conditions") as note:
        pooled = report_of(root)["interventions"]["pooled"]["targets"]
        w1, w2, w12, wr = (pooled[k] for k in ("w1", "w2", "w12", "wr"))
        note(f"SR w1 {w1['SR']:.1f} w2 {w2['SR']:.1f} w12 {w12['SR']:.1f} wr {wr['SR']:.1f}; "
             f"ER w12 {w12['ER']:.2f} wr {wr['ER']:.2f}; n_t={w12['n_t']} n_f={w12['n_f']}")
        assert w12["n_t"] >= 100 and w12["n_f"] >= 100
        assert w12["SR"] > wr["SR"] and w12["ER"] > wr["ER"]
        assert w12["SR"] >= w1["SR"] and w12["SR"] >= w2["SR"]


# --- 7 -------------------------------------------------------------------------

def test_c07_mechanical_interventions(criterion, default_run):
    root, _, _ = default_run
    with criterion(7, "suppress -> kn_score 0; enhance(2) doubles targets exactly; others bit-identical") as note:
        lab = Lab(RunDir(root), PipelineConfig.load(root / "config.ini"))
        model, d_ff = lab.model, lab.model.config.d_ff
        checked = 0
        for iid in lab.located[:10]:
            x = lab.by_id[iid]
            targets = lab.kn_sets[x.fact1.id].members | lab.kn_sets[x.fact2.id].members
            sup = apply_intervention(Session(model), targets, "suppress")
            traces = decode_two_hop(model, lab.vocab, x, lab.world, NO_COT, hooks=list(sup.hooks), capture=True)[3]
            assert kn_score(traces, targets) == 0.0
            enh = apply_intervention(Session(model), targets, "enhance", 2.0)
            traces = decode_two_hop(model, lab.vocab, x, lab.world, NO_COT, hooks=list(enh.hooks), capture=True)[3]
            mask = np.zeros((model.config.n_layers, d_ff), bool)
            for l, i in targets:
                mask[l, i] = True
            for tr in traces:
                for l in range(model.config.n_layers):
                    assert np.array_equal(tr.activations[l][:, mask[l]], 2.0 * tr.raw[l][:, mask[l]])
                    assert np.array_equal(tr.activations[l][:, ~mask[l]], tr.raw[l][:, ~mask[l]])
            checked += 1
        note(f"{checked} instances, union of both hops' KN sets")


# --- 8 -------------------------------------------------------------------------

def test_c08_statistics(criterion):
    with criterion(8, "paired one-tailed t-test matches textbook oracle to 1e-6; degenerate input raises") as note:
        for a, b, t, p in test_stats.FIXED:
            r = paired_t_test_one_tailed(a, b)
            assert abs(r.t - test_stats.textbook_t(a, b)) <= 1e-6 and abs(r.p - p) <= 1e-6
        for a, b in (([1.0], [0.0]), ([1.0, 2.0], [0.0, 1.0])):
            with pytest.raises(DegenerateSampleError):
                paired_t_test_one_tailed(a, b)
        note(f"{len(test_stats.FIXED)} fixed vectors, 2 degenerate cases")


# --- 9 -------------------------------------------------------------------------

def test_c09_end_to_end_determinism(criterion, tmp_path, default_run):
    with criterion(9, "two 'all' runs byte-identical; verify finds zero discrepancies") as note:
        cfg = PipelineConfig.load(SMALL)
        a, b = tmp_path / "a", tmp_path / "b"
        run_pipeline(a, cfg, jobs=1)
        run_pipeline(b, cfg, jobs=3)
        fa = {str(p.relative_to(a)): p.read_bytes() for p in sorted(a.rglob("*")) if p.is_file()}
        fb = {str(p.relative_to(b)): p.read_bytes() for p in sorted(b.rglob("*")) if p.is_file()}
        assert fa.keys() == fb.keys()
        diff = [k for k in fa if fa[k] != fb[k]]
        assert not diff, diff
        note(f"{len(fa)} files identical (jobs 1 vs 3)")
        assert verify(a, cfg) == []
        root, dcfg, _ = default_run
        assert verify(root, dcfg) == []
        note("verify clean on small and default runs")


# --- 10 ------------------------------------------------------------------------

def test_c10_desk_budget(criterion, default_run):
    root, cfg, timings = default_run
    with criterion(10, "default pipeline world -> report in < 10 min with 4 workers") as note:
        total = sum(timings.values())
        n = report_of(root)["filter"]["n_kept"]
        note(f"{total:.0f}s total, {n} instances, N={cfg.attribution.steps}, p={cfg.attribution.share_fraction}")
        assert cfg.attribution.steps == 20 and cfg.attribution.share_fraction == 0.2
        assert n >= 150
        assert total < 600


# --- 11 ------------------------------------------------------------------------

def test_c11_ingest_fidelity(criterion, tmp_path, monkeypatch):
    with criterion(11, "fixture-driven fetch/extract reproduce hand-traced outputs byte-for-byte offline") as note:
        import urllib.request

        def refuse(*a, **k):
            raise AssertionError("network access attempted")
        monkeypatch.setattr(urllib.request, "urlopen", refuse)
        test_ingest.test_cli_output_matches_golden_bytes(tmp_path)
        client = test_ingest.ig.KGClient(test_ingest.ig.FixtureTransport(test_ingest.FIXTURES / "ingest"),
                                         query_date=test_ingest.DATE, sleep=lambda s: None)
        test_ingest.test_top_k_from_five_candidates(client)
        test_ingest.test_single_valid_chain(client)
        test_ingest.test_full_fixture_chains(client)
        note(f"{len(list((test_ingest.FIXTURES / 'ingest_golden').iterdir()))} golden files match")

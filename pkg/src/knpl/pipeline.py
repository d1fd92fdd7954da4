"""Staged experiment pipeline over a shared run directory.

Every stage writes into ``<run>/<stage>/`` together with a stamp holding the
hash of the configuration sections it depends on. A stage whose stamp matches
is skipped; a mismatching stamp raises :class:`StaleCacheError` unless the
caller asks for a refresh.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import report as rep
from .config import PipelineConfig
from .corpus import (
    PromptCondition,
    Vocab,
    build_prompt,
    dumps_line,
    generate_world,
    make_conflict_context,
    make_distraction_context,
    read_corpus,
    read_world,
    render_queries,
    single_hop_prompt,
    write_corpus,
    write_world,
)
from .errors import CandidateExhaustionError, IdentificationError, KnplError, StageError, StaleCacheError
from .figures import bar_chart, emit_heatmap, series_line_chart
from .kn import KNSet, identify_kns, multi_token_map
from .model import HookSpec, TinyTransformer
from .probe import InterventionSpec, intervention_targets, kn_score
from .train import answer_ids, decode_two_hop, knows_fact, train_model

log = logging.getLogger("knpl.pipeline")

STAGES = ("world", "train", "filter", "locate", "score", "intervene", "shortcut", "conflict", "report")
STAGE_SECTIONS = {
    "world": ("world",),
    "train": ("world", "model", "train"),
    "filter": ("world", "model", "train"),
    "locate": ("world", "model", "train", "attribution"),
    "score": ("world", "model", "train", "attribution", "probe"),
    "intervene": ("world", "model", "train", "attribution", "probe"),
    "shortcut": ("world", "model", "train", "attribution", "probe"),
    "conflict": ("world", "model", "train", "attribution", "probe", "conflict"),
    "report": ("world", "model", "train", "attribution", "probe", "conflict"),
}
UPSTREAM = {
    "world": (),
    "train": ("world",),
    "filter": ("train",),
    "locate": ("filter",),
    "score": ("locate",),
    "intervene": ("score",),
    "shortcut": ("score",),
    "conflict": ("locate",),
    "report": ("intervene", "shortcut", "conflict"),
}
ALL_CONDITIONS = ("no_cot", "zero_shot", "few_shot")


# --- small I/O helpers ----------------------------------------------------------

def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(dumps_line(r) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def stage(self, name: str) -> Path:
        return self.root / name

    def path(self, stage: str, name: str) -> Path:
        return self.root / stage / name

    def stamp(self, stage: str) -> dict | None:
        p = self.path(stage, "stamp.json")
        return read_json(p) if p.exists() else None

    def write_stamp(self, stage: str, digest: str) -> None:
        write_json(self.path(stage, "stamp.json"), {"stage": stage, "hash": digest})

    def event(self, **fields) -> None:
        p = self.root / "logs" / "events.jsonl"
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps_line(fields) + "\n")


# --- loaded state shared by the stage units ------------------------------------

class Lab:
    """Lazy view of the run directory's artifacts for one configuration."""

    def __init__(self, run: RunDir, cfg: PipelineConfig):
        self.run = run
        self.cfg = cfg
        self._cache: dict = {}

    def _get(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    @property
    def world(self):
        return self._get("world", lambda: read_world(self.run.path("world", "world.json")))

    @property
    def instances(self):
        return self._get("instances", lambda: read_corpus(self.run.path("world", "corpus.jsonl")))

    @property
    def by_id(self):
        return self._get("by_id", lambda: {i.id: i for i in self.instances})

    @property
    def vocab(self) -> Vocab:
        return self._get("vocab", lambda: Vocab.for_world(self.world))

    @property
    def model(self) -> TinyTransformer:
        return self._get("model", lambda: TinyTransformer.load(self.run.path("train", "model.knpl")))

    @property
    def known(self) -> set[str]:
        return self._get("known", lambda: {r["fact"] for r in read_jsonl(self.run.path("filter", "facts.jsonl")) if r["known"]})

    @property
    def kept(self) -> list[str]:
        return self._get("kept", lambda: read_json(self.run.path("filter", "partitions.json"))["kept"])

    @property
    def kn_sets(self) -> dict[str, KNSet]:
        def make():
            out = {}
            for r in read_jsonl(self.run.path("locate", "kn_sets.jsonl")):
                if not r.get("failed"):
                    out[r["fact"]] = KNSet.from_record(r)
            return out
        return self._get("kn", make)

    @property
    def located(self) -> list[str]:
        """Kept instances whose two facts both have KN sets."""
        return self._get("located", lambda: [i for i in self.kept if self.by_id[i].fact1.id in self.kn_sets and self.by_id[i].fact2.id in self.kn_sets])

    @property
    def base_correct(self) -> dict:
        def make():
            return {(r["id"], r["condition"]): r["correct"] for r in read_jsonl(self.run.path("filter", "decode.jsonl"))}
        return self._get("base_correct", make)

    def condition(self, name: str) -> PromptCondition:
        return PromptCondition.parse(name, self.cfg.world.few_shot_k)

    def fact_queries(self, fact) -> list[list[int]]:
        return [self.vocab.encode(single_hop_prompt(q)) for q in render_queries(fact, self.world)]

    # --- units of work (pure given the run directory) ---------------------------------
    def know_unit(self, fid: str) -> dict:
        f = self.world.fact_by_id(fid)
        return {"fact": fid, "known": knows_fact(self.model, f, self.world, self.vocab)}

    def filter_unit(self, iid: str) -> list[dict]:
        inst = self.by_id[iid]
        out = []
        for c in ALL_CONDITIONS:
            toks, ans, ok, _ = decode_two_hop(self.model, self.vocab, inst, self.world, self.condition(c))
            out.append({"id": iid, "condition": c, "tokens": toks, "answer": ans, "correct": bool(ok)})
        return out

    def locate_unit(self, fid: str) -> dict:
        f = self.world.fact_by_id(fid)
        gold = answer_ids(self.world, self.vocab, f.o)
        try:
            kn = identify_kns(self.model, fid, self.fact_queries(f), gold, self.cfg.attribution, eoa=self.vocab.eoa)
        except IdentificationError as e:
            return {"fact": fid, "failed": True, "diagnostics": e.diagnostics}
        return kn.to_record()

    def _single_hop_scores(self, fact, members) -> list[float]:
        gold = answer_ids(self.world, self.vocab, fact.o)
        out = []
        for q in self.fact_queries(fact):
            _, traces = self.model.generate_greedy(q, len(gold) + 1, eoa=self.vocab.eoa, capture=True)
            out.append(kn_score(traces, members, self.cfg.probe.positions))
        return out

    def baseline_unit(self, fid: str) -> dict:
        scores = self._single_hop_scores(self.world.fact_by_id(fid), self.kn_sets[fid].members)
        return {"fact": fid, "score": float(np.mean(scores)), "per_query": scores}

    def sanity_unit(self, fid: str) -> dict | None:
        """Same-answer comparison: the fact's own queries against another known fact with the same object."""
        f = self.world.fact_by_id(fid)
        partners = sorted(g.id for g in self.world.facts if g.o == f.o and g.id != fid and g.id in self.known)
        if not partners:
            return None
        g = self.world.fact_by_id(partners[0])
        members = self.kn_sets[fid].members
        expr = self._single_hop_scores(f, members)
        other = self._single_hop_scores(g, members)
        return {"fact": fid, "partner": g.id, "expressing": float(np.mean(expr)), "non_expressing": float(np.mean(other))}

    def two_hop_unit(self, iid: str) -> list[dict]:
        inst = self.by_id[iid]
        w1 = self.kn_sets[inst.fact1.id].members
        w2 = self.kn_sets[inst.fact2.id].members
        out = []
        for cond in self.cfg.probe.conditions:
            toks, ans, ok, traces = decode_two_hop(self.model, self.vocab, inst, self.world, self.condition(cond), capture=True)
            out.append({
                "id": iid, "condition": cond, "tokens": toks, "answer": ans, "correct": bool(ok),
                "fact1": inst.fact1.id, "fact2": inst.fact2.id,
                "score1": kn_score(traces, w1, self.cfg.probe.positions),
                "score2": kn_score(traces, w2, self.cfg.probe.positions),
            })
        return out

    def intervene_unit(self, iid: str) -> list[dict]:
        inst = self.by_id[iid]
        pc = self.cfg.probe
        mc = self.model.config
        w1 = self.kn_sets[inst.fact1.id].members
        w2 = self.kn_sets[inst.fact2.id].members
        out = []
        for target in pc.targets:
            spec_e = InterventionSpec(target, "enhance", pc.enhance_factor)
            neurons = intervention_targets(spec_e, w1, w2, mc.n_layers, mc.d_ff, (pc.random_seed, iid))
            for mode in ("enhance", "suppress"):
                hook = HookSpec.scale(neurons, pc.enhance_factor) if mode == "enhance" else HookSpec.zero(neurons)
                for cond in pc.conditions:
                    toks, ans, ok, _ = decode_two_hop(self.model, self.vocab, inst, self.world, self.condition(cond), hooks=hook)
                    out.append({
                        "id": iid, "condition": cond, "intervention": f"{mode}:{target}", "n_neurons": len(neurons),
                        "tokens": toks, "answer": ans, "correct": bool(ok),
                        "base_correct": bool(self.base_correct[(iid, cond)]),
                    })
        return out

    def conflict_unit(self, iid: str) -> list[dict]:
        inst = self.by_id[iid]
        cc = self.cfg.conflict
        cond = self.condition(cc.condition)
        w1 = self.kn_sets[inst.fact1.id].members
        w2 = self.kn_sets[inst.fact2.id].members
        contexts = {"none": None, "distraction": make_distraction_context(inst, self.world, cc.seed)}
        for hop, fact in ((1, inst.fact1), (2, inst.fact2)):
            try:
                contexts[f"conflict{hop}"] = make_conflict_context(fact, self.world, cc.seed, hop)
            except CandidateExhaustionError:
                contexts[f"conflict{hop}"] = "skip"
        out = []
        for name in ("none", "distraction", "conflict1", "conflict2"):
            ctx = contexts[name]
            if ctx == "skip":
                out.append({"id": iid, "context": name, "skipped": True})
                continue
            toks, ans, ok, traces = decode_two_hop(self.model, self.vocab, inst, self.world, cond, context=ctx, capture=True)
            out.append({
                "id": iid, "context": name, "condition": cc.condition, "tokens": toks, "answer": ans, "correct": bool(ok),
                "score1": kn_score(traces, w1, self.cfg.probe.positions),
                "score2": kn_score(traces, w2, self.cfg.probe.positions),
            })
        return out


# --- process-parallel map ---------------------------------------------------------

_WORKER_LAB: Lab | None = None


def _init_worker(root: str, config_text: str) -> None:
    global _WORKER_LAB
    _WORKER_LAB = Lab(RunDir(root), PipelineConfig.from_text(config_text))


def _run_unit(method: str, key: str):
    return getattr(_WORKER_LAB, method)(key)


def parallel_map(lab: Lab, stage: str, method: str, keys: Sequence[str], jobs: int) -> list:
    """Results of ``lab.method(key)`` in the order of ``keys``."""
    def wrap(key, fn):
        try:
            return fn()
        except KnplError as e:
            raise StageError(stage, str(e), key) from e

    if jobs <= 1 or len(keys) < 2:
        return [wrap(k, lambda k=k: getattr(lab, method)(k)) for k in keys]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(jobs, mp_context=ctx, initializer=_init_worker, initargs=(str(lab.run.root), lab.cfg.canonical())) as ex:
        futures = [ex.submit(_run_unit, method, k) for k in keys]
        return [wrap(k, f.result) for k, f in zip(keys, futures)]


# --- stages ---------------------------------------------------------------------

def stage_world(lab: Lab, jobs: int) -> dict:
    w = lab.cfg.world
    kg, instances = generate_world(w.seed, w.n_entities, w.n_relations, w.n_two_hop, n_demo=w.n_demo, few_shot_k=w.few_shot_k)
    d = lab.run.stage("world")
    d.mkdir(parents=True, exist_ok=True)
    write_world(d / "world.json", kg)
    write_corpus(d / "corpus.jsonl", instances, w.seed)
    return {"facts": len(kg.facts), "instances": len(instances)}


def stage_train(lab: Lab, jobs: int) -> dict:
    model, history = train_model(lab.cfg.train_config(), lab.world, lab.vocab, lab.cfg.model_config(len(lab.vocab)))
    d = lab.run.stage("train")
    d.mkdir(parents=True, exist_ok=True)
    model.save(d / "model.knpl")
    write_jsonl(d / "train_log.jsonl", history)
    return {"epochs": len(history), "final_loss": history[-1]["mean_loss"], "checkpoint": model.digest()}


def stage_filter(lab: Lab, jobs: int) -> dict:
    facts = parallel_map(lab, "filter", "know_unit", [f.id for f in lab.world.facts], jobs)
    write_jsonl(lab.run.path("filter", "facts.jsonl"), facts)
    known = {r["fact"] for r in facts if r["known"]}
    kept = sorted(i.id for i in lab.instances if i.fact1.id in known and i.fact2.id in known)
    decodes = [r for rs in parallel_map(lab, "filter", "filter_unit", kept, jobs) for r in rs]
    write_jsonl(lab.run.path("filter", "decode.jsonl"), decodes)
    parts = {"kept": kept, "dropped": sorted(set(lab.by_id) - set(kept)), "conditions": {}}
    for c in ALL_CONDITIONS:
        parts["conditions"][c] = {
            "omega_t": sorted(r["id"] for r in decodes if r["condition"] == c and r["correct"]),
            "omega_f": sorted(r["id"] for r in decodes if r["condition"] == c and not r["correct"]),
        }
    write_json(lab.run.path("filter", "partitions.json"), parts)
    return {"known": len(known), "facts": len(facts), "kept": len(kept)}


def stage_locate(lab: Lab, jobs: int) -> dict:
    fids = sorted({f for iid in lab.kept for f in (lab.by_id[iid].fact1.id, lab.by_id[iid].fact2.id)})
    recs = parallel_map(lab, "locate", "locate_unit", fids, jobs)
    head = {"checkpoint": lab.model.digest(), "config": lab.cfg.attribution.digest()}
    write_jsonl(lab.run.path("locate", "kn_sets.jsonl"), ({**head, **r} for r in recs))
    return {"facts": len(fids), "failed": sum(1 for r in recs if r.get("failed"))}


def stage_score(lab: Lab, jobs: int) -> dict:
    fids = sorted(lab.kn_sets)
    write_jsonl(lab.run.path("score", "baselines.jsonl"), parallel_map(lab, "score", "baseline_unit", fids, jobs))
    sanity = [r for r in parallel_map(lab, "score", "sanity_unit", fids, jobs) if r is not None]
    write_jsonl(lab.run.path("score", "sanity.jsonl"), sanity)
    recs = [r for rs in parallel_map(lab, "score", "two_hop_unit", lab.located, jobs) for r in rs]
    write_jsonl(lab.run.path("score", "two_hop.jsonl"), recs)
    write_json(lab.run.path("score", "located.json"), lab.located)
    return {"facts": len(fids), "instances": len(lab.located), "sanity_pairs": len(sanity)}


def stage_intervene(lab: Lab, jobs: int) -> dict:
    recs = [r for rs in parallel_map(lab, "intervene", "intervene_unit", lab.located, jobs) for r in rs]
    write_jsonl(lab.run.path("intervene", "interventions.jsonl"), recs)
    return {"records": len(recs)}


def stage_shortcut(lab: Lab, jobs: int) -> dict:
    base = {r["fact"]: r["score"] for r in read_jsonl(lab.run.path("score", "baselines.jsonl"))}
    recs = rep.shortcut_records(read_jsonl(lab.run.path("score", "two_hop.jsonl")), base, lab.cfg.probe.tau, lab.cfg.probe.tau_grid)
    write_jsonl(lab.run.path("shortcut", "classes.jsonl"), recs)
    return {"records": len(recs)}


def stage_conflict(lab: Lab, jobs: int) -> dict:
    recs = []
    if lab.cfg.conflict.enabled:
        recs = [r for rs in parallel_map(lab, "conflict", "conflict_unit", lab.located, jobs) for r in rs]
    write_jsonl(lab.run.path("conflict", "conflict.jsonl"), recs)
    return {"records": len(recs)}


def stage_report(lab: Lab, jobs: int) -> dict:
    run = lab.run
    results = rep.build_results(
        read_jsonl(run.path("score", "two_hop.jsonl")),
        read_jsonl(run.path("shortcut", "classes.jsonl")),
        read_jsonl(run.path("intervene", "interventions.jsonl")),
        read_jsonl(run.path("conflict", "conflict.jsonl")),
    )
    write_jsonl(run.path("report", "results.jsonl"), results)
    report = rep.aggregate(rep.load_inputs(run.root, results=results), lab.cfg)
    write_json(run.path("report", "report.json"), report)
    run.path("report", "report.txt").write_text(rep.render_text(report), encoding="utf-8")
    _figures(lab, report)
    return {"results": len(results)}


def _figures(lab: Lab, report: dict) -> None:
    fig = lab.run.stage("report") / "figures"
    fig.mkdir(parents=True, exist_ok=True)
    if lab.located:
        inst = lab.by_id[lab.located[0]]
        for cond in lab.cfg.probe.conditions:
            prompt = lab.vocab.encode(" ".join(build_prompt(inst, lab.condition(cond))))
            _, trace = lab.model.forward(prompt, capture=True)
            emit_heatmap(np.stack([a[-1] for a in trace.activations]), fig / f"activations_{cond}", f"FFN activations, {cond}, {inst.id}")
        f = inst.fact1
        amap = multi_token_map(lab.model, lab.fact_queries(f)[0], answer_ids(lab.world, lab.vocab, f.o), lab.cfg.attribution, eoa=lab.vocab.eoa)
        emit_heatmap(amap, fig / "attribution_fact1", f"attribution, {f.id}")
    table = report["kn_scores"]
    if table:
        groups = {c: {"w1 single": (v["w1_single"], 0.0), "w1 two-hop": (v["w1_two"], 0.0),
                      "w2 single": (v["w2_single"], 0.0), "w2 two-hop": (v["w2_two"], 0.0)} for c, v in table.items()}
        bar_chart(groups, fig / "kn_scores.svg", "KN scores by condition")
    conflict = report["conflict"]
    if conflict.get("contexts"):
        for hop in ("w1", "w2"):
            groups = {ctx: {hop: tuple(v[hop])} for ctx, v in conflict["contexts"].items()}
            bar_chart(groups, fig / f"conflict_{hop}.svg", f"{hop} KN score by context (mean, 95% CI)")
    sc = report["shortcut"]
    if sc:
        taus = [float(t) for t in lab.cfg.probe.tau_grid]
        ys = {c: [v["sensitivity"][rep.tau_key(t)]["shares"]["TT"] for t in taus] for c, v in sc.items() if v["n_classified"]}
        if ys:
            series_line_chart(taus, ys, fig / "tt_share_vs_tau.svg", "tau", "TT share")


STAGE_FUNCS: dict[str, Callable[[Lab, int], dict]] = {
    "world": stage_world,
    "train": stage_train,
    "filter": stage_filter,
    "locate": stage_locate,
    "score": stage_score,
    "intervene": stage_intervene,
    "shortcut": stage_shortcut,
    "conflict": stage_conflict,
    "report": stage_report,
}


def stage_hash(cfg: PipelineConfig, stage: str) -> str:
    return cfg.digest(STAGE_SECTIONS[stage])


def run_stage(run: RunDir, cfg: PipelineConfig, stage: str, *, jobs: int = 1, refresh: bool = False) -> str:
    """Run one stage if needed; returns ``"ran"`` or ``"cached"``."""
    digest = stage_hash(cfg, stage)
    for up in UPSTREAM[stage]:
        st = run.stamp(up)
        if st is None:
            raise StageError(stage, f"upstream stage '{up}' has not been run")
        if st["hash"] != stage_hash(cfg, up):
            raise StaleCacheError(f"stage '{up}' was built from a different configuration; rerun it first")
    stamp = run.stamp(stage)
    if stamp is not None and not refresh:
        if stamp["hash"] == digest:
            log.info("%s: cached", stage)
            return "cached"
        raise StaleCacheError(f"stage '{stage}' output was built from a different configuration (use --refresh)")
    lab = Lab(run, cfg)
    t0 = time.perf_counter()
    try:
        info = STAGE_FUNCS[stage](lab, jobs)
    except StageError:
        raise
    except KnplError as e:
        raise StageError(stage, str(e)) from e
    run.write_stamp(stage, digest)
    run.event(stage=stage, status="done", hash=digest, **info)
    log.info("%s: done in %.1fs %s", stage, time.perf_counter() - t0, info)
    return "ran"


def run_pipeline(run_root, cfg: PipelineConfig, *, jobs: int = 1, refresh: bool = False, until: str | None = None) -> dict:
    run = RunDir(run_root)
    run.root.mkdir(parents=True, exist_ok=True)
    cfg_path = run.root / "config.ini"
    if cfg_path.exists() and cfg_path.read_text(encoding="utf-8") != cfg.canonical() and not refresh:
        raise StaleCacheError(f"{cfg_path} differs from the requested configuration (use --refresh)")
    cfg.write(cfg_path)
    status = {}
    for stage in STAGES:
        # a refreshed stage forces its dependants to recompute as well
        force = refresh or any(status.get(u) == "ran" for u in UPSTREAM[stage])
        status[stage] = run_stage(run, cfg, stage, jobs=jobs, refresh=force)
        if stage == until:
            break
    return status

"""Per-instance result logs, their aggregation into the experiment report, and verification.

Every number in ``report.json`` is produced by :func:`aggregate` from files on
disk, so :func:`verify` can recompute it and compare.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import BaselineError, DegenerateSampleError, SamplingError, UndefinedMetricError
from .probe import SHORTCUT_CLASSES, classify_shortcut, delta_ratio, enhance_ratio, pairwise_kn_overlap, suppress_ratio
from .stats import mean_ci, paired_t_test_one_tailed

CONTEXTS = ("none", "distraction", "conflict1", "conflict2")
HEADER_NOTE = (
    "KN scores are flat means over KN members and scored positions; "
    "conflict bars are means with 95% t-intervals; "
    "accuracy deltas are percentage points over all located instances"
)


def tau_key(t: float) -> str:
    return f"{float(t):.2f}"


def _load_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _mean(xs) -> float | None:
    xs = list(xs)
    return float(np.mean(xs)) if xs else None


# --- per-instance logs ----------------------------------------------------------

def shortcut_records(two_hop: Sequence[dict], baselines: Mapping[str, float], tau: float, grid: Sequence[float]) -> list[dict]:
    """Shortcut class of every correctly answered instance, at ``tau`` and across ``grid``."""
    taus = sorted({float(tau), *map(float, grid)})
    out = []
    for r in two_hop:
        if not r["correct"]:
            continue
        b1, b2 = baselines[r["fact1"]], baselines[r["fact2"]]
        rec = {"id": r["id"], "condition": r["condition"], "score1": r["score1"], "score2": r["score2"], "base1": b1, "base2": b2}
        try:
            rec["classes"] = {tau_key(t): classify_shortcut(r["score1"], r["score2"], b1, b2, t) for t in taus}
            rec["class"] = rec["classes"][tau_key(tau)]
        except BaselineError:
            rec["classes"], rec["class"] = None, None
        out.append(rec)
    return out


_EXPERIMENT_ORDER = {"two_hop": 0, "intervention": 1, "conflict": 2}


def build_results(two_hop, classes, interventions, conflict) -> list[dict]:
    """One line per (instance, condition, intervention, context) in a fixed order."""
    cls = {(c["id"], c["condition"]): c for c in classes}
    out = []
    for r in two_hop:
        c = cls.get((r["id"], r["condition"]))
        out.append({
            "experiment": "two_hop", "id": r["id"], "condition": r["condition"], "intervention": "base",
            "context": "none", "answer": r["answer"], "tokens": r["tokens"], "correct": r["correct"],
            "fact1": r["fact1"], "fact2": r["fact2"],
            "score1": r["score1"], "score2": r["score2"],
            "class": c["class"] if c else None, "classes": c["classes"] if c else None,
        })
    for r in interventions:
        out.append({
            "experiment": "intervention", "id": r["id"], "condition": r["condition"], "intervention": r["intervention"],
            "context": "none", "answer": r["answer"], "tokens": r["tokens"], "correct": r["correct"],
            "base_correct": r["base_correct"], "n_neurons": r["n_neurons"],
            "score1": None, "score2": None, "class": None,
        })
    for r in conflict:
        rec = {"experiment": "conflict", "id": r["id"], "context": r["context"], "intervention": "base", "class": None}
        if r.get("skipped"):
            rec.update({"skipped": True, "condition": None, "answer": None, "tokens": None, "correct": None, "score1": None, "score2": None})
        else:
            rec.update({k: r[k] for k in ("condition", "answer", "tokens", "correct", "score1", "score2")})
        out.append(rec)
    out.sort(key=lambda r: (_EXPERIMENT_ORDER[r["experiment"]], r["id"], r["condition"] or "", r["intervention"], CONTEXTS.index(r["context"])))
    return out


def load_inputs(root, results: list[dict] | None = None) -> dict:
    root = Path(root)
    if results is None:
        results = _load_jsonl(root / "report" / "results.jsonl")
    kn = _load_jsonl(root / "locate" / "kn_sets.jsonl")
    return {
        "results": results,
        "facts": _load_jsonl(root / "filter" / "facts.jsonl"),
        "partitions": json.loads((root / "filter" / "partitions.json").read_text(encoding="utf-8")),
        "kn_sets": kn,
        "baselines": _load_jsonl(root / "score" / "baselines.jsonl"),
        "sanity": _load_jsonl(root / "score" / "sanity.jsonl"),
        "located": json.loads((root / "score" / "located.json").read_text(encoding="utf-8")),
        "train_log": _load_jsonl(root / "train" / "train_log.jsonl"),
    }


# --- aggregation ------------------------------------------------------------------

def _ttest(a, b, alpha) -> dict:
    try:
        r = paired_t_test_one_tailed(a, b, alpha)
    except DegenerateSampleError as e:
        return {"n": len(a), "error": str(e)}
    return {"n": r.n, "t": r.t, "p": r.p, "reject": r.reject, "mean_diff": r.mean_diff}


def _kn_table(results, baselines, conditions) -> dict:
    table = {}
    for cond in conditions:
        recs = [r for r in results if r["experiment"] == "two_hop" and r["condition"] == cond]
        if not recs:
            continue
        row = {"n": len(recs), "accuracy": 100.0 * sum(r["correct"] for r in recs) / len(recs)}
        for h in (1, 2):
            single = float(np.mean([baselines[r[f"fact{h}"]] for r in recs]))
            two = float(np.mean([r[f"score{h}"] for r in recs]))
            row[f"w{h}_single"] = single
            row[f"w{h}_two"] = two
            try:
                row[f"delta{h}"] = delta_ratio(single, two)
            except UndefinedMetricError:
                row[f"delta{h}"] = None
        table[cond] = row
    return table


def _intervention_block(recs: list[dict], n_all: int) -> dict:
    enh = {r["id"]: r["correct"] for r in recs if r["intervention"].startswith("enhance")}
    sup = {r["id"]: r["correct"] for r in recs if r["intervention"].startswith("suppress")}
    base = {r["id"]: r["base_correct"] for r in recs}
    omega_t = sorted(i for i, ok in base.items() if ok)
    omega_f = sorted(i for i, ok in base.items() if not ok)
    out = {"n_t": len(omega_t), "n_f": len(omega_f)}
    out["flipped_enhance"] = sum(bool(enh[i]) for i in omega_f)
    out["flipped_suppress"] = sum(not sup[i] for i in omega_t)
    out["ER"] = enhance_ratio(omega_f, enh) if omega_f else None
    out["SR"] = suppress_ratio(omega_t, sup) if omega_t else None
    if n_all:
        acc = 100.0 * len(omega_t) / n_all
        out["acc_enhance"] = 100.0 * sum(map(bool, enh.values())) / n_all
        out["acc_suppress"] = 100.0 * sum(map(bool, sup.values())) / n_all
        out["delta_acc_enhance"] = out["acc_enhance"] - acc
        out["delta_acc_suppress"] = out["acc_suppress"] - acc
    sizes = [r["n_neurons"] for r in recs]
    out["mean_neurons"] = _mean(sizes)
    return out


def _interventions(results, conditions, targets) -> dict:
    recs = [r for r in results if r["experiment"] == "intervention"]
    out = {}
    for cond in conditions:
        rc = [r for r in recs if r["condition"] == cond]
        if not rc:
            continue
        ids = {r["id"] for r in rc}
        base_t = len({r["id"] for r in rc if r["base_correct"]})
        block = {"n": len(ids), "n_t": base_t, "n_f": len(ids) - base_t, "acc_base": 100.0 * base_t / len(ids), "targets": {}}
        for t in targets:
            block["targets"][t] = _intervention_block([r for r in rc if r["intervention"].endswith(":" + t)], len(ids))
        out[cond] = block
    pooled = {}
    for t in targets:
        rt = [r for r in recs if r["intervention"].endswith(":" + t)]
        if not rt:
            continue
        n_t = sum(1 for r in rt if r["intervention"].startswith("suppress") and r["base_correct"])
        n_f = sum(1 for r in rt if r["intervention"].startswith("enhance") and not r["base_correct"])
        fe = sum(1 for r in rt if r["intervention"].startswith("enhance") and not r["base_correct"] and r["correct"])
        fs = sum(1 for r in rt if r["intervention"].startswith("suppress") and r["base_correct"] and not r["correct"])
        pooled[t] = {
            "n_t": n_t, "n_f": n_f, "flipped_enhance": fe, "flipped_suppress": fs,
            "ER": 100.0 * fe / n_f if n_f else None, "SR": 100.0 * fs / n_t if n_t else None,
        }
    if pooled:
        out["pooled"] = {"targets": pooled}
    return out


def _shortcuts(results, conditions, tau, grid) -> dict:
    out = {}
    taus = sorted({float(tau), *map(float, grid)})
    for cond in conditions:
        recs = [r for r in results if r["experiment"] == "two_hop" and r["condition"] == cond and r["correct"]]
        done = [r for r in recs if r["classes"] is not None]
        block = {"n_correct": len(recs), "n_classified": len(done), "n_undefined": len(recs) - len(done), "sensitivity": {}}
        for t in taus:
            counts = {c: sum(1 for r in done if r["classes"][tau_key(t)] == c) for c in SHORTCUT_CLASSES}
            shares = {c: (counts[c] / len(done) if done else None) for c in SHORTCUT_CLASSES}
            block["sensitivity"][tau_key(t)] = {"counts": counts, "shares": shares}
        main = block["sensitivity"][tau_key(tau)]
        block["counts"] = main["counts"]
        block["shares"] = main["shares"]
        block["MH"] = main["shares"]["TT"]
        block["SC"] = (1.0 - main["shares"]["TT"]) if done else None
        out[cond] = block
    return out


def _conflict(results, alpha) -> dict:
    recs = [r for r in results if r["experiment"] == "conflict" and not r.get("skipped")]
    if not recs:
        return {"contexts": {}, "tests": []}
    by = {(r["id"], r["context"]): r for r in recs}
    contexts = {}
    for ctx in CONTEXTS:
        rc = [r for r in recs if r["context"] == ctx]
        if not rc:
            continue
        contexts[ctx] = {
            "n": len(rc),
            "accuracy": 100.0 * sum(r["correct"] for r in rc) / len(rc),
            "w1": list(mean_ci([r["score1"] for r in rc])),
            "w2": list(mean_ci([r["score2"] for r in rc])),
        }
    tests = []
    for h in (1, 2):
        hi = f"conflict{h}"
        for lo in ("none", "distraction", f"conflict{3 - h}"):
            ids = sorted(i for (i, c) in by if c == hi and (i, lo) in by)
            a = [by[(i, hi)][f"score{h}"] for i in ids]
            b = [by[(i, lo)][f"score{h}"] for i in ids]
            tests.append({"hop": h, "higher": hi, "lower": lo, **_ttest(a, b, alpha)})
    return {"contexts": contexts, "tests": tests}


def _overlap(kn_records, n_pairs, seed) -> dict:
    sets = [frozenset(tuple(m) for m in r["members"]) for r in sorted(kn_records, key=lambda r: r["fact"]) if not r.get("failed")]
    if len(sets) < 2:
        return {}
    total = len(sets) * (len(sets) - 1) // 2
    try:
        st = pairwise_kn_overlap(sets, min(n_pairs, total), seed)
    except SamplingError:
        return {}
    return {
        "n_sets": len(sets), "n_pairs": st.n_pairs,
        "size_mean": st.size_mean, "size_median": st.size_median, "size_max": st.size_max,
        "inter_mean": st.inter_mean, "inter_median": st.inter_median, "inter_max": st.inter_max,
    }


def _sanity(records, alpha) -> dict:
    if not records:
        return {"n": 0}
    a = [r["expressing"] for r in records]
    b = [r["non_expressing"] for r in records]
    return {"mean_expressing": float(np.mean(a)), "mean_non_expressing": float(np.mean(b)), **_ttest(a, b, alpha)}


def aggregate(inputs: dict, cfg) -> dict:
    results = inputs["results"]
    facts = inputs["facts"]
    known = sum(1 for r in facts if r["known"])
    parts = inputs["partitions"]
    kn = inputs["kn_sets"]
    baselines = {r["fact"]: r["score"] for r in inputs["baselines"]}
    conditions = list(cfg.probe.conditions)
    last = inputs["train_log"][-1] if inputs["train_log"] else {}
    checkpoint = kn[0]["checkpoint"] if kn else None
    return {
        "header": {
            "config_hash": cfg.digest(), "checkpoint": checkpoint, "positions": cfg.probe.positions,
            "tau": cfg.probe.tau, "enhance_factor": cfg.probe.enhance_factor, "conditions": conditions,
            "conflict_condition": cfg.conflict.condition, "note": HEADER_NOTE,
        },
        "filter": {
            "n_facts": len(facts), "n_known": known, "recall": known / len(facts) if facts else None,
            "n_instances": len(parts["kept"]) + len(parts["dropped"]), "n_kept": len(parts["kept"]),
            "n_located": len(inputs["located"]),
            "n_kn_failed": sum(1 for r in kn if r.get("failed")),
            "final_train_loss": last.get("mean_loss"),
        },
        "kn_scores": _kn_table(results, baselines, conditions),
        "interventions": _interventions(results, conditions, list(cfg.probe.targets)),
        "shortcut": _shortcuts(results, conditions, cfg.probe.tau, cfg.probe.tau_grid),
        "conflict": _conflict(results, cfg.conflict.alpha) if cfg.conflict.enabled else {"contexts": {}, "tests": []},
        "overlap": _overlap(kn, cfg.probe.overlap_pairs, cfg.probe.overlap_seed),
        "sanity": _sanity(inputs["sanity"], cfg.conflict.alpha),
    }


# --- rendering -----------------------------------------------------------------------

def _f(v, nd: int = 4) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.{nd}f}"
    return str(v)


def render_text(report: dict) -> str:
    """Tab-delimited sections, each opened by a ``=== name ===`` line."""
    out = []

    def section(name, header, rows):
        out.append(f"=== {name} ===")
        out.append("\t".join(header))
        out.extend("\t".join(_f(c) for c in row) for row in rows)
        out.append("")

    h = report["header"]
    out.append("=== header ===")
    out.extend(f"{k}\t{_f(v) if not isinstance(v, list) else ','.join(v)}" for k, v in sorted(h.items()))
    out.append("")
    section("filter", ["key", "value"], sorted(report["filter"].items()))
    section(
        "kn_scores", ["condition", "n", "accuracy", "w1_single", "w1_two", "delta1", "w2_single", "w2_two", "delta2"],
        [[c, v["n"], v["accuracy"], v["w1_single"], v["w1_two"], v["delta1"], v["w2_single"], v["w2_two"], v["delta2"]] for c, v in report["kn_scores"].items()],
    )
    rows = []
    for c, block in report["interventions"].items():
        for t, v in block["targets"].items():
            rows.append([c, t, v["n_f"], v["ER"], v["n_t"], v["SR"], v.get("delta_acc_enhance"), v.get("delta_acc_suppress")])
    section("interventions", ["condition", "target", "n_f", "ER", "n_t", "SR", "delta_acc_enhance", "delta_acc_suppress"], rows)
    rows = []
    for c, v in report["shortcut"].items():
        for t, s in v["sensitivity"].items():
            rows.append([c, t, v["n_classified"], *[s["shares"][k] for k in SHORTCUT_CLASSES]])
    section("shortcut", ["condition", "tau", "n", *SHORTCUT_CLASSES], rows)
    conf = report["conflict"]
    section(
        "conflict_scores", ["context", "n", "accuracy", "w1_mean", "w1_ci95", "w2_mean", "w2_ci95"],
        [[c, v["n"], v["accuracy"], v["w1"][0], v["w1"][1], v["w2"][0], v["w2"][1]] for c, v in conf["contexts"].items()],
    )
    section(
        "conflict_tests", ["hop", "higher", "lower", "n", "t", "p", "reject"],
        [[t["hop"], t["higher"], t["lower"], t["n"], t.get("t"), t.get("p"), t.get("reject")] for t in conf["tests"]],
    )
    section("overlap", ["key", "value"], sorted(report["overlap"].items()))
    section("sanity", ["key", "value"], sorted(report["sanity"].items()))
    return "\n".join(out)


# --- verification ----------------------------------------------------------------

def _diff(a, b, path: str, out: list) -> None:
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            if k not in a or k not in b:
                out.append(f"{path}/{k}: present on one side only")
            else:
                _diff(a[k], b[k], f"{path}/{k}", out)
    elif isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            out.append(f"{path}: length {len(a)} != {len(b)}")
        for i, (x, y) in enumerate(zip(a, b)):
            _diff(x, y, f"{path}/{i}", out)
    elif a != b and not (isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b)):
        out.append(f"{path}: report {a!r} != recomputed {b!r}")


def verify(root, cfg) -> list[str]:
    """Discrepancies between the stored report and a re-aggregation of the logs."""
    root = Path(root)
    problems: list[str] = []
    rebuilt = build_results(
        _load_jsonl(root / "score" / "two_hop.jsonl"),
        _load_jsonl(root / "shortcut" / "classes.jsonl"),
        _load_jsonl(root / "intervene" / "interventions.jsonl"),
        _load_jsonl(root / "conflict" / "conflict.jsonl"),
    )
    stored_results = _load_jsonl(root / "report" / "results.jsonl")
    if rebuilt != stored_results:
        problems.append("report/results.jsonl does not match the stage logs")
    stored = json.loads((root / "report" / "report.json").read_text(encoding="utf-8"))
    fresh = json.loads(json.dumps(aggregate(load_inputs(root, stored_results), cfg)))
    _diff(stored, fresh, "", problems)
    return problems

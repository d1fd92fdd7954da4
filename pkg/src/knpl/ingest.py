"""Real-data path: popular entities and two-hop chains from a SPARQL endpoint.

All network traffic goes through a :class:`Transport`. Tests replay recorded
request/response fixtures; live requests are opt-in, rate limited and cached
on disk by request hash.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import re
import sys
import time
import urllib.error
import urllib.parse
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .corpus import (
    FactTriplet,
    KnowledgeGraph,
    TwoHopInstance,
    dumps_line,
    make_relation,
    render_queries,
    render_reason_question,
    write_corpus,
    write_world,
)
from .errors import ConfigError, NetworkError, ParseError, TemplateError

log = logging.getLogger("knpl.ingest")

DEFAULT_ALLOWLIST = (
    "P30", "P36", "P35", "P1037", "P1308", "P164", "P449", "P488", "P178", "P159", "P286",
    "P413", "P641", "P800", "P937", "P136", "P106", "P495", "P740", "P37", "P407", "P170",
    "P50", "P364", "P112", "P108", "P175", "P27", "P40", "P69", "P19",
)
SPARQL_ENDPOINT = "https://query.wikidata.org/sparql"
PAGEVIEW_ENDPOINT = "https://wikimedia.org/api/rest_v1/metrics/pageviews"
ENTITY_PREFIX = "http://www.wikidata.org/entity/"
USER_AGENT = "knpl-ingest/0.1 (research tool)"


# --- transport ---------------------------------------------------------------------

@dataclass(frozen=True)
class Response:
    status: int
    body: str


def request_key(url: str, params: Mapping[str, str]) -> str:
    blob = json.dumps({"url": url, "params": dict(sorted(params.items()))}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class Transport(Protocol):
    def get(self, url: str, params: Mapping[str, str]) -> Response: ...


class TransportError(Exception):
    """A failed attempt that is worth retrying."""


class UrllibTransport:
    """Live HTTP GET through the standard library."""

    def __init__(self, timeout: float = 60.0, user_agent: str = USER_AGENT):
        self.timeout = timeout
        self.user_agent = user_agent

    def get(self, url: str, params: Mapping[str, str]) -> Response:
        full = url + ("?" + urllib.parse.urlencode(sorted(params.items())) if params else "")
        req = urllib.request.Request(full, headers={"User-Agent": self.user_agent, "Accept": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as fh:
                return Response(fh.status, fh.read().decode("utf-8"))
        except urllib.error.HTTPError as e:
            return Response(e.code, e.read().decode("utf-8", "replace"))
        except (urllib.error.URLError, OSError) as e:
            raise TransportError(str(e)) from e


class RateLimitedTransport:
    """Keeps at least ``min_interval`` seconds between consecutive requests."""

    def __init__(self, inner: Transport, min_interval: float = 1.0, clock=time.monotonic, sleep=time.sleep):
        self.inner = inner
        self.min_interval = min_interval
        self.clock = clock
        self.sleep = sleep
        self._last: float | None = None

    def get(self, url, params):
        if self._last is not None:
            wait = self.min_interval - (self.clock() - self._last)
            if wait > 0:
                self.sleep(wait)
        try:
            return self.inner.get(url, params)
        finally:
            self._last = self.clock()


def _fixture_record(url, params, resp: Response) -> dict:
    return {"request": {"url": url, "params": dict(sorted(params.items()))}, "status": resp.status, "body": resp.body}


class FixtureTransport:
    """Replays ``<dir>/<request hash>.json`` files; a missing file is a network failure."""

    def __init__(self, directory):
        self.dir = Path(directory)

    def get(self, url, params):
        path = self.dir / f"{request_key(url, params)}.json"
        if not path.exists():
            raise NetworkError(f"no recorded response for {url} {dict(params)} ({path.name})")
        rec = json.loads(path.read_text(encoding="utf-8"))
        return Response(int(rec["status"]), rec["body"])


class CachingTransport:
    """Serves repeated requests from disk; stores successful responses in fixture format."""

    def __init__(self, inner: Transport, directory):
        self.inner = inner
        self.dir = Path(directory)

    def get(self, url, params):
        path = self.dir / f"{request_key(url, params)}.json"
        if path.exists():
            rec = json.loads(path.read_text(encoding="utf-8"))
            return Response(int(rec["status"]), rec["body"])
        resp = self.inner.get(url, params)
        if resp.status < 500:
            self.dir.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(_fixture_record(url, params, resp), sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return resp


# --- client ------------------------------------------------------------------------

@dataclass
class KGClient:
    transport: Transport
    sparql_endpoint: str = SPARQL_ENDPOINT
    pageview_endpoint: str = PAGEVIEW_ENDPOINT
    query_date: dt.date = field(default_factory=dt.date.today)
    attempts: int = 3
    backoff: float = 1.0
    sleep: Callable[[float], None] = time.sleep
    candidate_limit: int = 2000
    batch_size: int = 50

    def __post_init__(self):
        if not self.sparql_endpoint:
            raise ConfigError("client needs an endpoint URL")

    def get(self, url: str, params: Mapping[str, str], *, missing_ok: bool = False) -> Response:
        """GET with up to ``attempts`` tries and exponential backoff between them."""
        last = ""
        for k in range(self.attempts):
            if k:
                self.sleep(self.backoff * 2 ** (k - 1))
            try:
                resp = self.transport.get(url, params)
            except TransportError as e:
                last = str(e)
                continue
            if resp.status == 200 or (missing_ok and resp.status == 404):
                return resp
            if resp.status >= 500 or resp.status == 429:
                last = f"HTTP {resp.status}"
                continue
            raise NetworkError(f"HTTP {resp.status} from {url}")
        raise NetworkError(f"request to {url} failed after {self.attempts} attempts: {last}")

    def sparql(self, query: str) -> list[dict]:
        resp = self.get(self.sparql_endpoint, {"query": query, "format": "json"})
        return parse_bindings(resp.body)

    def pageviews(self, title: str) -> int:
        start, end = pageview_window(self.query_date)
        url = (f"{self.pageview_endpoint}/per-article/en.wikipedia/all-access/user/"
               f"{urllib.parse.quote(title.replace(' ', '_'), safe='')}/monthly/{start}/{end}")
        resp = self.get(url, {}, missing_ok=True)
        if resp.status == 404:
            return 0
        return parse_pageviews(resp.body)


def pageview_window(day: dt.date) -> tuple[str, str]:
    """The twelve complete calendar months before ``day`` as API timestamps."""
    first_this = day.replace(day=1)
    last_prev = first_this - dt.timedelta(days=1)
    y, m = first_this.year - 1, first_this.month
    start = dt.date(y, m, 1)
    return start.strftime("%Y%m%d00"), last_prev.strftime("%Y%m%d00")


def _excerpt(text: str, n: int = 120) -> str:
    return text[:n]


def parse_bindings(body: str) -> list[dict]:
    """Flatten SPARQL JSON results into ``{var: value}`` rows."""
    try:
        doc = json.loads(body)
        rows = doc["results"]["bindings"]
        return [{k: v["value"] for k, v in row.items()} for row in rows]
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"malformed SPARQL response: {e}", _excerpt(body)) from e


def parse_pageviews(body: str) -> int:
    try:
        items = json.loads(body)["items"]
        total = sum(int(it["views"]) for it in items)
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"malformed pageview response: {e}", _excerpt(body)) from e
    if total < 0:
        raise ParseError("negative pageview count", _excerpt(body))
    return total


def entity_id(uri: str) -> str:
    if not uri.startswith(ENTITY_PREFIX):
        raise ParseError("unexpected entity URI", _excerpt(uri))
    return uri[len(ENTITY_PREFIX):]


def _qnum(qid: str) -> tuple[int, str]:
    digits = qid[1:]
    return (int(digits) if digits.isdigit() else 0, qid)


# --- queries -----------------------------------------------------------------------

def _values(var: str, prefix: str, ids: Iterable[str]) -> str:
    return "VALUES ?%s { %s }" % (var, " ".join(f"{prefix}:{i}" for i in ids))


def candidate_query(allowlist: Sequence[str], limit: int) -> str:
    return (
        "SELECT DISTINCT ?item ?itemLabel ?article WHERE { "
        + _values("p", "wdt", sorted(allowlist))
        + " ?item ?p ?o . ?article schema:about ?item ; schema:isPartOf <https://en.wikipedia.org/> . "
        'SERVICE wikibase:label { bd:serviceParam wikibase:language "en". } } '
        f"ORDER BY ?item LIMIT {limit}"
    )


def statements_query(subjects: Sequence[str], allowlist: Sequence[str]) -> str:
    return (
        "SELECT ?s ?p ?o ?oLabel WHERE { "
        + _values("s", "wd", subjects) + " " + _values("p", "wdt", sorted(allowlist))
        + " ?s ?p ?o . FILTER(isIRI(?o)) "
        'SERVICE wikibase:label { bd:serviceParam wikibase:language "en". } } '
        "ORDER BY ?s ?p ?o"
    )


def property_label_query(props: Sequence[str]) -> str:
    return (
        "SELECT ?prop ?propLabel WHERE { " + _values("prop", "wd", sorted(props))
        + ' SERVICE wikibase:label { bd:serviceParam wikibase:language "en". } } ORDER BY ?prop'
    )


# --- operations ------------------------------------------------------------------

@dataclass(frozen=True)
class EntityPopularity:
    id: str
    label: str
    pageviews: int

    def __post_init__(self):
        if self.pageviews < 0:
            raise ValueError("pageviews must be non-negative")


def rank_entities(entities: Iterable[EntityPopularity], top_k: int) -> list[EntityPopularity]:
    """Pageviews descending, ties by entity id ascending."""
    if top_k < 1:
        raise ConfigError("top_k must be at least 1")
    return sorted(entities, key=lambda e: (-e.pageviews, _qnum(e.id)))[:top_k]


def fetch_popular_entities(client: KGClient, top_k: int, allowlist: Sequence[str] = DEFAULT_ALLOWLIST) -> list[EntityPopularity]:
    if top_k < 1:
        raise ConfigError("top_k must be at least 1")
    rows = client.sparql(candidate_query(allowlist, client.candidate_limit))
    seen: dict[str, tuple[str, str]] = {}
    for row in rows:
        try:
            qid = entity_id(row["item"])
            label = row["itemLabel"]
            title = urllib.parse.unquote(row["article"].rsplit("/wiki/", 1)[1])
        except (KeyError, IndexError) as e:
            raise ParseError("candidate row lacks item, label or article", _excerpt(json.dumps(row))) from e
        seen.setdefault(qid, (label, title))
    out = [EntityPopularity(q, lab, client.pageviews(title)) for q, (lab, title) in sorted(seen.items(), key=lambda kv: _qnum(kv[0]))]
    return rank_entities(out, top_k)


@dataclass(frozen=True)
class Chain:
    s: str
    r1: str
    o1: str
    r2: str
    o2: str


@dataclass
class ChainSet:
    chains: list[Chain]
    labels: dict[str, str]
    relation_labels: dict[str, str]
    skips: Counter


def _statements(client: KGClient, subjects: Sequence[str], allowlist: Sequence[str]) -> tuple[dict, dict]:
    by_subject: dict[str, dict[str, set[str]]] = {}
    labels: dict[str, str] = {}
    subjects = sorted(set(subjects), key=_qnum)
    for i in range(0, len(subjects), client.batch_size):
        batch = subjects[i:i + client.batch_size]
        for row in client.sparql(statements_query(batch, allowlist)):
            try:
                s, o = entity_id(row["s"]), entity_id(row["o"])
                p = row["p"].rsplit("/", 1)[1]
            except (KeyError, IndexError) as e:
                raise ParseError("statement row lacks s, p or o", _excerpt(json.dumps(row))) from e
            by_subject.setdefault(s, {}).setdefault(p, set()).add(o)
            if "oLabel" in row:
                labels[o] = row["oLabel"]
    return by_subject, labels


def normalize_label(label: str) -> str:
    text = re.sub(r"[^\w\s'-]", " ", label.lower())
    return " ".join(text.split())


def extract_two_hop(client: KGClient, entities: Sequence[EntityPopularity], allowlist: Sequence[str] = DEFAULT_ALLOWLIST) -> ChainSet:
    """Chains ``(s, r1, o1), (o1, r2, o2)`` with both relations allowlisted.

    Candidates that break the bridge or uniqueness rules are dropped and
    counted by reason in ``skips``.
    """
    if not entities:
        raise ConfigError("need at least one entity")
    allow = set(allowlist)
    if not allow:
        raise ConfigError("relation allowlist is empty")
    labels = {e.id: e.label for e in entities}
    hop1, l1 = _statements(client, [e.id for e in entities], sorted(allow))
    bridges = sorted({o for ps in hop1.values() for os_ in ps.values() for o in os_}, key=_qnum)
    hop2, l2 = _statements(client, bridges, sorted(allow)) if bridges else ({}, {})
    for d in (l1, l2):
        for k, v in d.items():
            labels.setdefault(k, v)
    props = sorted({p for h in (hop1, hop2) for ps in h.values() for p in ps})
    rel_labels = {}
    if props:
        for row in client.sparql(property_label_query(props)):
            rel_labels[entity_id(row["prop"])] = row.get("propLabel", "")
    skips: Counter = Counter()
    chains: list[Chain] = []
    for e in sorted(entities, key=lambda e: _qnum(e.id)):
        for r1 in sorted(hop1.get(e.id, {})):
            objs1 = hop1[e.id][r1]
            for o1 in sorted(objs1, key=_qnum):
                for r2 in sorted(hop2.get(o1, {})):
                    for o2 in sorted(hop2[o1][r2], key=_qnum):
                        reason = _chain_problem(e.id, r1, o1, r2, o2, objs1, hop2[o1][r2], allow, labels, rel_labels)
                        if reason:
                            skips[reason] += 1
                        else:
                            chains.append(Chain(e.id, r1, o1, r2, o2))
    return ChainSet(chains, labels, rel_labels, skips)


def _chain_problem(s, r1, o1, r2, o2, objs1, objs2, allow, labels, rel_labels) -> str | None:
    if r1 not in allow or r2 not in allow:
        return "relation_not_allowlisted"
    if len(objs1) != 1 or len(objs2) != 1:
        return "not_functional"
    if len({s, o1, o2}) != 3:
        return "bridge_cycle"
    names = [normalize_label(labels.get(x, "")) for x in (s, o1, o2)]
    if not all(names) or any(re.fullmatch(r"q\d+", n) for n in names):
        return "missing_label"
    if len(set(names)) != 3:
        return "label_collision"
    if not normalize_label(rel_labels.get(r1, "")) or not normalize_label(rel_labels.get(r2, "")):
        return "missing_relation_label"
    return None


def render_corpus(cs: ChainSet) -> tuple[KnowledgeGraph, list[TwoHopInstance], Counter]:
    """Turn chains into a world and instances using the template banks."""
    skips: Counter = Counter()
    ids = sorted({x for c in cs.chains for x in (c.s, c.o1, c.o2)}, key=_qnum)
    names = [normalize_label(cs.labels[q]) for q in ids]
    if len(set(names)) != len(names):
        raise ConfigError("distinct entities share a normalized label")
    ent = {q: i for i, q in enumerate(ids)}
    props = sorted({p for c in cs.chains for p in (c.r1, c.r2)}, key=_qnum)
    rel = {p: i for i, p in enumerate(props)}
    relations = [make_relation(rel[p], normalize_label(cs.relation_labels[p])) for p in props]
    facts = sorted({FactTriplet(ent[c.s], rel[c.r1], ent[c.o1]) for c in cs.chains}
                   | {FactTriplet(ent[c.o1], rel[c.r2], ent[c.o2]) for c in cs.chains})
    kg = KnowledgeGraph(names, relations, facts)
    instances = []
    for c in cs.chains:
        f1 = FactTriplet(ent[c.s], rel[c.r1], ent[c.o1])
        f2 = FactTriplet(ent[c.o1], rel[c.r2], ent[c.o2])
        try:
            q1, q2 = render_queries(f1, kg), render_queries(f2, kg)
            inst = TwoHopInstance(f"w{len(instances):04d}", f1, f2, tuple(q1), tuple(q2),
                                  render_reason_question(f1, f2, kg), f2.o)
        except (TemplateError, ConfigError, ValueError):
            skips["render_failed"] += 1
            continue
        instances.append(inst)
    return kg, instances, skips


def write_ingest(out_dir, entities: Sequence[EntityPopularity], cs: ChainSet, allowlist: Sequence[str], query_date: dt.date) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kg, instances, render_skips = render_corpus(cs)
    paths = {
        "entities": out / "entities.jsonl",
        "chains": out / "chains.jsonl",
        "world": out / "world.json",
        "corpus": out / "corpus.jsonl",
        "skips": out / "skips.json",
        "meta": out / "meta.json",
    }
    with open(paths["entities"], "w", encoding="utf-8", newline="\n") as fh:
        for e in entities:
            fh.write(dumps_line({"id": e.id, "label": e.label, "pageviews": e.pageviews}) + "\n")
    with open(paths["chains"], "w", encoding="utf-8", newline="\n") as fh:
        for c in cs.chains:
            fh.write(dumps_line({"s": c.s, "r1": c.r1, "o1": c.o1, "r2": c.r2, "o2": c.o2}) + "\n")
    write_world(paths["world"], kg)
    write_corpus(paths["corpus"], instances)
    skips = dict(sorted((cs.skips + render_skips).items()))
    paths["skips"].write_text(json.dumps(skips, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    start, end = pageview_window(query_date)
    meta = {
        "query_date": query_date.isoformat(), "pageview_window": [start, end],
        "allowlist": sorted(allowlist, key=lambda p: int(p[1:])),
        "entities": len(entities), "chains": len(cs.chains), "instances": len(instances),
    }
    paths["meta"].write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return paths


# --- command line -----------------------------------------------------------------

def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="knpl ingest", description="Build two-hop records from a public knowledge graph.")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--top-k", type=int, default=500)
    p.add_argument("--fixtures", type=Path, help="replay recorded responses from this directory (no network)")
    p.add_argument("--live", action="store_true", help="allow live HTTP requests")
    p.add_argument("--cache", type=Path, help="on-disk response cache for live requests")
    p.add_argument("--endpoint", default=SPARQL_ENDPOINT)
    p.add_argument("--pageview-endpoint", default=PAGEVIEW_ENDPOINT)
    p.add_argument("--date", type=dt.date.fromisoformat, default=None, help="query date anchoring the pageview window")
    p.add_argument("--allow", default=",".join(DEFAULT_ALLOWLIST), help="comma-separated relation codes")
    args = p.parse_args(argv)
    if args.fixtures:
        transport: Transport = FixtureTransport(args.fixtures)
    elif args.live:
        transport = RateLimitedTransport(UrllibTransport(), 1.0)
        if args.cache:
            transport = CachingTransport(transport, args.cache)
    else:
        print("error: live requests are opt-in; pass --live or --fixtures DIR", file=sys.stderr)
        return 2
    allow = tuple(a.strip() for a in args.allow.split(",") if a.strip())
    client = KGClient(transport, args.endpoint, args.pageview_endpoint, args.date or dt.date.today())
    try:
        entities = fetch_popular_entities(client, args.top_k, allow)
        chains = extract_two_hop(client, entities, allow)
        paths = write_ingest(args.out, entities, chains, allow, client.query_date)
    except (NetworkError, ParseError, ConfigError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    for k, v in paths.items():
        print(f"{k}\t{v}")
    return 0

"""Synthetic two-hop fact world, query rendering, prompts and context sentences."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CandidateExhaustionError, CapacityError, ConfigError, TemplateError

SCHEMA_VERSION = 1

PAD, BOS, SEP, EOA = "<pad>", "<bos>", "<sep>", "<eoa>"
SPECIALS = (PAD, BOS, SEP, EOA)
CHAIN_WORD = "so"
ZERO_SHOT_INSTRUCTION = "let us think step by step ."

# Frames for single-hop queries; ``{rel}`` and ``{s}`` are filled per fact.
QUERY_FRAMES = (
    "what is the {rel} of {s} ?",
    "who or what is the {rel} of {s} ?",
    "name the {rel} of {s} .",
    "tell me the {rel} of {s} .",
    "which {rel} does {s} have ?",
    "which entity serves as the {rel} of {s} ?",
)
REASON_FRAME = "what is the {r2} of the {r1} of {s} ?"
STATEMENT_FRAME = "the {rel} of {s} is {o} ."

RELATION_NAMES = (
    "capital", "founder", "leader", "author", "owner", "language", "country",
    "director", "creator", "mentor", "rival", "partner", "successor", "sponsor",
    "patron", "architect",
)
DISTRACTOR_RELATION_NAMES = ("neighbor", "tutor", "keeper", "herald")

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kl", "st", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "", "n", "r", "l", "s", "th", "x")


@dataclass(frozen=True, order=True)
class FactTriplet:
    s: int
    r: int
    o: int

    def __post_init__(self):
        if self.s == self.o:
            raise ValueError("fact subject and object must differ")

    @property
    def id(self) -> str:
        return f"{self.s}:{self.r}:{self.o}"


@dataclass(frozen=True)
class Relation:
    id: int
    name: str
    templates: tuple[str, ...]
    statement: str


@dataclass(frozen=True)
class CotDemo:
    question: str
    bridge: str
    answer: str


@dataclass(frozen=True)
class TwoHopInstance:
    id: str
    fact1: FactTriplet
    fact2: FactTriplet
    fact1_queries: tuple[str, ...]
    fact2_queries: tuple[str, ...]
    reason_q: str
    answer: int
    cot_demos: tuple[CotDemo, ...] = ()

    def __post_init__(self):
        if self.fact1.o != self.fact2.s:
            raise ValueError(f"{self.id}: bridge mismatch")
        if self.answer != self.fact2.o:
            raise ValueError(f"{self.id}: answer is not the second-hop object")
        for qs in (self.fact1_queries, self.fact2_queries):
            if len(set(qs)) < 5 or len(set(qs)) != len(qs):
                raise ValueError(f"{self.id}: need at least five distinct queries per hop")

    @property
    def bridge(self) -> int:
        return self.fact1.o

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "fact1": asdict(self.fact1),
            "fact2": asdict(self.fact2),
            "fact1_queries": list(self.fact1_queries),
            "fact2_queries": list(self.fact2_queries),
            "reason_q": self.reason_q,
            "answer": self.answer,
            "cot_demos": [asdict(d) for d in self.cot_demos],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TwoHopInstance":
        return cls(
            id=rec["id"],
            fact1=FactTriplet(**rec["fact1"]),
            fact2=FactTriplet(**rec["fact2"]),
            fact1_queries=tuple(rec["fact1_queries"]),
            fact2_queries=tuple(rec["fact2_queries"]),
            reason_q=rec["reason_q"],
            answer=rec["answer"],
            cot_demos=tuple(CotDemo(**d) for d in rec["cot_demos"]),
        )


@dataclass(frozen=True)
class ContextSentence:
    kind: str  # "conflict" | "distraction"
    text: str
    hop: int | None = None
    conflicting_object: int | None = None


@dataclass(frozen=True)
class PromptCondition:
    kind: str  # "no_cot" | "zero_shot" | "few_shot"
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("no_cot", "zero_shot", "few_shot"):
            raise ConfigError(f"unknown prompt condition {self.kind!r}")
        if self.kind == "few_shot" and self.k < 1:
            raise ConfigError("few-shot condition needs k >= 1")

    @property
    def name(self) -> str:
        return self.kind

    @classmethod
    def parse(cls, name: str, k: int = 4) -> "PromptCondition":
        return cls(name, k if name == "few_shot" else 0)


NO_COT = PromptCondition("no_cot")
ZERO_SHOT = PromptCondition("zero_shot")


@dataclass
class KnowledgeGraph:
    """Entities, functional relations and facts, plus a disjoint distractor pool."""

    entities: list[str]
    relations: list[Relation]
    facts: list[FactTriplet]
    distractor_entities: list[str] = field(default_factory=list)
    distractor_relations: list[str] = field(default_factory=list)
    distractor_facts: list[tuple[int, int, int]] = field(default_factory=list)
    demos: list[TwoHopInstance] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self._index()

    def _index(self):
        self._object_of = {}
        for f in self.facts:
            key = (f.s, f.r)
            if key in self._object_of and self._object_of[key] != f.o:
                raise ValueError(f"relation {f.r} is not functional at subject {f.s}")
            self._object_of[key] = f.o
        self._by_subject: dict[int, list[FactTriplet]] = {}
        for f in self.facts:
            self._by_subject.setdefault(f.s, []).append(f)

    def name(self, entity: int) -> str:
        return self.entities[entity]

    def object_of(self, s: int, r: int) -> int | None:
        return self._object_of.get((s, r))

    def has_fact(self, fact: FactTriplet) -> bool:
        return self._object_of.get((fact.s, fact.r)) == fact.o

    def facts_from(self, s: int) -> list[FactTriplet]:
        return self._by_subject.get(s, [])

    def candidates(self, r: int) -> list[int]:
        """O_candi: every object the relation takes anywhere in the world."""
        return sorted({f.o for f in self.facts if f.r == r})

    def fact_by_id(self, fid: str) -> FactTriplet:
        s, r, o = (int(x) for x in fid.split(":"))
        return FactTriplet(s, r, o)

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "entities": self.entities,
            "relations": [asdict(r) for r in self.relations],
            "facts": [asdict(f) for f in self.facts],
            "distractor_entities": self.distractor_entities,
            "distractor_relations": self.distractor_relations,
            "distractor_facts": [list(t) for t in self.distractor_facts],
            "demos": [d.to_record() for d in self.demos],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "KnowledgeGraph":
        if rec.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported world schema {rec.get('schema_version')!r}")
        return cls(
            entities=list(rec["entities"]),
            relations=[Relation(r["id"], r["name"], tuple(r["templates"]), r["statement"]) for r in rec["relations"]],
            facts=[FactTriplet(**f) for f in rec["facts"]],
            distractor_entities=list(rec["distractor_entities"]),
            distractor_relations=list(rec["distractor_relations"]),
            distractor_facts=[tuple(t) for t in rec["distractor_facts"]],
            demos=[TwoHopInstance.from_record(d) for d in rec["demos"]],
            seed=rec["seed"],
        )


# --- world generation ---------------------------------------------------------

def _make_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
            + (_CODAS[rng.integers(len(_CODAS))] if i == syl - 1 else "")
            for i in range(syl)
        ).capitalize()
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _make_names(rng, n: int, multi_fraction: float, taken: set[str]) -> list[str]:
    n_multi = int(np.ceil(multi_fraction * n))
    words = _make_words(rng, n + n_multi, taken)
    multi = set(rng.choice(n, size=n_multi, replace=False).tolist()) if n_multi else set()
    names, k = [], 0
    for i in range(n):
        if i in multi:
            names.append(f"{words[k]} {words[k + 1]}")
            k += 2
        else:
            names.append(words[k])
            k += 1
    return names


def make_relation(rid: int, name: str) -> Relation:
    templates = tuple(f.replace("{rel}", name) for f in QUERY_FRAMES)
    return Relation(rid, name, templates, STATEMENT_FRAME.replace("{rel}", name))


def _chains(facts: Sequence[FactTriplet], by_subject) -> list[tuple[FactTriplet, FactTriplet]]:
    out = []
    for f1 in facts:
        for f2 in by_subject.get(f1.o, ()):
            if f2.o != f1.s:
                out.append((f1, f2))
    return out


def generate_world(
    seed: int,
    n_entities: int,
    n_relations: int,
    n_two_hop: int,
    *,
    n_demo: int | None = None,
    subject_rate: float = 0.4,
    range_fraction: float = 0.35,
    multi_word_fraction: float = 0.25,
    few_shot_k: int = 4,
    n_distractors: int = 24,
) -> tuple[KnowledgeGraph, list[TwoHopInstance]]:
    """Build a deterministic world and ``n_two_hop`` evaluation instances.

    A second, disjoint pool of two-hop chains (``kg.demos``) supplies the
    worked few-shot demonstrations.
    """
    if n_entities < 3 or n_relations < 2:
        raise ConfigError("need at least 3 entities and 2 relations")
    if n_relations > len(RELATION_NAMES):
        raise ConfigError(f"at most {len(RELATION_NAMES)} relations supported")
    if n_two_hop < 0:
        raise ConfigError("n_two_hop must be non-negative")
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    entities = _make_names(rng, n_entities, multi_word_fraction, taken)
    names = [RELATION_NAMES[i] for i in sorted(rng.choice(len(RELATION_NAMES), n_relations, replace=False))]
    relations = [make_relation(i, nm) for i, nm in enumerate(names)]

    facts: list[FactTriplet] = []
    range_size = max(2, int(round(range_fraction * n_entities)))
    for rel in relations:
        objects = rng.choice(n_entities, size=range_size, replace=False)
        for s in range(n_entities):
            if rng.random() >= subject_rate:
                continue
            choices = objects[objects != s]
            facts.append(FactTriplet(s, rel.id, int(rng.choice(choices))))
    facts.sort()

    d_ents = _make_names(rng, n_distractors, 0.0, taken)
    d_rels = list(DISTRACTOR_RELATION_NAMES)
    d_facts = []
    for i in range(n_distractors):
        a, b = rng.choice(n_distractors, size=2, replace=False)
        d_facts.append((int(a), i % len(d_rels), int(b)))

    kg = KnowledgeGraph(entities, relations, facts, d_ents, d_rels, d_facts, seed=seed)
    chains = _chains(facts, kg._by_subject)
    if n_demo is None:
        n_demo = min(max(n_two_hop, few_shot_k), max(0, len(chains) - n_two_hop)) if n_two_hop else 0
    if n_two_hop and few_shot_k and n_demo < few_shot_k:
        raise CapacityError(f"world supports {len(chains)} chains; cannot reserve {few_shot_k} demonstrations")
    if n_two_hop + n_demo > len(chains):
        raise CapacityError(f"requested {n_two_hop}+{n_demo} two-hop chains but the world has {len(chains)}")
    order = rng.permutation(len(chains))
    picked = [chains[i] for i in order[: n_two_hop + n_demo]]

    kg.demos = [_instance(kg, f"d{i:04d}", f1, f2, ()) for i, (f1, f2) in enumerate(picked[n_two_hop:])]
    instances = []
    for i, (f1, f2) in enumerate(picked[:n_two_hop]):
        demos = ()
        if few_shot_k and kg.demos:
            idx = rng.choice(len(kg.demos), size=min(few_shot_k, len(kg.demos)), replace=False)
            demos = tuple(
                CotDemo(kg.demos[j].reason_q, kg.name(kg.demos[j].bridge), kg.name(kg.demos[j].answer))
                for j in idx
            )
        instances.append(_instance(kg, f"q{i:04d}", f1, f2, demos))
    return kg, instances


def _instance(kg, iid, f1, f2, demos) -> TwoHopInstance:
    return TwoHopInstance(
        id=iid,
        fact1=f1,
        fact2=f2,
        fact1_queries=tuple(render_queries(f1, kg)),
        fact2_queries=tuple(render_queries(f2, kg)),
        reason_q=render_reason_question(f1, f2, kg),
        answer=f2.o,
        cot_demos=demos,
    )


# --- rendering ----------------------------------------------------------------

def render_queries(fact: FactTriplet, world: KnowledgeGraph) -> list[str]:
    """Every template of the fact's relation, instantiated in bank order."""
    if not world.has_fact(fact):
        raise ConfigError(f"fact {fact.id} is not in the world")
    if fact.r >= len(world.relations) or len(world.relations[fact.r].templates) < 6:
        raise TemplateError(f"relation {fact.r} lacks a template bank of at least six entries")
    s = world.name(fact.s)
    return [t.replace("{s}", s) for t in world.relations[fact.r].templates]


def render_reason_question(f1: FactTriplet, f2: FactTriplet, world: KnowledgeGraph) -> str:
    return (REASON_FRAME.replace("{r2}", world.relations[f2.r].name)
            .replace("{r1}", world.relations[f1.r].name)
            .replace("{s}", world.name(f1.s)))


def render_statement(world: KnowledgeGraph, s: int, r: int, o: int) -> str:
    return world.relations[r].statement.replace("{s}", world.name(s)).replace("{o}", world.name(o))


def _seeded(seed: int, *parts) -> np.random.Generator:
    h = hashlib.sha256(repr((seed,) + parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def make_conflict_context(fact: FactTriplet, world: KnowledgeGraph, seed: int, hop: int = 1) -> ContextSentence:
    """A sentence asserting ``(s, r, o*)`` with ``o*`` drawn from the relation's other objects."""
    others = [o for o in world.candidates(fact.r) if o != fact.o and o != fact.s]
    if not others:
        raise CandidateExhaustionError(f"relation {fact.r} has no alternative object for {fact.id}")
    o_star = others[int(_seeded(seed, "conflict", fact.id).integers(len(others)))]
    return ContextSentence("conflict", render_statement(world, fact.s, fact.r, o_star), hop, o_star)


def make_distraction_context(instance: TwoHopInstance, world: KnowledgeGraph, seed: int) -> ContextSentence:
    """An unrelated fact sentence built only from the reserved distractor vocabulary."""
    i = int(_seeded(seed, "distraction", instance.id).integers(len(world.distractor_facts)))
    a, r, b = world.distractor_facts[i]
    text = f"the {world.distractor_relations[r]} of {world.distractor_entities[a]} is {world.distractor_entities[b]} ."
    return ContextSentence("distraction", text)


def context_overlap(ctx: ContextSentence, instance: TwoHopInstance, world: KnowledgeGraph) -> set[str]:
    """Entity or relation surface symbols the context shares with the instance."""
    used = {instance.fact1.s, instance.fact1.o, instance.fact2.o}
    rels = {instance.fact1.r, instance.fact2.r}
    words = set(ctx.text.split())
    shared = set()
    for e in used:
        if set(world.name(e).split()) & words:
            shared.add(world.name(e))
    for r in rels:
        if world.relations[r].name in words:
            shared.add(world.relations[r].name)
    return shared


# --- vocabulary and prompts -----------------------------------------------------

class Vocab:
    """Word-level tokenizer over a closed vocabulary."""

    def __init__(self, words: Iterable[str]):
        self.itos = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def bos(self) -> int:
        return self.stoi[BOS]

    @property
    def sep(self) -> int:
        return self.stoi[SEP]

    @property
    def eoa(self) -> int:
        return self.stoi[EOA]

    @property
    def pad(self) -> int:
        return self.stoi[PAD]

    @property
    def chain(self) -> int:
        return self.stoi[CHAIN_WORD]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[w] for w in text.split()]
        except KeyError as exc:
            raise ConfigError(f"out-of-vocabulary word {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    @classmethod
    def for_world(cls, world: KnowledgeGraph) -> "Vocab":
        words: set[str] = set()
        for name in world.entities + world.distractor_entities + world.distractor_relations:
            words.update(name.split())
        for rel in world.relations:
            for t in rel.templates + (rel.statement, REASON_FRAME):
                words.update(t.split())
            words.add(rel.name)
        words.update(STATEMENT_FRAME.split())
        words.update(ZERO_SHOT_INSTRUCTION.split())
        words.add(CHAIN_WORD)
        return cls(w for w in words if not w.startswith("{"))


def chain_text(bridge: str, answer: str) -> str:
    return f"{bridge} {CHAIN_WORD} {answer}"


def build_prompt(
    instance: TwoHopInstance,
    condition: PromptCondition,
    context: ContextSentence | None = None,
) -> list[str]:
    """Prompt as a list of segments; joined with spaces it is the model input."""
    parts = [BOS]
    if context is not None:
        parts.append(context.text)
    if condition.kind == "few_shot":
        for d in instance.cot_demos[: condition.k]:
            parts += [d.question, SEP, chain_text(d.bridge, d.answer), EOA]
    parts.append(instance.reason_q)
    if condition.kind == "zero_shot":
        parts.append(ZERO_SHOT_INSTRUCTION)
    parts.append(SEP)
    return parts


def single_hop_prompt(query: str) -> str:
    return f"{BOS} {query} {SEP}"


def extract_answer(tokens: Sequence[int], vocab: Vocab) -> list[int]:
    """Answer span: tokens before end-of-answer, after the last chain word."""
    out = list(tokens)
    if vocab.eoa in out:
        out = out[: out.index(vocab.eoa)]
    if vocab.chain in out:
        last = len(out) - 1 - out[::-1].index(vocab.chain)
        out = out[last + 1:]
    return out


# --- serialization ---------------------------------------------------------------

def dumps_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_corpus(path, instances: Sequence[TwoHopInstance], world_seed: int | None = None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_line({"schema_version": SCHEMA_VERSION, "kind": "two_hop_corpus",
                             "count": len(instances), "world_seed": world_seed}) + "\n")
        for inst in instances:
            fh.write(dumps_line(inst.to_record()) + "\n")


def read_corpus(path) -> list[TwoHopInstance]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported corpus schema {header.get('schema_version')!r}")
        return [TwoHopInstance.from_record(json.loads(line)) for line in fh if line.strip()]


def write_world(path, world: KnowledgeGraph):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(world.to_record(), sort_keys=True, ensure_ascii=False, indent=1) + "\n")


def read_world(path) -> KnowledgeGraph:
    with open(path, encoding="utf-8") as fh:
        return KnowledgeGraph.from_record(json.load(fh))

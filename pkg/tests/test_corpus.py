import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knpl.corpus import (
    EOA,
    QUERY_FRAMES,
    FactTriplet,
    KnowledgeGraph,
    PromptCondition,
    TwoHopInstance,
    Vocab,
    build_prompt,
    context_overlap,
    extract_answer,
    generate_world,
    make_conflict_context,
    make_distraction_context,
    make_relation,
    read_corpus,
    read_world,
    render_queries,
    single_hop_prompt,
    write_corpus,
    write_world,
)
from knpl.errors import CandidateExhaustionError, CapacityError, ConfigError


@pytest.fixture(scope="module")
def world():
    return generate_world(5, 40, 6, 30, n_demo=10)


def test_generation_is_deterministic(world):
    kg2, inst2 = generate_world(5, 40, 6, 30, n_demo=10)
    kg, inst = world
    assert kg.to_record() == kg2.to_record()
    assert [i.to_record() for i in inst] == [i.to_record() for i in inst2]
    kg3, _ = generate_world(6, 40, 6, 30, n_demo=10)
    assert kg3.to_record() != kg.to_record()


def test_relations_are_functional(world):
    kg, _ = world
    seen = {}
    for f in kg.facts:
        assert seen.setdefault((f.s, f.r), f.o) == f.o
    with pytest.raises(ValueError):
        KnowledgeGraph(["a", "b", "c"], [make_relation(0, "capital")],
                       [FactTriplet(0, 0, 1), FactTriplet(0, 0, 2)])


def test_instances_are_valid_chains(world):
    kg, inst = world
    assert len(inst) == 30
    for x in inst:
        assert kg.has_fact(x.fact1) and kg.has_fact(x.fact2)
        assert x.fact1.o == x.fact2.s and x.answer == x.fact2.o
        assert x.fact2.o != x.fact1.s
        for qs in (x.fact1_queries, x.fact2_queries):
            assert len(qs) >= 5 and len(set(qs)) == len(qs)
        # the question never reveals the bridge or the answer
        words = set(x.reason_q.split())
        assert not set(kg.name(x.bridge).split()) <= words
        assert not set(kg.name(x.answer).split()) <= words
    ids = {(x.fact1, x.fact2) for x in inst} | {(d.fact1, d.fact2) for d in kg.demos}
    assert len(ids) == 30 + 10


def test_bridge_mismatch_rejected():
    f1, f2 = FactTriplet(0, 0, 1), FactTriplet(2, 0, 3)
    with pytest.raises(ValueError):
        TwoHopInstance("x", f1, f2, tuple("abcde"), tuple("abcde"), "q", 3)
    with pytest.raises(ValueError):
        TwoHopInstance("x", f1, FactTriplet(1, 0, 3), tuple("abcd"), tuple("abcde"), "q", 3)


def test_render_queries_bank_order():
    kg = KnowledgeGraph(["tor", "mila", "zed"], [make_relation(0, "capital")], [FactTriplet(0, 0, 1)])
    qs = render_queries(FactTriplet(0, 0, 1), kg)
    assert qs[0] == "what is the capital of tor ?"
    assert qs == [f.replace("{rel}", "capital").replace("{s}", "tor") for f in QUERY_FRAMES]
    with pytest.raises(ConfigError):
        render_queries(FactTriplet(0, 0, 2), kg)


def test_capacity_error():
    with pytest.raises(CapacityError):
        generate_world(1, 5, 2, 500)


def test_serialization_roundtrip(world, tmp_path):
    kg, inst = world
    write_corpus(tmp_path / "c.jsonl", inst, world_seed=5)
    write_world(tmp_path / "w.json", kg)
    assert read_corpus(tmp_path / "c.jsonl") == inst
    assert read_world(tmp_path / "w.json").to_record() == kg.to_record()
    first = (tmp_path / "c.jsonl").read_bytes()
    write_corpus(tmp_path / "c.jsonl", read_corpus(tmp_path / "c.jsonl"), world_seed=5)
    assert (tmp_path / "c.jsonl").read_bytes() == first


def test_prompt_conditions(world):
    kg, inst = world
    x = inst[0]
    no = build_prompt(x, PromptCondition.parse("no_cot"))
    zs = build_prompt(x, PromptCondition.parse("zero_shot"))
    fs = build_prompt(x, PromptCondition.parse("few_shot", 2))
    assert no == ["<bos>", x.reason_q, "<sep>"]
    assert zs[-2] == "let us think step by step ." and zs[1] == x.reason_q
    assert fs.count(EOA) == 2 and fs[-2] == x.reason_q
    with pytest.raises(ConfigError):
        PromptCondition("few_shot", 0)
    with pytest.raises(ConfigError):
        PromptCondition.parse("cot")


def test_vocab_and_answer_extraction(world):
    kg, inst = world
    v = Vocab.for_world(kg)
    x = inst[0]
    for cond in ("no_cot", "zero_shot", "few_shot"):
        toks = v.encode(" ".join(build_prompt(x, PromptCondition.parse(cond, 4))))
        assert v.decode(toks).split() == " ".join(build_prompt(x, PromptCondition.parse(cond, 4))).split()
    ans = v.encode(kg.name(x.answer))
    bridge = v.encode(kg.name(x.bridge))
    assert extract_answer(ans + [v.eoa], v) == ans
    assert extract_answer(bridge + [v.chain] + ans + [v.eoa, 7], v) == ans
    assert extract_answer(ans, v) == ans
    with pytest.raises(ConfigError):
        v.encode("definitely-not-a-word")
    assert v.encode(single_hop_prompt(x.fact1_queries[0]))[0] == v.bos


def test_conflict_context(world):
    kg, inst = world
    x = inst[3]
    c = make_conflict_context(x.fact1, kg, seed=0, hop=1)
    assert c.conflicting_object != x.fact1.o
    assert c.conflicting_object in kg.candidates(x.fact1.r)
    assert c.text.startswith(f"the {kg.relations[x.fact1.r].name} of {kg.name(x.fact1.s)} is")
    assert make_conflict_context(x.fact1, kg, seed=0) == c
    lonely = KnowledgeGraph(["a", "b"], [make_relation(0, "capital")], [FactTriplet(0, 0, 1)])
    with pytest.raises(CandidateExhaustionError):
        make_conflict_context(FactTriplet(0, 0, 1), lonely, 0)


def test_distraction_context_is_disjoint(world):
    kg, inst = world
    for x in inst:
        d = make_distraction_context(x, kg, seed=1)
        assert context_overlap(d, x, kg) == set()
        assert d.kind == "distraction"


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_world_invariants_property(seed):
    try:
        kg, inst = generate_world(seed, 30, 4, 8, n_demo=4)
    except CapacityError:
        return
    pairs = [(f.s, f.r) for f in kg.facts]
    assert len(pairs) == len(set(pairs))
    assert len(set(kg.entities)) == len(kg.entities)
    assert not set(kg.entities) & set(kg.distractor_entities)
    for x in inst:
        assert TwoHopInstance.from_record(x.to_record()) == x
        assert len(set(x.fact1_queries)) == len(x.fact1_queries)
    assert np.all(np.diff([f.s * 100 + f.r for f in kg.facts]) > 0)

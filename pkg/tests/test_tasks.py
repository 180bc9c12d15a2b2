import json

import pytest

from poslab.tasks import (
    ANS,
    ASK,
    DOC,
    EOS,
    HOP,
    KEY,
    N_SPECIAL,
    TASK_REASON,
    TASK_RETRIEVE,
    VAL,
    CapacityError,
    answer_after_marker,
    arrange,
    arrange_two_hop,
    contains_answer,
    generate_dataset,
    gold_response,
    gold_trajectory,
    load_instances_jsonl,
    make_reasoning_instance,
    make_retrieval_instance,
    position_configs,
    sample_trivial_pairs,
    sample_trivial_positions,
    save_instances_jsonl,
)


class TestRetrievalInstance:
    def test_deterministic_per_seed(self):
        a = make_retrieval_instance(8, rng_seed=42)
        b = make_retrieval_instance(8, rng_seed=42)
        assert a == b
        c = make_retrieval_instance(8, rng_seed=43)
        assert a != c

    def test_counts(self):
        inst = make_retrieval_instance(8, rng_seed=0)
        assert inst.n_docs == 8
        assert 1 <= inst.gold_index <= 8
        assert inst.docs[inst.gold_index - 1][2] == inst.question[1]

    def test_answer_in_exactly_one_document(self):
        for seed in range(20):
            inst = make_retrieval_instance(6, rng_seed=seed)
            hits = sum(inst.answer[0] in doc for doc in inst.docs)
            assert hits == 1

    def test_queried_key_in_exactly_one_document(self):
        for seed in range(20):
            inst = make_retrieval_instance(6, rng_seed=seed)
            key = inst.question[1]
            hits = sum(doc[2] == key for doc in inst.docs)
            assert hits == 1

    def test_distractor_values_distinct_from_answer(self):
        inst = make_retrieval_instance(10, rng_seed=5)
        values = [doc[4] for i, doc in enumerate(inst.docs) if i != inst.gold_index - 1]
        assert inst.answer[0] not in values

    def test_capacity_error(self):
        with pytest.raises(CapacityError):
            make_retrieval_instance(28, rng_seed=0, vocab_size=64)

    def test_doc_template(self):
        inst = make_retrieval_instance(4, rng_seed=1)
        for doc in inst.docs:
            assert doc[0] == DOC and doc[1] == KEY and doc[3] == VAL
            assert doc[2] >= N_SPECIAL and doc[4] >= N_SPECIAL


class TestReasoningInstance:
    def test_chain_structure(self):
        inst = make_reasoning_instance(8, rng_seed=3)
        a = inst.question[1]
        assert inst.hop1_fact[2] == a
        b = inst.hop1_fact[4]
        assert inst.hop2_fact[2] == b
        assert inst.hop2_fact[4] == inst.answer[0]

    def test_bridge_entity_in_exactly_two_documents(self):
        for seed in range(20):
            inst = make_reasoning_instance(7, rng_seed=seed)
            b = inst.hop1_fact[4]
            hits = sum(b in doc for doc in inst.docs)
            assert hits == 2

    def test_no_alternative_chain(self):
        # no distractor key equals any value, so chains cannot continue
        for seed in range(10):
            inst = make_reasoning_instance(7, rng_seed=seed)
            keys = {doc[2] for doc in inst.docs}
            values = {doc[4] for doc in inst.docs}
            bridge = inst.hop1_fact[4]
            assert keys & values == {bridge}

    def test_capacity_error(self):
        with pytest.raises(CapacityError):
            make_reasoning_instance(28, rng_seed=0, vocab_size=64)


class TestArrange:
    def test_gold_span_first(self):
        inst = make_retrieval_instance(6, rng_seed=9)
        layout = arrange(inst, 1)
        start, end = layout.doc_spans[0]
        assert layout.tokens[start:end] == inst.docs[inst.gold_index - 1]
        assert layout.gold_positions == 1

    def test_requested_position_respected(self):
        inst = make_retrieval_instance(6, rng_seed=9)
        for pos in range(1, 7):
            layout = arrange(inst, pos)
            s, e = layout.doc_spans[pos - 1]
            assert layout.tokens[s:e] == inst.docs[inst.gold_index - 1]
            assert layout.gold_positions == pos

    def test_token_multiset_invariant(self):
        inst = make_retrieval_instance(6, rng_seed=1)
        base = sorted(arrange(inst, 1).tokens)
        for pos in range(2, 7):
            assert sorted(arrange(inst, pos).tokens) == base

    def test_prompt_length_constant(self):
        inst = make_retrieval_instance(6, rng_seed=2)
        lengths = {len(arrange(inst, pos).tokens) for pos in range(1, 7)}
        assert len(lengths) == 1

    def test_prompt_shape(self):
        inst = make_retrieval_instance(4, rng_seed=3)
        layout = arrange(inst, 2)
        assert layout.tokens[0] == TASK_RETRIEVE
        assert layout.tokens[-2] == ASK
        assert layout.tokens[-1] == inst.question[1]

    def test_spans_cover_docs_in_order(self):
        inst = make_retrieval_instance(5, rng_seed=4)
        layout = arrange(inst, 3)
        prev_end = None
        for s, e in layout.doc_spans:
            assert e - s == 5
            if prev_end is not None:
                assert s == prev_end
            prev_end = e
        reassembled = [layout.tokens[s:e] for s, e in layout.doc_spans]
        assert sorted(reassembled) == sorted(inst.docs)

    def test_out_of_range_position(self):
        inst = make_retrieval_instance(4, rng_seed=5)
        with pytest.raises(ValueError):
            arrange(inst, 0)
        with pytest.raises(ValueError):
            arrange(inst, 5)

    def test_deterministic(self):
        inst = make_retrieval_instance(6, rng_seed=6)
        assert arrange(inst, 3) == arrange(inst, 3)

    def test_answer_found_exactly_once_in_layout(self):
        for seed in range(10):
            inst = make_retrieval_instance(6, rng_seed=seed)
            for pos in (1, 3, 6):
                layout = arrange(inst, pos)
                hits = sum(1 for t in layout.tokens if t == inst.answer[0])
                assert hits == 1


class TestArrangeTwoHop:
    def test_positions_respected(self):
        inst = make_reasoning_instance(8, rng_seed=2)
        layout = arrange_two_hop(inst, 7, 8)
        assert layout.tokens[0] == TASK_REASON
        s, e = layout.doc_spans[6]
        assert layout.tokens[s:e] == inst.hop1_fact
        s, e = layout.doc_spans[7]
        assert layout.tokens[s:e] == inst.hop2_fact
        assert layout.gold_positions == (7, 8)

    def test_reversed_pair(self):
        inst = make_reasoning_instance(8, rng_seed=2)
        layout = arrange_two_hop(inst, 5, 2)
        s, e = layout.doc_spans[4]
        assert layout.tokens[s:e] == inst.hop1_fact
        s, e = layout.doc_spans[1]
        assert layout.tokens[s:e] == inst.hop2_fact

    def test_equal_positions_rejected(self):
        inst = make_reasoning_instance(8, rng_seed=2)
        with pytest.raises(ValueError):
            arrange_two_hop(inst, 3, 3)

    def test_content_multiset_invariant(self):
        inst = make_reasoning_instance(8, rng_seed=4)
        base = sorted(arrange_two_hop(inst, 1, 2).tokens)
        for pair in [(2, 1), (3, 7), (8, 1)]:
            assert sorted(arrange_two_hop(inst, *pair).tokens) == base


class TestPositionConfigs:
    def test_template_at_n20(self):
        assert position_configs("connected", 20) == [(0, 1), (5, 6), (12, 13), (17, 18)]
        assert position_configs("disconnected", 20) == [(0, 8), (5, 13), (6, 14), (8, 16)]
        assert position_configs("reversed", 20) == [(8, 0), (13, 5), (14, 6), (16, 8)]

    def test_reversed_swaps_disconnected(self):
        for n in (10, 16, 20, 30):
            disc = position_configs("disconnected", n)
            rev = position_configs("reversed", n)
            assert rev == [(j, i) for i, j in disc]

    def test_pairs_always_distinct(self):
        for n in (10, 13, 20, 40):
            for mode in ("connected", "disconnected", "reversed"):
                for i, j in position_configs(mode, n):
                    assert i != j
                    assert 0 <= i < n and 0 <= j < n

    def test_n_too_small(self):
        with pytest.raises(ValueError):
            position_configs("connected", 9)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            position_configs("zigzag", 20)


class TestTrivialSampling:
    def test_distinct_in_range(self):
        picks = sample_trivial_positions(4, 20, rng_seed=0)
        assert len(picks) == 4
        assert len(set(picks)) == 4
        assert all(2 <= p <= 20 for p in picks)

    def test_exhaustive(self):
        picks = sample_trivial_positions(19, 20, rng_seed=1)
        assert sorted(picks) == list(range(2, 21))

    def test_deterministic(self):
        assert sample_trivial_positions(4, 20, rng_seed=2) == sample_trivial_positions(4, 20, rng_seed=2)

    def test_capacity(self):
        with pytest.raises(CapacityError):
            sample_trivial_positions(20, 20, rng_seed=0)

    def test_pairs_distinct_and_valid(self):
        pairs = sample_trivial_pairs(6, 5, rng_seed=3)
        assert len(pairs) == len(set(pairs)) == 6
        for i, j in pairs:
            assert i != j
            assert 1 <= i <= 5 and 1 <= j <= 5

    def test_pairs_exhaustive(self):
        pairs = sample_trivial_pairs(6, 3, rng_seed=4)
        assert sorted(pairs) == [(1, 2), (1, 3), (2, 1), (2, 3), (3, 1), (3, 2)]

    def test_pairs_capacity(self):
        with pytest.raises(CapacityError):
            sample_trivial_pairs(7, 3, rng_seed=0)


class TestTargetsAndScoring:
    def test_gold_response_template(self):
        inst = make_retrieval_instance(4, rng_seed=7)
        assert gold_response(inst) == [ANS, inst.answer[0], EOS]

    def test_gold_trajectory_template(self):
        inst = make_reasoning_instance(5, rng_seed=7)
        a, b, c = inst.hop1_fact[2], inst.hop1_fact[4], inst.hop2_fact[4]
        assert gold_trajectory(inst) == [HOP, a, b, HOP, b, c, ANS, c, EOS]

    def test_contains_answer(self):
        assert contains_answer([5, 6, 7], [6])
        assert contains_answer([5, 6, 7], [6, 7])
        assert not contains_answer([5, 6, 7], [7, 6])
        assert not contains_answer([5], [5, 6])
        assert not contains_answer([5, 6], [])

    def test_answer_after_marker(self):
        assert answer_after_marker([HOP, 12, 13, ANS, 14], [14])
        assert not answer_after_marker([14, ANS, 13], [14])
        assert not answer_after_marker([14, 13], [14])


class TestDatasetIO:
    def test_generate_deterministic_and_disjoint(self):
        a = generate_dataset("retrieval", 5, 6, root_seed=1)
        b = generate_dataset("retrieval", 5, 6, root_seed=1)
        assert a == b
        ids = [inst.instance_id for inst in a]
        assert ids == list(range(5))
        more = generate_dataset("retrieval", 3, 6, root_seed=1, start_id=5)
        assert [inst.instance_id for inst in more] == [5, 6, 7]

    def test_jsonl_round_trip_bit_exact(self, tmp_path):
        instances = generate_dataset("retrieval", 4, 6, root_seed=2)
        instances += generate_dataset("reasoning", 4, 6, root_seed=3, start_id=4)
        path = tmp_path / "data.jsonl"
        save_instances_jsonl(path, instances)
        loaded = load_instances_jsonl(path)
        assert loaded == instances
        second = tmp_path / "again.jsonl"
        save_instances_jsonl(second, loaded)
        assert path.read_bytes() == second.read_bytes()

    def test_jsonl_schema_fields(self, tmp_path):
        path = tmp_path / "data.jsonl"
        save_instances_jsonl(path, generate_dataset("retrieval", 1, 4, root_seed=0))
        rec = json.loads(path.read_text().splitlines()[0])
        assert set(rec) == {"id", "kind", "docs", "question", "answer", "seed", "gold_index"}

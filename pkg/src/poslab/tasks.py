"""Synthetic retrieval and two-hop reasoning tasks over an integer vocabulary.

Documents are fixed-length templates so prompt length is constant across
gold placements and position effects are never confounded with length.
Every random choice flows from explicit seeds through `make_rng`, making
generation reproducible end to end and embarrassingly parallel.

Token layout (first `N_SPECIAL` ids are reserved):
    PAD EOS DOC KEY VAL ASK ANS TASK_RETRIEVE TASK_REASON HOP
followed by the symbol pool used for keys, values and entities.

Templates:
    document    [DOC KEY k VAL v]
    retrieval   prompt  [TASK_RETRIEVE | docs | ASK k]   response [ANS v EOS]
    reasoning   prompt  [TASK_REASON   | docs | ASK a]
                trajectory [HOP a b HOP b c ANS c EOS]
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, EOS, DOC, KEY, VAL, ASK, ANS, TASK_RETRIEVE, TASK_REASON, HOP = range(10)
N_SPECIAL = 10
DOC_LEN = 5

RETRIEVAL = "retrieval"
REASONING = "reasoning"
KINDS = (RETRIEVAL, REASONING)

CONNECTED = "connected"
DISCONNECTED = "disconnected"
REVERSED = "reversed"
MODES = (CONNECTED, DISCONNECTED, REVERSED)

# Two-hop evaluation grid for n=20, 0-indexed slots; other n scale from it.
_CONNECTED_TEMPLATE = ((0, 1), (5, 6), (12, 13), (17, 18))
_DISCONNECTED_TEMPLATE = ((0, 8), (5, 13), (6, 14), (8, 16))
_TEMPLATE_N = 20


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def make_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


class CapacityError(ValueError):
    """Requested more distinct symbols than the vocabulary provides."""


@dataclass(frozen=True)
class RetrievalInstance:
    instance_id: int
    docs: tuple[tuple[int, ...], ...]
    question: tuple[int, ...]
    answer: tuple[int, ...]
    gold_index: int  # 1-based index into docs
    seed: int

    @property
    def n_docs(self) -> int:
        return len(self.docs)


@dataclass(frozen=True)
class ReasoningInstance:
    instance_id: int
    docs: tuple[tuple[int, ...], ...]
    question: tuple[int, ...]
    answer: tuple[int, ...]
    hop1_fact: tuple[int, ...]  # d_pre: maps a -> b
    hop2_fact: tuple[int, ...]  # d_post: maps b -> c
    pre_index: int  # 1-based index of hop1_fact in docs
    post_index: int
    seed: int

    @property
    def n_docs(self) -> int:
        return len(self.docs)


@dataclass(frozen=True)
class PromptLayout:
    """A concrete prompt realization with recorded document spans."""
    tokens: tuple[int, ...]
    doc_spans: tuple[tuple[int, int], ...]  # (start, end) per document, layout order
    gold_positions: int | tuple[int, int]


def _doc_tokens(key: int, value: int) -> tuple[int, ...]:
    return (DOC, KEY, key, VAL, value)


def _symbol_pool(vocab_size: int) -> np.ndarray:
    if vocab_size <= N_SPECIAL + 1:
        raise CapacityError(f"vocab_size {vocab_size} leaves no symbol pool")
    return np.arange(N_SPECIAL, vocab_size)


def make_retrieval_instance(
    n_docs: int, rng_seed: int, vocab_size: int = 64, instance_id: int = 0
) -> RetrievalInstance:
    """Key-value documents with exactly one holding the queried key.

    Keys and values are drawn without replacement from a shared pool, so
    the answer token appears in exactly one document and distractor
    values are all distinct from it.
    """
    if n_docs < 2:
        raise ValueError("need at least 2 documents")
    pool = _symbol_pool(vocab_size)
    if 2 * n_docs > pool.size:
        raise CapacityError(f"{n_docs} docs need {2 * n_docs} distinct symbols, pool has {pool.size}")
    rng = make_rng(rng_seed, "retrieval")
    perm = rng.permutation(pool)
    keys = perm[:n_docs]
    values = perm[n_docs : 2 * n_docs]
    gold = int(rng.integers(1, n_docs + 1))
    docs = tuple(_doc_tokens(int(k), int(v)) for k, v in zip(keys, values))
    return RetrievalInstance(
        instance_id=instance_id,
        docs=docs,
        question=(ASK, int(keys[gold - 1])),
        answer=(int(values[gold - 1]),),
        gold_index=gold,
        seed=rng_seed,
    )


def make_reasoning_instance(
    n_docs: int, rng_seed: int, vocab_size: int = 64, instance_id: int = 0
) -> ReasoningInstance:
    """Two-hop chain a -> b -> c plus distractors.

    The bridge entity b appears in exactly two documents (hop1 value,
    hop2 key); distractor values never collide with keys, so no
    alternative chain exists.
    """
    if n_docs < 3:
        raise ValueError("need at least 3 documents for a two-hop chain")
    pool = _symbol_pool(vocab_size)
    need = 2 * n_docs - 1
    if need > pool.size:
        raise CapacityError(f"{n_docs} docs need {need} distinct symbols, pool has {pool.size}")
    rng = make_rng(rng_seed, "reasoning")
    perm = rng.permutation(pool)
    keys = perm[:n_docs]  # a, b, distractor keys
    a, b = int(keys[0]), int(keys[1])
    c = int(perm[n_docs])
    distractor_values = perm[n_docs + 1 : need]
    hop1 = _doc_tokens(a, b)
    hop2 = _doc_tokens(b, c)
    docs = [hop1, hop2]
    docs += [_doc_tokens(int(k), int(v)) for k, v in zip(keys[2:], distractor_values)]
    return ReasoningInstance(
        instance_id=instance_id,
        docs=tuple(docs),
        question=(ASK, a),
        answer=(c,),
        hop1_fact=hop1,
        hop2_fact=hop2,
        pre_index=1,
        post_index=2,
        seed=rng_seed,
    )


def _assemble(task_token: int, ordered_docs: Sequence[tuple[int, ...]], question: Sequence[int]):
    tokens: list[int] = [task_token]
    spans: list[tuple[int, int]] = []
    for doc in ordered_docs:
        spans.append((len(tokens), len(tokens) + len(doc)))
        tokens.extend(doc)
    tokens.extend(question)
    return tuple(tokens), tuple(spans)


def arrange(instance: RetrievalInstance, gold_position: int) -> PromptLayout:
    """Place the gold document at ``gold_position`` (1-based); the
    distractor order is an independent seed-determined permutation per
    position."""
    n = instance.n_docs
    if not 1 <= gold_position <= n:
        raise ValueError(f"gold_position {gold_position} outside [1, {n}]")
    gold_doc = instance.docs[instance.gold_index - 1]
    rest = [d for i, d in enumerate(instance.docs) if i != instance.gold_index - 1]
    rng = make_rng(instance.seed, instance.instance_id, "arrange", gold_position)
    order = rng.permutation(len(rest))
    ordered = [rest[i] for i in order]
    ordered.insert(gold_position - 1, gold_doc)
    tokens, spans = _assemble(TASK_RETRIEVE, ordered, instance.question)
    return PromptLayout(tokens=tokens, doc_spans=spans, gold_positions=gold_position)


def arrange_two_hop(instance: ReasoningInstance, i: int, j: int) -> PromptLayout:
    """Place d_pre at slot i and d_post at slot j (1-based, i != j)."""
    n = instance.n_docs
    if i == j:
        raise ValueError("hop positions must differ")
    if not (1 <= i <= n and 1 <= j <= n):
        raise ValueError(f"hop positions ({i}, {j}) outside [1, {n}]")
    pre = instance.docs[instance.pre_index - 1]
    post = instance.docs[instance.post_index - 1]
    rest = [
        d for k, d in enumerate(instance.docs)
        if k not in (instance.pre_index - 1, instance.post_index - 1)
    ]
    rng = make_rng(instance.seed, instance.instance_id, "arrange2", i, j)
    order = rng.permutation(len(rest))
    ordered: list[tuple[int, ...] | None] = [None] * n
    ordered[i - 1] = pre
    ordered[j - 1] = post
    it = iter(order)
    for slot in range(n):
        if ordered[slot] is None:
            ordered[slot] = rest[next(it)]
    tokens, spans = _assemble(TASK_REASON, ordered, instance.question)
    return PromptLayout(tokens=tokens, doc_spans=spans, gold_positions=(i, j))


def position_configs(mode: str, n: int) -> list[tuple[int, int]]:
    """Two-hop evaluation pairs (0-indexed slots) for the given mode,
    scaled proportionally from the n=20 template grid."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if n < 10:
        raise ValueError(f"position grid needs n >= 10, got {n}")
    scale = n / _TEMPLATE_N
    if mode == CONNECTED:
        pairs = []
        for i, _ in _CONNECTED_TEMPLATE:
            first = min(int(round(i * scale)), n - 2)
            pairs.append((first, first + 1))
        return pairs
    stride = max(2, int(round(8 * scale)))
    pairs = []
    for i, _ in _DISCONNECTED_TEMPLATE:
        first = min(int(round(i * scale)), n - 1 - stride)
        pairs.append((first, first + stride))
    if mode == REVERSED:
        pairs = [(j, i) for i, j in pairs]
    return pairs


def sample_trivial_positions(k: int, n: int, rng_seed: int) -> list[int]:
    """k distinct retrieval positions drawn uniformly from {2..n}."""
    if k > n - 1:
        raise CapacityError(f"cannot draw {k} distinct positions from {{2..{n}}}")
    rng = make_rng(rng_seed, "trivial-positions")
    picks = rng.choice(np.arange(2, n + 1), size=k, replace=False)
    return [int(p) for p in picks]


def sample_trivial_pairs(k: int, n: int, rng_seed: int) -> list[tuple[int, int]]:
    """k distinct ordered pairs (i, j), i != j, both in [1, n]."""
    total = n * (n - 1)
    if k > total:
        raise CapacityError(f"cannot draw {k} distinct ordered pairs from {total}")
    rng = make_rng(rng_seed, "trivial-pairs")
    flat = rng.choice(total, size=k, replace=False)
    pairs = []
    for f in flat:
        i, r = divmod(int(f), n - 1)
        j = r if r < i else r + 1
        pairs.append((i + 1, j + 1))
    return pairs


def gold_response(instance: RetrievalInstance) -> list[int]:
    return [ANS, *instance.answer, EOS]


def gold_trajectory(instance: ReasoningInstance) -> list[int]:
    a = instance.hop1_fact[2]
    b = instance.hop1_fact[4]
    c = instance.hop2_fact[4]
    return [HOP, a, b, HOP, b, c, ANS, c, EOS]


def contains_answer(decoded: Sequence[int], answer: Sequence[int]) -> bool:
    """Contiguous containment of the answer tokens in the decoded output."""
    d, a = list(decoded), list(answer)
    if not a or len(a) > len(d):
        return False
    return any(d[i : i + len(a)] == a for i in range(len(d) - len(a) + 1))


def answer_after_marker(decoded: Sequence[int], answer: Sequence[int]) -> bool:
    """Containment of the answer tokens after the first ANS marker."""
    d = list(decoded)
    if ANS not in d:
        return False
    return contains_answer(d[d.index(ANS) + 1 :], answer)


# ---------------------------------------------------------------------------
# Dataset generation and JSONL round trip
# ---------------------------------------------------------------------------

def generate_dataset(
    kind: str, count: int, n_docs: int, root_seed: int, vocab_size: int = 64, start_id: int = 0
) -> list[RetrievalInstance] | list[ReasoningInstance]:
    if kind not in KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    out = []
    for offset in range(count):
        iid = start_id + offset
        seed = derive_seed(root_seed, "instance", iid)
        if kind == RETRIEVAL:
            out.append(make_retrieval_instance(n_docs, seed, vocab_size, instance_id=iid))
        else:
            out.append(make_reasoning_instance(n_docs, seed, vocab_size, instance_id=iid))
    return out


def instance_to_dict(inst: RetrievalInstance | ReasoningInstance) -> dict:
    base = {
        "id": inst.instance_id,
        "kind": RETRIEVAL if isinstance(inst, RetrievalInstance) else REASONING,
        "docs": [list(d) for d in inst.docs],
        "question": list(inst.question),
        "answer": list(inst.answer),
        "seed": inst.seed,
    }
    if isinstance(inst, RetrievalInstance):
        base["gold_index"] = inst.gold_index
    else:
        base.update(
            hop1_fact=list(inst.hop1_fact),
            hop2_fact=list(inst.hop2_fact),
            pre_index=inst.pre_index,
            post_index=inst.post_index,
        )
    return base


def instance_from_dict(rec: dict) -> RetrievalInstance | ReasoningInstance:
    docs = tuple(tuple(d) for d in rec["docs"])
    common = dict(
        instance_id=rec["id"],
        docs=docs,
        question=tuple(rec["question"]),
        answer=tuple(rec["answer"]),
        seed=rec["seed"],
    )
    if rec["kind"] == RETRIEVAL:
        return RetrievalInstance(gold_index=rec["gold_index"], **common)
    if rec["kind"] == REASONING:
        return ReasoningInstance(
            hop1_fact=tuple(rec["hop1_fact"]),
            hop2_fact=tuple(rec["hop2_fact"]),
            pre_index=rec["pre_index"],
            post_index=rec["post_index"],
            **common,
        )
    raise ValueError(f"unknown task kind {rec['kind']!r}")


def save_instances_jsonl(path, instances: Iterable[RetrievalInstance | ReasoningInstance]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_dict(inst), sort_keys=True))
            fh.write("\n")
            count += 1
    return count


def load_instances_jsonl(path) -> list[RetrievalInstance | ReasoningInstance]:
    with open(path) as fh:
        return [instance_from_dict(json.loads(line)) for line in fh if line.strip()]

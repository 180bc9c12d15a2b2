"""Bias induction: pre-train the toy model so an advantaged position
dominates.

Retrieval: the gold document lands at position 1 with probability
``p_sink`` (uniform over the rest otherwise) and training stops once
held-out accuracy at position 1 reaches the target. Two-hop reasoning
uses the analogous recipe with the hop pair at the recent slots
(n-1, n). The resulting checkpoint exhibits a positional accuracy gap
that the distillation trainers are then measured against.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .errors import InductionFailure, TrainingDiverged
from .model import ModelConfig, TransformerLM, greedy_decode_batch, teacher_force_logits_batch
from .ops import cross_entropy_rows
from .optim import Optimizer
from .tasks import (
    REASONING,
    RETRIEVAL,
    arrange,
    arrange_two_hop,
    contains_answer,
    gold_response,
    gold_trajectory,
    make_rng,
)
from .evalharness import pair_accuracy

logger = logging.getLogger(__name__)


@dataclass
class InductionConfig:
    kind: str = RETRIEVAL
    p_sink: float = 0.9
    batch_size: int = 16
    learning_rate: float = 1e-3
    max_steps: int = 4000
    eval_every: int = 50
    target_accuracy: float = 0.95
    min_steps: int = 0
    seed: int = 0
    max_new: int = 8

    def __post_init__(self):
        if not 0.0 <= self.p_sink <= 1.0:
            raise ValueError("p_sink must be in [0, 1]")
        if self.kind not in (RETRIEVAL, REASONING):
            raise ValueError(f"unknown task kind {self.kind!r}")


def _advantaged_accuracy(model, eval_instances, cfg: InductionConfig) -> float:
    n = eval_instances[0].n_docs
    if cfg.kind == RETRIEVAL:
        layouts = [arrange(inst, 1) for inst in eval_instances]
        results = greedy_decode_batch(
            model, torch.as_tensor([lay.tokens for lay in layouts]), max_new=cfg.max_new
        )
        hits = sum(
            contains_answer(res.tokens, inst.answer)
            for res, inst in zip(results, eval_instances)
        )
        return hits / len(eval_instances)
    return pair_accuracy(model, eval_instances, (n - 1, n), max_new=cfg.max_new, seed=cfg.seed)


def _sample_layout_and_target(inst, cfg: InductionConfig, rng):
    n = inst.n_docs
    if cfg.kind == RETRIEVAL:
        if rng.random() < cfg.p_sink:
            pos = 1
        else:
            pos = int(rng.integers(2, n + 1))
        return arrange(inst, pos), gold_response(inst)
    if rng.random() < cfg.p_sink:
        pair = (n - 1, n)
    else:
        i = int(rng.integers(1, n + 1))
        j = int(rng.integers(1, n))
        if j >= i:
            j += 1
        pair = (i, j)
    return arrange_two_hop(inst, *pair), gold_trajectory(inst)


def induce_bias(
    model_config: ModelConfig,
    train_instances,
    eval_instances,
    cfg: InductionConfig,
) -> tuple[TransformerLM, dict]:
    """Train until the advantaged position clears ``target_accuracy`` on
    held-out data; raise InductionFailure if max_steps is exhausted first."""
    if not train_instances or not eval_instances:
        raise ValueError("induction needs non-empty train and eval instance lists")
    model = TransformerLM(model_config, seed=cfg.seed)
    opt = Optimizer(model.parameters(), kind="adam", learning_rate=cfg.learning_rate)
    rng = make_rng(cfg.seed, "induce")
    history: dict = {"steps": [], "reached_target": False, "final_accuracy": None}

    n_train = len(train_instances)
    order = rng.permutation(n_train)
    cursor = 0
    for step in range(1, cfg.max_steps + 1):
        batch = []
        for _ in range(cfg.batch_size):
            if cursor >= n_train:
                order = rng.permutation(n_train)
                cursor = 0
            batch.append(train_instances[int(order[cursor])])
            cursor += 1
        pairs = [_sample_layout_and_target(inst, cfg, rng) for inst in batch]
        prompts = torch.as_tensor([lay.tokens for lay, _ in pairs])
        width = max(len(t) for _, t in pairs)
        tgt = torch.zeros((len(pairs), width), dtype=torch.long)
        mask = torch.zeros((len(pairs), width), dtype=torch.bool)
        for row, (_, t) in enumerate(pairs):
            tgt[row, : len(t)] = torch.as_tensor(t)
            mask[row, : len(t)] = True
        logits = teacher_force_logits_batch(model, prompts, tgt)
        loss = cross_entropy_rows(logits, tgt, mask).mean()
        loss_val = loss.item()
        if not bool(torch.isfinite(loss)):
            raise TrainingDiverged(f"non-finite induction loss at step {step}", history=history)
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            acc = _advantaged_accuracy(model, eval_instances, cfg)
            history["steps"].append({"step": step, "ce_loss": loss_val, "adv_accuracy": acc})
            logger.info("induction step %d: loss %.4f adv-acc %.3f", step, loss_val, acc)
            if acc >= cfg.target_accuracy and step >= cfg.min_steps:
                history["reached_target"] = True
                history["final_accuracy"] = acc
                return model, history
    raise InductionFailure(
        f"advantaged accuracy never reached {cfg.target_accuracy} within {cfg.max_steps} steps",
        history=history,
    )

"""Minimal decoder-only transformer (float64, CPU).

The architecture deliberately keeps the two mechanisms that give rise to
position-dependent behaviour — a causal mask and rotary relative position
encoding — and nothing that would mask them: pre-norm residual blocks,
GELU MLP, no dropout, no learned absolute positions. Everything is
float64 so gradients can be checked against finite differences.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_seq_len: int = 512
    rope_base: float = 10000.0

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.max_seq_len) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary pairing")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved feature pairs of x (..., T, head_dim) by position."""
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x_even * cos - x_odd * sin
    out[..., 1::2] = x_even * sin + x_odd * cos
    return out


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d, dtype=torch.float64)
        self.q_proj = nn.Linear(d, d, dtype=torch.float64)
        self.k_proj = nn.Linear(d, d, dtype=torch.float64)
        self.v_proj = nn.Linear(d, d, dtype=torch.float64)
        self.o_proj = nn.Linear(d, d, dtype=torch.float64)
        self.ln2 = nn.LayerNorm(d, dtype=torch.float64)
        self.fc = nn.Linear(d, 4 * d, dtype=torch.float64)
        self.proj = nn.Linear(4 * d, d, dtype=torch.float64)
        self.act = nn.GELU()


class TransformerLM(nn.Module):
    """Decoder-only LM over an integer vocabulary.

    ``forward`` accepts a (T,) or (B, T) token tensor (or plain sequence)
    and returns logits of shape (T, V) or (B, T, V). Logits at step t
    depend only on tokens[0..t].
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.d_model, dtype=torch.float64)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model, dtype=torch.float64)
        self.unembed = nn.Linear(config.d_model, config.vocab_size, bias=False, dtype=torch.float64)
        self._init_params(seed)

        half = config.head_dim // 2
        inv_freq = config.rope_base ** (-torch.arange(half, dtype=torch.float64) / half)
        angles = torch.outer(torch.arange(config.max_seq_len, dtype=torch.float64), inv_freq)
        self.register_buffer("rope_cos", torch.cos(angles), persistent=False)
        self.register_buffer("rope_sin", torch.sin(angles), persistent=False)

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias") or ".ln" in name or name.startswith("ln_f"):
                    if name.endswith("weight"):
                        p.fill_(1.0)  # layernorm gains
                    else:
                        p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * INIT_STD)

    def _check_tokens(self, tokens) -> torch.Tensor:
        t = torch.as_tensor(tokens, dtype=torch.long)
        if t.dim() not in (1, 2):
            raise ValueError(f"tokens must be 1-D or 2-D, got shape {tuple(t.shape)}")
        seq_len = t.shape[-1]
        if seq_len == 0:
            raise ValueError("empty token sequence")
        if seq_len > self.config.max_seq_len:
            raise ValueError(f"sequence length {seq_len} exceeds max_seq_len {self.config.max_seq_len}")
        if bool((t < 0).any()) or bool((t >= self.config.vocab_size).any()):
            raise ValueError(f"token id outside vocabulary of size {self.config.vocab_size}")
        return t

    def forward(self, tokens, return_attn: bool = False):
        t = self._check_tokens(tokens)
        squeeze = t.dim() == 1
        if squeeze:
            t = t.unsqueeze(0)
        B, T = t.shape
        H, hd = self.config.n_heads, self.config.head_dim

        cos = self.rope_cos[:T].view(1, 1, T, hd // 2)
        sin = self.rope_sin[:T].view(1, 1, T, hd // 2)
        causal = torch.full((T, T), float("-inf"), dtype=torch.float64).triu(1)

        x = self.embed(t)
        attn_maps = []
        for blk in self.blocks:
            h = blk.ln1(x)
            q = blk.q_proj(h).view(B, T, H, hd).transpose(1, 2)
            k = blk.k_proj(h).view(B, T, H, hd).transpose(1, 2)
            v = blk.v_proj(h).view(B, T, H, hd).transpose(1, 2)
            q = _rotate(q, cos, sin)
            k = _rotate(k, cos, sin)
            scores = q @ k.transpose(-1, -2) / (hd ** 0.5) + causal
            attn = torch.softmax(scores, dim=-1)
            if return_attn:
                attn_maps.append(attn)
            ctx = (attn @ v).transpose(1, 2).reshape(B, T, H * hd)
            x = x + blk.o_proj(ctx)
            h2 = blk.ln2(x)
            x = x + blk.proj(blk.act(blk.fc(h2)))
        logits = self.unembed(self.ln_f(x))
        if squeeze:
            logits = logits.squeeze(0)
            attn_maps = [a.squeeze(0) for a in attn_maps]
        if return_attn:
            return logits, attn_maps
        return logits


@dataclass
class DecodeResult:
    """Greedy continuation of a prompt. ``tokens`` excludes the prompt;
    ``truncated`` is set when generation stopped on budget, not stop_id."""
    tokens: list[int]
    truncated: bool


def _budget(model) -> int | None:
    cfg = getattr(model, "config", None)
    return getattr(cfg, "max_seq_len", None) if cfg is not None else None


def greedy_decode(model, prompt: Sequence[int], max_new: int, stop_id: int = 1) -> DecodeResult:
    """Deterministic argmax decoding until stop_id or the budget runs out."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    limit = _budget(model)
    tokens = list(int(x) for x in prompt)
    generated: list[int] = []
    with torch.no_grad():
        for _ in range(max_new):
            if limit is not None and len(tokens) >= limit:
                return DecodeResult(generated, truncated=True)
            logits = model(torch.as_tensor(tokens, dtype=torch.long))
            nxt = int(torch.argmax(logits[-1]).item())
            tokens.append(nxt)
            generated.append(nxt)
            if nxt == stop_id:
                return DecodeResult(generated, truncated=False)
    return DecodeResult(generated, truncated=True)


def greedy_decode_batch(model, prompts: torch.Tensor, max_new: int, stop_id: int = 1) -> list[DecodeResult]:
    """Batched greedy decoding of equal-length prompts (one forward per step)."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    p = torch.as_tensor(prompts, dtype=torch.long)
    if p.dim() != 2:
        raise ValueError("prompts must be (batch, prompt_len)")
    limit = _budget(model)
    B = p.shape[0]
    seq = p
    done = torch.zeros(B, dtype=torch.bool)
    stop_step = [-1] * B
    steps = 0
    with torch.no_grad():
        for step in range(max_new):
            if limit is not None and seq.shape[1] >= limit:
                break
            logits = model(seq)
            nxt = torch.argmax(logits[:, -1, :], dim=-1)
            seq = torch.cat([seq, nxt.view(B, 1)], dim=1)
            steps += 1
            hit = (nxt == stop_id) & ~done
            for i in torch.nonzero(hit).view(-1).tolist():
                stop_step[i] = step
            done |= nxt == stop_id
            if bool(done.all()):
                break
    out = []
    gen = seq[:, p.shape[1]:]
    for i in range(B):
        if stop_step[i] >= 0:
            out.append(DecodeResult(gen[i, : stop_step[i] + 1].tolist(), truncated=False))
        else:
            out.append(DecodeResult(gen[i, :steps].tolist(), truncated=True))
    return out


def teacher_force_logits(model, prompt: Sequence[int], response: Sequence[int]) -> torch.Tensor:
    """Logits over each response token given the prompt and the response
    prefix before it; shape (len(response), vocab)."""
    prompt = list(prompt)
    response = list(response)
    if not response:
        raise ValueError("empty response")
    logits = model(torch.as_tensor(prompt + response, dtype=torch.long))
    return logits[len(prompt) - 1 : len(prompt) + len(response) - 1]


def teacher_force_logits_batch(model, prompts: torch.Tensor, responses: torch.Tensor) -> torch.Tensor:
    """Batched teacher forcing for equal-length prompts and padded
    responses; returns (batch, resp_len, vocab). Padded positions produce
    garbage logits the caller must mask."""
    p = torch.as_tensor(prompts, dtype=torch.long)
    r = torch.as_tensor(responses, dtype=torch.long)
    if p.dim() != 2 or r.dim() != 2 or p.shape[0] != r.shape[0]:
        raise ValueError("prompts and responses must be 2-D with matching batch")
    tokens = torch.cat([p, r], dim=1)
    logits = model(tokens)
    tp = p.shape[1]
    return logits[:, tp - 1 : tp + r.shape[1] - 1, :]


def attention_trace(model, layout) -> np.ndarray:
    """Attention mass, from the final prompt position, summed inside each
    document span and averaged over heads and layers."""
    tokens = list(layout.tokens)
    n = len(tokens)
    for start, end in layout.doc_spans:
        if not (0 <= start < end <= n):
            raise ValueError(f"document span ({start}, {end}) outside layout of length {n}")
    with torch.no_grad():
        _, attn_maps = model(torch.as_tensor(tokens, dtype=torch.long), return_attn=True)
    stacked = torch.stack([a[:, n - 1, :] for a in attn_maps])  # (layers, heads, T)
    weights = stacked.mean(dim=(0, 1)).numpy()
    return np.array([weights[start:end].sum() for start, end in layout.doc_spans])


def clone_model(model: TransformerLM, trainable: bool = True) -> TransformerLM:
    """Deep copy; the copy shares nothing with the original."""
    out = copy.deepcopy(model)
    for p in out.parameters():
        p.requires_grad_(trainable)
    return out


def freeze(model: TransformerLM) -> TransformerLM:
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def params_sha256(model: TransformerLM) -> str:
    """Hash of all named parameters (names + raw little-endian float64 bytes)."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().numpy()).tobytes())
    return h.hexdigest()

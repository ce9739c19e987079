"""Tiny decoder-only transformer used as student, teacher and reference policy.

Everything runs in float64 on CPU. Gradients come from torch autograd; the
optimizer is a small hand-rolled Adam so that its state is plain tensors that
checkpoint bit-exactly and so that an all-zero gradient can be a true no-op.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ArtifactIOError, ConfigError, ContextWindowError, DataError, ShapeError

DTYPE = torch.float64
CHECKPOINT_FORMAT = "oglssd-checkpoint/1"

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<g>", "</g>", "<cut>")
WORD_TOKENS = ("Compute", "Reverse", "recheck", "Answer", "Step", "mod")
CHAR_TOKENS = tuple("0123456789+-*()=:. \n") + tuple("abcdefgh")


class Vocab:
    """Bijective token <-> id map with greedy longest-match word tokenization.

    Multi-character words are matched before single characters, so
    ``decode(encode(s)) == s`` for every string over the covered charset.
    """

    def __init__(self, tokens: Sequence[str] = SPECIAL_TOKENS + WORD_TOKENS + CHAR_TOKENS):
        tokens = tuple(tokens)
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        for name in SPECIAL_TOKENS:
            if name not in tokens:
                raise ConfigError(f"vocabulary lacks special token {name!r}")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        self._words = sorted(
            (t for t in tokens if t not in SPECIAL_TOKENS and len(t) > 1), key=len, reverse=True
        )
        self._special_ids = frozenset(self.index[t] for t in SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and other.tokens == self.tokens

    @property
    def size(self) -> int:
        return len(self.tokens)

    pad = property(lambda self: self.index["<pad>"])
    bos = property(lambda self: self.index["<bos>"])
    eos = property(lambda self: self.index["<eos>"])
    guide_open = property(lambda self: self.index["<g>"])
    guide_close = property(lambda self: self.index["</g>"])
    cut = property(lambda self: self.index["<cut>"])
    answer = property(lambda self: self.index["Answer"])

    def is_special(self, token_id: int) -> bool:
        return token_id in self._special_ids

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        i = 0
        while i < len(text):
            for word in self._words:
                if text.startswith(word, i):
                    ids.append(self.index[word])
                    i += len(word)
                    break
            else:
                ch = text[i]
                if ch not in self.index or ch in SPECIAL_TOKENS:
                    raise DataError(f"character {ch!r} at offset {i} is not in the vocabulary")
                ids.append(self.index[ch])
                i += 1
        return ids

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if skip_special and i in self._special_ids:
                continue
            out.append(self.tokens[i])
        return "".join(out)


@dataclass(frozen=True)
class ModelDims:
    V: int
    d: int = 64
    L: int = 2
    W: int = 512
    n_heads: int = 2

    def __post_init__(self):
        for name in ("V", "d", "L", "W", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model dimension {name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")


class _Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.proj = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.fc = nn.Linear(d, 4 * d, dtype=DTYPE)
        self.fc_proj = nn.Linear(4 * d, d, dtype=DTYPE)

    def forward(self, x, mask, cache=None):
        B, T, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(B, T, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        if cache is not None:
            if cache.get("k") is not None:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(~mask, float("-inf"))
        y = torch.softmax(att, dim=-1) @ v
        x = x + self.proj(y.transpose(1, 2).reshape(B, T, d))
        return x + self.fc_proj(F.gelu(self.fc(self.ln2(x))))


class TinyGPT(nn.Module):
    """Pre-norm decoder with learned positional embeddings and an untied head."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        self.tok_emb = nn.Embedding(dims.V, dims.d, dtype=DTYPE)
        self.pos_emb = nn.Embedding(dims.W, dims.d, dtype=DTYPE)
        self.blocks = nn.ModuleList(_Block(dims.d, dims.n_heads) for _ in range(dims.L))
        self.ln_f = nn.LayerNorm(dims.d, dtype=DTYPE)
        self.head = nn.Linear(dims.d, dims.V, bias=False, dtype=DTYPE)

    def _run(self, idx, positions, mask, caches=None):
        x = self.tok_emb(idx) + self.pos_emb(positions)
        for i, block in enumerate(self.blocks):
            x = block(x, mask, None if caches is None else caches[i])
        return self.head(self.ln_f(x))

    def forward(self, idx: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """Logits ``(B, T, V)`` for token ids ``(B, T)``.

        ``valid`` marks real tokens. Padding may sit on either side; each real
        token's position is the number of real tokens before it.
        """
        B, T = idx.shape
        if T > self.dims.W:
            raise ContextWindowError(f"sequence of length {T} exceeds context window W={self.dims.W}")
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        if valid is None:
            positions = torch.arange(T).expand(B, T)
            mask = causal.view(1, 1, T, T)
        else:
            positions = (valid.long().cumsum(1) - 1).clamp(min=0)
            eye = torch.eye(T, dtype=torch.bool)
            mask = ((causal & valid[:, None, :]) | eye).unsqueeze(1)
        return self._run(idx, positions, mask)


ModelParams = TinyGPT


def init_model(dims: ModelDims, seed: int) -> TinyGPT:
    """Deterministic scaled-normal init: std 0.02, residual projections 0.02/sqrt(2L)."""
    with torch.random.fork_rng():  # default module inits are overwritten below
        model = TinyGPT(dims)
    gen = torch.Generator().manual_seed(int(seed))
    resid_std = 0.02 / math.sqrt(2 * dims.L)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "ln_f.weight":
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                std = resid_std if name.endswith("proj.weight") else 0.02
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)
    return model


def clone_model(model: TinyGPT) -> TinyGPT:
    twin = TinyGPT(model.dims)
    twin.load_state_dict(model.state_dict())
    return twin


def freeze(model: TinyGPT) -> TinyGPT:
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def param_digest(model: TinyGPT) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def n_params(model: TinyGPT) -> int:
    return sum(p.numel() for p in model.parameters())


def forward_logits(params: TinyGPT, tokens: Sequence[int]) -> torch.Tensor:
    """One logit row per position; row t conditions on tokens[..t]."""
    if len(tokens) < 1:
        raise ShapeError("forward_logits needs at least one token")
    if len(tokens) > params.dims.W:
        raise ContextWindowError(
            f"sequence of length {len(tokens)} exceeds context window W={params.dims.W}"
        )
    idx = torch.as_tensor(list(tokens), dtype=torch.long).unsqueeze(0)
    return params(idx)[0]


def batch_forward(params: TinyGPT, seqs: Sequence[Sequence[int]], pad_id: int = 0) -> torch.Tensor:
    """Right-padded batched forward; row ``i`` is valid for ``len(seqs[i])`` positions.

    By causality the valid rows equal those of an unpadded forward.
    """
    T = max(len(s) for s in seqs)
    idx = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        idx[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return params(idx)


def softmax_temperature(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    return torch.softmax(logits / temperature, dim=-1)


def next_dist(params: TinyGPT, context: Sequence[int], temperature: float = 1.0) -> torch.Tensor:
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    with torch.no_grad():
        return softmax_temperature(forward_logits(params, context)[-1], temperature)


def _draw(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


@torch.no_grad()
def sample_batch(
    params: TinyGPT,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    temperature: float,
    seeds: Sequence[Sequence[int] | int],
    eos_id: int,
    pad_id: int = 0,
) -> list[list[int]]:
    """Sample one continuation per prompt with incremental (cached) decoding.

    Row ``i`` draws its uniforms from ``np.random.default_rng(seeds[i])`` so a
    row's sample does not depend on which other rows share the batch.
    Continuations include the terminating eos when one is drawn.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    B = len(prompts)
    if B == 0:
        return []
    W = params.dims.W
    lens = [len(p) for p in prompts]
    if min(lens) < 1:
        raise ShapeError("prompts must be non-empty")
    if max(lens) > W:
        raise ContextWindowError(f"prompt of length {max(lens)} exceeds context window W={W}")
    limits = [max(0, min(max_new, W - n)) for n in lens]
    outs: list[list[int]] = [[] for _ in range(B)]
    if max(limits) == 0:
        return outs
    rngs = [np.random.default_rng(s) for s in seeds]

    T = max(lens)
    idx = torch.full((B, T), pad_id, dtype=torch.long)
    valid = torch.zeros(B, T, dtype=torch.bool)
    for i, p in enumerate(prompts):
        idx[i, T - lens[i] :] = torch.as_tensor(list(p), dtype=torch.long)
        valid[i, T - lens[i] :] = True
    positions = (valid.long().cumsum(1) - 1).clamp(min=0)
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    mask = ((causal & valid[:, None, :]) | torch.eye(T, dtype=torch.bool)).unsqueeze(1)
    caches = [{} for _ in params.blocks]
    logits = params._run(idx, positions, mask, caches)[:, -1]
    next_pos = torch.as_tensor(lens, dtype=torch.long)
    key_valid = valid
    active = [lim > 0 for lim in limits]

    while any(active):
        probs = softmax_temperature(logits, temperature).numpy()
        step_tokens = torch.full((B,), pad_id, dtype=torch.long)
        for i in range(B):
            if not active[i]:
                continue
            tok = _draw(probs[i], rngs[i].random())
            outs[i].append(tok)
            step_tokens[i] = tok
            if tok == eos_id or len(outs[i]) >= limits[i]:
                active[i] = False
        if not any(active):
            break
        key_valid = torch.cat([key_valid, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        mask = key_valid[:, None, None, :]
        pos = next_pos.clamp(max=W - 1).view(B, 1)
        logits = params._run(step_tokens.view(B, 1), pos, mask, caches)[:, -1]
        next_pos = next_pos + 1
    return outs


def sample_sequence(
    params: TinyGPT,
    prompt: Sequence[int],
    max_new: int,
    temperature: float,
    rng_seed: Sequence[int] | int,
    eos_id: int,
) -> list[int]:
    return sample_batch(params, [prompt], max_new, temperature, [rng_seed], eos_id)[0]


def backward(loss: torch.Tensor, params: TinyGPT) -> dict[str, torch.Tensor]:
    """Gradient buffer ``{name: dloss/dparam}``; unconnected losses give zeros."""
    named = [(n, p) for n, p in params.named_parameters()]
    if not (isinstance(loss, torch.Tensor) and loss.requires_grad):
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)}


@dataclass
class OptState:
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    n_rejected: int = 0

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v), "n_rejected": self.n_rejected}

    @classmethod
    def from_state_dict(cls, sd: dict) -> "OptState":
        return cls(t=int(sd["t"]), m=dict(sd["m"]), v=dict(sd["v"]), n_rejected=int(sd["n_rejected"]))


@dataclass
class StepReport:
    applied: bool
    rejected: bool
    grad_norm: float


def init_opt_state(params: TinyGPT) -> OptState:
    return OptState(
        m={n: torch.zeros_like(p) for n, p in params.named_parameters()},
        v={n: torch.zeros_like(p) for n, p in params.named_parameters()},
    )


@torch.no_grad()
def optimizer_step(
    params: TinyGPT,
    grads: dict[str, torch.Tensor],
    state: OptState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    max_grad_norm: float | None = None,
) -> StepReport:
    """Adam update in place. Nonfinite gradients are rejected; all-zero gradients only tick ``t``."""
    named = dict(params.named_parameters())
    if set(grads) != set(named):
        raise ShapeError("gradient buffer does not match parameter names")
    for n, g in grads.items():
        if g.shape != named[n].shape:
            raise ShapeError(f"gradient for {n} has shape {tuple(g.shape)}, expected {tuple(named[n].shape)}")
    sq = sum(float((g * g).sum()) for g in grads.values())
    norm = math.sqrt(sq) if math.isfinite(sq) else float("inf")
    if not all(bool(torch.isfinite(g).all()) for g in grads.values()):
        state.n_rejected += 1
        return StepReport(applied=False, rejected=True, grad_norm=norm)
    state.t += 1
    if sq == 0.0:
        return StepReport(applied=False, rejected=False, grad_norm=0.0)
    scale = 1.0
    if max_grad_norm is not None and max_grad_norm > 0 and norm > max_grad_norm:
        scale = max_grad_norm / norm
    b1, b2 = betas
    t = state.t
    for n, p in named.items():
        g = grads[n] * scale
        m = state.m[n].mul_(b1).add_(g, alpha=1 - b1)
        v = state.v[n].mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        if weight_decay:
            p.mul_(1 - lr * weight_decay)
        p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return StepReport(applied=True, rejected=False, grad_norm=norm)


@dataclass
class Checkpoint:
    model: TinyGPT
    vocab: Vocab
    opt_state: OptState | None
    step: int
    extra: dict


def save_checkpoint(
    path: str | Path,
    model: TinyGPT,
    vocab: Vocab,
    opt_state: OptState | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    d = model.dims
    payload = {
        "format": CHECKPOINT_FORMAT,
        "dims": {"V": d.V, "d": d.d, "L": d.L, "W": d.W, "n_heads": d.n_heads},
        "vocab": list(vocab.tokens),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "opt_state": None if opt_state is None else opt_state.state_dict(),
        "step": int(step),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for corrupt files
        raise ArtifactIOError(f"{path}: unreadable checkpoint ({type(exc).__name__})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ArtifactIOError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    model = TinyGPT(ModelDims(**payload["dims"]))
    model.load_state_dict(payload["params"])
    opt = payload["opt_state"]
    return Checkpoint(
        model=model,
        vocab=Vocab(payload["vocab"]),
        opt_state=None if opt is None else OptState.from_state_dict(opt),
        step=payload["step"],
        extra=payload["extra"],
    )

"""Dense float64 primitives with hand-written backward passes.

Every op here is a ``torch.autograd.Function`` whose backward is derived
analytically; torch only supplies the recording of evaluation order. The
composites (attention, FFN) are built from these plus matmuls, and
``grad_check`` compares any scalar composite against central differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import nn

DTYPE = torch.float64


class NumericError(ArithmeticError):
    """Raised when a NaN/Inf shows up where a finite value is required."""


class NondeterministicError(RuntimeError):
    pass


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# softmax


class _Softmax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, dim):
        shifted = x - x.amax(dim=dim, keepdim=True)
        e = torch.exp(shifted)
        y = e / e.sum(dim=dim, keepdim=True)
        ctx.dim = dim
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved_tensors
        return y * (g - (g * y).sum(dim=ctx.dim, keepdim=True)), None


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    check_finite(x, "softmax input")
    return _Softmax.apply(x, dim)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    check_finite(x, "log_softmax input")
    return _LogSoftmax.apply(x, dim)


class _LogSoftmax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, dim):
        shifted = x - x.amax(dim=dim, keepdim=True)
        out = shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))
        ctx.dim = dim
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved_tensors
        return g - torch.exp(out) * g.sum(dim=ctx.dim, keepdim=True), None


# ---------------------------------------------------------------------------
# layer norm over the last axis


class _LayerNorm(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps):
        mu = x.mean(dim=-1, keepdim=True)
        diff = x - mu
        var = (diff * diff).mean(dim=-1, keepdim=True)
        denom = var + eps
        # zero-variance rows with eps == 0 normalize to zero, not 0/0
        rstd = torch.where(denom > 0, denom.clamp_min(1e-300).rsqrt(), torch.zeros_like(denom))
        xhat = diff * rstd
        ctx.save_for_backward(xhat, rstd, gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, rstd, gamma = ctx.saved_tensors
        n = xhat.shape[-1]
        dxhat = g * gamma
        dx = rstd / n * (
            n * dxhat
            - dxhat.sum(dim=-1, keepdim=True)
            - xhat * (dxhat * xhat).sum(dim=-1, keepdim=True)
        )
        lead = tuple(range(g.dim() - 1))
        dgamma = (g * xhat).sum(dim=lead) if lead else g * xhat
        dbeta = g.sum(dim=lead) if lead else g
        return dx, dgamma, dbeta, None


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ValueError("layer_norm needs a non-empty last axis")
    check_finite(x, "layer_norm input")
    return _LayerNorm.apply(x, gamma, beta, eps)


# ---------------------------------------------------------------------------
# exact (erf) GELU


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class _GELU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return 0.5 * x * (1.0 + torch.erf(x * _INV_SQRT2))

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        cdf = 0.5 * (1.0 + torch.erf(x * _INV_SQRT2))
        pdf = torch.exp(-0.5 * x * x) * _INV_SQRT2PI
        return g * (cdf + x * pdf)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return _GELU.apply(x)


# ---------------------------------------------------------------------------
# cross entropy (per row, no reduction)


class _CrossEntropy(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, target):
        shifted = logits - logits.amax(dim=-1, keepdim=True)
        logz = torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True))
        logp = shifted - logz
        ctx.save_for_backward(logp, target)
        return -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)

    @staticmethod
    def backward(ctx, g):
        logp, target = ctx.saved_tensors
        grad = torch.exp(logp)
        grad.scatter_add_(-1, target.unsqueeze(-1), -torch.ones_like(g).unsqueeze(-1))
        return grad * g.unsqueeze(-1), None


def cross_entropy(logits: torch.Tensor, target) -> torch.Tensor:
    """Per-row ``-log softmax(logits)[target]``; no reduction."""
    target = torch.as_tensor(target, dtype=torch.long)
    n_classes = logits.shape[-1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise IndexError(f"target out of range for {n_classes} classes")
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    check_finite(logits, "cross_entropy logits")
    return _CrossEntropy.apply(logits, target)


# ---------------------------------------------------------------------------
# modules


@dataclass
class AttentionConfig:
    model_dim: int
    heads: int = 4
    ffn_hidden: int | None = None

    def __post_init__(self):
        if self.model_dim <= 0 or self.heads <= 0:
            raise ValueError("model_dim and heads must be positive")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.model_dim
        if self.ffn_hidden <= 0:
            raise ValueError("ffn_hidden must be positive")


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        super().__init__()
        if std is None:
            bound = math.sqrt(6.0 / (d_in + d_out))
            w = torch.empty(d_out, d_in, dtype=DTYPE).uniform_(-bound, bound)
        else:
            w = torch.randn(d_out, d_in, dtype=DTYPE) * std
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None

    def forward(self, x):
        y = x @ self.weight.T
        return y + self.bias if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.beta = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with learned Q/K/V/output projections.

    Inputs carry arbitrary leading batch axes: ``q`` is ``(..., n_q, D)`` and
    ``k``/``v`` are ``(..., n_k, D)``. Returns the projected output and the
    attention weights ``(..., heads, n_q, n_k)``.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        d = cfg.model_dim
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.q_proj = Linear(d, d)
        self.k_proj = Linear(d, d)
        self.v_proj = Linear(d, d)
        self.out_proj = Linear(d, d)

    def _split(self, x):
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, self.head_dim).transpose(-2, -3)

    def attend(self, q, k, v, key_mask=None):
        """Per-head attended values before the output projection."""
        if k.shape[-2] == 0:
            raise ValueError("attention needs at least one key")
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            # key_mask: (..., n_k) bool, True = keep
            scores = scores.masked_fill(~key_mask[..., None, None, :], -1e30)
        weights = softmax(scores, dim=-1)
        return weights @ vh, weights

    def forward(self, q, k, v, key_mask=None):
        heads_out, weights = self.attend(q, k, v, key_mask)
        merged = heads_out.transpose(-2, -3)
        merged = merged.reshape(*merged.shape[:-2], -1)
        return self.out_proj(merged), weights


def multi_head_attention(q, k, v, module: MultiHeadAttention):
    return module(q, k, v)


# ---------------------------------------------------------------------------
# finite-difference gradient check


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` takes no arguments and returns a scalar built from ``params``.
    Per tensor, the error is ``max|analytic - numeric|`` divided by the
    largest gradient magnitude of either kind, floored at 1 so that
    gradients that vanish identically (e.g. a key bias under softmax) are
    judged by absolute error. The worst tensor wins.
    ``max_entries`` limits the probed coordinates per tensor (picked with a
    seeded generator) to keep big composites cheap.
    """
    params = list(params)
    with torch.no_grad():
        f0 = fn().detach().clone()
        f1 = fn().detach().clone()
    if not torch.equal(f0, f1):
        raise NondeterministicError("fn returned different values on repeated evaluation")
    out = fn()
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued fn")
    analytic = torch.autograd.grad(out, params, allow_unused=True)
    rng = torch.Generator().manual_seed(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        a = torch.zeros_like(p) if a is None else a.detach()
        flat = p.data.view(-1)
        n = flat.numel()
        if max_entries is not None and n > max_entries:
            idx = torch.randperm(n, generator=rng)[:max_entries].tolist()
        else:
            idx = range(n)
        a_sel, n_sel = [], []
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                n_sel.append((fp - fm) / (2 * eps))
                a_sel.append(a.reshape(-1)[i].item())
        a_t = torch.tensor(a_sel, dtype=DTYPE)
        n_t = torch.tensor(n_sel, dtype=DTYPE)
        scale = max(a_t.abs().max().item(), n_t.abs().max().item(), 1.0)
        worst = max(worst, (a_t - n_t).abs().max().item() / scale)
    return worst

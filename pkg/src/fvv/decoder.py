"""View-direction encoding, the shared 3-layer RGB decoder with a
hand-written backward pass, and the Adam optimizer used for every trainable
tensor in the project.

The decoder runs in float64 internally (parameters live in float32); reverse
mode is written out explicitly so the whole render chain stays
autograd-free and checkable against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

DEFAULT_FREQS = 4
DEFAULT_WIDTH = 128


def posenc(d: torch.Tensor, L: int = DEFAULT_FREQS) -> torch.Tensor:
    """[d, sin(2^0 pi d), cos(2^0 pi d), ..., sin(2^{L-1} pi d), cos(...)],
    componentwise; length 3 + 6L. Directions must be unit vectors."""
    d = torch.as_tensor(d, dtype=torch.float64)
    squeeze = d.ndim == 1
    if squeeze:
        d = d[None, :]
    norms = d.norm(dim=1)
    if bool((norms - 1.0).abs().max() > 1e-6):
        raise ValueError("posenc expects unit direction vectors")
    parts = [d]
    for k in range(L):
        arg = (2.0**k) * math.pi * d
        parts.append(torch.sin(arg))
        parts.append(torch.cos(arg))
    out = torch.cat(parts, dim=1)
    return out[0] if squeeze else out


def posenc_dim(L: int = DEFAULT_FREQS) -> int:
    return 3 + 6 * L


@dataclass
class DecoderMLP:
    """Three dense layers (ReLU, ReLU, sigmoid) decoding an accumulated
    feature plus encoded view direction into RGB."""

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    w3: torch.Tensor
    b3: torch.Tensor
    feature_dim: int
    enc_dim: int
    eval_count: int = 0

    @property
    def in_dim(self) -> int:
        return self.feature_dim + self.enc_dim

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def n_params(self) -> int:
        return sum(t.numel() for t in self.params().values())

    def clone(self) -> "DecoderMLP":
        return DecoderMLP(
            w1=self.w1.clone(), b1=self.b1.clone(), w2=self.w2.clone(),
            b2=self.b2.clone(), w3=self.w3.clone(), b3=self.b3.clone(),
            feature_dim=self.feature_dim, enc_dim=self.enc_dim,
        )


def init_decoder(feature_dim: int, enc_dim: int, width: int = DEFAULT_WIDTH,
                 generator: torch.Generator | None = None) -> DecoderMLP:
    """Xavier-uniform weights, zero biases."""
    def xavier(n_in, n_out):
        bound = math.sqrt(6.0 / (n_in + n_out))
        w = torch.empty(n_in, n_out, dtype=torch.float32)
        w.uniform_(-bound, bound, generator=generator)
        return w

    in_dim = feature_dim + enc_dim
    return DecoderMLP(
        w1=xavier(in_dim, width), b1=torch.zeros(width),
        w2=xavier(width, width), b2=torch.zeros(width),
        w3=xavier(width, 3), b3=torch.zeros(3),
        feature_dim=feature_dim, enc_dim=enc_dim,
    )


@dataclass
class MlpCache:
    x: torch.Tensor
    a1: torch.Tensor
    a2: torch.Tensor
    y: torch.Tensor


def mlp_forward(mlp: DecoderMLP, f_tilde: torch.Tensor, enc: torch.Tensor):
    """Batched forward pass; returns (rgb, cache). Counts one evaluation per row."""
    if f_tilde.shape[-1] != mlp.feature_dim or enc.shape[-1] != mlp.enc_dim:
        raise ValueError(
            f"decoder expects dims ({mlp.feature_dim}, {mlp.enc_dim}), "
            f"got ({f_tilde.shape[-1]}, {enc.shape[-1]})")
    x = torch.cat([f_tilde.to(torch.float64), enc.to(torch.float64)], dim=-1)
    a1 = (x @ mlp.w1.to(torch.float64) + mlp.b1.to(torch.float64)).relu_()
    a2 = (a1 @ mlp.w2.to(torch.float64) + mlp.b2.to(torch.float64)).relu_()
    y = torch.sigmoid(a2 @ mlp.w3.to(torch.float64) + mlp.b3.to(torch.float64))
    mlp.eval_count += x.shape[0]
    return y, MlpCache(x=x, a1=a1, a2=a2, y=y)


@dataclass
class MlpGrads:
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    w3: torch.Tensor
    b3: torch.Tensor

    @classmethod
    def zeros_like(cls, mlp: DecoderMLP) -> "MlpGrads":
        return cls(**{k: torch.zeros(t.shape, dtype=torch.float64) for k, t in mlp.params().items()})

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def add_(self, other: "MlpGrads") -> None:
        for k, t in self.tensors().items():
            t += other.tensors()[k]


def mlp_backward(mlp: DecoderMLP, cache: MlpCache, d_rgb: torch.Tensor):
    """Exact reverse-mode gradients of mlp_forward.

    Returns (MlpGrads, d_f_tilde, d_enc) for the batch in the cache.
    """
    if d_rgb.shape != cache.y.shape:
        raise ValueError("d_rgb shape does not match the cached forward batch")
    w2 = mlp.w2.to(torch.float64)
    w3 = mlp.w3.to(torch.float64)
    y = cache.y
    dz3 = d_rgb.to(torch.float64) * y * (1.0 - y)
    g = MlpGrads(
        w3=cache.a2.T @ dz3, b3=dz3.sum(dim=0),
        w2=torch.empty(0), b2=torch.empty(0), w1=torch.empty(0), b1=torch.empty(0),
    )
    da2 = dz3 @ w3.T
    dz2 = da2 * (cache.a2 > 0)
    g.w2 = cache.a1.T @ dz2
    g.b2 = dz2.sum(dim=0)
    da1 = dz2 @ w2.T
    dz1 = da1 * (cache.a1 > 0)
    g.w1 = cache.x.T @ dz1
    g.b1 = dz1.sum(dim=0)
    dx = dz1 @ mlp.w1.to(torch.float64).T
    return g, dx[:, :mlp.feature_dim], dx[:, mlp.feature_dim:]


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update, in place, with bias correction.

    The epsilon term is scaled by the bias-correction ratio so the first-step
    magnitude is lr*|g|/(|g| + eps*sqrt(1-beta2)/(1-beta1)).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    eps_t = state.eps * math.sqrt(bc2) / bc1
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)} for '{k}'")
        g = g.to(p.dtype)
        if k not in state.m:
            state.m[k] = torch.zeros_like(p)
            state.v[k] = torch.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(eps_t)
        p.addcdiv_(m, denom, value=-lr / bc1)

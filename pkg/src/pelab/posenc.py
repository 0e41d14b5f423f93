"""The four positional-encoding strategies and their attention attachment points.

Each strategy plugs into attention differently:

* APE     - additive sinusoid tables applied once to the encoded feature map
            (time table broadcast over frequency, then frequency table over time).
* KERPLE  - learnable logarithmic bias added to attention logits per head;
            applied bidirectionally since separation is non-causal.
* RoPE    - rotation of query/key coordinate pairs before the score product;
            values are never touched.
* NoPE    - nothing; position can still leak in through zero-padded convs.

Tables extend consistently: length-L tables are exact prefixes/sub-blocks of
length-2L tables, and RoPE's per-position rotation is independent of sequence
length, which is the mechanical precondition for length extrapolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, add, log1p, mul, reshape, softplus, stack

APE_BASE = 5000.0
ROPE_BASE = 10000.0


class PEKind(str, Enum):
    APE = "ape"
    KERPLE = "kerple"
    ROPE = "rope"
    NOPE = "nope"

    @classmethod
    def parse(cls, name: str) -> "PEKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(
                f"unknown positional encoding {name!r}; expected one of "
                f"{[k.value for k in cls]}"
            ) from None


# ------------------------------------------------------------------ APE


def ape_table(d_model: int, length: int, base: float = APE_BASE) -> np.ndarray:
    """Sinusoid table [D, L]; row d (1-indexed) uses sin at exponent d/D for
    even d and cos at exponent (d-1)/D for odd d, base 5000."""
    d = np.arange(1, d_model + 1)[:, None].astype(np.float64)
    i = np.arange(length)[None, :].astype(np.float64)
    even = d % 2 == 0
    freq = np.where(even, base ** (-d / d_model), base ** (-(d - 1) / d_model))
    return np.where(even, np.sin(freq * i), np.cos(freq * i))


def apply_ape(z: Tensor, base: float = APE_BASE) -> Tensor:
    """Add time and frequency sinusoid tables to z [D, T, F]."""
    d, t, f = z.shape
    p_time = ape_table(d, t, base)[:, :, None]
    p_freq = ape_table(d, f, base)[:, None, :]
    return add(add(z, Tensor(p_time)), Tensor(p_freq))


# ------------------------------------------------------------------ KERPLE


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


@dataclass
class KerpleParams:
    """Unconstrained per-head scalars; effective r1/r2 go through softplus."""

    u1: Tensor
    u2: Tensor

    @classmethod
    def init(cls, heads: int, r1: float = 1.0, r2: float = 1.0) -> "KerpleParams":
        u = _softplus_inverse(r1), _softplus_inverse(r2)
        return cls(
            u1=Tensor(np.full(heads, u[0]), requires_grad=True),
            u2=Tensor(np.full(heads, u[1]), requires_grad=True),
        )

    @property
    def heads(self) -> int:
        return self.u1.shape[0]

    def r_values(self) -> tuple[np.ndarray, np.ndarray]:
        return np.logaddexp(0, self.u1.data), np.logaddexp(0, self.u2.data)


def kerple_bias(length: int, params: KerpleParams) -> Tensor:
    """Logarithmic distance bias [H, L, L]: -r1 * log(1 + r2 * |i - j|).

    Symmetric, zero diagonal, non-positive, strictly decreasing in distance.
    Differentiable in the underlying u1/u2.
    """
    idx = np.arange(length, dtype=np.float64)
    dist = np.abs(idx[:, None] - idx[None, :])[None, :, :]  # [1, L, L]
    r1 = reshape(softplus(params.u1), (params.heads, 1, 1))
    r2 = reshape(softplus(params.u2), (params.heads, 1, 1))
    return mul(mul(r1, log1p(mul(r2, Tensor(dist)))), -1.0)


# ------------------------------------------------------------------ RoPE


def _rope_angles(length: int, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    if d_head % 2:
        raise ConfigError(f"RoPE needs an even head dim, got {d_head}")
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = np.arange(length, dtype=np.float64)[:, None] * inv_freq[None, :]  # [L, dh/2]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x: Tensor, base: float = ROPE_BASE) -> Tensor:
    """Rotate consecutive coordinate pairs of x [..., L, d_head] by i * base^(-2k/d)."""
    *lead, length, dh = x.shape
    cos, sin = _rope_angles(length, dh, base)
    pairs = reshape(x, tuple(lead) + (length, dh // 2, 2))
    xe = pairs[..., 0]
    xo = pairs[..., 1]
    c, s = Tensor(cos), Tensor(sin)
    ye = add(mul(xe, c), mul(mul(xo, s), -1.0))
    yo = add(mul(xe, s), mul(xo, c))
    return reshape(stack([ye, yo], axis=-1), x.shape)


# ------------------------------------------------------------------ dispatch


@dataclass
class AttentionHooks:
    """Attachment points a sequence block offers to a positional encoding.

    input_add fires once on the encoded feature map (APE); score_bias maps a
    sequence length to an [H, L, L] logit bias (KERPLE); qk_transform rewrites
    per-head queries and keys (RoPE).  Absent hooks mean identity.
    """

    input_add: Callable[[Tensor], Tensor] | None = None
    score_bias: Callable[[int], Tensor] | None = None
    qk_transform: Callable[[Tensor, Tensor], tuple[Tensor, Tensor]] | None = None


def attach(kind: PEKind | str, *, kerple: KerpleParams | None = None,
           rope_base: float = ROPE_BASE) -> AttentionHooks:
    """Build the hooks implied by a PE kind. KERPLE needs its parameter set."""
    kind = PEKind.parse(kind) if isinstance(kind, str) else kind
    if kind is PEKind.NOPE:
        return AttentionHooks()
    if kind is PEKind.APE:
        return AttentionHooks(input_add=apply_ape)
    if kind is PEKind.KERPLE:
        if kerple is None:
            raise ConfigError("KERPLE hooks need a KerpleParams instance")
        return AttentionHooks(score_bias=lambda length: kerple_bias(length, kerple))
    if kind is PEKind.ROPE:
        def qk(q: Tensor, k: Tensor) -> tuple[Tensor, Tensor]:
            return rope_rotate(q, rope_base), rope_rotate(k, rope_base)

        return AttentionHooks(qk_transform=qk)
    raise ConfigError(f"unhandled PE kind {kind}")

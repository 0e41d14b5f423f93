"""Dual-path TF separation model with swappable positional encodings.

The encoder maps a real/imag spectrogram stack [2M, T, F] to a D-channel
feature map; B dual-path blocks alternate sequence modeling over the
frequency axis (per frame) and the time axis (per bin); the decoder emits
RI estimates for every source.  Each sequence block is a macaron sandwich:
half-residual ConvSwiGLU, self-attention, half-residual ConvSwiGLU.

None of the parameters depend on T or F, which is what lets one trained
model run at a different sampling rate (different bin count) unchanged.
The band-split variant trades that invariance for cheaper frequency
modeling: the frequency axis is collapsed to Q sub-band embeddings and the
decoder emits per-band complex masks applied to the mixture.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, ShapeError
from .posenc import AttentionHooks, KerpleParams, PEKind, apply_ape, attach
from .signal import Spectrogram, StftConfig, Waveform, istft, stft
from .tensor import (
    Tensor,
    add,
    concat,
    conv1d,
    conv2d,
    deconv1d,
    deconv2d,
    global_layer_norm,
    matmul,
    mul,
    permute,
    reshape,
    rms_group_norm,
    softmax,
    stack,
    swish,
)


@dataclass(frozen=True)
class LocoformerConfig:
    d_model: int = 96
    blocks: int = 4
    kernel: int = 8
    stride: int = 1
    heads: int = 4
    ffn_expand: int = 4
    sources: int = 2
    channels: int = 1
    pe: str = "rope"
    norm_groups: int = 4
    band_table: tuple[int, ...] | None = None
    enc_kernel: int = 3
    dec_kernel: int = 3
    pe_axes: str = "both"  # which modeled axes get KERPLE/RoPE hooks

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % self.norm_groups:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by norm groups {self.norm_groups}")
        if (self.d_model * self.ffn_expand) % self.norm_groups:
            raise ConfigError("hidden width not divisible by norm groups")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError("kernel and stride must be >= 1")
        if self.pe_axes not in ("both", "time", "freq"):
            raise ConfigError(f"pe_axes must be both/time/freq, got {self.pe_axes!r}")
        PEKind.parse(self.pe)
        if self.band_table is not None:
            object.__setattr__(self, "band_table", tuple(int(b) for b in self.band_table))
            if any(b < 1 for b in self.band_table):
                raise ConfigError("band widths must be positive")

    @property
    def pe_kind(self) -> PEKind:
        return PEKind.parse(self.pe)

    @property
    def is_band_split(self) -> bool:
        return self.band_table is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band_table"] = list(self.band_table) if self.band_table else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LocoformerConfig":
        d = dict(d)
        if d.get("band_table"):
            d["band_table"] = tuple(d["band_table"])
        return cls(**d)


def uniform_band_table(num_bins: int, bands: int) -> tuple[int, ...]:
    """Split F bins into `bands` near-equal widths summing exactly to F."""
    base = num_bins // bands
    extra = num_bins - base * bands
    return tuple(base + (1 if q < extra else 0) for q in range(bands))


# ------------------------------------------------------------------ layers


class _Registry:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def register(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = t
        return t


def _init_weight(rng, shape, fan_in) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class ConvSwiGLU:
    """Norm -> two parallel Conv1D (fused) -> swish gate -> Deconv1D."""

    def __init__(self, reg: _Registry, prefix: str, d: int, hidden: int,
                 kernel: int, stride: int, groups: int, rng):
        self.groups = groups
        self.hidden = hidden
        self.stride = stride
        self.norm_gain = reg.register(f"{prefix}.norm.gain",
                                      Tensor(np.ones(d), requires_grad=True))
        self.w_in = reg.register(f"{prefix}.conv_in.w",
                                 _init_weight(rng, (2 * hidden, d, kernel), d * kernel))
        self.b_in = reg.register(f"{prefix}.conv_in.b",
                                 Tensor(np.zeros(2 * hidden), requires_grad=True))
        self.w_out = reg.register(f"{prefix}.deconv_out.w",
                                  _init_weight(rng, (hidden, d, kernel), hidden * kernel))
        self.b_out = reg.register(f"{prefix}.deconv_out.b",
                                  Tensor(np.zeros(d), requires_grad=True))

    def forward(self, z: Tensor) -> Tensor:
        y = rms_group_norm(z, self.norm_gain, self.groups)
        h = add(conv1d(y, self.w_in, stride=self.stride),
                reshape(self.b_in, (2 * self.hidden, 1)))
        gate = h[:, :self.hidden]
        val = h[:, self.hidden:]
        gated = mul(swish(gate), val)
        out = deconv1d(gated, self.w_out, stride=self.stride)
        return add(out, reshape(self.b_out, (-1, 1)))


class MultiHeadSelfAttention:
    """Pre-norm MHSA over [B, D, L] with optional PE hooks."""

    def __init__(self, reg: _Registry, prefix: str, d: int, heads: int,
                 groups: int, rng, hooks: AttentionHooks):
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.groups = groups
        self.hooks = hooks
        self.norm_gain = reg.register(f"{prefix}.norm.gain",
                                      Tensor(np.ones(d), requires_grad=True))
        for nm in ("q", "k", "v", "o"):
            setattr(self, f"w{nm}", reg.register(f"{prefix}.{nm}.w",
                                                 _init_weight(rng, (d, d), d)))
            setattr(self, f"b{nm}", reg.register(f"{prefix}.{nm}.b",
                                                 Tensor(np.zeros(d), requires_grad=True)))
        self.record = False
        self.last_scores: np.ndarray | None = None
        self.last_attn: np.ndarray | None = None

    def forward(self, z: Tensor) -> Tensor:
        b, d, l = z.shape
        y = rms_group_norm(z, self.norm_gain, self.groups)
        x = permute(y, (0, 2, 1))  # [B, L, D]

        def proj(w, bias):
            h = add(matmul(x, w), bias)
            return permute(reshape(h, (b, l, self.heads, self.head_dim)), (0, 2, 1, 3))

        q = proj(self.wq, self.bq)
        k = proj(self.wk, self.bk)
        v = proj(self.wv, self.bv)
        if self.hooks.qk_transform is not None:
            q, k = self.hooks.qk_transform(q, k)
        scores = mul(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        if self.hooks.score_bias is not None:
            scores = add(scores, self.hooks.score_bias(l))
        attn = softmax(scores, axis=-1)
        if self.record:
            self.last_scores = scores.data.copy()
            self.last_attn = attn.data.copy()
        ctx = matmul(attn, v)  # [B, H, L, dh]
        ctx = reshape(permute(ctx, (0, 2, 1, 3)), (b, l, d))
        out = add(matmul(ctx, self.wo), self.bo)
        return permute(out, (0, 2, 1))


class SequenceBlock:
    """Macaron block: z += ConvSwiGLU/2; z += MHSA(Norm(z)); z += ConvSwiGLU/2."""

    def __init__(self, reg, prefix, cfg: LocoformerConfig, rng, hooks: AttentionHooks):
        hidden = cfg.d_model * cfg.ffn_expand
        self.ffn1 = ConvSwiGLU(reg, f"{prefix}.ffn1", cfg.d_model, hidden,
                               cfg.kernel, cfg.stride, cfg.norm_groups, rng)
        self.attn = MultiHeadSelfAttention(reg, f"{prefix}.attn", cfg.d_model,
                                           cfg.heads, cfg.norm_groups, rng, hooks)
        self.ffn2 = ConvSwiGLU(reg, f"{prefix}.ffn2", cfg.d_model, hidden,
                               cfg.kernel, cfg.stride, cfg.norm_groups, rng)

    def forward(self, z: Tensor) -> Tensor:
        z = add(z, mul(self.ffn1.forward(z), 0.5))
        z = add(z, self.attn.forward(z))
        z = add(z, mul(self.ffn2.forward(z), 0.5))
        return z


class TFLocoformer:
    """Encoder, B alternating frequency/time blocks, decoder.

    `forward` maps a [2, M, T, F] spectrogram stack to source estimates
    [2, N, M, T, F]; every intermediate carries gradients back to the
    registered parameters.
    """

    def __init__(self, config: LocoformerConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        reg = _Registry()
        self._reg = reg
        cfg = config
        d = cfg.d_model
        in_ch = 2 * cfg.channels
        out_ch = 2 * cfg.sources * cfg.channels

        if cfg.is_band_split:
            self.band_norm_gains = []
            self.band_w = []
            self.band_b = []
            for qi, bq in enumerate(cfg.band_table):
                width = in_ch * bq
                self.band_norm_gains.append(reg.register(
                    f"band_enc.{qi}.norm.gain", Tensor(np.ones(width), requires_grad=True)))
                self.band_w.append(reg.register(
                    f"band_enc.{qi}.w", _init_weight(rng, (d, width), width)))
                self.band_b.append(reg.register(
                    f"band_enc.{qi}.b", Tensor(np.zeros(d), requires_grad=True)))
        else:
            self.enc_w = reg.register(
                "enc.conv.w",
                _init_weight(rng, (d, in_ch, cfg.enc_kernel, cfg.enc_kernel),
                             in_ch * cfg.enc_kernel ** 2))
            self.enc_b = reg.register("enc.conv.b", Tensor(np.zeros(d), requires_grad=True))
            self.enc_gain = reg.register("enc.gln.gain", Tensor(np.ones(d), requires_grad=True))
            self.enc_bias = reg.register("enc.gln.bias", Tensor(np.zeros(d), requires_grad=True))

        kind = cfg.pe_kind
        self.blocks: list[tuple[SequenceBlock, SequenceBlock]] = []
        for bi in range(cfg.blocks):
            stage_blocks = []
            for axis in ("freq", "time"):
                hooks = self._make_hooks(reg, rng, kind, bi, axis)
                stage_blocks.append(SequenceBlock(reg, f"blocks.{bi}.{axis}", cfg, rng, hooks))
            self.blocks.append((stage_blocks[0], stage_blocks[1]))

        if cfg.is_band_split:
            hidden = 4 * d
            self.dec_w1 = []
            self.dec_b1 = []
            self.dec_w2 = []
            self.dec_b2 = []
            for qi, bq in enumerate(cfg.band_table):
                self.dec_w1.append(reg.register(
                    f"band_dec.{qi}.w1", _init_weight(rng, (d, hidden), d)))
                self.dec_b1.append(reg.register(
                    f"band_dec.{qi}.b1", Tensor(np.zeros(hidden), requires_grad=True)))
                self.dec_w2.append(reg.register(
                    f"band_dec.{qi}.w2", _init_weight(rng, (hidden, out_ch * bq), hidden)))
                self.dec_b2.append(reg.register(
                    f"band_dec.{qi}.b2", Tensor(np.zeros(out_ch * bq), requires_grad=True)))
        else:
            self.dec_w = reg.register(
                "dec.deconv.w",
                _init_weight(rng, (d, out_ch, cfg.dec_kernel, cfg.dec_kernel),
                             d * cfg.dec_kernel ** 2))
            self.dec_b = reg.register("dec.deconv.b", Tensor(np.zeros(out_ch), requires_grad=True))

    def _make_hooks(self, reg, rng, kind: PEKind, block_idx: int, axis: str) -> AttentionHooks:
        wants_axis = self.config.pe_axes in ("both", axis)
        if kind is PEKind.KERPLE and wants_axis:
            kp = KerpleParams.init(self.config.heads)
            reg.register(f"blocks.{block_idx}.{axis}.kerple.u1", kp.u1)
            reg.register(f"blocks.{block_idx}.{axis}.kerple.u2", kp.u2)
            return attach(PEKind.KERPLE, kerple=kp)
        if kind is PEKind.ROPE and wants_axis:
            return attach(PEKind.ROPE)
        # APE acts once at the model input, never inside attention
        return AttentionHooks()

    # -------------------------------------------------------------- params

    @property
    def params(self) -> dict[str, Tensor]:
        return self._reg.params

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"checkpoint/param name mismatch: {sorted(missing)[:4]}...")
        for k, v in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.data.shape:
                raise ShapeError(f"param {k}: checkpoint shape {arr.shape} != {v.data.shape}")
            v.data = arr.copy()

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -------------------------------------------------------------- forward

    def encode(self, x: Tensor) -> Tensor:
        """[2M, T, F] -> [D, T, F] via Conv2D + gLN (+ APE once, if selected)."""
        in_ch = 2 * self.config.channels
        if x.shape[0] != in_ch:
            raise ShapeError(
                f"encoder expects {in_ch} input channels (2M), got {x.shape[0]}")
        z = add(conv2d(x, self.enc_w), reshape(self.enc_b, (-1, 1, 1)))
        z = global_layer_norm(z, self.enc_gain, self.enc_bias)
        if self.config.pe_kind is PEKind.APE:
            z = apply_ape(z)
        return z

    def band_split_encode(self, x: Tensor) -> Tensor:
        """[2M, T, F] -> [D, T, Q]: per-band flatten, RMS-norm (G=1), linear."""
        table = self.config.band_table
        f = x.shape[-1]
        if sum(table) != f:
            raise ConfigError(f"band table sums to {sum(table)} but input has {f} bins")
        cols = []
        lo = 0
        for qi, bq in enumerate(table):
            xb = x[:, :, lo:lo + bq]                      # [2M, T, bq]
            xb = reshape(permute(xb, (0, 2, 1)), (x.shape[0] * bq, xb.shape[1]))
            xb = rms_group_norm(xb, self.band_norm_gains[qi], groups=1)
            zq = add(matmul(self.band_w[qi], xb),
                     reshape(self.band_b[qi], (-1, 1)))   # [D, T]
            cols.append(zq)
            lo += bq
        return stack(cols, axis=-1)                       # [D, T, Q]

    def dual_path_forward(self, z: Tensor) -> Tensor:
        """Alternate frequency modeling (batch T, length F) and temporal
        modeling (batch F, length T), B times."""
        for freq_block, time_block in self.blocks:
            zf = permute(z, (1, 0, 2))            # [T, D, F]
            zf = freq_block.forward(zf)
            z = permute(zf, (1, 0, 2))            # [D, T, F]
            zt = permute(z, (2, 1, 0))            # [F, D, T]
            zt = time_block.forward(zt)
            z = permute(zt, (2, 1, 0))
        return z

    def decode(self, z: Tensor) -> Tensor:
        """[D, T, F] -> [2, N, M, T, F] RI estimates via Deconv2D."""
        cfg = self.config
        est = add(deconv2d(z, self.dec_w), reshape(self.dec_b, (-1, 1, 1)))
        return reshape(est, (2, cfg.sources, cfg.channels) + est.shape[1:])

    def band_wise_decode(self, z: Tensor, x: Tensor) -> Tensor:
        """[D, T, Q] -> masks per band -> complex multiply with mixture bands."""
        cfg = self.config
        table = cfg.band_table
        n, m = cfg.sources, cfg.channels
        t = z.shape[1]
        outs = []
        lo = 0
        for qi, bq in enumerate(table):
            zq = permute(z[:, :, qi], (1, 0))                       # [T, D]
            h = swish(add(matmul(zq, self.dec_w1[qi]), self.dec_b1[qi]))
            mk = add(matmul(h, self.dec_w2[qi]), self.dec_b2[qi])   # [T, 2NM*bq]
            mk = reshape(mk, (t, 2, n, m, bq))
            mk = permute(mk, (1, 2, 3, 0, 4))                       # [2, N, M, T, bq]
            xb = x[:, :, lo:lo + bq]                                # [2M, T, bq]
            xb = reshape(xb, (2, 1, m) + xb.shape[1:])              # [2, 1, M, T, bq]
            mr, mi = mk[0], mk[1]
            xr, xi = xb[0], xb[1]
            est_r = add(mul(mr, xr), mul(mul(mi, xi), -1.0))
            est_i = add(mul(mr, xi), mul(mi, xr))
            outs.append(stack([est_r, est_i], axis=0))
            lo += bq
        return concat(outs, axis=-1)                                # [2, N, M, T, F]

    def forward(self, spec) -> Tensor:
        """Spectrogram (or [2, M, T, F] array/Tensor) -> [2, N, M, T, F]."""
        data = spec.data if isinstance(spec, Spectrogram) else spec
        x = data if isinstance(data, Tensor) else Tensor(data)
        if x.ndim != 4 or x.shape[0] != 2:
            raise ShapeError(f"expected input [2, M, T, F], got {x.shape}")
        if x.shape[1] != self.config.channels:
            raise ShapeError(
                f"model built for M={self.config.channels} channels, input has {x.shape[1]}")
        flat = reshape(x, (2 * x.shape[1],) + x.shape[2:])
        if self.config.is_band_split:
            z = self.band_split_encode(flat)
            z = self.dual_path_forward(z)
            return self.band_wise_decode(z, flat)
        z = self.encode(flat)
        z = self.dual_path_forward(z)
        return self.decode(z)

    # -------------------------------------------------------------- inference

    def separate(self, mix: Waveform, stft_cfg: StftConfig) -> list[Waveform]:
        """Waveform in, N estimated source waveforms out (no gradients kept)."""
        spec = stft(mix, stft_cfg)
        est = self.forward(spec).data  # [2, N, M, T, F]
        out = []
        for ni in range(self.config.sources):
            s = Spectrogram(est[:, ni], stft_cfg, mix.rate)
            out.append(istft(s, stft_cfg, length=mix.num_samples))
        return out

    # -------------------------------------------------------------- io

    def save(self, path) -> None:
        payload = {f"param/{k}": v.data for k, v in self.params.items()}
        payload["config"] = np.array(json.dumps(self.config.to_dict()))
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> "TFLocoformer":
        npz = np.load(path, allow_pickle=False)
        config = LocoformerConfig.from_dict(json.loads(str(npz["config"])))
        model = cls(config, seed=0)
        state = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
        model.load_state_arrays(state)
        return model


def param_count(config: LocoformerConfig) -> int:
    """Total parameter count; independent of T, and of F unless band-split."""
    return TFLocoformer(config, seed=0).num_params()

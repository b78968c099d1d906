"""Acoustic model: conv encoder, span masking, transformer context network, CTC classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    conv_kernels: tuple[int, ...] = (4, 3)
    conv_strides: tuple[int, ...] = (2, 2)
    conv_channels: int = 64
    ctx_layers: int = 2
    ctx_heads: int = 2
    ctx_hidden: int = 64
    ctx_ffn: int = 128
    pos_conv_kernel: int = 16
    pos_conv_groups: int = 4
    layer_drop_p: float = 0.05
    dropout_p: float = 0.1
    mask_start_p: float = 0.075
    mask_span_M: int = 10
    vocab_size: int = 29
    sample_rate: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "conv_kernels", tuple(int(k) for k in self.conv_kernels))
        object.__setattr__(self, "conv_strides", tuple(int(s) for s in self.conv_strides))
        if len(self.conv_kernels) != len(self.conv_strides) or not self.conv_kernels:
            raise ValueError("conv_kernels and conv_strides must be nonempty and equally long")
        if min(self.conv_kernels) < 1 or min(self.conv_strides) < 1:
            raise ValueError("conv kernels and strides must be positive")
        if self.ctx_hidden % self.ctx_heads:
            raise ValueError(f"ctx_hidden={self.ctx_hidden} not divisible by ctx_heads={self.ctx_heads}")
        if self.ctx_hidden % self.pos_conv_groups:
            raise ValueError("ctx_hidden must be divisible by pos_conv_groups")
        for name in ("layer_drop_p", "dropout_p", "mask_start_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0 and not (name == "layer_drop_p" and p == 1.0):
                raise ValueError(f"{name} must lie in [0, 1), got {p}")
        if self.mask_span_M < 1:
            raise ValueError("mask_span_M must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @property
    def frame_stride(self) -> int:
        return int(np.prod(self.conv_strides))

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.conv_kernels, self.conv_strides):
            rf += (k - 1) * jump
            jump *= s
        return rf

    def num_frames(self, num_samples: int) -> int:
        """Encoder output length for ``num_samples`` input samples (0 if too short)."""
        t = num_samples
        for k, s in zip(self.conv_kernels, self.conv_strides):
            if t < k:
                return 0
            t = (t - k) // s + 1
        return t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_kernels"] = list(self.conv_kernels)
        d["conv_strides"] = list(self.conv_strides)
        return d


def toy_preset(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def tiny_preset(**overrides) -> ModelConfig:
    """Few-thousand-parameter configuration used by the gradient suites."""
    base = dict(conv_kernels=(4, 3), conv_strides=(2, 2), conv_channels=8, ctx_layers=1, ctx_heads=2,
                ctx_hidden=8, ctx_ffn=16, pos_conv_kernel=4, pos_conv_groups=2, layer_drop_p=0.0,
                dropout_p=0.0, vocab_size=29)
    base.update(overrides)
    return ModelConfig(**base)


def paper_preset(**overrides) -> ModelConfig:
    base = dict(conv_kernels=(10, 3, 3, 3, 3, 2, 2), conv_strides=(5, 2, 2, 2, 2, 2, 2), conv_channels=512,
                ctx_layers=12, ctx_heads=8, ctx_hidden=768, ctx_ffn=3072, pos_conv_kernel=128,
                pos_conv_groups=16, layer_drop_p=0.05, dropout_p=0.1, mask_start_p=0.075,
                mask_span_M=10, vocab_size=29, sample_rate=16000)
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"toy": toy_preset, "tiny": tiny_preset, "paper": paper_preset}


@dataclass(frozen=True)
class MaskPlan:
    num_frames: int
    indices: tuple[int, ...]
    starts: tuple[int, ...]
    utt_id: str = ""
    seed: int | None = None

    def __post_init__(self):
        idx = self.indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("mask indices must be sorted and unique")
        if idx and (idx[0] < 0 or idx[-1] >= self.num_frames):
            raise ValueError(f"mask indices must lie in [0, {self.num_frames})")

    def __len__(self) -> int:
        return len(self.indices)


def plan_from_starts(num_frames: int, starts, span: int, utt_id: str = "", seed: int | None = None) -> MaskPlan:
    covered = np.zeros(num_frames, dtype=bool)
    for s in starts:
        covered[s:s + span] = True
    return MaskPlan(num_frames, tuple(int(i) for i in np.flatnonzero(covered)),
                    tuple(int(s) for s in starts), utt_id, seed)


def sample_mask_plan(num_frames: int, cfg: ModelConfig, rng: np.random.Generator, utt_id: str = "",
                     start_p: float | None = None, span: int | None = None) -> MaskPlan:
    """Each frame starts a span of M frames with probability p; never returns an empty plan."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    p = cfg.mask_start_p if start_p is None else start_p
    m = cfg.mask_span_M if span is None else span
    starts = np.flatnonzero(rng.random(num_frames) < p)
    if starts.size == 0:
        starts = np.array([rng.integers(num_frames)])
    return plan_from_starts(num_frames, starts, m, utt_id)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, k in enumerate(cfg.conv_kernels):
        shapes[f"encoder.conv{i}.weight"] = (cfg.conv_channels, c_in, k)
        shapes[f"encoder.conv{i}.bias"] = (cfg.conv_channels,)
        shapes[f"encoder.norm{i}.gamma"] = (cfg.conv_channels,)
        shapes[f"encoder.norm{i}.beta"] = (cfg.conv_channels,)
        c_in = cfg.conv_channels
    d = cfg.ctx_hidden
    if cfg.conv_channels != d:
        shapes["encoder.proj.weight"] = (cfg.conv_channels, d)
        shapes["encoder.proj.bias"] = (d,)
    shapes["mask_embedding"] = (d,)
    shapes["context.pos_conv.weight"] = (d, d // cfg.pos_conv_groups, cfg.pos_conv_kernel)
    shapes["context.pos_conv.bias"] = (d,)
    for i in range(cfg.ctx_layers):
        pre = f"context.layer{i}."
        shapes[pre + "attn_norm.gamma"] = (d,)
        shapes[pre + "attn_norm.beta"] = (d,)
        for proj in ("q", "k", "v", "out"):
            shapes[pre + f"attn.{proj}.weight"] = (d, d)
            shapes[pre + f"attn.{proj}.bias"] = (d,)
        shapes[pre + "ffn_norm.gamma"] = (d,)
        shapes[pre + "ffn_norm.beta"] = (d,)
        shapes[pre + "ffn1.weight"] = (d, cfg.ctx_ffn)
        shapes[pre + "ffn1.bias"] = (cfg.ctx_ffn,)
        shapes[pre + "ffn2.weight"] = (cfg.ctx_ffn, d)
        shapes[pre + "ffn2.bias"] = (d,)
    shapes["context.final_norm.gamma"] = (d,)
    shapes["context.final_norm.beta"] = (d,)
    shapes["classifier.weight"] = (d, cfg.vocab_size)
    shapes["classifier.bias"] = (cfg.vocab_size,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


class ModelParams:
    """Ordered name -> leaf Tensor registry; each tensor registered once."""

    def __init__(self, tensors: dict[str, Tensor]):
        seen = set()
        for name, t in tensors.items():
            if id(t) in seen:
                raise ValueError(f"parameter {name} registered twice")
            seen.add(id(t))
            t.requires_grad = True
            t.name = name
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.data)

    def clear_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def encoder_names(self) -> list[str]:
        return [n for n in self._tensors if n.startswith("encoder.")]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self._tensors.items():
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != t.shape:
                raise ValueError(f"parameter {n}: shape {a.shape} vs expected {t.shape}")
            t.data = a.copy()

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith((".beta", ".bias")):
            data = np.zeros(shape)
        elif name == "mask_embedding":
            data = rng.uniform(0.0, 1.0, size=shape)
        elif ".conv" in name or "pos_conv" in name:
            fan_in = shape[1] * shape[2]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            data = rng.normal(0.0, np.sqrt(1.0 / shape[0]), size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# forward pieces


class AcousticModel:
    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> AcousticModel:
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def encode(self, audio) -> Tensor:
        """Raw (normalized) samples -> F×D features; each conv is followed by layer norm and GELU."""
        cfg, p = self.cfg, self.params
        samples = np.asarray(audio.data if isinstance(audio, Tensor) else audio, dtype=np.float64).reshape(-1)
        if samples.size < cfg.receptive_field:
            raise T.InputTooShortError(
                f"{samples.size} samples shorter than the encoder receptive field {cfg.receptive_field}")
        x = Tensor(samples[None, :])
        for i, s in enumerate(cfg.conv_strides):
            x = T.conv1d(x, p[f"encoder.conv{i}.weight"], p[f"encoder.conv{i}.bias"], stride=s)
            h = T.transpose(x)
            h = T.gelu(T.layer_norm(h, p[f"encoder.norm{i}.gamma"], p[f"encoder.norm{i}.beta"]))
            x = T.transpose(h) if i + 1 < len(cfg.conv_strides) else h
        if "encoder.proj.weight" in p:
            x = T.linear(x, p["encoder.proj.weight"], p["encoder.proj.bias"])
        return x

    def apply_mask(self, z: Tensor, plan: MaskPlan) -> Tensor:
        """Replace masked rows with the learned mask embedding; ``z`` itself is untouched."""
        if plan.indices and plan.indices[-1] >= z.shape[0]:
            raise IndexError(f"mask index {plan.indices[-1]} outside {z.shape[0]} frames")
        if not plan.indices:
            return z
        return T.replace_rows(z, plan.indices, self.params["mask_embedding"])

    def contextualize(self, z_hat: Tensor, train: bool = False, layer_rng: np.random.Generator | None = None,
                      dropout_rng: np.random.Generator | None = None, attn_trace: list | None = None) -> Tensor:
        cfg, p = self.cfg, self.params
        k = cfg.pos_conv_kernel
        f = z_hat.shape[0]
        pos = T.conv1d(T.transpose(z_hat), p["context.pos_conv.weight"], p["context.pos_conv.bias"],
                       groups=cfg.pos_conv_groups, padding=k // 2)
        if k % 2 == 0:
            pos = T.narrow(pos, 1, 0, f)
        x = T.add(z_hat, T.transpose(T.gelu(pos)))
        drop_p = cfg.dropout_p if train else 0.0
        for i in range(cfg.ctx_layers):
            if train and cfg.layer_drop_p > 0 and layer_rng.random() < cfg.layer_drop_p:
                continue
            pre = f"context.layer{i}."
            h = T.layer_norm(x, p[pre + "attn_norm.gamma"], p[pre + "attn_norm.beta"])
            h = self._attention(h, pre + "attn.", attn_trace)
            x = T.add(x, T.dropout(h, drop_p, dropout_rng, train))
            h = T.layer_norm(x, p[pre + "ffn_norm.gamma"], p[pre + "ffn_norm.beta"])
            h = T.gelu(T.linear(h, p[pre + "ffn1.weight"], p[pre + "ffn1.bias"]))
            h = T.dropout(h, drop_p, dropout_rng, train)
            h = T.linear(h, p[pre + "ffn2.weight"], p[pre + "ffn2.bias"])
            x = T.add(x, T.dropout(h, drop_p, dropout_rng, train))
        return T.layer_norm(x, p["context.final_norm.gamma"], p["context.final_norm.beta"])

    def _attention(self, x: Tensor, pre: str, trace: list | None) -> Tensor:
        p = self.params
        f, d = x.shape
        heads = self.cfg.ctx_heads
        dh = d // heads

        def split(name):
            y = T.linear(x, p[pre + name + ".weight"], p[pre + name + ".bias"])
            return T.transpose(T.reshape(y, (f, heads, dh)), (1, 0, 2))

        q, k, v = split("q"), split("k"), split("v")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        if trace is not None:
            trace.append(attn.data.copy())
        out = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (f, d))
        return T.linear(out, p[pre + "out.weight"], p[pre + "out.bias"])

    def classify(self, z_ctx: Tensor) -> Tensor:
        """Per-frame log-distribution over the vocabulary."""
        p = self.params
        return T.log_softmax(T.linear(z_ctx, p["classifier.weight"], p["classifier.bias"]), axis=-1)

    def forward(self, audio, plan: MaskPlan | None = None, train: bool = False,
                layer_rng=None, dropout_rng=None) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (z, z_ctx, logprobs)."""
        z = self.encode(audio)
        z_hat = self.apply_mask(z, plan) if plan is not None else z
        z_ctx = self.contextualize(z_hat, train, layer_rng, dropout_rng)
        return z, z_ctx, self.classify(z_ctx)

"""Deterministic seeded toy MM-DiT with a reference-capture hook.

Two token streams (text, image) pass through joint-attention blocks; a
velocity head reads the image stream. Everything is plain numpy:
weights are float32 drawn from one seeded generator in a fixed order
(bit-reproducible per ``weight_seed``), activations run in float64.

The timestep and guidance scalars are embedded with sinusoidal features
and added to the image-stream input. During a reference pass the
image-stream keys/values of selected layers can be captured into an
:class:`AttentionBank`, which a later generation pass consumes through
pivotal attention sharing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np

from .attention import (
    LayerKV,
    TokenMask,
    mm_attention,
    pivotal_shared_attention,
)
from .schedule import NoiseSchedule, build_trajectory

DEFAULT_GUIDANCE = 3.5
TIME_EMBED_SCALE = 1000.0
_LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and seeding of the toy transformer.

    Defaults are the smallest sizes at which sharing effects are clearly
    observable: 8 layers, 4 heads of 16 dims, 16 text tokens and an 8x8
    grid of 64 image tokens.
    """

    num_layers: int = 8
    num_heads: int = 4
    head_dim: int = 16
    text_tokens: int = 16
    image_tokens: int = 64
    vital_default: frozenset = frozenset({0, 1, 2, 4, 6})
    weight_seed: int = 42

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        for name in ("num_heads", "head_dim", "text_tokens", "image_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        vital = frozenset(int(i) for i in self.vital_default)
        if not vital <= set(range(self.num_layers)):
            raise ValueError(
                f"vital_default {sorted(vital)} not within [0, {self.num_layers})"
            )
        object.__setattr__(self, "vital_default", vital)

    @property
    def hidden(self) -> int:
        return self.num_heads * self.head_dim

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "text_tokens": self.text_tokens,
            "image_tokens": self.image_tokens,
            "vital_default": sorted(self.vital_default),
            "weight_seed": self.weight_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "vital_default" in d:
            d["vital_default"] = frozenset(d["vital_default"])
        return cls(**d)


@dataclass(frozen=True)
class AttentionBank:
    """Reference keys/values per (timestep index, layer), plus the token mask."""

    entries: Mapping
    mask: TokenMask
    schedule_used: NoiseSchedule

    def layer_set(self) -> frozenset:
        return frozenset(layer for _, layer in self.entries)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; exactness is irrelevant for an untrained toy net
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _sinusoidal(value: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = value * freqs
    return np.concatenate([np.cos(angles), np.sin(angles)])


def _weight_names(config: ModelConfig) -> list:
    names = ["cond.proj"]
    for layer in range(config.num_layers):
        for stream in ("txt", "img"):
            names += [f"layer{layer}.{stream}.{w}" for w in ("wq", "wk", "wv", "wo")]
        for stream in ("txt", "img"):
            names += [f"layer{layer}.{stream}.mlp1", f"layer{layer}.{stream}.mlp2"]
    names.append("head.out")
    return names


def _weight_shape(name: str, config: ModelConfig) -> tuple:
    h = config.hidden
    if name == "cond.proj":
        return (2 * h, h)
    if name.endswith("mlp1"):
        return (h, 2 * h)
    if name.endswith("mlp2"):
        return (2 * h, h)
    return (h, h)


class ToyMMDiT:
    """Seeded joint-attention transformer predicting a flow velocity."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        for arr in params.values():
            arr.flags.writeable = False

    # -- forward ---------------------------------------------------------

    def forward_velocity(
        self,
        z_t: np.ndarray,
        t: float,
        prompt_tokens: np.ndarray,
        guidance: float = DEFAULT_GUIDANCE,
        share_ctx: Optional[tuple] = None,
    ) -> np.ndarray:
        """Velocity prediction for one latent at timestep t.

        ``share_ctx`` is ``(ShareSpec, AttentionBank, timestep_index)``;
        when present, layers in the spec's vital set route through
        pivotal shared attention against the bank's entries.
        """
        velocity, _ = self._forward(z_t, t, prompt_tokens, guidance, share_ctx)
        return velocity

    def _forward(
        self,
        z_t: np.ndarray,
        t: float,
        prompt_tokens: np.ndarray,
        guidance: float,
        share_ctx: Optional[tuple] = None,
        capture_layers: Optional[frozenset] = None,
    ) -> tuple:
        cfg = self.config
        z_t = np.asarray(z_t, dtype=np.float64)
        prompt_tokens = np.asarray(prompt_tokens, dtype=np.float64)
        if z_t.shape != (cfg.image_tokens, cfg.hidden):
            raise ValueError(
                f"latent shape {z_t.shape} != ({cfg.image_tokens}, {cfg.hidden})"
            )
        if prompt_tokens.shape != (cfg.text_tokens, cfg.hidden):
            raise ValueError(
                f"prompt shape {prompt_tokens.shape} != ({cfg.text_tokens}, {cfg.hidden})"
            )
        if share_ctx is not None:
            spec, bank, ts_index = share_ctx
            if not spec.vital_set <= set(range(cfg.num_layers)):
                raise ValueError(
                    f"vital set {sorted(spec.vital_set)} not within [0, {cfg.num_layers})"
                )

        cond = np.concatenate(
            [_sinusoidal(t * TIME_EMBED_SCALE, cfg.hidden), _sinusoidal(guidance, cfg.hidden)]
        )
        x_img = z_t + cond @ self.params["cond.proj"]
        x_txt = prompt_tokens.copy()
        captured = {}

        for layer in range(cfg.num_layers):
            w = lambda name: self.params[f"layer{layer}.{name}"]
            a_txt = _layer_norm(x_txt)
            a_img = _layer_norm(x_img)
            q_p = self._split_heads(a_txt @ w("txt.wq"))
            k_p = self._split_heads(a_txt @ w("txt.wk"))
            v_p = self._split_heads(a_txt @ w("txt.wv"))
            q_i = self._split_heads(a_img @ w("img.wq"))
            k_i = self._split_heads(a_img @ w("img.wk"))
            v_i = self._split_heads(a_img @ w("img.wv"))

            if capture_layers is not None and layer in capture_layers:
                captured[layer] = (k_i.copy(), v_i.copy())

            if share_ctx is not None and layer in spec.vital_set:
                ref = bank.entries.get((ts_index, layer))
                if ref is None:
                    raise KeyError(
                        f"attention bank has no entry for timestep {ts_index}, layer {layer}"
                    )
                o_txt, o_img = pivotal_shared_attention(
                    layer, spec, q_p, q_i, k_p, k_i, v_p, v_i, ref
                )
            else:
                o_txt, o_img = mm_attention(q_p, q_i, k_p, k_i, v_p, v_i)

            x_txt = x_txt + self._merge_heads(o_txt) @ w("txt.wo")
            x_img = x_img + self._merge_heads(o_img) @ w("img.wo")
            x_txt = x_txt + _gelu(_layer_norm(x_txt) @ w("txt.mlp1")) @ w("txt.mlp2")
            x_img = x_img + _gelu(_layer_norm(x_img) @ w("img.mlp1")) @ w("img.mlp2")

        velocity = _layer_norm(x_img) @ self.params["head.out"]
        return velocity, captured

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        tokens = x.shape[0]
        cfg = self.config
        return x.reshape(tokens, cfg.num_heads, cfg.head_dim).transpose(1, 0, 2)

    def _merge_heads(self, x: np.ndarray) -> np.ndarray:
        heads, tokens, dim = x.shape
        return x.transpose(1, 0, 2).reshape(tokens, heads * dim)

    # -- weight snapshot ---------------------------------------------------

    def save_weights(self, path) -> None:
        """Write weights as a JSON header line plus little-endian float32 data."""
        names = _weight_names(self.config)
        header = {
            "format": "toy-mmdit-weights",
            "version": 1,
            "dtype": "<f4",
            "config": self.config.to_dict(),
            "tensors": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        with open(path, "wb") as f:
            f.write(json.dumps(header).encode("utf-8") + b"\n")
            for name in names:
                f.write(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())

    @classmethod
    def load_weights(cls, path) -> "ToyMMDiT":
        with open(path, "rb") as f:
            header = json.loads(f.readline().decode("utf-8"))
            blob = f.read()
        if header.get("format") != "toy-mmdit-weights":
            raise ValueError(f"not a weight snapshot: {path}")
        config = ModelConfig.from_dict(header["config"])
        params = {}
        offset = 0
        for tensor in header["tensors"]:
            shape = tuple(tensor["shape"])
            count = int(np.prod(shape))
            arr = np.frombuffer(
                blob, dtype=np.dtype(header["dtype"]), count=count, offset=offset
            ).reshape(shape)
            params[tensor["name"]] = arr.copy()
            offset += count * 4
        if offset != len(blob):
            raise ValueError(f"snapshot payload size mismatch in {path}")
        return cls(config, params)


def init_model(config: ModelConfig) -> ToyMMDiT:
    """Draw all weights from one generator seeded by ``config.weight_seed``.

    Variance is 1/hidden; draw order follows :func:`_weight_names`, so
    equal configs produce bit-identical models.
    """
    rng = np.random.default_rng(config.weight_seed)
    std = 1.0 / np.sqrt(config.hidden)
    params = {}
    for name in _weight_names(config):
        shape = _weight_shape(name, config)
        params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return ToyMMDiT(config, params)


def forward_velocity(model, z_t, t, prompt_tokens, guidance=DEFAULT_GUIDANCE, share_ctx=None):
    """Function form of :meth:`ToyMMDiT.forward_velocity`."""
    return model.forward_velocity(z_t, t, prompt_tokens, guidance, share_ctx)


def weight_checksum(model: ToyMMDiT) -> str:
    """sha256 over the ordered weight tensors; pins golden model identity."""
    digest = hashlib.sha256()
    for name in _weight_names(model.config):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    return digest.hexdigest()


def embed_prompt(prompt: str, config: ModelConfig) -> np.ndarray:
    """Seeded hash embedding of a prompt string.

    Each of the ``text_tokens`` positions hashes (seed, position, word)
    to an embedding row; missing positions embed the empty word. No
    pretrained encoder, fully deterministic.
    """
    words = prompt.split()
    rows = np.empty((config.text_tokens, config.hidden), dtype=np.float64)
    for i in range(config.text_tokens):
        word = words[i] if i < len(words) else ""
        digest = hashlib.sha256(
            f"{config.weight_seed}|{i}|{word}".encode("utf-8")
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        rows[i] = rng.standard_normal(config.hidden) / np.sqrt(config.hidden)
    return rows


def capture_reference_bank(
    model: ToyMMDiT,
    ref_latent: np.ndarray,
    prompt_tokens: np.ndarray,
    mask: TokenMask,
    schedule_reversed: NoiseSchedule,
    seed: int,
    layers: Optional[frozenset] = None,
    guidance: float = DEFAULT_GUIDANCE,
    allow_unreversed: bool = False,
) -> AttentionBank:
    """Run the reference trajectory and record image-stream keys/values.

    One no-sharing forward pass per timestep of ``schedule_reversed``;
    ``layers`` defaults to the model's vital set. The schedule must carry
    a negative shift (detail-rich, low-noise emphasis) unless
    ``allow_unreversed`` is set, as the shift-direction ablations do.
    """
    if not allow_unreversed and schedule_reversed.mu >= 0.0:
        raise ValueError(
            "reference schedule must use a reversed (negative) shift; "
            "pass allow_unreversed=True to override"
        )
    cfg = model.config
    layer_set = frozenset(cfg.vital_default if layers is None else layers)
    if not layer_set <= set(range(cfg.num_layers)):
        raise ValueError(f"capture layers {sorted(layer_set)} not within [0, {cfg.num_layers})")
    if len(mask) != cfg.image_tokens:
        raise ValueError(f"mask length {len(mask)} != image token count {cfg.image_tokens}")

    entries = {}
    if layer_set:
        trajectory = build_trajectory(ref_latent, seed, schedule_reversed)
        for index, (t, z_t) in enumerate(
            zip(schedule_reversed.timesteps, trajectory.latents)
        ):
            _, captured = model._forward(
                z_t, float(t), prompt_tokens, guidance, capture_layers=layer_set
            )
            for layer, (keys, values) in captured.items():
                entries[(index, layer)] = LayerKV(
                    keys=keys, values=values, layer=layer, timestep_index=index
                )
    return AttentionBank(
        entries=MappingProxyType(entries), mask=mask, schedule_used=schedule_reversed
    )

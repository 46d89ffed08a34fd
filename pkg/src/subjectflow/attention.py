"""Joint multimodal attention and reference key/value sharing kernels.

All kernels take per-head arrays shaped ``(heads, tokens, head_dim)`` and
return the text-stream and image/target-stream outputs separately. Three
variants build on one softmax core:

  * plain joint attention over the text + image key set,
  * naive sharing, which prepends reference keys/values to that set,
  * pivotal sharing, which additionally masks background reference
    tokens, scales reference and text keys by lambda_r / lambda_p, and
    only activates inside a configured set of vital layers.

Masking policy: ``drop`` removes masked-out reference tokens from the
concatenation; ``zero`` multiplies them by 0 elementwise. Zeroed keys
still contribute e^0 mass to every softmax row, so the two modes are not
equivalent; drop is the default since it excludes background mass
entirely. When drop masking leaves no reference tokens, the kernel
reduces to plain joint attention (no lambda scaling), so sharing with an
all-background mask is bit-identical to not sharing at all.

Softmax rows subtract their max before exponentiation; tolerance budgets
in the tests assume this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK_MODES = ("drop", "zero")
LAYER_STRATEGIES = ("vital", "random_nonvital", "all")


@dataclass(frozen=True)
class TokenMask:
    """Per-reference-token foreground indicator."""

    flags: np.ndarray

    def __post_init__(self) -> None:
        flags = np.asarray(self.flags, dtype=bool)
        if flags.ndim != 1:
            raise ValueError(f"mask flags must be 1-d, got shape {flags.shape}")
        flags.flags.writeable = False
        object.__setattr__(self, "flags", flags)

    @property
    def count_foreground(self) -> int:
        return int(self.flags.sum())

    def __len__(self) -> int:
        return len(self.flags)

    @classmethod
    def all_true(cls, n: int) -> "TokenMask":
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def all_false(cls, n: int) -> "TokenMask":
        return cls(np.zeros(n, dtype=bool))


@dataclass(frozen=True)
class ShareSpec:
    """Knobs for pivotal attention sharing at one generation run."""

    lambda_r: float
    lambda_p: float
    vital_set: frozenset
    mask: TokenMask
    mask_mode: str = "drop"
    dropout_rate: float = 0.0
    dropout_seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda_r < 0 or self.lambda_p < 0:
            raise ValueError("lambda_r and lambda_p must be >= 0")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        object.__setattr__(self, "vital_set", frozenset(self.vital_set))


@dataclass(frozen=True)
class LayerKV:
    """Captured reference keys/values for one (timestep, layer) pair."""

    keys: np.ndarray
    values: np.ndarray
    layer: int
    timestep_index: int

    def __post_init__(self) -> None:
        if self.keys.shape != self.values.shape:
            raise ValueError(
                f"keys/values shape mismatch: {self.keys.shape} vs {self.values.shape}"
            )
        self.keys.flags.writeable = False
        self.values.flags.writeable = False


def _check_heads(name_arrays: list) -> int:
    heads = None
    dim = None
    for name, arr in name_arrays:
        if arr.ndim != 3:
            raise ValueError(f"{name} must be (heads, tokens, dim), got shape {arr.shape}")
        if heads is None:
            heads, dim = arr.shape[0], arr.shape[2]
        elif arr.shape[0] != heads or arr.shape[2] != dim:
            raise ValueError(
                f"{name} has heads/dim {arr.shape[0]}/{arr.shape[2]}, expected {heads}/{dim}"
            )
    return dim


def _joint_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v per head, with row-max stabilization."""
    d = q.shape[-1]
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights @ v


def mm_attention(Q_p, Q_img, K_p, K_img, V_p, V_img):
    """Joint attention over concatenated text and image streams.

    Returns ``(out_text, out_image)`` with the joint output split back at
    the text/image boundary.
    """
    arrays = [
        ("Q_p", Q_p), ("Q_img", Q_img), ("K_p", K_p),
        ("K_img", K_img), ("V_p", V_p), ("V_img", V_img),
    ]
    _check_heads(arrays)
    if K_p.shape[1] != V_p.shape[1] or K_img.shape[1] != V_img.shape[1]:
        raise ValueError("key/value token counts must match per stream")
    q = np.concatenate([Q_p, Q_img], axis=1)
    k = np.concatenate([K_p, K_img], axis=1)
    v = np.concatenate([V_p, V_img], axis=1)
    out = _joint_attention(q, k, v)
    n_text = Q_p.shape[1]
    return out[:, :n_text], out[:, n_text:]


def shared_attention(Q_p, Q_tgt, K_r, K_p, K_tgt, V_r, V_p, V_tgt):
    """Naive sharing: reference keys/values prepended to the joint key set."""
    arrays = [
        ("Q_p", Q_p), ("Q_tgt", Q_tgt), ("K_r", K_r), ("K_p", K_p),
        ("K_tgt", K_tgt), ("V_r", V_r), ("V_p", V_p), ("V_tgt", V_tgt),
    ]
    _check_heads(arrays)
    if K_r.shape[1] != V_r.shape[1]:
        raise ValueError("reference key/value token counts must match")
    q = np.concatenate([Q_p, Q_tgt], axis=1)
    k = np.concatenate([K_r, K_p, K_tgt], axis=1)
    v = np.concatenate([V_r, V_p, V_tgt], axis=1)
    out = _joint_attention(q, k, v)
    n_text = Q_p.shape[1]
    return out[:, :n_text], out[:, n_text:]


def dropout_keep_indices(
    n_tokens: int, rate: float, seed: int, layer: int, timestep_index: int
) -> np.ndarray:
    """Indices of reference tokens kept by shared-attention dropout.

    Drops ``floor(rate * n_tokens)`` tokens, sampled once per
    (layer, timestep) from ``seed`` xor-combined with those indices, so
    repeated calls for the same step are identical.
    """
    if rate <= 0.0 or n_tokens == 0:
        return np.arange(n_tokens)
    mixed = (seed ^ (layer * 0x9E3779B9) ^ (timestep_index * 0x85EBCA6B)) & 0xFFFFFFFFFFFFFFFF
    rng = np.random.default_rng(mixed)
    n_drop = int(rate * n_tokens)
    dropped = rng.choice(n_tokens, size=n_drop, replace=False)
    keep = np.setdiff1d(np.arange(n_tokens), dropped)
    return keep


def pivotal_shared_attention(layer, spec: ShareSpec, Q_p, Q_tgt, K_p, K_tgt, V_p, V_tgt, ref_kv: LayerKV):
    """Masked, scaled reference sharing restricted to vital layers.

    Outside ``spec.vital_set`` this is plain joint attention. Inside, the
    key set becomes ``[lambda_r * mask(K_r), lambda_p * K_p, K_tgt]`` and
    the value set ``[mask(V_r), V_p, V_tgt]``; dropout then removes a
    fraction of the surviving reference tokens.
    """
    if ref_kv.layer != layer:
        raise ValueError(f"ref_kv captured at layer {ref_kv.layer}, expected {layer}")
    if layer not in spec.vital_set:
        return mm_attention(Q_p, Q_tgt, K_p, K_tgt, V_p, V_tgt)

    k_r, v_r = ref_kv.keys, ref_kv.values
    flags = spec.mask.flags
    if len(flags) != k_r.shape[1]:
        raise ValueError(
            f"mask length {len(flags)} does not match reference token count {k_r.shape[1]}"
        )
    if spec.mask_mode == "drop":
        k_r = k_r[:, flags, :]
        v_r = v_r[:, flags, :]
    else:
        scale = flags.astype(k_r.dtype)[None, :, None]
        k_r = k_r * scale
        v_r = v_r * scale

    keep = dropout_keep_indices(
        k_r.shape[1], spec.dropout_rate, spec.dropout_seed, layer, ref_kv.timestep_index
    )
    if len(keep) != k_r.shape[1]:
        k_r = k_r[:, keep, :]
        v_r = v_r[:, keep, :]

    if k_r.shape[1] == 0:
        # Empty reference set: sharing is vacuous, reduce to the plain path.
        return mm_attention(Q_p, Q_tgt, K_p, K_tgt, V_p, V_tgt)

    return shared_attention(
        Q_p, Q_tgt,
        spec.lambda_r * k_r, spec.lambda_p * K_p, K_tgt,
        v_r, V_p, V_tgt,
    )


def select_layers(strategy: str, num_layers: int, vital_default, seed: int = 0) -> frozenset:
    """Resolve the layer set that sharing applies to.

    ``vital`` returns the configured default, ``random_nonvital`` samples
    an equally sized subset of the complement under ``seed``, and ``all``
    selects every layer.
    """
    vital = frozenset(int(i) for i in vital_default)
    if not vital <= set(range(num_layers)):
        raise ValueError(f"vital_default {sorted(vital)} not within [0, {num_layers})")
    if strategy == "vital":
        return vital
    if strategy == "all":
        return frozenset(range(num_layers))
    if strategy == "random_nonvital":
        complement = sorted(set(range(num_layers)) - vital)
        if len(complement) < len(vital):
            raise ValueError(
                f"cannot sample {len(vital)} non-vital layers from a complement of {len(complement)}"
            )
        rng = np.random.default_rng(seed)
        picked = rng.choice(complement, size=len(vital), replace=False)
        return frozenset(int(i) for i in picked)
    raise ValueError(f"strategy must be one of {LAYER_STRATEGIES}, got {strategy!r}")

"""Minimal dense neural blocks in numpy: MLPs, multi-head self-attention,
a box/class prediction head, deterministic initialization, and a
finite-difference gradient checker. Forward passes only, no training.

All parameters live in plain dataclasses of float64 arrays and are treated
as immutable after construction, so they can be shared across threads.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .geometry import Box3D, normalize_heading

_ACTIVATIONS = ("linear", "relu", "sigmoid")

# Keeps exp(size deltas) finite on garbage inputs without affecting sane values.
_DELTA_CLIP = 20.0

_LN_EPS = 1e-5


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for a named sub-stream of ``seed``.

    Streams are split via SeedSequence spawn keys, so every component draws
    from an independent, platform-stable stream with no global state.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class DenseParams:
    """A stack of affine layers with per-layer activation tags."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases, activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} breaks the chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


@dataclass
class AttentionParams:
    """One post-norm transformer encoder layer (no positional embedding)."""

    num_heads: int
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray

    def __post_init__(self):
        embed = self.wq.shape[0]
        if embed % self.num_heads != 0:
            raise ValueError(f"embed dim {embed} not divisible by {self.num_heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (embed, embed):
                raise ValueError(f"{name} must be ({embed}, {embed})")

    @property
    def embed_dim(self) -> int:
        return self.wq.shape[0]


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_dense(
    sizes: list[int],
    rng: np.random.Generator,
    activations: list[str] | None = None,
) -> DenseParams:
    """Initialize an MLP with uniform fan-in scaling, U(-1/sqrt(d), 1/sqrt(d)).

    ``sizes`` lists the input dim followed by every layer's output dim, e.g.
    [256, 256, 261] builds layers (256->256), (256->261). Default activations
    are ReLU on hidden layers and linear on the last.
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    n_layers = len(sizes) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["linear"]
    if len(activations) != n_layers:
        raise ValueError(f"expected {n_layers} activation tags, got {len(activations)}")
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        weights.append(_uniform_fan_in(rng, d_in, (d_in, d_out)))
        biases.append(_uniform_fan_in(rng, d_in, (d_out,)))
    return DenseParams(weights, biases, list(activations))


def init_attention(
    embed_dim: int, num_heads: int, ffn_dim: int, rng: np.random.Generator
) -> AttentionParams:
    """Initialize a transformer layer; layer norms start at identity."""

    def w(d_in, d_out):
        return _uniform_fan_in(rng, d_in, (d_in, d_out))

    def b(d_in, d_out):
        return _uniform_fan_in(rng, d_in, (d_out,))

    return AttentionParams(
        num_heads=num_heads,
        wq=w(embed_dim, embed_dim),
        bq=b(embed_dim, embed_dim),
        wk=w(embed_dim, embed_dim),
        bk=b(embed_dim, embed_dim),
        wv=w(embed_dim, embed_dim),
        bv=b(embed_dim, embed_dim),
        wo=w(embed_dim, embed_dim),
        bo=b(embed_dim, embed_dim),
        ffn_w1=w(embed_dim, ffn_dim),
        ffn_b1=b(embed_dim, ffn_dim),
        ffn_w2=w(ffn_dim, embed_dim),
        ffn_b2=b(ffn_dim, embed_dim),
        ln1_scale=np.ones(embed_dim),
        ln1_shift=np.zeros(embed_dim),
        ln2_scale=np.ones(embed_dim),
        ln2_shift=np.zeros(embed_dim),
    )


def _apply_activation(x: np.ndarray, act: str) -> np.ndarray:
    if act == "linear":
        return x
    if act == "relu":
        return np.maximum(x, 0.0)
    if act == "sigmoid":
        return expit(x)
    raise ValueError(f"unknown activation {act!r}")


def mlp_forward(x: np.ndarray, params: DenseParams) -> np.ndarray:
    """Affine + activation chain; accepts a vector (d,) or batch (n, d)."""
    out = np.asarray(x, dtype=np.float64)
    if out.shape[-1] != params.in_dim:
        raise ValueError(f"input dim {out.shape[-1]} != expected {params.in_dim}")
    for w, b, act in zip(params.weights, params.biases, params.activations):
        out = _apply_activation(out @ w + b, act)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Row-wise layer norm with eps 1e-5."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS) * scale + shift


def mha_forward(features: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Post-norm transformer layer on (K, embed) features.

    attention -> add -> norm -> FFN -> add -> norm; dropout is identity
    (inference only). With no positional embedding the layer is equivariant
    under row permutations.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.embed_dim:
        raise ValueError(f"features must be (K, {params.embed_dim}), got {x.shape}")
    n, embed = x.shape
    heads = params.num_heads
    head_dim = embed // heads

    q = (x @ params.wq + params.bq).reshape(n, heads, head_dim).transpose(1, 0, 2)
    k = (x @ params.wk + params.bk).reshape(n, heads, head_dim).transpose(1, 0, 2)
    v = (x @ params.wv + params.bv).reshape(n, heads, head_dim).transpose(1, 0, 2)

    scores = q @ k.transpose(0, 2, 1) / math.sqrt(head_dim)  # (heads, K, K)
    attn = _softmax_rows(scores)
    context = (attn @ v).transpose(1, 0, 2).reshape(n, embed)

    h = layer_norm(x + context @ params.wo + params.bo, params.ln1_scale, params.ln1_shift)
    ffn = np.maximum(h @ params.ffn_w1 + params.ffn_b1, 0.0) @ params.ffn_w2 + params.ffn_b2
    return layer_norm(h + ffn, params.ln2_scale, params.ln2_shift)


def head_forward(
    features: np.ndarray,
    proposals: list[Box3D],
    params: DenseParams,
    num_classes: int,
) -> tuple[np.ndarray, list[Box3D]]:
    """Predict class logits and box deltas, and decode the boxes.

    The head emits num_classes logits plus 7 deltas per proposal. Decoding:
    center += delta_c * input size, size *= exp(delta_s), heading += delta_h
    (re-normalized). Zero deltas reproduce the input boxes exactly.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[0] != len(proposals):
        raise ValueError(f"{feats.shape[0]} feature rows vs {len(proposals)} proposals")
    out = mlp_forward(feats, params)
    if out.shape[1] != num_classes + 7:
        raise ValueError(f"head emits {out.shape[1]} channels, expected {num_classes + 7}")
    logits = out[:, :num_classes]
    deltas = np.clip(out[:, num_classes:], -_DELTA_CLIP, _DELTA_CLIP)
    boxes = []
    for box, d in zip(proposals, deltas):
        boxes.append(
            Box3D(
                center=box.center + d[0:3] * box.size,
                size=box.size * np.exp(d[3:6]),
                heading=normalize_heading(box.heading + d[6]),
            )
        )
    return logits, boxes


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        step = np.zeros_like(x).ravel()
        step[i] = h
        step = step.reshape(x.shape)
        hi = float(f(x + step))
        lo = float(f(x - step))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Parameter serialization: JSON with a shape header per array and values as
# base64-encoded little-endian float64. Nested dataclasses are flattened to
# dot-separated keys and rebuilt through a class registry.
# ---------------------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8")
    return {
        "shape": list(data.shape),
        "dtype": "<f8",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def _to_jsonable(obj, memo: dict[int, int]):
    import dataclasses

    if isinstance(obj, np.ndarray):
        return {"__array__": _encode_array(obj)}
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        # Shared sub-bundles (e.g. one stage reused across refinements) are
        # stored once and referenced afterwards, preserving object identity.
        if id(obj) in memo:
            return {"__ref__": memo[id(obj)]}
        payload = {
            f.name: _to_jsonable(getattr(obj, f.name), memo) for f in dataclasses.fields(obj)
        }
        memo[id(obj)] = len(memo)
        return {"__class__": type(obj).__name__, "fields": payload}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_to_jsonable(v, memo) for v in obj]}
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _from_jsonable(obj, registry: dict, seen: list):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return _decode_array(obj["__array__"])
        if "__ref__" in obj:
            return seen[obj["__ref__"]]
        if "__list__" in obj:
            return [_from_jsonable(v, registry, seen) for v in obj["__list__"]]
        if "__class__" in obj:
            cls = registry[obj["__class__"]]
            kwargs = {k: _from_jsonable(v, registry, seen) for k, v in obj["fields"].items()}
            built = cls(**kwargs)
            seen.append(built)
            return built
    return obj


def save_params(obj, path) -> None:
    """Write a parameter dataclass tree to a JSON file."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_to_jsonable(obj, {}), fh, sort_keys=True)


def load_params(path, extra_classes: tuple = ()):
    """Load parameters written by :func:`save_params`.

    ``extra_classes`` registers dataclasses beyond the ones defined here
    (e.g. gate or pipeline bundles).
    """
    registry = {cls.__name__: cls for cls in (DenseParams, AttentionParams) + tuple(extra_classes)}
    with open(path, "r", encoding="utf-8") as fh:
        return _from_jsonable(json.load(fh), registry, [])

"""Damping-factor generators: learned vectors, static nets, recurrent nets.

Four controller families implement the solver's DampingPolicy interface:

* DirectSchedulePolicy -- per-layer logits learned directly (no network).
* StaticHyperNetPolicy -- a two-layer net mapping the matrix shape and the
  SNR working point to the whole damping schedule at once (optionally behind
  a multi-head self-attention re-representation of its input).
* HyperGruPolicy -- a gated recurrent cell generating one damping factor per
  query from the scenario features, the recent damping history, and the
  current extrinsic variance, so it extends to any number of layers
  (optionally with a single attention head over the hidden state).

All weights live in small dataclasses that flatten to/from one real vector
for the trainer, and serialize to a JSON checkpoint.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .solver import DampingPolicy, PolicyFeatures

INIT_SCALE = 0.1


class LayerOverflowError(RuntimeError):
    """A fixed-length controller was queried beyond its trained depth."""


class CheckpointError(ValueError):
    """A checkpoint file is missing fields or inconsistent."""


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-np.asarray(v, dtype=float)))


def relu(v):
    return np.maximum(np.asarray(v, dtype=float), 0.0)


def tanh(v):
    return np.tanh(np.asarray(v, dtype=float))


ACTIVATIONS = {"sigmoid": sigmoid, "relu": relu, "tanh": tanh}


def apply_activation(kind: str, v):
    try:
        return ACTIVATIONS[kind](v)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


@dataclass
class AttentionHead:
    """One self-attention head: two square feature maps over the input."""

    w_b: np.ndarray
    w_c: np.ndarray


def attention_head(s: np.ndarray, head: AttentionHead) -> np.ndarray:
    """Scaled dot-product self-attention of a vector with itself.

    Row i of the weight matrix is softmax_j(b_i c_j / sqrt(d)), so every row
    is a probability distribution over input positions.
    """
    d = s.shape[0]
    b = head.w_b @ s
    c = head.w_c @ s
    logits = np.outer(b, c) / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ s


@dataclass
class MultiAttention:
    """Several attention heads combined by a learned mixing vector."""

    heads: tuple[AttentionHead, ...]
    mix: np.ndarray


def multi_attention(s: np.ndarray, multi: MultiAttention) -> np.ndarray:
    out = np.zeros_like(s)
    for weight, head in zip(multi.mix, multi.heads):
        out += weight * attention_head(s, head)
    return out


@dataclass
class HyperNetParams:
    """Two-layer static controller: all damping factors from one forward pass.

    w1 is hidden x (n + 1), w2 is layers x hidden; the input stacks the
    unit-norm spectrum with the square root of the SNR.
    """

    w1: np.ndarray
    w2: np.ndarray
    attention: Optional[MultiAttention] = None

    @property
    def layers(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n(self) -> int:
        return self.w1.shape[1] - 1


def hypernet_forward(s: np.ndarray, params: HyperNetParams) -> np.ndarray:
    """Full damping schedule sigmoid(w2 @ relu(w1 @ s'))."""
    if s.shape != (params.w1.shape[1],):
        raise ValueError(f"input length {s.shape} does not match "
                         f"controller width {params.w1.shape[1]}")
    if params.attention is not None:
        s = multi_attention(s, params.attention)
    return sigmoid(params.w2 @ relu(params.w1 @ s))


@dataclass
class HyperGruParams:
    """Gated recurrent controller weights, shared across every step.

    Gate matrices act on the concatenation [state, input] with input size
    n + 4; w_out reads the damping factor off the (optionally re-attended)
    state.
    """

    w_update: np.ndarray
    w_reset: np.ndarray
    w_cand: np.ndarray
    w_out: np.ndarray
    attention: Optional[AttentionHead] = None

    @property
    def hidden(self) -> int:
        return self.w_update.shape[0]

    @property
    def n(self) -> int:
        return self.w_update.shape[1] - self.hidden - 4


def gru_step(state: np.ndarray, s: np.ndarray,
             params: HyperGruParams) -> tuple[np.ndarray, float]:
    """One recurrent update; returns the new state and its damping factor."""
    joint = np.concatenate([state, s])
    z = sigmoid(params.w_update @ joint)
    r = sigmoid(params.w_reset @ joint)
    cand = np.tanh(params.w_cand @ np.concatenate([r * state, s]))
    new_state = (1.0 - z) * state + z * cand
    readout = new_state
    if params.attention is not None:
        readout = attention_head(new_state, params.attention)
    beta = float(sigmoid(params.w_out @ readout))
    return new_state, beta


@dataclass
class DirectDampingParams:
    """Per-layer damping logits learned directly (one value per side)."""

    logits_z: np.ndarray
    logits_x: np.ndarray
    tied: bool = False

    @property
    def layers(self) -> int:
        return self.logits_z.shape[0]


class DirectSchedulePolicy(DampingPolicy):
    """Damping factors sigmoid(logit) looked up per layer and side."""

    def __init__(self, params: DirectDampingParams):
        self.params = params
        self._beta_z = sigmoid(params.logits_z)
        self._beta_x = self._beta_z if params.tied else sigmoid(params.logits_x)

    def beta(self, side: str, t: int, features: PolicyFeatures) -> float:
        if t > self.params.layers:
            raise LayerOverflowError(
                f"direct schedule trained for {self.params.layers} layers, got t={t}")
        table = self._beta_z if side == "z" else self._beta_x
        return float(table[t - 1])


class StaticHyperNetPolicy(DampingPolicy):
    """Static controller: one forward pass per run, both sides tied."""

    def __init__(self, params: HyperNetParams):
        self.params = params
        self._cache: Optional[np.ndarray] = None

    def reset(self) -> None:
        self._cache = None

    def beta(self, side: str, t: int, features: PolicyFeatures) -> float:
        if t > self.params.layers:
            raise LayerOverflowError(
                f"static controller generates {self.params.layers} layers, got t={t}")
        if self._cache is None:
            s = np.concatenate([features.sigma_tilde, [features.sqrt_snr]])
            self._cache = hypernet_forward(s, self.params)
        return float(self._cache[t - 1])


class HyperGruPolicy(DampingPolicy):
    """Recurrent controller: one hidden state carried across all queries.

    Builds the step input [sigma_tilde, sqrt(SNR), beta(t-1), beta(t-2),
    log10(v)] from the query features; the extrinsic variance is log-scaled
    and clipped to [-11, 11] so it cannot saturate the gates.
    """

    def __init__(self, params: HyperGruParams):
        self.params = params
        self.state = np.zeros(params.hidden)

    def reset(self) -> None:
        self.state = np.zeros(self.params.hidden)

    def beta(self, side: str, t: int, features: PolicyFeatures) -> float:
        if features.sigma_tilde.shape[0] != self.params.n:
            raise ValueError(f"feature width {features.sigma_tilde.shape[0]} does "
                             f"not match controller width {self.params.n}")
        log_v = np.log10(features.v_ext) if features.v_ext > 0 else -11.0
        s = np.concatenate([
            features.sigma_tilde,
            [features.sqrt_snr, features.beta_prev, features.beta_prev2,
             min(max(log_v, -11.0), 11.0)],
        ])
        self.state, beta = gru_step(self.state, s, self.params)
        return beta


def _uniform(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, shape)


def init_hypernet_params(n: int, layers: int, hidden: int = 32, heads: int = 4,
                         attention: bool = False, seed: int = 0) -> HyperNetParams:
    rng = np.random.default_rng(seed)
    w1 = _uniform(rng, hidden, n + 1)
    w2 = _uniform(rng, layers, hidden)
    attn = None
    if attention:
        attn = MultiAttention(
            heads=tuple(AttentionHead(_uniform(rng, n + 1, n + 1),
                                      _uniform(rng, n + 1, n + 1))
                        for _ in range(heads)),
            mix=_uniform(rng, heads),
        )
    return HyperNetParams(w1=w1, w2=w2, attention=attn)


def init_hypergru_params(n: int, hidden: int = 32, attention: bool = False,
                         seed: int = 0) -> HyperGruParams:
    rng = np.random.default_rng(seed)
    width = hidden + n + 4
    w_update = _uniform(rng, hidden, width)
    w_reset = _uniform(rng, hidden, width)
    w_cand = _uniform(rng, hidden, width)
    w_out = _uniform(rng, hidden)
    attn = None
    if attention:
        attn = AttentionHead(_uniform(rng, hidden, hidden),
                             _uniform(rng, hidden, hidden))
    return HyperGruParams(w_update=w_update, w_reset=w_reset, w_cand=w_cand,
                          w_out=w_out, attention=attn)


def init_direct_params(layers: int, start_base: float = 0.9,
                       tied: bool = False) -> DirectDampingParams:
    """Logits initialized at the geometric schedule beta(t) = base^t."""
    beta0 = np.clip(start_base ** np.arange(1, layers + 1), 1e-3, 1.0 - 1e-3)
    logits = np.log(beta0 / (1.0 - beta0))
    return DirectDampingParams(logits_z=logits.copy(), logits_x=logits.copy(),
                               tied=tied)


def _named_arrays(params) -> list[tuple[str, np.ndarray]]:
    """Flattening order for each parameter bundle (fixed and documented)."""
    if isinstance(params, DirectDampingParams):
        if params.tied:
            return [("logits_z", params.logits_z)]
        return [("logits_z", params.logits_z), ("logits_x", params.logits_x)]
    if isinstance(params, HyperNetParams):
        out = [("w1", params.w1), ("w2", params.w2)]
        if params.attention is not None:
            for i, head in enumerate(params.attention.heads):
                out.append((f"head{i}_w_b", head.w_b))
                out.append((f"head{i}_w_c", head.w_c))
            out.append(("mix", params.attention.mix))
        return out
    if isinstance(params, HyperGruParams):
        out = [("w_update", params.w_update), ("w_reset", params.w_reset),
               ("w_cand", params.w_cand), ("w_out", params.w_out)]
        if params.attention is not None:
            out.append(("attn_w_b", params.attention.w_b))
            out.append(("attn_w_c", params.attention.w_c))
        return out
    raise TypeError(f"unsupported parameter bundle {type(params).__name__}")


def params_to_vector(params) -> np.ndarray:
    """Flatten a parameter bundle to one real vector (row-major pieces)."""
    return np.concatenate([a.ravel() for _, a in _named_arrays(params)])


def params_from_vector(template, vector: np.ndarray):
    """Rebuild a bundle shaped like `template` from a flat vector."""
    pieces = {}
    offset = 0
    for name, arr in _named_arrays(template):
        size = arr.size
        pieces[name] = vector[offset:offset + size].reshape(arr.shape).copy()
        offset += size
    if offset != vector.size:
        raise ValueError(f"vector length {vector.size} does not match "
                         f"parameter count {offset}")
    if isinstance(template, DirectDampingParams):
        lz = pieces["logits_z"]
        lx = lz if template.tied else pieces["logits_x"]
        return DirectDampingParams(logits_z=lz, logits_x=lx, tied=template.tied)
    if isinstance(template, HyperNetParams):
        attn = None
        if template.attention is not None:
            heads = tuple(AttentionHead(pieces[f"head{i}_w_b"], pieces[f"head{i}_w_c"])
                          for i in range(len(template.attention.heads)))
            attn = MultiAttention(heads=heads, mix=pieces["mix"])
        return HyperNetParams(w1=pieces["w1"], w2=pieces["w2"], attention=attn)
    attn = None
    if template.attention is not None:
        attn = AttentionHead(pieces["attn_w_b"], pieces["attn_w_c"])
    return HyperGruParams(w_update=pieces["w_update"], w_reset=pieces["w_reset"],
                          w_cand=pieces["w_cand"], w_out=pieces["w_out"],
                          attention=attn)


VARIANTS = ("net_direct", "hypernet", "hypernet_attn", "hypergru", "hypergru_attn")


def init_variant_params(variant: str, n: int, layers: int, hidden: int = 32,
                        heads: int = 4, tied: bool = False, seed: int = 0,
                        direct_init_base: float = 0.9):
    """Fresh parameter bundle for a named controller variant."""
    if variant == "net_direct":
        return init_direct_params(layers, start_base=direct_init_base, tied=tied)
    if variant == "hypernet":
        return init_hypernet_params(n, layers, hidden, attention=False, seed=seed)
    if variant == "hypernet_attn":
        return init_hypernet_params(n, layers, hidden, heads=heads,
                                    attention=True, seed=seed)
    if variant == "hypergru":
        return init_hypergru_params(n, hidden, attention=False, seed=seed)
    if variant == "hypergru_attn":
        return init_hypergru_params(n, hidden, attention=True, seed=seed)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def policy_for_params(params) -> DampingPolicy:
    if isinstance(params, DirectDampingParams):
        return DirectSchedulePolicy(params)
    if isinstance(params, HyperNetParams):
        return StaticHyperNetPolicy(params)
    if isinstance(params, HyperGruParams):
        return HyperGruPolicy(params)
    raise TypeError(f"unsupported parameter bundle {type(params).__name__}")


def checkpoint_payload(variant: str, params, n: int, layers: int,
                       metadata: Optional[dict] = None,
                       optimizer: Optional[dict] = None) -> dict:
    """Assemble the JSON-serializable checkpoint structure."""
    arrays = {}
    for name, arr in _named_arrays(params):
        arrays[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    payload = {
        "format": "gecsr-checkpoint-v1",
        "variant": variant,
        "n": n,
        "layers": layers,
        "hidden": getattr(params, "hidden", 0),
        "heads": (len(params.attention.heads)
                  if isinstance(params, HyperNetParams) and params.attention else
                  (1 if getattr(params, "attention", None) is not None else 0)),
        "tied": getattr(params, "tied", False),
        "arrays": arrays,
        "metadata": metadata or {},
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer
    return payload


def save_checkpoint(path: str, payload: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("format", "variant", "n", "layers", "arrays"):
        if key not in payload:
            raise CheckpointError(f"checkpoint missing field {key!r}")
    if payload["variant"] not in VARIANTS:
        raise CheckpointError(f"unknown checkpoint variant {payload['variant']!r}")
    return payload


def params_from_checkpoint(payload: dict):
    """Materialize the parameter bundle stored in a checkpoint."""
    def arr(name: str) -> np.ndarray:
        try:
            entry = payload["arrays"][name]
            return np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint array {name!r} malformed") from exc

    variant = payload["variant"]
    if variant == "net_direct":
        lz = arr("logits_z")
        tied = bool(payload.get("tied", False))
        lx = lz if tied else arr("logits_x")
        return DirectDampingParams(logits_z=lz, logits_x=lx, tied=tied)
    if variant in ("hypernet", "hypernet_attn"):
        attn = None
        if variant == "hypernet_attn":
            heads = tuple(AttentionHead(arr(f"head{i}_w_b"), arr(f"head{i}_w_c"))
                          for i in range(int(payload["heads"])))
            attn = MultiAttention(heads=heads, mix=arr("mix"))
        return HyperNetParams(w1=arr("w1"), w2=arr("w2"), attention=attn)
    attn = None
    if variant == "hypergru_attn":
        attn = AttentionHead(arr("attn_w_b"), arr("attn_w_c"))
    return HyperGruParams(w_update=arr("w_update"), w_reset=arr("w_reset"),
                          w_cand=arr("w_cand"), w_out=arr("w_out"), attention=attn)


def policy_from_checkpoint(payload: dict) -> DampingPolicy:
    return policy_for_params(params_from_checkpoint(payload))

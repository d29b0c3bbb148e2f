"""Boundary prediction head and differentiable window masks.

A two-layer perceptron maps the mean-pooled video feature concatenated with
the query embedding to two logits, squashed by sigmoids into a (center,
width) pair on (0,1).  Window membership is made differentiable with a
product-of-sigmoids soft rectangle of sharpness k.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .core import GroundingInstance, TemporalBoundary
from .seeding import np_substream


class ConfigurationError(ValueError):
    """Shape or hyper-parameter mismatch between model and data."""


@dataclass
class PredictorParams:
    """Weights of the prediction MLP plus the soft-window sharpness k.

    Layout: input 2C -> hidden H (tanh) -> 2 logits -> sigmoid.
    """

    w1: np.ndarray  # (H, 2C)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (2, H)
    b2: np.ndarray  # (2,)
    k: float = 50.0
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        h = self.w1.shape[0]
        if h < 2:
            raise ConfigurationError(f"hidden dim {h} < 2")
        if self.w1.ndim != 2 or self.b1.shape != (h,) or self.w2.shape != (2, h) or self.b2.shape != (2,):
            raise ConfigurationError("inconsistent parameter shapes")
        if not (self.k > 0):
            raise ConfigurationError("sharpness k must be positive")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError("non-finite parameter values")

    @property
    def hidden_dim(self) -> int:
        return int(self.w1.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.w1.shape[1])

    def copy(self) -> "PredictorParams":
        return PredictorParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            k=self.k, seed=self.seed, step=self.step,
        )

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)


def init_params(
    feature_dim: int,
    hidden_dim: int = 16,
    seed: int = 0,
    scale: float = 0.1,
    k: float = 50.0,
    init_width: float = 0.5,
) -> PredictorParams:
    """Small-gaussian weights and near-zero logits.

    The width logit bias sets the initial window width; starting below the
    typical event width models the under-complete initial boundaries this
    engine is built to expand.
    """
    if not 0 < init_width < 1:
        raise ConfigurationError("init_width must lie in (0, 1)")
    rng = np_substream(seed, "predictor-init")
    width_logit = float(np.log(init_width / (1.0 - init_width)))
    return PredictorParams(
        w1=rng.standard_normal((hidden_dim, 2 * feature_dim)) * scale,
        b1=np.zeros(hidden_dim),
        w2=rng.standard_normal((2, hidden_dim)) * scale,
        b2=np.array([0.0, width_logit]),
        k=k,
        seed=seed,
    )


class LiftedPredictor:
    """Per-tape graph leaves for one predictor's parameters.

    Create one per instance per step; after backward, ``grad_arrays`` gathers
    the adjoints back into numpy arrays shaped like ``PredictorParams``.
    """

    def __init__(self, params: PredictorParams):
        self.params = params
        self.w1 = DiffValue(params.w1.copy())
        self.b1 = DiffValue(params.b1.copy())
        self.w2 = DiffValue(params.w2.copy())
        self.b2 = DiffValue(params.b2.copy())
        self.k = params.k

    def leaves(self) -> list[DiffValue]:
        """Flat leaf order matches ``flatten_params``: w1, b1, w2, b2."""
        return [self.w1, self.b1, self.w2, self.b2]

    def grad_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        def grad_of(node: DiffValue) -> np.ndarray:
            adj = node.adjoint
            if isinstance(adj, np.ndarray):
                return adj
            return np.full(np.shape(node.value), float(adj))

        return grad_of(self.w1), grad_of(self.b1), grad_of(self.w2), grad_of(self.b2)


def flatten_params(params: PredictorParams) -> np.ndarray:
    return np.concatenate([params.w1.ravel(), params.b1, params.w2.ravel(), params.b2])


def unflatten_params(x: np.ndarray, like: PredictorParams) -> PredictorParams:
    h, d = like.w1.shape
    x = np.asarray(x, dtype=np.float64)
    i = 0
    w1 = x[i : i + h * d].reshape(h, d)
    i += h * d
    b1 = x[i : i + h]
    i += h
    w2 = x[i : i + 2 * h].reshape(2, h)
    i += 2 * h
    b2 = x[i : i + 2]
    return PredictorParams(w1, b1, w2, b2, k=like.k, seed=like.seed, step=like.step)


def _mlp_input(instance: GroundingInstance, query_emb: np.ndarray) -> np.ndarray:
    query_emb = np.asarray(query_emb, dtype=np.float64)
    if query_emb.shape != (instance.feature_dim,):
        raise ConfigurationError(
            f"query embedding dim {query_emb.shape} does not match feature dim {instance.feature_dim}"
        )
    return np.concatenate([instance.frames.mean(axis=0), query_emb])


def predict_boundary(
    instance: GroundingInstance,
    query_emb: np.ndarray,
    predictor: LiftedPredictor | PredictorParams,
) -> TemporalBoundary:
    """Differentiable (center, width) prediction; both components in (0,1)."""
    if isinstance(predictor, PredictorParams):
        predictor = LiftedPredictor(predictor)
    x = _mlp_input(instance, query_emb)
    if predictor.params.input_dim != x.size:
        raise ConfigurationError(
            f"predictor expects input dim {predictor.params.input_dim}, got {x.size}"
        )
    hidden = ad.tanh(ad.add(ad.param_matvec(predictor.w1, x), predictor.b1))
    logits = ad.sigmoid(ad.add(ad.param_matvec(predictor.w2, hidden), predictor.b2))
    return TemporalBoundary(ad.vget(logits, 0), ad.vget(logits, 1))


def predict_boundary_values(
    instance: GroundingInstance,
    query_emb: np.ndarray,
    params: PredictorParams,
) -> tuple[float, float]:
    """Plain numpy forward pass for inference; no graph is built."""
    x = _mlp_input(instance, query_emb)
    if params.input_dim != x.size:
        raise ConfigurationError(f"predictor expects input dim {params.input_dim}, got {x.size}")
    hidden = np.tanh(params.w1 @ x + params.b1)
    logits = params.w2 @ hidden + params.b2
    c, w = ad._sigmoid_raw(logits)
    return float(c), float(w)


def soft_window_mask(b: TemporalBoundary, timeline: np.ndarray, k: float) -> DiffValue:
    """Soft rectangle m_i = sigmoid(k (t_i - sta)) * sigmoid(k (end - t_i)).

    Uses the unclamped interval so gradients keep flowing when the window
    pokes outside [0,1]; every m_i stays strictly inside (0,1).
    """
    if not k > 0:
        raise ConfigurationError("sharpness k must be positive")
    return ad.sig_window(b.center, b.width, timeline, k, -0.5, 0.5)


def shifted_outside_masks(
    b: TemporalBoundary, tau: float, timeline: np.ndarray, k: float
) -> tuple[DiffValue, DiffValue]:
    """Soft windows over [sta - tau*w, sta] and [end, end + tau*w]."""
    if not 0 < tau <= 1:
        raise ConfigurationError("tau must lie in (0, 1]")
    out1 = ad.sig_window(b.center, b.width, timeline, k, -0.5 - tau, -0.5)
    out2 = ad.sig_window(b.center, b.width, timeline, k, 0.5, 0.5 + tau)
    return out1, out2


def pool_boundary_feature(instance: GroundingInstance, mask: DiffValue) -> DiffValue:
    """Mask-weighted mean of the frame features: v_p = sum(m_i v_i) / sum(m_i)."""
    num = ad.matvec(instance.frames.T, mask)
    den = ad.vsum(mask)
    return ad.div(num, den)


def save_params(params: PredictorParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(params_to_json_obj(params), separators=(",", ":")), encoding="utf-8")


def load_params(path: str | Path) -> PredictorParams:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return params_from_json_obj(obj)


def params_to_json_obj(params: PredictorParams) -> dict:
    return {
        "w1": [list(r) for r in params.w1],
        "b1": list(params.b1),
        "w2": [list(r) for r in params.w2],
        "b2": list(params.b2),
        "k": params.k,
        "seed": params.seed,
        "step": params.step,
    }


def params_from_json_obj(obj: dict) -> PredictorParams:
    return PredictorParams(
        w1=np.array(obj["w1"], dtype=np.float64),
        b1=np.array(obj["b1"], dtype=np.float64),
        w2=np.array(obj["w2"], dtype=np.float64),
        b2=np.array(obj["b2"], dtype=np.float64),
        k=float(obj["k"]),
        seed=int(obj["seed"]),
        step=int(obj["step"]),
    )

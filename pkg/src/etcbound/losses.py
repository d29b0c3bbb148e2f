"""Training objectives: ranking hinge, mutual consistency, window contrast.

The hinges are implemented with a constant floor, max(x, threshold), so each
term bottoms out at its threshold and stops contributing gradient once the
margin is satisfied.  The window-contrast loss compares mask-weighted mean
scores inside the boundary against two flanking windows of width tau * w.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .core import FrameScoreSequence, MatchScorePair, TemporalBoundary
from .model import shifted_outside_masks, soft_window_mask

# Below this total soft weight an outside window is treated as off-timeline:
# its hinge term contributes the floor with zero gradient.
DEGENERATE_WINDOW_WEIGHT = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Loss hyper-parameters; defaults follow the ActivityNet-style setting."""

    alpha: float = 0.25
    beta: float = 0.05
    delta_mil: float = 0.2
    tau: float = 0.25
    delta_pcl: float = 0.15

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.delta_mil < 0 or self.delta_pcl < 0:
            raise ValueError("loss weights and thresholds must be non-negative")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")

    @classmethod
    def anc_style(cls, **overrides) -> "LossWeights":
        return cls(**{"alpha": 0.25, "beta": 0.05, **overrides})

    @classmethod
    def csta_style(cls, **overrides) -> "LossWeights":
        return cls(**{"alpha": 0.5, "beta": 0.1, **overrides})


def match_pair(query_emb: np.ndarray, neg_query_emb: np.ndarray, pooled_feature) -> MatchScorePair:
    """Cosine match scores of a positive and a shuffled-negative query
    against the same pooled boundary feature."""
    return MatchScorePair(
        m_pos=ad.cosine(np.asarray(query_emb, dtype=np.float64), pooled_feature),
        m_neg=ad.cosine(np.asarray(neg_query_emb, dtype=np.float64), pooled_feature),
    )


def mil_loss(pair: MatchScorePair, delta_mil: float) -> DiffValue:
    """Ranking hinge max(delta, M_neg - M_pos); floors at delta."""
    return ad.maximum(ad.sub(ad.lift(pair.m_neg), ad.lift(pair.m_pos)), delta_mil)


def boundary_mse(p: TemporalBoundary, target: tuple[float, float] | TemporalBoundary) -> DiffValue:
    """Mean squared difference of (center, width) against a constant target."""
    if isinstance(target, TemporalBoundary):
        target = (float(ad.value_of(target.center)), float(ad.value_of(target.width)))
    dc = ad.sub(ad.lift(p.center), float(target[0]))
    dw = ad.sub(ad.lift(p.width), float(target[1]))
    return ad.mul(ad.add(ad.square(dc), ad.square(dw)), 0.5)


def mutual_loss(p_o: TemporalBoundary, p_n: TemporalBoundary) -> DiffValue:
    """Symmetric consistency MSE(p_o, detach(p_n)) + MSE(p_n, detach(p_o)).

    Each term's target is stop-gradiented, so the gradient w.r.t. p_o comes
    only from the first term and vice versa.
    """
    t_n = (float(ad.value_of(p_n.center)), float(ad.value_of(p_n.width)))
    t_o = (float(ad.value_of(p_o.center)), float(ad.value_of(p_o.width)))
    return ad.add(boundary_mse(p_o, t_n), boundary_mse(p_n, t_o))


def _weighted_mean(mask: DiffValue, scores: np.ndarray) -> DiffValue:
    return ad.div(ad.dot(mask, scores), ad.vsum(mask))


def pcl_margins(
    b: TemporalBoundary,
    scores: FrameScoreSequence | np.ndarray,
    tau: float,
    timeline: np.ndarray,
    k: float,
) -> tuple[DiffValue | None, DiffValue | None]:
    """Pre-hinge contrast margins (S_out1 - S_in, S_out2 - S_in).

    Mask-weighted means over the soft inside window and the two flanking
    windows.  A flanking window whose total weight is below
    ``DEGENERATE_WINDOW_WEIGHT`` lies off the timeline; its margin is None.
    """
    s = scores.scores if isinstance(scores, FrameScoreSequence) else np.asarray(scores, dtype=np.float64)
    m_in = soft_window_mask(b, timeline, k)
    out1, out2 = shifted_outside_masks(b, tau, timeline, k)
    s_in = _weighted_mean(m_in, s)
    margins: list[DiffValue | None] = []
    for m_out in (out1, out2):
        total = ad.vsum(m_out)
        if float(total.value) < DEGENERATE_WINDOW_WEIGHT:
            margins.append(None)
        else:
            margins.append(ad.sub(ad.div(ad.dot(m_out, s), total), s_in))
    return margins[0], margins[1]


def soft_margin_objective(
    c: DiffValue,
    w: DiffValue,
    scores: FrameScoreSequence | np.ndarray,
    tau: float,
    timeline: np.ndarray,
    k: float,
    degenerate_flank: str = "drop",
) -> DiffValue:
    """Fused (S_out1 - S_in) + (S_out2 - S_in) over soft windows: one graph
    node with the analytic gradient w.r.t. (center, width).

    Same mathematics as summing ``pcl_margins``; built for the many-step
    boundary fitter where graph overhead dominates.  An off-timeline flanking
    window either drops out of the sum ("drop", mirroring the hinge loss's
    degenerate-window rule) or counts as zero evidence ("zero": margin
    -S_in), which keeps an inward gradient so descent cannot stall in the
    flat pocket at the timeline edges.
    """
    s = scores.scores if isinstance(scores, FrameScoreSequence) else np.asarray(scores, dtype=np.float64)
    t = np.asarray(timeline, dtype=np.float64)
    cv, wv = float(c.value), float(w.value)
    k = float(k)

    windows = ((-0.5, 0.5), (-0.5 - tau, -0.5), (0.5, 0.5 + tau))
    means = []
    grads = []  # d(mean)/dc, d(mean)/dw per window
    alive = []
    for lo_coef, hi_coef in windows:
        a = cv + lo_coef * wv
        b_edge = cv + hi_coef * wv
        s1 = ad._sigmoid_raw(k * (t - a))
        s2 = ad._sigmoid_raw(k * (b_edge - t))
        m = s1 * s2
        total = float(m.sum())
        if total < DEGENERATE_WINDOW_WEIGHT:
            means.append(None)
            grads.append((0.0, 0.0))
            alive.append(False)
            continue
        mean = float(np.dot(m, s)) / total
        dm_da = -k * s1 * (1.0 - s1) * s2
        dm_db = k * s1 * s2 * (1.0 - s2)
        # d(mean)/dm_i = (s_i - mean) / total
        dmean_dm = (s - mean) / total
        g_a = float(np.dot(dmean_dm, dm_da))
        g_b = float(np.dot(dmean_dm, dm_db))
        grads.append((g_a + g_b, lo_coef * g_a + hi_coef * g_b))
        means.append(mean)
        alive.append(True)

    if degenerate_flank not in ("drop", "zero"):
        raise ValueError(f"unknown degenerate_flank mode {degenerate_flank!r}")
    if means[0] is None:
        raise ad.DomainError("soft_margin_objective: inside window carries no weight")
    value = 0.0
    g_c = 0.0
    g_w = 0.0
    n_out = 0
    for idx in (1, 2):
        if not alive[idx]:
            if degenerate_flank == "zero":
                # dead flank counts as zero evidence: margin 0 - S_in
                n_out += 1
                value += -means[0]
            continue
        n_out += 1
        value += means[idx] - means[0]
        g_c += grads[idx][0]
        g_w += grads[idx][1]
    g_c -= n_out * grads[0][0]
    g_w -= n_out * grads[0][1]
    out = DiffValue(value, (c, w))

    def bw(g):
        ad._acc(c, g * g_c)
        ad._acc(w, g * g_w)

    out._bw = bw
    return out


def pcl_loss(
    b: TemporalBoundary,
    scores: FrameScoreSequence | np.ndarray,
    tau: float,
    delta_pcl: float,
    timeline: np.ndarray,
    k: float,
) -> DiffValue:
    """max(S_out1 - S_in, delta) + max(S_out2 - S_in, delta).

    Always at least 2 * delta; an off-timeline flanking window contributes
    exactly its floor delta with zero gradient.
    """
    m1, m2 = pcl_margins(b, scores, tau, timeline, k)
    terms = [
        DiffValue(float(delta_pcl)) if m is None else ad.maximum(m, delta_pcl)
        for m in (m1, m2)
    ]
    return ad.add(terms[0], terms[1])


def total_loss(l_go, l_gn, l_m, l_c, l_cf, weights: LossWeights) -> DiffValue:
    """L = l_go + l_gn + alpha * l_m + beta * (l_c + l_cf)."""
    l = ad.add(ad.lift(l_go), ad.lift(l_gn))
    l = ad.add(l, ad.mul(ad.lift(l_m), weights.alpha))
    l = ad.add(l, ad.mul(ad.add(ad.lift(l_c), ad.lift(l_cf)), weights.beta))
    return l

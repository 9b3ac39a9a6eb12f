"""Negation-aware training: negated-description construction, negative-cue
detection, and the bidirectionally constrained batch loss.

A training triplet couples a video with one of its captions and, when the
caption is negatable, an automatically negated copy of that caption. The
batch loss combines a hardest-negative hinge with two bounded losses that
keep the similarity gap between a caption and its negated version inside a
margin window, from both the video anchor and the text anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fusion import (
    FeatureBundle,
    LaffModel,
    ParamLayout,
    branch_backward,
    branch_forward,
    similarity,
)
from .numeric import cosine_sim, cosine_sim_vjp

# Tokens that mark a query or caption as negated. The "non" prefix test
# additionally catches hyphenated and fused forms ("non-kitchen", "nonstop").
NEGATION_CUES = frozenset(
    {"no", "not", "none", "never", "nobody", "nothing", "nowhere", "without", "n't"}
)

AUXILIARIES = frozenset(
    {
        "is", "are", "was", "were", "am", "be", "been", "being",
        "do", "does", "did", "has", "have", "had",
        "can", "could", "will", "would", "shall", "should", "may", "might", "must",
    }
)

COARSE_TAGS = frozenset({"VERB", "AUX", "NOUN", "ADJ", "OTHER"})


class AlreadyNegatedError(ValueError):
    """Input caption already carries a negation cue."""


@dataclass
class Caption:
    """A tokenized sentence, optionally with coarse part-of-speech tags."""

    item_id: str
    tokens: list[str]
    pos_tags: list[str] | None = None

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"caption {self.item_id!r} has no tokens")
        if self.pos_tags is not None:
            if len(self.pos_tags) != len(self.tokens):
                raise ValueError(
                    f"caption {self.item_id!r}: {len(self.pos_tags)} tags"
                    f" for {len(self.tokens)} tokens"
                )
            bad = sorted(set(self.pos_tags) - COARSE_TAGS)
            if bad:
                raise ValueError(f"caption {self.item_id!r}: unknown tags {bad}")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class Margins:
    """Margins of the bounded losses plus the auxiliary weight.

    m1 < m2 bound the video-anchored gap, m3 < m4 the text-anchored gap
    (both strictly inside (0, 2)); m0 is the primary hinge margin and
    lambda1 weights the two auxiliary terms.
    """

    m0: float = 0.2
    m1: float = 0.2
    m2: float = 1.0
    m3: float = 0.2
    m4: float = 1.0
    lambda1: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.m1 < self.m2 < 2.0):
            raise ConfigError(f"need 0 < m1 < m2 < 2, got m1={self.m1}, m2={self.m2}")
        if not (0.0 < self.m3 < self.m4 < 2.0):
            raise ConfigError(f"need 0 < m3 < m4 < 2, got m3={self.m3}, m4={self.m4}")
        if self.m0 < 0.0:
            raise ConfigError(f"m0 must be >= 0, got {self.m0}")
        if self.lambda1 < 0.0:
            raise ConfigError(f"lambda1 must be >= 0, got {self.lambda1}")


@dataclass
class Triplet:
    """A video, one of its captions, and optionally the negated caption."""

    video: FeatureBundle
    caption: Caption
    caption_features: FeatureBundle
    negated: Caption | None = None
    negated_features: FeatureBundle | None = None

    def __post_init__(self):
        if (self.negated is None) != (self.negated_features is None):
            raise ValueError(
                "negated caption and negated features must be given together"
            )

    @property
    def has_negated(self) -> bool:
        return self.negated is not None


# ---------------------------------------------------------------------------
# Text operations
# ---------------------------------------------------------------------------


def detect_negation(caption: Caption) -> tuple[bool, list[int]]:
    """True plus ascending cue positions if any token is a negation cue."""
    positions = [
        i
        for i, tok in enumerate(caption.tokens)
        if tok in NEGATION_CUES or tok.startswith("non")
    ]
    return bool(positions), positions


def _is_verb(caption: Caption, i: int) -> bool:
    if caption.pos_tags is not None:
        return caption.pos_tags[i] == "VERB"
    tok = caption.tokens[i]
    return (tok.endswith("ing") or tok.endswith("ed")) and tok not in AUXILIARIES


def _is_auxiliary(caption: Caption, i: int) -> bool:
    if caption.pos_tags is not None:
        return caption.pos_tags[i] == "AUX"
    return caption.tokens[i] in AUXILIARIES


def negation_sites(caption: Caption) -> list[int]:
    """Candidate insertion indices: after each auxiliary, before each verb."""
    sites = set()
    for i in range(len(caption.tokens)):
        if _is_auxiliary(caption, i):
            sites.add(i + 1)
        elif _is_verb(caption, i):
            sites.add(i)
    return sorted(sites)


def negate_caption(caption: Caption, rng_seed, cue: str = "not") -> Caption | None:
    """Insert a negation cue at a uniformly drawn candidate site.

    Returns None when the caption has no auxiliary or identified verb
    (not negatable). A caption that already carries a cue is rejected.
    Deleting the inserted token restores the original token sequence.
    """
    has, _ = detect_negation(caption)
    if has:
        raise AlreadyNegatedError(
            f"caption {caption.item_id!r} already contains a negation cue"
        )
    sites = negation_sites(caption)
    if not sites:
        return None
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    site = sites[int(rng.integers(len(sites)))]
    tokens = caption.tokens[:site] + [cue] + caption.tokens[site:]
    tags = None
    if caption.pos_tags is not None:
        tags = caption.pos_tags[:site] + ["OTHER"] + caption.pos_tags[site:]
    return Caption(caption.item_id, tokens, tags)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def bcl_video_anchor(s_pos: float, s_neg: float, m: Margins) -> float:
    """Video-anchored bounded loss; zero iff s_pos - s_neg lies in [m1, m2]."""
    return max(0.0, m.m1 + s_neg - s_pos) + max(0.0, -m.m2 - s_neg + s_pos)


def bcl_text_anchor(s_qx: float, s_qq: float, m: Margins) -> float:
    """Text-anchored bounded loss; zero iff s_qx - s_qq lies in [m3, m4]."""
    return max(0.0, m.m3 + s_qq - s_qx) + max(0.0, -m.m4 - s_qq + s_qx)


def _bcl_grads(lower: float, upper: float, s_hi: float, s_lo: float) -> tuple[float, float]:
    """(d/ds_hi, d/ds_lo) of max(0, lower + s_lo - s_hi) + max(0, -upper - s_lo + s_hi).

    Subgradient 0 exactly at the hinge points, so the deadzone [lower, upper]
    has an exactly zero gradient.
    """
    g_hi = 0.0
    g_lo = 0.0
    if lower + s_lo - s_hi > 0.0:
        g_hi -= 1.0
        g_lo += 1.0
    if -upper - s_lo + s_hi > 0.0:
        g_hi += 1.0
        g_lo -= 1.0
    return g_hi, g_lo


def hardest_negative_index(sim_column: np.ndarray, positive_index: int) -> int:
    """Argmax over rows != positive_index; ties broken by lowest index."""
    if sim_column.shape[0] < 2:
        raise ValueError("hardest negative needs at least two videos")
    masked = sim_column.copy()
    masked[positive_index] = -np.inf
    return int(np.argmax(masked))


@dataclass
class BnlBreakdown:
    """Per-pair terms of the batch loss, for inspection and oracle tests."""

    primary: list[float]
    video_anchor: list[float]
    text_anchor: list[float]
    hardest: list[int]


def bnl_loss(
    model: LaffModel,
    batch: list[Triplet],
    m: Margins,
    with_breakdown: bool = False,
):
    """Mean batch loss and its gradient w.r.t. the flat model parameters.

    Per pair (q, x+): a hinge against the hardest in-batch negative video,
    plus lambda1 times the two bounded losses whenever the negated caption
    exists. The hardest-negative choice is held fixed during
    differentiation; reduction over the batch follows index order.
    """
    n = len(batch)
    if n < 2:
        raise ValueError(f"batch of {n}: hardest-negative mining needs >= 2 videos")
    layout = ParamLayout(model)
    grad = layout.zeros()
    h = model.h
    inv_h = 1.0 / h
    inv_n = 1.0 / n

    # Forward: cache every branch state once per (item, head).
    video_states = [[branch_forward(head.video, t.video) for t in batch] for head in model.heads]
    text_states = [
        [branch_forward(head.text, t.caption_features) for t in batch] for head in model.heads
    ]
    neg_states = [
        [
            branch_forward(head.text, t.negated_features) if t.has_negated else None
            for t in batch
        ]
        for head in model.heads
    ]

    # Cross-modal similarity matrix: rows = videos, columns = queries.
    sim = np.zeros((n, n))
    for hi in range(h):
        for vi in range(n):
            for qi in range(n):
                sim[vi, qi] += cosine_sim(
                    video_states[hi][vi].fused, text_states[hi][qi].fused
                )
    sim *= inv_h

    s_vneg = np.zeros(n)  # s(x+, q-)
    s_ttneg = np.zeros(n)  # s(q, q-)
    for b, t in enumerate(batch):
        if not t.has_negated:
            continue
        for hi in range(h):
            s_vneg[b] += cosine_sim(video_states[hi][b].fused, neg_states[hi][b].fused)
            s_ttneg[b] += cosine_sim(text_states[hi][b].fused, neg_states[hi][b].fused)
    s_vneg *= inv_h
    s_ttneg *= inv_h

    # Hinges built on max(0, .) would silently swallow a NaN similarity;
    # surface it as a non-finite loss so the trainer can abort with the batch.
    if not (
        np.all(np.isfinite(sim))
        and np.all(np.isfinite(s_vneg))
        and np.all(np.isfinite(s_ttneg))
    ):
        nan = float("nan")
        if with_breakdown:
            return nan, grad, BnlBreakdown([], [], [], [])
        return nan, grad

    # Upstream accumulators on fused embeddings, one (n, d) block per head.
    d_vid = [np.zeros((n, s[0].fused.shape[0])) for s in video_states]
    d_txt = [np.zeros_like(d_vid[hi]) for hi in range(h)]
    d_neg = [np.zeros_like(d_vid[hi]) for hi in range(h)]

    def add_cross(vi: int, qi: int, upstream: float) -> None:
        """Push d(loss)/d(sim[vi, qi]) onto the fused video/text embeddings."""
        for hi in range(h):
            dv, dt = cosine_sim_vjp(
                video_states[hi][vi].fused, text_states[hi][qi].fused, upstream * inv_h
            )
            d_vid[hi][vi] += dv
            d_txt[hi][qi] += dt

    breakdown = BnlBreakdown([], [], [], [])
    loss = 0.0
    for b, t in enumerate(batch):
        hardest = hardest_negative_index(sim[:, b], b)
        s_pos = sim[b, b]
        s_hard = sim[hardest, b]
        primary = max(0.0, m.m0 + s_hard - s_pos)
        loss += primary
        if primary > 0.0:
            add_cross(hardest, b, inv_n)
            add_cross(b, b, -inv_n)

        va = ta = 0.0
        if t.has_negated:
            va = bcl_video_anchor(s_pos, s_vneg[b], m)
            ta = bcl_text_anchor(s_pos, s_ttneg[b], m)
            loss += m.lambda1 * (va + ta)
            scale = inv_n * m.lambda1

            g_pos, g_neg = _bcl_grads(m.m1, m.m2, s_pos, s_vneg[b])
            if g_pos != 0.0:
                add_cross(b, b, scale * g_pos)
            if g_neg != 0.0:
                for hi in range(h):
                    dv, dn = cosine_sim_vjp(
                        video_states[hi][b].fused,
                        neg_states[hi][b].fused,
                        scale * g_neg * inv_h,
                    )
                    d_vid[hi][b] += dv
                    d_neg[hi][b] += dn

            g_qx, g_qq = _bcl_grads(m.m3, m.m4, s_pos, s_ttneg[b])
            if g_qx != 0.0:
                add_cross(b, b, scale * g_qx)
            if g_qq != 0.0:
                for hi in range(h):
                    dt, dn = cosine_sim_vjp(
                        text_states[hi][b].fused,
                        neg_states[hi][b].fused,
                        scale * g_qq * inv_h,
                    )
                    d_txt[hi][b] += dt
                    d_neg[hi][b] += dn

        if with_breakdown:
            breakdown.primary.append(primary)
            breakdown.video_anchor.append(va)
            breakdown.text_anchor.append(ta)
            breakdown.hardest.append(hardest)

    loss *= inv_n

    # Pull the accumulated upstreams back through each branch, in index order.
    for hi, head in enumerate(model.heads):
        for b in range(n):
            if np.any(d_vid[hi][b]):
                layout.add_branch_grads(
                    grad, hi, "video",
                    branch_backward(head.video, video_states[hi][b], d_vid[hi][b]),
                )
            if np.any(d_txt[hi][b]):
                layout.add_branch_grads(
                    grad, hi, "text",
                    branch_backward(head.text, text_states[hi][b], d_txt[hi][b]),
                )
            if neg_states[hi][b] is not None and np.any(d_neg[hi][b]):
                layout.add_branch_grads(
                    grad, hi, "text",
                    branch_backward(head.text, neg_states[hi][b], d_neg[hi][b]),
                )

    if with_breakdown:
        return float(loss), grad, breakdown
    return float(loss), grad


def gap_in_window_fraction(model: LaffModel, triplets, m: Margins) -> float:
    """Fraction of negated triplets whose gap s(x+,q) - s(x+,q-) lies in [m1, m2]."""
    negated = [t for t in triplets if t.has_negated]
    if not negated:
        raise ValueError("no negated triplets in dataset")
    hits = 0
    for t in negated:
        gap = similarity(model, t.video, t.caption_features) - similarity(
            model, t.video, t.negated_features
        )
        if m.m1 <= gap <= m.m2:
            hits += 1
    return hits / len(negated)

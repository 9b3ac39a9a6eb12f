"""Attentional feature fusion and cross-modal similarity.

A fusion branch maps k per-space feature vectors into one d-dimensional
embedding: each feature is passed through its own linear+tanh transform,
attention scores u . e_i are softmaxed into convex weights, and the fused
vector is the weighted sum of the transformed features. A head pairs a
video branch with a text branch; the cross-modal similarity of a video and
a sentence is the mean over heads of the cosine between their fused
embeddings.

Iteration over feature spaces is always in sorted space-name order so that
results are reproducible regardless of how bundles were assembled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BundleMismatchError, DimensionError
from .numeric import (
    LinearTanhParams,
    as_vector,
    cosine_sim,
    cosine_sim_vjp,
    linear_tanh,
    softmax,
)


@dataclass
class FeatureBundle:
    """Named per-space feature vectors for one item (video, frame or sentence)."""

    item_id: str
    features: dict[str, np.ndarray]

    def __post_init__(self):
        self.features = {
            name: as_vector(vec, f"feature {name!r}")
            for name, vec in self.features.items()
        }

    @classmethod
    def from_pairs(cls, item_id: str, pairs) -> "FeatureBundle":
        """Build from (space_name, vector) pairs, rejecting duplicate names."""
        features: dict[str, np.ndarray] = {}
        for name, vec in pairs:
            if name in features:
                raise BundleMismatchError(f"duplicate feature space {name!r}")
            features[name] = vec
        return cls(item_id, features)

    @property
    def spaces(self) -> tuple[str, ...]:
        return tuple(sorted(self.features))


@dataclass
class LaffBranchParams:
    """One fusion branch: a linear+tanh transform per space plus an attention vector.

    All transforms share the output dimension d == len(attention).
    """

    transforms: dict[str, LinearTanhParams]
    attention: np.ndarray

    def __post_init__(self):
        self.attention = as_vector(self.attention, "attention")
        if not self.transforms:
            raise DimensionError("a branch needs at least one feature space")
        d = self.attention.shape[0]
        for name, p in self.transforms.items():
            if p.out_dim != d:
                raise DimensionError(
                    f"transform {name!r} maps to {p.out_dim} dims, expected {d}"
                )

    @property
    def d(self) -> int:
        return self.attention.shape[0]

    @property
    def spaces(self) -> tuple[str, ...]:
        return tuple(sorted(self.transforms))

    @property
    def k(self) -> int:
        return len(self.transforms)


@dataclass
class LaffHead:
    """A paired video branch and text branch sharing the embedding dimension."""

    video: LaffBranchParams
    text: LaffBranchParams

    def __post_init__(self):
        if self.video.d != self.text.d:
            raise DimensionError(
                f"video branch d={self.video.d} differs from text branch d={self.text.d}"
            )

    @property
    def d(self) -> int:
        return self.video.d


@dataclass
class LaffModel:
    """h paired fusion branches; similarity is the mean cosine over heads."""

    heads: list[LaffHead]

    def __post_init__(self):
        if not self.heads:
            raise DimensionError("a model needs at least one head")
        first = self.heads[0]
        for i, head in enumerate(self.heads):
            if head.d != first.d:
                raise DimensionError(f"head {i} has d={head.d}, expected {first.d}")
            if head.video.spaces != first.video.spaces:
                raise DimensionError(f"head {i} has different video spaces")
            if head.text.spaces != first.text.spaces:
                raise DimensionError(f"head {i} has different text spaces")

    @property
    def h(self) -> int:
        return len(self.heads)

    @property
    def d(self) -> int:
        return self.heads[0].d

    @property
    def video_spaces(self) -> tuple[str, ...]:
        return self.heads[0].video.spaces

    @property
    def text_spaces(self) -> tuple[str, ...]:
        return self.heads[0].text.spaces

    def video_dims(self) -> dict[str, int]:
        return {s: self.heads[0].video.transforms[s].in_dim for s in self.video_spaces}

    def text_dims(self) -> dict[str, int]:
        return {s: self.heads[0].text.transforms[s].in_dim for s in self.text_spaces}

    def to_vector(self) -> np.ndarray:
        """Flatten all parameters in a fixed order (heads, video/text, sorted spaces)."""
        chunks = []
        for head in self.heads:
            for branch in (head.video, head.text):
                for name in branch.spaces:
                    p = branch.transforms[name]
                    chunks.append(p.weight.ravel())
                    chunks.append(p.bias)
                chunks.append(branch.attention)
        return np.concatenate(chunks)

    def with_vector(self, vec: np.ndarray) -> "LaffModel":
        """Rebuild a model of identical structure from a flat parameter vector."""
        vec = as_vector(vec, "parameter vector")
        pos = 0

        def take(n: int) -> np.ndarray:
            nonlocal pos
            out = vec[pos : pos + n]
            if out.shape[0] != n:
                raise DimensionError("parameter vector too short for model structure")
            pos += n
            return out.copy()

        heads = []
        for head in self.heads:
            branches = []
            for branch in (head.video, head.text):
                transforms = {}
                for name in branch.spaces:
                    p = branch.transforms[name]
                    w = take(p.out_dim * p.in_dim).reshape(p.out_dim, p.in_dim)
                    b = take(p.out_dim)
                    transforms[name] = LinearTanhParams(w, b)
                u = take(branch.d)
                branches.append(LaffBranchParams(transforms, u))
            heads.append(LaffHead(branches[0], branches[1]))
        if pos != vec.shape[0]:
            raise DimensionError(
                f"parameter vector has {vec.shape[0]} entries, model needs {pos}"
            )
        return LaffModel(heads)

    def n_params(self) -> int:
        return self.to_vector().shape[0]


def init_model(
    video_dims: dict[str, int],
    text_dims: dict[str, int],
    d: int = 512,
    heads: int = 2,
    seed: int = 0,
) -> LaffModel:
    """Initialize a model: W ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), b = 0, u = 0.

    Zero attention vectors start every branch at uniform attention, the
    unbiased prior. Heads draw independent weights.
    """
    if d < 1 or heads < 1:
        raise DimensionError(f"d and heads must be >= 1, got d={d}, heads={heads}")
    rng = np.random.default_rng(seed)

    def branch(dims: dict[str, int]) -> LaffBranchParams:
        transforms = {}
        for name in sorted(dims):
            d_in = dims[name]
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d, d_in))
            transforms[name] = LinearTanhParams(w, np.zeros(d))
        return LaffBranchParams(transforms, np.zeros(d))

    return LaffModel([LaffHead(branch(video_dims), branch(text_dims)) for _ in range(heads)])


# ---------------------------------------------------------------------------
# Forward / backward through one branch
# ---------------------------------------------------------------------------


@dataclass
class BranchState:
    """Cached forward pass of one branch on one bundle."""

    spaces: tuple[str, ...]
    inputs: list[np.ndarray]
    transformed: np.ndarray  # (k, d), row i = e_i
    weights: np.ndarray  # (k,) convex attention weights
    fused: np.ndarray  # (d,)


@dataclass
class BranchGrads:
    """Gradients w.r.t. one branch's parameters and its input features."""

    d_weight: dict[str, np.ndarray]
    d_bias: dict[str, np.ndarray]
    d_attention: np.ndarray
    d_inputs: dict[str, np.ndarray]


def _check_bundle(branch: LaffBranchParams, bundle: FeatureBundle) -> None:
    have = set(bundle.features)
    want = set(branch.transforms)
    if have != want:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise BundleMismatchError(
            f"bundle {bundle.item_id!r} does not match branch spaces"
            f" (missing={missing}, extra={extra})"
        )


def branch_forward(branch: LaffBranchParams, bundle: FeatureBundle) -> BranchState:
    """Run one branch, keeping intermediates for the backward pass."""
    _check_bundle(branch, bundle)
    spaces = branch.spaces
    inputs = [bundle.features[name] for name in spaces]
    transformed = np.stack(
        [linear_tanh(branch.transforms[name], f) for name, f in zip(spaces, inputs)]
    )
    scores = transformed @ branch.attention
    weights = softmax(scores)
    fused = weights @ transformed
    return BranchState(spaces, inputs, transformed, weights, fused)


def branch_backward(
    branch: LaffBranchParams,
    state: BranchState,
    d_fused: np.ndarray,
    d_weights: np.ndarray | None = None,
) -> BranchGrads:
    """Backprop through fusion: weighted sum, softmax attention, linear+tanh.

    d_fused is dL/d(fused); d_weights optionally adds dL/d(attention weights).
    Each transformed feature receives both the direct a_i * d_fused path and
    the attention-score path through the softmax coupling.
    """
    d_fused = as_vector(d_fused, "d_fused")
    if d_fused.shape != state.fused.shape:
        raise DimensionError(
            f"d_fused shape {d_fused.shape} does not match fused {state.fused.shape}"
        )
    e = state.transformed
    a = state.weights
    dA = e @ d_fused
    if d_weights is not None:
        dA = dA + as_vector(d_weights, "d_weights")
    # softmax jacobian: ds_j = a_j (dA_j - sum_i a_i dA_i)
    ds = a * (dA - float(a @ dA))
    d_attention = e.T @ ds
    dE = np.outer(a, d_fused) + np.outer(ds, branch.attention)
    d_weight: dict[str, np.ndarray] = {}
    d_bias: dict[str, np.ndarray] = {}
    d_inputs: dict[str, np.ndarray] = {}
    for i, name in enumerate(state.spaces):
        dz = dE[i] * (1.0 - e[i] * e[i])
        d_weight[name] = np.outer(dz, state.inputs[i])
        d_bias[name] = dz
        d_inputs[name] = branch.transforms[name].weight.T @ dz
    return BranchGrads(d_weight, d_bias, d_attention, d_inputs)


def laff_forward(
    branch: LaffBranchParams, bundle: FeatureBundle
) -> tuple[np.ndarray, np.ndarray]:
    """(fused vector, attention weights) for one bundle.

    Weights are positive and sum to 1; the fused vector is their convex
    combination of the transformed features.
    """
    state = branch_forward(branch, bundle)
    return state.fused, state.weights


def laff_vjp(
    branch: LaffBranchParams, bundle: FeatureBundle, upstream: np.ndarray
) -> BranchGrads:
    """Gradients of a scalar loss w.r.t. branch parameters and input features,
    given upstream = dL/d(fused)."""
    state = branch_forward(branch, bundle)
    return branch_backward(branch, state, upstream)


# ---------------------------------------------------------------------------
# Cross-modal similarity
# ---------------------------------------------------------------------------


def similarity(model: LaffModel, video: FeatureBundle, text: FeatureBundle) -> float:
    """Mean over heads of the cosine between fused video and text embeddings."""
    total = 0.0
    for head in model.heads:
        v = branch_forward(head.video, video).fused
        t = branch_forward(head.text, text).fused
        total += cosine_sim(v, t)
    return total / model.h


def text_text_similarity(model: LaffModel, q1: FeatureBundle, q2: FeatureBundle) -> float:
    """Mean over heads of the cosine between two sentences' fused embeddings,
    using each head's text branch for both."""
    total = 0.0
    for head in model.heads:
        a = branch_forward(head.text, q1).fused
        b = branch_forward(head.text, q2).fused
        total += cosine_sim(a, b)
    return total / model.h


class ParamLayout:
    """Slice map into a model's flat parameter vector, for gradient accumulation."""

    def __init__(self, model: LaffModel):
        self.size = 0
        self._wb: dict[tuple[int, str, str], tuple[slice, slice]] = {}
        self._u: dict[tuple[int, str], slice] = {}
        pos = 0
        for hi, head in enumerate(model.heads):
            for bname, branch in (("video", head.video), ("text", head.text)):
                for sname in branch.spaces:
                    p = branch.transforms[sname]
                    w_slice = slice(pos, pos + p.out_dim * p.in_dim)
                    pos = w_slice.stop
                    b_slice = slice(pos, pos + p.out_dim)
                    pos = b_slice.stop
                    self._wb[(hi, bname, sname)] = (w_slice, b_slice)
                u_slice = slice(pos, pos + branch.d)
                pos = u_slice.stop
                self._u[(hi, bname)] = u_slice
        self.size = pos

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def add_branch_grads(
        self, vec: np.ndarray, head_index: int, branch_name: str, grads: BranchGrads
    ) -> None:
        for sname, dw in grads.d_weight.items():
            w_slice, b_slice = self._wb[(head_index, branch_name, sname)]
            vec[w_slice] += dw.ravel()
            vec[b_slice] += grads.d_bias[sname]
        vec[self._u[(head_index, branch_name)]] += grads.d_attention


def similarity_with_grad(
    model: LaffModel, video: FeatureBundle, text: FeatureBundle
) -> tuple[float, np.ndarray]:
    """similarity() plus its gradient w.r.t. the flat model parameter vector."""
    layout = ParamLayout(model)
    grad = layout.zeros()
    total = 0.0
    inv_h = 1.0 / model.h
    for hi, head in enumerate(model.heads):
        vstate = branch_forward(head.video, video)
        tstate = branch_forward(head.text, text)
        total += cosine_sim(vstate.fused, tstate.fused)
        dv, dt = cosine_sim_vjp(vstate.fused, tstate.fused, inv_h)
        layout.add_branch_grads(grad, hi, "video", branch_backward(head.video, vstate, dv))
        layout.add_branch_grads(grad, hi, "text", branch_backward(head.text, tstate, dt))
    return total * inv_h, grad


def fused_matrix(model: LaffModel, bundles, branch: str) -> list[np.ndarray]:
    """Per-head (n, d) matrices of fused embeddings for a list of bundles.

    branch is "video" or "text". Used for corpus-wide ranking, where
    embedding every item once per head beats re-running per query.
    """
    if branch not in ("video", "text"):
        raise ValueError(f"branch must be 'video' or 'text', got {branch!r}")
    out = []
    for head in model.heads:
        bp = head.video if branch == "video" else head.text
        out.append(np.stack([branch_forward(bp, b).fused for b in bundles]))
    return out


def feature_importance(
    model: LaffModel, dataset, branch: str
) -> list[tuple[str, float]]:
    """Mean attention weight per feature space over all items and heads.

    Returns (space_name, mean_weight) sorted by weight descending (ties by
    name); the means sum to 1. High-weight spaces are the ones worth keeping
    when trimming the feature set.
    """
    if branch not in ("video", "text"):
        raise ValueError(f"branch must be 'video' or 'text', got {branch!r}")
    dataset = list(dataset)
    if not dataset:
        raise ValueError("feature_importance needs a nonempty dataset")
    spaces = model.video_spaces if branch == "video" else model.text_spaces
    acc = np.zeros(len(spaces))
    for bundle in dataset:
        for head in model.heads:
            bp = head.video if branch == "video" else head.text
            acc += branch_forward(bp, bundle).weights
    means = acc / (len(dataset) * model.h)
    ranked = sorted(zip(spaces, means), key=lambda kv: (-kv[1], kv[0]))
    return [(name, float(w)) for name, w in ranked]

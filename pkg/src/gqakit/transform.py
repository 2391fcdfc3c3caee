"""Apply a grouping plan to model weights without changing the model.

Three steps, all function-preserving:

1. `regroup_heads` permutes per-head projection slices (and the matching
   output slices) so group members become adjacent. Attention is a sum over
   heads, so any permutation leaves the logits unchanged.
2. `align_groups` runs generalized Procrustes per group on the calibration
   caches and fuses the resulting transforms into the weights: value
   transforms into (w_v, w_o) as Q w_v and w_o Q^T, key rotations into
   (w_q, w_k). Key transforms are block rotations sharing the rotary
   pairing, so they commute with the position rotations and cancel in the
   attention scores.
3. `verify_invariance` compares logits of two checkpoints on random
   sequences and reports the worst deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grouping import GroupingPlan, LayerGrouping, validate_partition
from .linalg import BlockRotation, OrthogonalTransform, generalized_procrustes
from .model import KVCacheSet, ModelConfig, ModelWeights, ROPE_PAIRING, forward
from .similarity import _normalize_tokens


@dataclass
class HeadTransformSet:
    """Audit record of everything fused into the weights, per layer."""

    permutations: list = field(default_factory=list)   # per layer: new->old index list
    value_transforms: list = field(default_factory=list)  # per layer: [OrthogonalTransform]*H
    key_transforms: list = field(default_factory=list)    # per layer: [BlockRotation]*H


def _plan_layer(plan: GroupingPlan, layer: int) -> LayerGrouping:
    if len(plan.layers) == 1:
        return plan.layers[0]
    return plan.layers[layer]


def regroup_heads(weights: ModelWeights, plan: GroupingPlan):
    """Reorder heads so each layer's groups are contiguous.

    Returns (new_weights, permutations); permutations[layer][new] = old.
    Logits are invariant because the matching w_o slices move along.
    """
    new = weights.copy()
    permutations = []
    for b, layer in enumerate(new.layers):
        lg = _plan_layer(plan, b)
        validate_partition(lg.groups, layer.wq.shape[0])
        perm = np.asarray(lg.permutation())
        layer.wq = layer.wq[perm]
        layer.wk = layer.wk[perm]
        layer.wv = layer.wv[perm]
        layer.wo = layer.wo[perm]
        permutations.append(perm.tolist())
    return new, permutations


def contiguous_plan(plan: GroupingPlan) -> GroupingPlan:
    """The plan as seen after regrouping: adjacent groups in every layer."""
    d = plan.group_size
    groups = [list(range(g * d, (g + 1) * d)) for g in range(plan.group_count)]
    layers = [LayerGrouping(groups=[list(g) for g in groups], score=lg.score)
              for lg in plan.layers]
    return GroupingPlan(plan.n_heads, plan.group_count, plan.target,
                        plan.criterion, layers)


def align_groups(weights: ModelWeights, cache: KVCacheSet, plan: GroupingPlan,
                 criterion: str = "cos", pairing: str = ROPE_PAIRING):
    """Jointly align each group's heads and fuse the transforms into the
    weights. The cache must come from (or be permuted to match) `weights`.

    Value caches get unconstrained transforms, key caches block rotations.
    With criterion "cos" the fit runs on per-token normalized caches; with
    "dist" on the raw caches.
    """
    if criterion not in ("cos", "dist"):
        raise ValueError("criterion must be 'cos' or 'dist'")
    if cache.n_layers != len(weights.layers):
        raise ValueError("cache and weights disagree on layer count")
    new = weights.copy()
    record = HeadTransformSet()
    for b, layer in enumerate(new.layers):
        h = layer.wq.shape[0]
        if cache.keys[b].shape[0] != h:
            raise ValueError(f"layer {b}: cache has {cache.keys[b].shape[0]} heads, "
                             f"weights have {h}")
        lg = _plan_layer(plan, b)
        validate_partition(lg.groups, h)
        v_transforms: list = [None] * h
        k_transforms: list = [None] * h
        for group in lg.groups:
            if len(group) == 1:  # nothing to align
                head = group[0]
                v_transforms[head] = OrthogonalTransform(np.eye(cache.head_dim))
                k_transforms[head] = BlockRotation(np.zeros(cache.head_dim // 2), pairing)
                continue
            v_caches = [cache.values[b][i] for i in group]
            k_caches = [cache.keys[b][i] for i in group]
            if criterion == "cos":
                v_caches = [_normalize_tokens(c[None])[0] for c in v_caches]
                k_caches = [_normalize_tokens(c[None])[0] for c in k_caches]
            v_res = generalized_procrustes(v_caches, constrained=False)
            k_res = generalized_procrustes(k_caches, constrained=True, pairing=pairing)
            for local, head in enumerate(group):
                v_transforms[head] = v_res.transforms[local]
                k_transforms[head] = k_res.transforms[local]
        for i in range(h):
            q_v = v_transforms[i].q
            layer.wv[i] = q_v @ layer.wv[i]
            layer.wo[i] = layer.wo[i] @ q_v.T
            r_k = k_transforms[i]
            layer.wq[i] = r_k.apply(layer.wq[i])
            layer.wk[i] = r_k.apply(layer.wk[i])
        record.value_transforms.append(v_transforms)
        record.key_transforms.append(k_transforms)
    return new, record


def convert_checkpoint(weights: ModelWeights, cache: KVCacheSet,
                       plan: GroupingPlan, criterion: str = "cos"):
    """Full transform stage: regroup, permute the cache to match, align.

    Returns (transformed_weights, transform_record, contiguous_plan).
    """
    regrouped, permutations = regroup_heads(weights, plan)
    permuted_cache = cache.permute_heads(permutations)
    cplan = contiguous_plan(plan)
    aligned, record = align_groups(regrouped, permuted_cache, cplan, criterion)
    record.permutations = permutations
    return aligned, record, cplan


@dataclass
class InvarianceReport:
    max_abs: float
    max_rel: float
    tol: float
    passed: bool
    n_sequences: int

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "max_rel": self.max_rel,
                "tol": self.tol, "passed": self.passed,
                "n_sequences": self.n_sequences}


def verify_invariance(weights_before: ModelWeights, weights_after: ModelWeights,
                      config: ModelConfig, n_seq: int = 32, seq_len: int = 16,
                      tol: float = 1e-8, seed: int = 0) -> InvarianceReport:
    """Compare logits on random token sequences; PASS iff max-abs <= tol."""
    for w in (weights_before, weights_after):
        if len(w.layers) != config.n_layers or w.embedding.shape[0] != config.vocab_size:
            raise ValueError("config mismatch between weights and config")
        if w.layers[0].wq.shape[0] != config.n_heads:
            raise ValueError("config mismatch: head count")
    rng = np.random.default_rng(seed)
    max_abs = 0.0
    max_rel = 0.0
    for _ in range(n_seq):
        tokens = rng.integers(0, config.vocab_size, size=seq_len)
        la = forward(weights_before, config, tokens)
        lb = forward(weights_after, config, tokens)
        diff = np.abs(la - lb)
        max_abs = max(max_abs, float(diff.max()))
        denom = np.maximum(np.abs(la), 1e-300)
        max_rel = max(max_rel, float((diff / denom).max()))
    return InvarianceReport(max_abs=max_abs, max_rel=max_rel, tol=tol,
                            passed=max_abs <= tol, n_sequences=n_seq)

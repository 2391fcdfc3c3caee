"""Pairwise head-similarity matrices, before and after optimal alignment.

Two criteria are supported:

* "cos": mean per-token cosine between two heads' cache vectors. The
  aligning transform is fit on per-token-normalized caches (magnitude
  roughly removed) but the score itself is the plain cosine, which is
  scale-invariant either way. Tokens whose vector is zero in either head
  are skipped and counted.
* "dist": negative mean per-token Euclidean distance, transforms fit on the
  raw caches (no normalization).

Value heads use the full orthogonal solver; key heads are restricted to
block rotations sharing the model's rotary pairing, which is what keeps the
fused transform position-independent.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .linalg import BlockRotation, OrthogonalTransform, orthogonal_procrustes, \
    rotation_procrustes_2d_blocks
from .model import KVCacheSet

TARGETS = ("key", "value")
CRITERIA = ("cos", "dist")
STAGES = ("original", "after")


@dataclass
class SimilarityMatrix:
    layer: int
    target: str      # "key" | "value"
    criterion: str   # "cos"  | "dist"
    stage: str       # "original" | "after"
    scores: np.ndarray  # (H, H) symmetric, diagonal unused (zero)
    skipped_tokens: int = 0

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")

    @property
    def n_heads(self) -> int:
        return self.scores.shape[0]


@dataclass
class PairTransformTable:
    """transforms[(i, j)] aligns head j's cache onto head i's."""

    layer: int
    target: str
    criterion: str
    transforms: dict = field(default_factory=dict)

    def get(self, i: int, j: int):
        return self.transforms[(i, j)]


def _layer_cache(cache: KVCacheSet, layer: int, target: str) -> np.ndarray:
    if target == "key":
        return cache.keys[layer]
    if target == "value":
        return cache.values[layer]
    raise ValueError(f"target must be one of {TARGETS}")


def _check_cache(heads: np.ndarray, layer: int, target: str) -> None:
    if heads.shape[2] < 1:
        raise ValueError("cache holds no tokens")
    norms = np.linalg.norm(heads, axis=1)  # (H, N)
    dead = np.where((norms == 0.0).all(axis=1))[0]
    if dead.size:
        raise ValueError(
            f"layer {layer} {target} cache: head(s) {dead.tolist()} are "
            "entirely zero; similarity is undefined")


def _pair_cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    """Mean cosine over tokens, skipping tokens zero-norm in either head."""
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    ok = (na > 0.0) & (nb > 0.0)
    skipped = int((~ok).sum())
    if not ok.any():
        raise ValueError("no tokens with nonzero vectors in both heads")
    cosines = (a[:, ok] * b[:, ok]).sum(axis=0) / (na[ok] * nb[ok])
    return float(cosines.mean()), skipped


def _pair_distance(a: np.ndarray, b: np.ndarray) -> float:
    return -float(np.linalg.norm(a - b, axis=0).mean())


def _normalize_tokens(heads: np.ndarray) -> np.ndarray:
    """Scale every per-token vector to unit norm; zero vectors stay zero."""
    norms = np.linalg.norm(heads, axis=1, keepdims=True)
    return np.divide(heads, norms, out=np.zeros_like(heads), where=norms > 0)


def original_similarity(cache: KVCacheSet, target: str, criterion: str = "cos"):
    """Unaligned pairwise scores, one SimilarityMatrix per layer."""
    out = []
    for layer in range(cache.n_layers):
        heads = _layer_cache(cache, layer, target)
        _check_cache(heads, layer, target)
        h = heads.shape[0]
        scores = np.zeros((h, h))
        skipped = 0
        for i in range(h):
            for j in range(i + 1, h):
                if criterion == "cos":
                    s, sk = _pair_cosine(heads[i], heads[j])
                    skipped += sk
                elif criterion == "dist":
                    s = _pair_distance(heads[i], heads[j])
                else:
                    raise ValueError(f"criterion must be one of {CRITERIA}")
                scores[i, j] = scores[j, i] = s
        out.append(SimilarityMatrix(layer, target, criterion, "original",
                                    scores, skipped))
    return out


def _fit_pair(fit_i: np.ndarray, fit_j: np.ndarray, target: str, pairing: str):
    if target == "key":
        return rotation_procrustes_2d_blocks(fit_j, fit_i, pairing)
    return orthogonal_procrustes(fit_j, fit_i)


def score_aligned_pair(head_i: np.ndarray, head_j: np.ndarray, transform,
                       criterion: str) -> float:
    """Score of the pair (i, j) after mapping head j through `transform`."""
    aligned_j = transform.apply(head_j)
    if criterion == "cos":
        return _pair_cosine(head_i, aligned_j)[0]
    return _pair_distance(head_i, aligned_j)


def _aligned_layer(heads: np.ndarray, layer: int, target: str, criterion: str,
                   pairing: str):
    _check_cache(heads, layer, target)
    h = heads.shape[0]
    fit_heads = _normalize_tokens(heads) if criterion == "cos" else heads
    scores = np.zeros((h, h))
    skipped = 0
    table = PairTransformTable(layer, target, criterion)
    for i in range(h):
        for j in range(i + 1, h):
            t_ji = _fit_pair(fit_heads[i], fit_heads[j], target, pairing)
            table.transforms[(i, j)] = t_ji
            table.transforms[(j, i)] = t_ji.inverse()
            if criterion == "cos":
                s, sk = _pair_cosine(heads[i], t_ji.apply(heads[j]))
                skipped += sk
            else:
                s = _pair_distance(heads[i], t_ji.apply(heads[j]))
            scores[i, j] = scores[j, i] = s
    sim = SimilarityMatrix(layer, target, criterion, "after", scores, skipped)
    return sim, table


def aligned_similarity(cache: KVCacheSet, target: str, criterion: str,
                       pairing: str = "half", threads: int = 1):
    """Best-achievable pairwise scores plus the per-pair transforms.

    Returns (matrices, tables), one entry per layer. Layers are independent
    and are mapped over a thread pool when threads > 1 (results are ordered,
    so the output is identical either way).
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    if target == "key" and cache.head_dim % 2 != 0:
        raise ValueError("key alignment requires an even head dimension")
    layers = [(_layer_cache(cache, b, target), b) for b in range(cache.n_layers)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda arg: _aligned_layer(arg[0], arg[1], target, criterion, pairing),
                layers))
    else:
        results = [_aligned_layer(h, b, target, criterion, pairing)
                   for h, b in layers]
    matrices = [r[0] for r in results]
    tables = [r[1] for r in results]
    return matrices, tables


# ---------------------------------------------------------------------------
# CSV report
# ---------------------------------------------------------------------------

_CSV_FIELDS = ("layer", "target", "criterion", "stage", "i", "j", "score")


def export_similarity_report(matrices, path) -> None:
    """Write unique head pairs (i < j) as CSV rows in a fixed sort order."""
    rows = []
    for m in matrices:
        h = m.n_heads
        for i in range(h):
            for j in range(i + 1, h):
                rows.append((m.layer, m.target, m.criterion, m.stage, i, j,
                             repr(float(m.scores[i, j]))))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4], r[5]))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_CSV_FIELDS)
        writer.writerows(rows)


def import_similarity_report(path):
    """Rebuild SimilarityMatrix objects from an exported CSV (exact floats)."""
    groups: dict = {}
    maxhead: dict = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != _CSV_FIELDS:
            raise ValueError(f"{path}: not a similarity report (bad columns)")
        for row in reader:
            key = (int(row["layer"]), row["target"], row["criterion"], row["stage"])
            i, j, score = int(row["i"]), int(row["j"]), float(row["score"])
            groups.setdefault(key, []).append((i, j, score))
            maxhead[key] = max(maxhead.get(key, 0), i, j)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], k[3])):
        layer, target, criterion, stage = key
        h = maxhead[key] + 1
        scores = np.zeros((h, h))
        for i, j, s in groups[key]:
            scores[i, j] = scores[j, i] = s
        out.append(SimilarityMatrix(layer, target, criterion, stage, scores))
    return out

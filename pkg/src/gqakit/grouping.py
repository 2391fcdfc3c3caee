"""Partition heads into equal-size groups maximizing within-group similarity.

The search follows the restart hill-climb used for grouping: per epoch,
start from a random partition and repeatedly swap two heads from different
groups, keeping a swap only if the score strictly improves; the best
partition over all epochs wins. An optional temperature mode (off by
default) also accepts worsening swaps with probability exp(delta/T).

`exhaustive_grouping` enumerates every partition and is the test oracle for
small head counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .similarity import SimilarityMatrix

GROUPING_TARGETS = ("key", "value", "default")


@dataclass(frozen=True)
class SearchConfig:
    max_iter: int = 2000
    epochs: int = 50
    rng_seed: int = 0
    temperature: float | None = None  # greedy when None
    cooling: float = 0.995

    def __post_init__(self):
        if self.max_iter < 1 or self.epochs < 1:
            raise ValueError("max_iter and epochs must be >= 1")


@dataclass
class LayerGrouping:
    groups: list  # list of lists of head indices
    score: float

    @property
    def n_heads(self) -> int:
        return sum(len(g) for g in self.groups)

    def permutation(self) -> list:
        """Head order that makes the groups contiguous."""
        return [h for g in self.groups for h in g]


@dataclass
class GroupingPlan:
    n_heads: int
    group_count: int
    target: str            # "key" | "value" | "default"
    criterion: str | None  # None for default grouping
    layers: list = field(default_factory=list)

    @property
    def group_size(self) -> int:
        return self.n_heads // self.group_count


def validate_partition(groups, n_heads: int) -> None:
    seen = sorted(h for g in groups for h in g)
    if seen != list(range(n_heads)):
        raise ValueError(
            f"invalid partition: expected each of 0..{n_heads - 1} exactly once")
    sizes = {len(g) for g in groups}
    if len(sizes) != 1:
        raise ValueError(f"groups must have equal sizes, got {sorted(len(g) for g in groups)}")


def _check_sim(sim: SimilarityMatrix) -> np.ndarray:
    if sim.stage != "after":
        raise ValueError("grouping expects aligned (stage='after') similarity scores")
    return sim.scores


def score_grouping(groups, sim: SimilarityMatrix) -> float:
    """Sum over groups of all within-group unordered-pair scores."""
    scores = _check_sim(sim)
    validate_partition(groups, scores.shape[0])
    total = 0.0
    for g in groups:
        for a in range(len(g)):
            for b in range(a + 1, len(g)):
                total += scores[g[a], g[b]]
    return float(total)


def _score_partition(part: np.ndarray, scores: np.ndarray) -> float:
    # part: (G, D) int array
    total = 0.0
    for g in part:
        sub = scores[np.ix_(g, g)]
        total += sub[np.triu_indices(len(g), k=1)].sum()
    return float(total)


def search_grouping(sim: SimilarityMatrix, group_count: int,
                    cfg: SearchConfig = SearchConfig(), trace: list | None = None) -> LayerGrouping:
    """Restart hill-climb over equal-size partitions; deterministic per seed.

    If `trace` is a list, it receives one list per epoch containing the
    accepted current score after every inner iteration.
    """
    scores = _check_sim(sim)
    h = scores.shape[0]
    if h % group_count != 0:
        raise ValueError(f"{h} heads not divisible into {group_count} groups")
    d = h // group_count

    best_score = -math.inf
    best_part: np.ndarray | None = None
    children = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.epochs)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(children[epoch])
        part = rng.permutation(h).reshape(group_count, d)
        current = _score_partition(part, scores)
        if current > best_score:
            best_score, best_part = current, part.copy()
        temperature = cfg.temperature
        epoch_trace = [] if trace is not None else None
        for _ in range(cfg.max_iter):
            ga, gb = rng.choice(group_count, size=2, replace=False)
            ia, ib = rng.integers(d), rng.integers(d)
            cand = part.copy()
            cand[ga, ia], cand[gb, ib] = part[gb, ib], part[ga, ia]
            new = _score_partition(cand, scores)
            accept = new > current
            if not accept and temperature is not None and temperature > 0:
                accept = rng.random() < math.exp((new - current) / temperature)
                temperature *= cfg.cooling
            if accept:
                part, current = cand, new
                if current > best_score:
                    best_score, best_part = current, part.copy()
            if epoch_trace is not None:
                epoch_trace.append(current)
        if trace is not None:
            trace.append(epoch_trace)

    groups = [sorted(g.tolist()) for g in best_part]
    groups.sort(key=lambda g: g[0])
    return LayerGrouping(groups=groups, score=best_score)


def default_grouping(n_heads: int, group_count: int) -> LayerGrouping:
    """Adjacent heads grouped in index order; score is not defined (0)."""
    if n_heads % group_count != 0:
        raise ValueError(f"{n_heads} heads not divisible into {group_count} groups")
    d = n_heads // group_count
    groups = [list(range(g * d, (g + 1) * d)) for g in range(group_count)]
    return LayerGrouping(groups=groups, score=0.0)


def partition_count(n_heads: int, group_count: int) -> int:
    """Number of ways to split n labeled heads into equal unlabeled groups."""
    d = n_heads // group_count
    total = math.factorial(n_heads) // (math.factorial(d) ** group_count
                                        * math.factorial(group_count))
    return total


def enumerate_partitions(n_heads: int, group_count: int):
    """Yield every partition into `group_count` unlabeled groups of equal size.

    Canonical form: the lowest remaining head index anchors each new group,
    so no partition appears twice.
    """
    if n_heads % group_count != 0:
        raise ValueError(f"{n_heads} heads not divisible into {group_count} groups")
    d = n_heads // group_count
    from itertools import combinations

    def rec(remaining):
        if not remaining:
            yield []
            return
        head, rest = remaining[0], remaining[1:]
        for combo in combinations(rest, d - 1):
            group = [head, *combo]
            left = [x for x in rest if x not in combo]
            for tail in rec(left):
                yield [group] + tail

    yield from rec(list(range(n_heads)))


def exhaustive_grouping(sim: SimilarityMatrix, group_count: int,
                        limit: int = 10 ** 6) -> LayerGrouping:
    """Enumerate all partitions and return the best; oracle for small H."""
    scores = _check_sim(sim)
    h = scores.shape[0]
    if h % group_count != 0:
        raise ValueError(f"{h} heads not divisible into {group_count} groups")
    count = partition_count(h, group_count)
    if count > limit:
        raise ValueError(
            f"{count} partitions exceed the exhaustive-search limit of {limit}")
    best_groups, best_score = None, -math.inf
    for groups in enumerate_partitions(h, group_count):
        s = score_grouping(groups, sim)
        if s > best_score:
            best_score, best_groups = s, groups
    return LayerGrouping(groups=best_groups, score=best_score)


# ---------------------------------------------------------------------------
# plan serialization
# ---------------------------------------------------------------------------

def plan_to_json(plan: GroupingPlan) -> str:
    payload = {
        "n_heads": plan.n_heads,
        "group_count": plan.group_count,
        "target": plan.target,
        "criterion": plan.criterion,
        "layers": [{"groups": lg.groups, "score": lg.score} for lg in plan.layers],
    }
    return json.dumps(payload, sort_keys=True, indent=1)


def plan_from_json(text: str) -> GroupingPlan:
    payload = json.loads(text)
    try:
        plan = GroupingPlan(
            n_heads=int(payload["n_heads"]),
            group_count=int(payload["group_count"]),
            target=payload["target"],
            criterion=payload["criterion"],
            layers=[LayerGrouping(groups=[list(map(int, g)) for g in lg["groups"]],
                                  score=float(lg["score"]))
                    for lg in payload["layers"]],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"invalid grouping plan: {e}") from e
    if plan.target not in GROUPING_TARGETS:
        raise ValueError(f"invalid grouping target {plan.target!r}")
    if plan.n_heads % plan.group_count != 0:
        raise ValueError("group_count must divide n_heads")
    for lg in plan.layers:
        validate_partition(lg.groups, plan.n_heads)
    return plan


def save_plan(plan: GroupingPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(plan_to_json(plan) + "\n")


def load_plan(path) -> GroupingPlan:
    with open(path, "r", encoding="utf-8") as f:
        return plan_from_json(f.read())

"""Gated transfer of per-head KV projections onto shared group heads.

New group K/V projections are initialized by mean-pooling the heads of each
group. During training every original head j is blended with its group head
through a hard-concrete gate z[b, j]:

    w_eff = z * w_original + (1 - z) * w_group

Gates start at 1 (pure originals). A single global target-size loss drives
the mean gate to a scheduled target T (linearly 1 -> 0 over the warm-up,
then 0), while a distillation loss (token-level KL plus a top-k pairwise
logit-difference term) keeps the student close to the frozen MHA teacher.
Per-layer gates are otherwise unconstrained, so layers may prune at
different speeds. After training, gates are forced to 0, the original KV
heads are discarded, and a standard GQA checkpoint remains.

Gradients come from the `autodiff` tape; the optimizer is plain SGD with
separate cosine-decayed learning rates for model parameters and gates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .grouping import GroupingPlan, validate_partition
from .model import (KVCacheSet, LayerWeights, ModelConfig, ModelWeights,
                    NORM_EPS, forward, rope_tables)

# hard-concrete constants: temperature and stretch limits
HC_BETA = 2.0 / 3.0
HC_GAMMA = -0.1
HC_ZETA = 1.1
INIT_LOG_ALPHA = 2.5  # just past saturation: deterministic gate is exactly 1

_QUAD_NODES = 256
_t, _w = np.polynomial.legendre.leggauss(_QUAD_NODES)
_QUAD_U = 0.5 * (_t + 1.0)     # nodes mapped to (0, 1)
_QUAD_W = 0.5 * _w             # weights for the unit interval
_QUAD_LOGIT = np.log(_QUAD_U) - np.log1p(-_QUAD_U)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


# ---------------------------------------------------------------------------
# hard-concrete gates
# ---------------------------------------------------------------------------

def hard_concrete_sample(log_alpha, rng) -> np.ndarray:
    """Reparametrized stochastic gate in [0, 1]."""
    log_alpha = np.asarray(log_alpha, dtype=np.float64)
    if not np.isfinite(log_alpha).all():
        raise ValueError("gate parameters must be finite")
    u = np.clip(rng.random(log_alpha.shape), 1e-12, 1.0 - 1e-12)
    s = 1.0 / (1.0 + np.exp(-(np.log(u) - np.log1p(-u) + log_alpha) / HC_BETA))
    return np.clip(s * (HC_ZETA - HC_GAMMA) + HC_GAMMA, 0.0, 1.0)


def hard_concrete_expected_gate(log_alpha) -> np.ndarray:
    """E[z] under the sampler, via fixed Gauss-Legendre quadrature over the
    uniform noise (the clamped integrand has no elementary closed form)."""
    log_alpha = np.asarray(log_alpha, dtype=np.float64)
    s = 1.0 / (1.0 + np.exp(-(_QUAD_LOGIT + log_alpha[..., None]) / HC_BETA))
    z = np.clip(s * (HC_ZETA - HC_GAMMA) + HC_GAMMA, 0.0, 1.0)
    return z @ _QUAD_W


def hard_concrete_deterministic(log_alpha) -> np.ndarray:
    """Noise-free evaluation gate: clamp(sigmoid(a) * (zeta-gamma) + gamma)."""
    log_alpha = np.asarray(log_alpha, dtype=np.float64)
    s = 1.0 / (1.0 + np.exp(-log_alpha))
    return np.clip(s * (HC_ZETA - HC_GAMMA) + HC_GAMMA, 0.0, 1.0)


def _gate_sample_tape(log_alpha: Var, u: np.ndarray) -> Var:
    noise = np.log(u) - np.log1p(-u)
    s = ad.sigmoid(ad.mul(ad.add(log_alpha, noise), 1.0 / HC_BETA))
    return ad.clamp(ad.add(ad.mul(s, HC_ZETA - HC_GAMMA), HC_GAMMA), 0.0, 1.0)


def _expected_gate_tape(log_alpha: Var) -> Var:
    la = ad.reshape(log_alpha, (*log_alpha.shape, 1))
    s = ad.sigmoid(ad.mul(ad.add(la, _QUAD_LOGIT), 1.0 / HC_BETA))
    z = ad.clamp(ad.add(ad.mul(s, HC_ZETA - HC_GAMMA), HC_GAMMA), 0.0, 1.0)
    return ad.vsum(ad.mul(z, _QUAD_W), axis=-1)


@dataclass
class MaskState:
    """Per-layer, per-head gate parameters."""

    log_alpha: np.ndarray  # (n_layers, n_heads)
    beta: float = HC_BETA
    gamma: float = HC_GAMMA
    zeta: float = HC_ZETA

    @classmethod
    def initial(cls, n_layers: int, n_heads: int) -> "MaskState":
        return cls(log_alpha=np.full((n_layers, n_heads), INIT_LOG_ALPHA))

    def deterministic_gates(self) -> np.ndarray:
        return hard_concrete_deterministic(self.log_alpha)

    def copy(self) -> "MaskState":
        return MaskState(self.log_alpha.copy(), self.beta, self.gamma, self.zeta)


# ---------------------------------------------------------------------------
# group heads
# ---------------------------------------------------------------------------

@dataclass
class GroupHeads:
    """Shared K/V projections, one per (layer, group)."""

    wk: np.ndarray  # (n_layers, n_groups, head_dim, d_model)
    wv: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.wk.shape[1]

    def copy(self) -> "GroupHeads":
        return GroupHeads(self.wk.copy(), self.wv.copy())


def _check_contiguous(plan: GroupingPlan) -> None:
    d = plan.group_size
    expected = [list(range(g * d, (g + 1) * d)) for g in range(plan.group_count)]
    for lg in plan.layers:
        validate_partition(lg.groups, plan.n_heads)
        if [sorted(g) for g in lg.groups] != expected:
            raise ValueError(
                "pruning requires a contiguous (post-regroup) plan: group g "
                "must hold heads g*D .. (g+1)*D-1")


def mean_pool_init(weights: ModelWeights, plan: GroupingPlan) -> GroupHeads:
    """Initialize each group head as the mean of its members' projections."""
    _check_contiguous(plan)
    h = weights.layers[0].wk.shape[0]
    if h != plan.n_heads:
        raise ValueError(f"plan is for {plan.n_heads} heads, weights have {h}")
    d = plan.group_size
    wk = np.stack([
        np.stack([layer.wk[g * d:(g + 1) * d].mean(axis=0)
                  for g in range(plan.group_count)])
        for layer in weights.layers])
    wv = np.stack([
        np.stack([layer.wv[g * d:(g + 1) * d].mean(axis=0)
                  for g in range(plan.group_count)])
        for layer in weights.layers])
    return GroupHeads(wk=wk, wv=wv)


def apply_masks(weights: ModelWeights, group_heads: GroupHeads, gates,
                layer: int, head: int):
    """Effective (w_k, w_v) for one head: z*original + (1-z)*group head."""
    gates = np.asarray(gates, dtype=np.float64)
    n_layers = len(weights.layers)
    h = weights.layers[0].wk.shape[0]
    if not (0 <= layer < n_layers and 0 <= head < h):
        raise IndexError(f"layer {layer} / head {head} out of range")
    d = h // group_heads.n_groups
    g = head // d
    z = gates[layer, head]
    lw = weights.layers[layer]
    wk = z * lw.wk[head] + (1.0 - z) * group_heads.wk[layer, g]
    wv = z * lw.wv[head] + (1.0 - z) * group_heads.wv[layer, g]
    return wk, wv


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l0_loss(gates, target: float) -> float:
    """|mean(z) - T| + (mean(z) - T)^2 over all layers and heads."""
    if not 0.0 <= target <= 1.0:
        raise ValueError("target size must lie in [0, 1]")
    m = float(np.mean(np.asarray(gates, dtype=np.float64)))
    return abs(m - target) + (m - target) ** 2


def _log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _offdiag_indices(k: int) -> np.ndarray:
    idx = np.arange(k * k).reshape(k, k)
    mask = ~np.eye(k, dtype=bool)
    return idx[mask]


def _topk_indices(teacher_logits: np.ndarray, k: int) -> np.ndarray:
    # (..., vocab) -> (..., k); order within the top-k is irrelevant but must
    # be deterministic, which argpartition on fixed input is.
    return np.argpartition(teacher_logits, -k, axis=-1)[..., -k:]


def distill_loss(student_logits, teacher_logits, k: int = 16) -> float:
    """Token-level KL(teacher || student) plus the top-k pairwise
    logit-difference term, averaged over positions.

    Both logits are (vocab, positions) as produced by the forward pass.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: student {s.shape} vs teacher {t.shape}")
    if s.ndim != 2:
        raise ValueError("expected (vocab, positions) logits")
    vocab = s.shape[0]
    if not 2 <= k <= vocab:
        raise ValueError(f"k must be in [2, vocab]; got k={k}, vocab={vocab}")
    s = s.T  # (n, vocab)
    t = t.T

    log_ps = _log_softmax_np(s)
    log_pt = _log_softmax_np(t)
    pt = np.exp(log_pt)
    kl = (pt * (log_pt - log_ps)).sum(axis=-1).mean()

    idx = _topk_indices(t, k)
    st = np.take_along_axis(s, idx, axis=-1)
    tt = np.take_along_axis(t, idx, axis=-1)
    off = _offdiag_indices(k)
    sd = (st[..., :, None] - st[..., None, :]).reshape(*st.shape[:-1], k * k)[..., off]
    td = (tt[..., :, None] - tt[..., None, :]).reshape(*tt.shape[:-1], k * k)[..., off]
    log_qs = _log_softmax_np(sd)
    log_qt = _log_softmax_np(td)
    qs, qt = np.exp(log_qs), np.exp(log_qt)
    bild = 0.5 * ((qt * (log_qt - log_qs)).sum(axis=-1)
                  + (qs * (log_qs - log_qt)).sum(axis=-1)).mean()
    return float(kl + bild)


def _distill_loss_tape(student_logits: Var, teacher_logits: np.ndarray,
                       k: int) -> Var:
    """Tape version of distill_loss; logits here are (..., vocab)."""
    t = teacher_logits
    log_pt = _log_softmax_np(t)
    pt = np.exp(log_pt)
    log_ps = ad.log_softmax(student_logits, axis=-1)
    ent = float((pt * log_pt).sum(axis=-1).mean())
    kl = ad.add(ad.mul(ad.vmean(ad.vsum(ad.mul(log_ps, pt), axis=-1)), -1.0), ent)

    idx = _topk_indices(t, k)
    st = ad.gather_last(student_logits, idx)
    tt = np.take_along_axis(t, idx, axis=-1)
    off = _offdiag_indices(k)
    lead = st.shape[:-1]
    sd = ad.gather_last(
        ad.reshape(ad.sub(ad.reshape(st, (*lead, k, 1)), ad.reshape(st, (*lead, 1, k))),
                   (*lead, k * k)),
        np.broadcast_to(off, (*lead, off.size)))
    td = (tt[..., :, None] - tt[..., None, :]).reshape(*lead, k * k)[..., off]
    log_qt = _log_softmax_np(td)
    qt = np.exp(log_qt)
    log_qs = ad.log_softmax(sd, axis=-1)
    qs = ad.softmax(sd, axis=-1)
    ent_t = float((qt * log_qt).sum(axis=-1).mean())
    t2s = ad.add(ad.mul(ad.vmean(ad.vsum(ad.mul(log_qs, qt), axis=-1)), -1.0), ent_t)
    s2t = ad.vmean(ad.vsum(ad.mul(qs, ad.sub(log_qs, log_qt)), axis=-1))
    bild = ad.mul(ad.add(t2s, s2t), 0.5)
    return ad.add(kl, bild)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class TrainSchedule:
    total_steps: int
    lr_model: float
    lr_masks: float
    batch_size: int = 8
    warmup_frac: float = 0.30   # target size decays linearly to 0 over this
    freeze_frac: float = 0.80   # gates stop training after this point
    distill_top_k: int = 16
    gate_param_clip: float = 6.0  # keeps saturated gates recoverable

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not 0.0 < self.warmup_frac <= 1.0 or not 0.0 < self.freeze_frac <= 1.0:
            raise ValueError("fractions must lie in (0, 1]")

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_frac * self.total_steps))

    @property
    def freeze_step(self) -> int:
        return round(self.freeze_frac * self.total_steps)

    def target_size(self, step: int) -> float:
        return max(0.0, 1.0 - step / self.warmup_steps)

    def lr_at(self, base: float, step: int) -> float:
        if self.total_steps == 0:
            return 0.0
        return base * 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "lr_model": self.lr_model,
            "lr_masks": self.lr_masks,
            "batch_size": self.batch_size,
            "warmup_frac": self.warmup_frac,
            "freeze_frac": self.freeze_frac,
            "distill_top_k": self.distill_top_k,
        }


# ---------------------------------------------------------------------------
# tape-based student forward
# ---------------------------------------------------------------------------

@dataclass
class StudentParams:
    """All trainable Vars of the masked student, grouped by learning rate."""

    embedding: Var
    lm_head: Var
    final_norm: Var
    layers: list  # list of dicts name -> Var
    group_wk: Var
    group_wv: Var
    log_alpha: Var

    def model_vars(self) -> list:
        out = [self.embedding, self.lm_head, self.final_norm, self.group_wk, self.group_wv]
        for layer in self.layers:
            out.extend(layer.values())
        return out

    @classmethod
    def from_state(cls, weights: ModelWeights, group_heads: GroupHeads,
                   masks: MaskState) -> "StudentParams":
        layers = []
        for lw in weights.layers:
            layers.append({name: Var(getattr(lw, name).copy())
                           for name in ("wq", "wk", "wv", "wo", "attn_norm",
                                        "ffn_norm", "w_gate", "w_up", "w_down")})
        return cls(
            embedding=Var(weights.embedding.copy()),
            lm_head=Var(weights.lm_head.copy()),
            final_norm=Var(weights.final_norm.copy()),
            layers=layers,
            group_wk=Var(group_heads.wk.copy()),
            group_wv=Var(group_heads.wv.copy()),
            log_alpha=Var(masks.log_alpha.copy()),
        )

    def export(self, config: ModelConfig):
        weights = ModelWeights(
            embedding=self.embedding.value.copy(),
            layers=[LayerWeights(**{k: v.value.copy() for k, v in layer.items()})
                    for layer in self.layers],
            final_norm=self.final_norm.value.copy(),
            lm_head=self.lm_head.value.copy(),
        )
        gh = GroupHeads(self.group_wk.value.copy(), self.group_wv.value.copy())
        masks = MaskState(self.log_alpha.value.copy())
        return weights, gh, masks


def _rmsnorm_tape(x: Var, scale: Var) -> Var:
    ms = ad.vmean(ad.mul(x, x), axis=-1, keepdims=True)
    inv = ad.pow_const(ad.add(ms, NORM_EPS), -0.5)
    return ad.mul(ad.mul(x, inv), scale)


def _rope_tape(x: Var, cos: np.ndarray, sin: np.ndarray) -> Var:
    # x: (B, H, n, d_H); cos/sin: (n, d_H/2)
    half = x.shape[-1] // 2
    x1 = ad.slice_last(x, 0, half)
    x2 = ad.slice_last(x, half, 2 * half)
    r1 = ad.sub(ad.mul(x1, cos), ad.mul(x2, sin))
    r2 = ad.add(ad.mul(x1, sin), ad.mul(x2, cos))
    return ad.concat([r1, r2], axis=-1)


def masked_forward_tape(params: StudentParams, config: ModelConfig,
                        tokens: np.ndarray, z: Var) -> Var:
    """Student forward over a batch; tokens (B, n), z (n_layers, n_heads).

    Row-major everywhere: activations are (B, n, d); per-head projections
    act via batched matmul. Effective KV weights blend originals with the
    head's group projection through z.
    """
    c = config
    b_sz, n = tokens.shape
    h, d_h = c.n_heads, c.head_dim
    d = h // params.group_wk.shape[1]
    group_of_head = np.arange(h) // d
    cos, sin = rope_tables(d_h, c.rope_base, n)
    cos_t, sin_t = cos.T, sin.T  # (n, d_H/2)
    causal = np.triu(np.full((n, n), -np.inf), k=1)

    x = ad.take0(params.embedding, tokens)  # (B, n, d)
    for li, layer in enumerate(params.layers):
        z_l = ad.reshape(ad.take0(z, np.full(1, li)), (h, 1, 1))
        # effective per-head KV projections
        gk = ad.take0(ad.reshape(params.group_wk, (-1, d_h, c.d_model)),
                      li * params.group_wk.shape[1] + group_of_head)
        gv = ad.take0(ad.reshape(params.group_wv, (-1, d_h, c.d_model)),
                      li * params.group_wv.shape[1] + group_of_head)
        one_minus = ad.sub(1.0, z_l)
        wk_eff = ad.add(ad.mul(z_l, layer["wk"]), ad.mul(one_minus, gk))
        wv_eff = ad.add(ad.mul(z_l, layer["wv"]), ad.mul(one_minus, gv))

        hn = _rmsnorm_tape(x, layer["attn_norm"])       # (B, n, d)
        hb = ad.reshape(hn, (b_sz, 1, n, c.d_model))
        q = ad.matmul(hb, ad.swapaxes(layer["wq"], -1, -2))   # (B, H, n, d_H)
        k = ad.matmul(hb, ad.swapaxes(wk_eff, -1, -2))
        v = ad.matmul(hb, ad.swapaxes(wv_eff, -1, -2))
        qr = _rope_tape(q, cos_t, sin_t)
        kr = _rope_tape(k, cos_t, sin_t)
        scores = ad.mul(ad.matmul(qr, ad.swapaxes(kr, -1, -2)), d_h ** -0.5)
        attn = ad.softmax(ad.add(scores, causal), axis=-1)    # (B, H, n, n)
        heads = ad.matmul(attn, v)                            # (B, H, n, d_H)
        proj = ad.matmul(heads, ad.swapaxes(layer["wo"], -1, -2))  # (B, H, n, d)
        x = ad.add(x, ad.vsum(proj, axis=1))
        h2 = _rmsnorm_tape(x, layer["ffn_norm"])
        gate = ad.matmul(h2, ad.swapaxes(layer["w_gate"], -1, -2))
        up = ad.matmul(h2, ad.swapaxes(layer["w_up"], -1, -2))
        x = ad.add(x, ad.matmul(ad.mul(ad.silu(gate), up),
                                ad.swapaxes(layer["w_down"], -1, -2)))
    xf = _rmsnorm_tape(x, params.final_norm)
    return ad.matmul(xf, ad.swapaxes(params.lm_head, -1, -2))  # (B, n, vocab)


def masked_forward(weights: ModelWeights, group_heads: GroupHeads,
                   config: ModelConfig, tokens, gates) -> np.ndarray:
    """Masked student logits (B, n, vocab) for an explicit gate matrix."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    params = StudentParams.from_state(weights, group_heads,
                                      MaskState(np.zeros_like(np.asarray(gates, dtype=np.float64))))
    z = Var(np.asarray(gates, dtype=np.float64))
    return masked_forward_tape(params, config, tokens, z).value


def _deterministic_gate_tape(log_alpha: Var) -> Var:
    s = ad.sigmoid(log_alpha)
    return ad.clamp(ad.add(ad.mul(s, HC_ZETA - HC_GAMMA), HC_GAMMA), 0.0, 1.0)


def total_loss_tape(params: StudentParams, config: ModelConfig,
                    tokens: np.ndarray, teacher_logits: np.ndarray,
                    target_size: float, k: int, u_noise: np.ndarray | None = None):
    """Distillation + target-size loss on the tape.

    `u_noise` gives the gate sampler's uniform draws for this step; when
    None, deterministic gates are used (post-freeze behaviour). Returns
    (total, distill_value, l0_value).
    """
    if u_noise is None:
        z = _deterministic_gate_tape(params.log_alpha)
    else:
        z = _gate_sample_tape(params.log_alpha, u_noise)
    logits = masked_forward_tape(params, config, tokens, z)
    distill = _distill_loss_tape(logits, teacher_logits, k)
    dev = ad.sub(ad.vmean(_expected_gate_tape(params.log_alpha)), target_size)
    l0 = ad.add(ad.absolute(dev), ad.mul(dev, dev))
    total = ad.add(distill, l0)
    return total, float(distill.value), float(l0.value)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class PruneResult:
    weights: ModelWeights
    group_heads: GroupHeads
    masks: MaskState
    trajectory: list = field(default_factory=list)  # (step, layer, mean det gate)
    loss_history: list = field(default_factory=list)  # (step, total, distill, l0)


def _record_gates(trajectory: list, step: int, masks_log_alpha: np.ndarray) -> None:
    gates = hard_concrete_deterministic(masks_log_alpha)
    for layer in range(gates.shape[0]):
        trajectory.append((step, layer, float(gates[layer].mean())))


def prune_train(weights: ModelWeights, group_heads: GroupHeads, masks: MaskState,
                schedule: TrainSchedule, teacher, data, config: ModelConfig,
                seed: int = 0) -> PruneResult:
    """Distill the masked student toward the teacher while driving gates to 0.

    `teacher` is a (weights, config) pair with the same architecture; `data`
    is a list of equal-length token sequences. Deterministic per seed.
    """
    teacher_weights, teacher_config = teacher
    if teacher_config != config:
        raise ValueError("teacher and student must share the model config")
    data = [np.asarray(seq, dtype=np.int64) for seq in data]
    if not data:
        raise ValueError("training data is empty")
    if len({seq.size for seq in data}) != 1:
        raise ValueError("training sequences must share one length")

    params = StudentParams.from_state(weights, group_heads, masks)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    result = PruneResult(weights=None, group_heads=None, masks=None)
    _record_gates(result.trajectory, 0, params.log_alpha.value)

    teacher_cache: dict = {}

    def teacher_logits_for(idx_batch):
        out = []
        for i in idx_batch:
            if i not in teacher_cache:
                teacher_cache[i] = forward(teacher_weights, teacher_config, data[i]).T
            out.append(teacher_cache[i])
        return np.stack(out)

    for step in range(schedule.total_steps):
        idx = rng.choice(len(data), size=schedule.batch_size,
                         replace=len(data) < schedule.batch_size)
        tokens = np.stack([data[i] for i in idx])
        t_logits = teacher_logits_for(idx)
        frozen = step >= schedule.freeze_step
        u = None if frozen else np.clip(rng.random(params.log_alpha.shape),
                                        1e-12, 1.0 - 1e-12)
        total, distill_val, l0_val = total_loss_tape(
            params, config, tokens, t_logits,
            schedule.target_size(step), schedule.distill_top_k, u)
        if not np.isfinite(total.value):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: distill={distill_val}, l0={l0_val}")
        ad.backward(total)
        lr_m = schedule.lr_at(schedule.lr_model, step)
        for var in params.model_vars():
            if var.grad is not None:
                var.value -= lr_m * var.grad
        if not frozen and params.log_alpha.grad is not None:
            params.log_alpha.value -= schedule.lr_at(schedule.lr_masks, step) \
                * params.log_alpha.grad
            np.clip(params.log_alpha.value, -schedule.gate_param_clip,
                    schedule.gate_param_clip, out=params.log_alpha.value)
        result.loss_history.append((step, float(total.value), distill_val, l0_val))
        _record_gates(result.trajectory, step + 1, params.log_alpha.value)

    result.weights, result.group_heads, result.masks = params.export(config)
    return result


def write_mask_trajectory(trajectory, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("step", "layer", "mean_gate"))
        for step, layer, gate in trajectory:
            writer.writerow((step, layer, repr(float(gate))))


def read_mask_trajectory(path):
    out = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            out.append((int(row["step"]), int(row["layer"]), float(row["mean_gate"])))
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def finalize_gqa(weights: ModelWeights, group_heads: GroupHeads, masks: MaskState,
                 plan: GroupingPlan, config: ModelConfig):
    """Force gates to zero and emit a standard GQA model.

    Original per-head KV projections are discarded; the group projections
    become the shared KV heads. Returns (gqa_weights, gqa_config, warnings).
    """
    _check_contiguous(plan)
    warnings = []
    residual = masks.deterministic_gates()
    if residual.max() > 0.01:
        hot = np.argwhere(residual > 0.01)
        warnings.append(
            f"{len(hot)} gate(s) above 0.01 at export (max "
            f"{residual.max():.4f}); first at layer/head {hot[0].tolist()}")
    gqa_config = ModelConfig(
        d_model=config.d_model, n_heads=config.n_heads, head_dim=config.head_dim,
        n_layers=config.n_layers, d_ff=config.d_ff, vocab_size=config.vocab_size,
        n_kv_heads=plan.group_count, rope_base=config.rope_base)
    new = weights.copy()
    for b, layer in enumerate(new.layers):
        layer.wk = group_heads.wk[b].copy()
        layer.wv = group_heads.wv[b].copy()
    return new, gqa_config, warnings


def distill_eval(weights: ModelWeights, group_heads: GroupHeads, masks: MaskState,
                 config: ModelConfig, teacher, data, k: int = 16,
                 gates: np.ndarray | None = None) -> float:
    """Held-out mean distillation loss of the masked student vs the teacher.

    Uses deterministic gates unless an explicit gate matrix is given.
    """
    teacher_weights, teacher_config = teacher
    if gates is None:
        gates = masks.deterministic_gates()
    losses = []
    for seq in data:
        seq = np.asarray(seq, dtype=np.int64)
        s_logits = masked_forward(weights, group_heads, config, seq[None, :], gates)
        t_logits = forward(teacher_weights, teacher_config, seq)
        losses.append(distill_loss(s_logits[0].T, t_logits, k))
    return float(np.mean(losses))

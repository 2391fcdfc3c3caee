"""Desk-scale synthetic task and teacher training.

The task is noisy pattern completion: each sequence tiles a random pattern
of length `period` and flips a fraction of positions to random symbols.
Most next tokens are therefore predictable from the token one period back,
which a small attention model can learn, giving the distillation teacher
nontrivial structure in its heads.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .model import ModelConfig, ModelWeights, random_weights
from .pruning import StudentParams, masked_forward_tape


def pattern_sequences(n_sequences: int, seq_len: int, vocab_size: int,
                      period: int = 8, noise: float = 0.1, seed: int = 0):
    """Noisy repeating-pattern sequences as a list of int lists."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sequences):
        pattern = rng.integers(0, vocab_size, size=period)
        reps = math.ceil(seq_len / period)
        seq = np.tile(pattern, reps)[:seq_len]
        flip = rng.random(seq_len) < noise
        seq[flip] = rng.integers(0, vocab_size, size=int(flip.sum()))
        out.append(seq.tolist())
    return out


def _full_params(weights: ModelWeights, config: ModelConfig) -> tuple:
    """Wrap plain MHA weights for the tape forward (gates pinned at 1)."""
    from .pruning import GroupHeads, MaskState
    gh = GroupHeads(
        wk=np.stack([l.wk.copy() for l in weights.layers])[:, : config.n_kv_heads],
        wv=np.stack([l.wv.copy() for l in weights.layers])[:, : config.n_kv_heads],
    )
    params = StudentParams.from_state(weights, gh, MaskState.initial(
        config.n_layers, config.n_heads))
    ones = Var(np.ones((config.n_layers, config.n_heads)))
    return params, ones


def cross_entropy_tape(logits: Var, targets: np.ndarray) -> Var:
    """Mean next-token cross entropy; logits (B, n, vocab), targets (B, n)."""
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.gather_last(logp, targets[..., None])
    return ad.mul(ad.vmean(picked), -1.0)


def train_teacher(config: ModelConfig, data, steps: int = 800, lr: float = 3e-3,
                  batch_size: int = 16, seed: int = 0):
    """Adam pretraining on the synthetic task (cosine decay, short warmup).

    Teacher quality is pipeline setup, not part of the conversion itself, so
    an adaptive optimizer is fine here; the pruning stage sticks to SGD.
    Returns (weights, loss_history).
    """
    weights = random_weights(config, seed=seed)
    data = [np.asarray(s, dtype=np.int64) for s in data]
    params, ones = _full_params(weights, config)
    model_vars = params.model_vars()
    m1 = [np.zeros_like(v.value) for v in model_vars]
    m2 = [np.zeros_like(v.value) for v in model_vars]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    warmup = min(50, max(1, steps // 10))
    rng = np.random.default_rng(np.random.SeedSequence(seed + 1))
    history = []
    for step in range(steps):
        idx = rng.choice(len(data), size=batch_size, replace=len(data) < batch_size)
        tokens = np.stack([data[i] for i in idx])
        logits = masked_forward_tape(params, config, tokens[:, :-1], ones)
        loss = cross_entropy_tape(logits, tokens[:, 1:])
        if not np.isfinite(loss.value):
            raise RuntimeError(f"teacher training diverged at step {step}")
        ad.backward(loss)
        if step < warmup:
            step_lr = lr * (step + 1) / warmup
        else:
            step_lr = lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (steps - warmup)))
        t = step + 1
        for var, g1, g2 in zip(model_vars, m1, m2):
            if var.grad is None:
                continue
            g1 *= beta1
            g1 += (1 - beta1) * var.grad
            g2 *= beta2
            g2 += (1 - beta2) * var.grad ** 2
            mhat = g1 / (1 - beta1 ** t)
            vhat = g2 / (1 - beta2 ** t)
            var.value -= step_lr * mhat / (np.sqrt(vhat) + eps)
        history.append(float(loss.value))
    trained, _, _ = params.export(config)
    return trained, history

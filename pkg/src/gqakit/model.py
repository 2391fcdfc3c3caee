"""Minimal decoder-only transformer (RMSNorm + RoPE + gated FFN, no biases).

Everything runs in float64 on numpy. The forward pass supports both MHA
(n_kv_heads == n_heads) and GQA (n_kv_heads == number of groups, query heads
sharing their group's KV projections). Keys are cached pre-rotation: the key
alignment transforms commute with the position rotations, so similarity
scores are identical either way and position-independent caches keep the
alignment inputs clean.

Checkpoint container: magic bytes, u32 format version, u64 header length,
a JSON header (config, rotary pairing tag, tensor names/shapes/offsets),
then raw little-endian float64 buffers in header order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

NORM_EPS = 1e-5
ROPE_PAIRING = "half"

MAGIC = b"GQKT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised for unreadable, corrupt, or inconsistent checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    head_dim: int
    n_layers: int
    d_ff: int
    vocab_size: int
    n_kv_heads: int
    rope_base: float = 10000.0

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.head_dim, self.n_layers,
               self.d_ff, self.vocab_size, self.n_kv_heads) < 1:
            raise ValueError("all config dimensions must be positive")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(
                f"d_model ({self.d_model}) != n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even (rotary pairs)")
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError("n_heads must be divisible by n_kv_heads")

    @property
    def heads_per_kv(self) -> int:
        return self.n_heads // self.n_kv_heads


@dataclass
class LayerWeights:
    wq: np.ndarray  # (n_heads, head_dim, d_model)
    wk: np.ndarray  # (n_kv_heads, head_dim, d_model)
    wv: np.ndarray  # (n_kv_heads, head_dim, d_model)
    wo: np.ndarray  # (n_heads, d_model, head_dim)
    attn_norm: np.ndarray  # (d_model,)
    ffn_norm: np.ndarray   # (d_model,)
    w_gate: np.ndarray  # (d_ff, d_model)
    w_up: np.ndarray    # (d_ff, d_model)
    w_down: np.ndarray  # (d_model, d_ff)

    def copy(self) -> "LayerWeights":
        return LayerWeights(**{k: v.copy() for k, v in self.__dict__.items()})


@dataclass
class ModelWeights:
    embedding: np.ndarray  # (vocab_size, d_model)
    layers: list = field(default_factory=list)
    final_norm: np.ndarray = None  # (d_model,)
    lm_head: np.ndarray = None     # (vocab_size, d_model)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            embedding=self.embedding.copy(),
            layers=[l.copy() for l in self.layers],
            final_norm=self.final_norm.copy(),
            lm_head=self.lm_head.copy(),
        )


def validate_weights(weights: ModelWeights, config: ModelConfig) -> None:
    c = config
    expect = {
        "embedding": (c.vocab_size, c.d_model),
        "final_norm": (c.d_model,),
        "lm_head": (c.vocab_size, c.d_model),
    }
    for name, shape in expect.items():
        arr = getattr(weights, name)
        if arr.shape != shape:
            raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    if len(weights.layers) != c.n_layers:
        raise ValueError(f"expected {c.n_layers} layers, got {len(weights.layers)}")
    per_layer = {
        "wq": (c.n_heads, c.head_dim, c.d_model),
        "wk": (c.n_kv_heads, c.head_dim, c.d_model),
        "wv": (c.n_kv_heads, c.head_dim, c.d_model),
        "wo": (c.n_heads, c.d_model, c.head_dim),
        "attn_norm": (c.d_model,),
        "ffn_norm": (c.d_model,),
        "w_gate": (c.d_ff, c.d_model),
        "w_up": (c.d_ff, c.d_model),
        "w_down": (c.d_model, c.d_ff),
    }
    for i, layer in enumerate(weights.layers):
        for name, shape in per_layer.items():
            arr = getattr(layer, name)
            if arr.shape != shape:
                raise ValueError(
                    f"layers[{i}].{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"layers[{i}].{name} contains non-finite values")


def random_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Gaussian init scaled so logits stay O(1) on random tokens."""
    rng = np.random.default_rng(seed)
    c = config
    proj = c.d_model ** -0.5
    ff = c.d_ff ** -0.5

    def layer():
        return LayerWeights(
            wq=rng.normal(0, proj, (c.n_heads, c.head_dim, c.d_model)),
            wk=rng.normal(0, proj, (c.n_kv_heads, c.head_dim, c.d_model)),
            wv=rng.normal(0, proj, (c.n_kv_heads, c.head_dim, c.d_model)),
            wo=rng.normal(0, c.head_dim ** -0.5, (c.n_heads, c.d_model, c.head_dim)),
            attn_norm=np.ones(c.d_model),
            ffn_norm=np.ones(c.d_model),
            w_gate=rng.normal(0, proj, (c.d_ff, c.d_model)),
            w_up=rng.normal(0, proj, (c.d_ff, c.d_model)),
            w_down=rng.normal(0, ff, (c.d_model, c.d_ff)),
        )

    return ModelWeights(
        embedding=rng.normal(0, 1.0, (c.vocab_size, c.d_model)),
        layers=[layer() for _ in range(c.n_layers)],
        final_norm=np.ones(c.d_model),
        lm_head=rng.normal(0, proj, (c.vocab_size, c.d_model)),
    )


# ---------------------------------------------------------------------------
# rotary position rotations
# ---------------------------------------------------------------------------

def rope_tables(head_dim: int, rope_base: float, n_pos: int):
    """cos/sin tables of shape (head_dim/2, n_pos) for positions 0..n_pos-1."""
    half = head_dim // 2
    inv_freq = rope_base ** (-np.arange(half) / half)
    angles = np.outer(inv_freq, np.arange(n_pos, dtype=np.float64))
    return np.cos(angles), np.sin(angles)


def rope_rotation_matrix(head_dim: int, rope_base: float, position: float) -> np.ndarray:
    """Dense rotation matrix for one position (tests and audit only)."""
    half = head_dim // 2
    inv_freq = rope_base ** (-np.arange(half) / half)
    from .linalg import BlockRotation
    return BlockRotation(inv_freq * position, ROPE_PAIRING).matrix()


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate (..., head_dim, n) per position using half-split pairing."""
    half = x.shape[-2] // 2
    x1, x2 = x[..., :half, :], x[..., half:, :]
    return np.concatenate((x1 * cos - x2 * sin, x1 * sin + x2 * cos), axis=-2)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _rmsnorm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    # x: (d, n), normalized over the feature axis
    rms = np.sqrt((x * x).mean(axis=0, keepdims=True) + NORM_EPS)
    return (x / rms) * scale[:, None]


def _check_tokens(tokens, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ValueError(
            f"token id out of range [0, {vocab_size}): "
            f"min {tokens.min()}, max {tokens.max()}")
    return tokens


def forward(weights: ModelWeights, config: ModelConfig, tokens, capture_kv=None) -> np.ndarray:
    """Causal forward pass; returns float64 logits of shape (vocab, n).

    If `capture_kv` is a list it receives, per layer, the pre-rotation
    (keys, values) arrays of shape (n_kv_heads, head_dim, n).
    """
    tokens = _check_tokens(tokens, config.vocab_size)
    n = tokens.size
    c = config
    rep = c.heads_per_kv
    cos, sin = rope_tables(c.head_dim, c.rope_base, n)
    causal = np.triu(np.full((n, n), -np.inf), k=1)

    x = weights.embedding[tokens].T  # (d, n)
    for layer in weights.layers:
        h = _rmsnorm(x, layer.attn_norm)
        q = layer.wq @ h                     # (H, d_H, n)
        k = layer.wk @ h                     # (n_kv, d_H, n)
        v = layer.wv @ h                     # (n_kv, d_H, n)
        if capture_kv is not None:
            capture_kv.append((k.copy(), v.copy()))
        qr = _apply_rope(q, cos, sin)
        kr = _apply_rope(k, cos, sin)
        if rep > 1:
            kr = np.repeat(kr, rep, axis=0)
            v = np.repeat(v, rep, axis=0)
        scores = qr.swapaxes(1, 2) @ kr / np.sqrt(c.head_dim)  # (H, n, n)
        scores = scores + causal
        scores -= scores.max(axis=2, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=2, keepdims=True)
        head_out = v @ attn.swapaxes(1, 2)   # (H, d_H, n)
        x = x + (layer.wo @ head_out).sum(axis=0)
        h2 = _rmsnorm(x, layer.ffn_norm)
        gate = layer.w_gate @ h2
        act = gate / (1.0 + np.exp(-gate)) * (layer.w_up @ h2)
        x = x + layer.w_down @ act
    return weights.lm_head @ _rmsnorm(x, weights.final_norm)


def forward_headsum_reference(weights: ModelWeights, config: ModelConfig, tokens) -> np.ndarray:
    """Independent slow path: explicit python loops, attention as a sum of
    per-head contributions. Used to cross-check `forward`."""
    tokens = _check_tokens(tokens, config.vocab_size)
    n = tokens.size
    c = config
    cos, sin = rope_tables(c.head_dim, c.rope_base, n)

    x = weights.embedding[tokens].T
    for layer in weights.layers:
        h = _rmsnorm(x, layer.attn_norm)
        attn_out = np.zeros_like(x)
        for i in range(c.n_heads):
            g = i // c.heads_per_kv
            q = _apply_rope(layer.wq[i] @ h, cos, sin)
            k = _apply_rope(layer.wk[g] @ h, cos, sin)
            v = layer.wv[g] @ h
            head = np.zeros((c.head_dim, n))
            for s in range(n):
                logits = k[:, : s + 1].T @ q[:, s] / np.sqrt(c.head_dim)
                logits -= logits.max()
                p = np.exp(logits)
                p /= p.sum()
                head[:, s] = v[:, : s + 1] @ p
            attn_out += layer.wo[i] @ head
        x = x + attn_out
        h2 = _rmsnorm(x, layer.ffn_norm)
        gate = layer.w_gate @ h2
        act = gate / (1.0 + np.exp(-gate)) * (layer.w_up @ h2)
        x = x + layer.w_down @ act
    return weights.lm_head @ _rmsnorm(x, weights.final_norm)


# ---------------------------------------------------------------------------
# KV cache collection
# ---------------------------------------------------------------------------

@dataclass
class KVCacheSet:
    """Per-layer, per-head key/value caches (pre-rotation keys).

    keys[layer] and values[layer] are (n_kv_heads, head_dim, n_tokens);
    `positions` holds each token's position within its source sequence.
    """

    keys: list
    values: list
    positions: np.ndarray
    head_dim: int

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def n_heads(self) -> int:
        return self.keys[0].shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.positions.size)

    def permute_heads(self, permutations) -> "KVCacheSet":
        """Reorder head axes; permutations[layer][new_index] = old_index."""
        keys = [k[np.asarray(p)] for k, p in zip(self.keys, permutations)]
        values = [v[np.asarray(p)] for v, p in zip(self.values, permutations)]
        return KVCacheSet(keys, values, self.positions.copy(), self.head_dim)


def collect_kv(weights: ModelWeights, config: ModelConfig, sequences) -> KVCacheSet:
    """Run the model over calibration sequences and concatenate the per-head
    pre-rotation key/value vectors of every token."""
    sequences = list(sequences)
    if not sequences:
        raise ValueError("calibration set is empty")
    per_layer_k = [[] for _ in range(config.n_layers)]
    per_layer_v = [[] for _ in range(config.n_layers)]
    positions = []
    for seq in sequences:
        captured = []
        forward(weights, config, seq, capture_kv=captured)
        for b, (k, v) in enumerate(captured):
            per_layer_k[b].append(k)
            per_layer_v[b].append(v)
        positions.append(np.arange(len(seq)))
    return KVCacheSet(
        keys=[np.concatenate(ks, axis=2) for ks in per_layer_k],
        values=[np.concatenate(vs, axis=2) for vs in per_layer_v],
        positions=np.concatenate(positions),
        head_dim=config.head_dim,
    )


# ---------------------------------------------------------------------------
# named-tensor container
# ---------------------------------------------------------------------------

def _write_container(path, kind: str, meta: dict, tensors: list) -> None:
    entries = []
    offset = 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": "<f8", "offset": offset})
        offset += arr.nbytes
    header = {"kind": kind, "meta": meta, "tensors": entries}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(FORMAT_VERSION.to_bytes(4, "little"))
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def _read_container(path, expect_kind: str | None = None):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a gqakit container)")
    version = int.from_bytes(raw[4:8], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    hlen = int.from_bytes(raw[8:16], "little")
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    for key in ("kind", "meta", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing field {key!r}")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(
            f"{path}: container kind {header['kind']!r}, expected {expect_kind!r}")
    data = raw[16 + hlen:]
    tensors = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, end = ent["offset"], ent["offset"] + 8 * count
        if ent.get("dtype") != "<f8":
            raise CheckpointError(f"{path}: tensor {ent['name']!r} has unsupported dtype")
        if end > len(data):
            raise CheckpointError(f"{path}: truncated data for tensor {ent['name']!r}")
        tensors[ent["name"]] = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).copy()
    return header["meta"], tensors


def _weight_tensors(weights: ModelWeights):
    out = [("embedding", weights.embedding)]
    for i, layer in enumerate(weights.layers):
        for name in ("wq", "wk", "wv", "wo", "attn_norm", "ffn_norm",
                     "w_gate", "w_up", "w_down"):
            out.append((f"layers.{i}.{name}", getattr(layer, name)))
    out.append(("final_norm", weights.final_norm))
    out.append(("lm_head", weights.lm_head))
    return out


def save_checkpoint(weights: ModelWeights, config: ModelConfig, path) -> None:
    validate_weights(weights, config)
    meta = {"config": asdict(config), "rope_pairing": ROPE_PAIRING}
    _write_container(path, "model", meta, _weight_tensors(weights))


def load_checkpoint(path):
    meta, tensors = _read_container(path, expect_kind="model")
    try:
        config = ModelConfig(**meta["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid model config in header ({e})") from e
    if meta.get("rope_pairing") != ROPE_PAIRING:
        raise CheckpointError(
            f"{path}: rotary pairing {meta.get('rope_pairing')!r} not supported")
    try:
        layers = []
        for i in range(config.n_layers):
            layers.append(LayerWeights(
                **{name: tensors[f"layers.{i}.{name}"]
                   for name in ("wq", "wk", "wv", "wo", "attn_norm", "ffn_norm",
                                "w_gate", "w_up", "w_down")}))
        weights = ModelWeights(
            embedding=tensors["embedding"],
            layers=layers,
            final_norm=tensors["final_norm"],
            lm_head=tensors["lm_head"],
        )
    except KeyError as e:
        raise CheckpointError(f"{path}: missing tensor {e}") from e
    try:
        validate_weights(weights, config)
    except ValueError as e:
        raise CheckpointError(f"{path}: shape mismatch ({e})") from e
    return weights, config


def save_kv_cache(cache: KVCacheSet, path) -> None:
    meta = {
        "n_layers": cache.n_layers,
        "n_heads": cache.n_heads,
        "head_dim": cache.head_dim,
        "n_tokens": cache.n_tokens,
    }
    tensors = [("positions", cache.positions.astype(np.float64))]
    for b in range(cache.n_layers):
        tensors.append((f"layers.{b}.k", cache.keys[b]))
        tensors.append((f"layers.{b}.v", cache.values[b]))
    _write_container(path, "kvcache", meta, tensors)


def load_kv_cache(path) -> KVCacheSet:
    meta, tensors = _read_container(path, expect_kind="kvcache")
    try:
        keys = [tensors[f"layers.{b}.k"] for b in range(meta["n_layers"])]
        values = [tensors[f"layers.{b}.v"] for b in range(meta["n_layers"])]
        positions = tensors["positions"].astype(np.int64)
    except KeyError as e:
        raise CheckpointError(f"{path}: missing tensor {e}") from e
    return KVCacheSet(keys, values, positions, int(meta["head_dim"]))


# ---------------------------------------------------------------------------
# calibration token files: one sequence per line, space-separated ids
# ---------------------------------------------------------------------------

def read_token_file(path) -> list:
    sequences = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                ids = [int(tok) for tok in line.split()]
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: not an integer token id ({e})") from e
            if any(t < 0 for t in ids):
                raise ValueError(f"{path}:{lineno}: negative token id")
            sequences.append(ids)
    return sequences


def write_token_file(sequences, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            f.write(" ".join(str(int(t)) for t in seq) + "\n")

"""Minimal decoder-only transformer driven one slot at a time.

Pre-norm blocks, no biases, SiLU feed-forward, RMS normalization, full
multi-head attention.  The forward pass takes an externally supplied
decode layout that fixes the slot's absolute position, thought index, and
the ordered set of cache segments it may attend over; attention is
computed only over those segments, scaled by 1/sqrt(d_k).

All parameters, cache entries, and activations are 32-bit floats.
Attention for a slot is reduced in a fixed order: visible segments in
layout order, stored slots in write order, the slot itself last.  Batched
and per-path decodes therefore reproduce each other exactly.

Weight file format ("PTW1", little-endian):
  magic (4 bytes), then the config as eight uint32 values in order
  (n_layers, d_model, n_heads, d_k, d_ff, vocab_size, rope_base,
  max_position), then float32 tensors row-major in this order:
  embedding [vocab, d_model]; per layer: attn_norm [d_model],
  w_q, w_k, w_v, w_o [d_model, d_model], ffn_norm [d_model],
  w_ff1 [d_model, d_ff], w_ff2 [d_ff, d_model]; final_norm [d_model];
  head [d_model, vocab].
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CacheConsistencyError,
    ConfigError,
    DataError,
    LifecycleError,
    PositionOverflowError,
)
from .kvcache import PagedKVCache, SlotAddress
from .positional import (
    ANSWER,
    PROMPT,
    PositionAssignment,
    Rope,
    ThoughtEmbeddingTable,
    assign_position,
    is_path,
    path_index,
    path_key,
    rope_for,
)

WEIGHT_MAGIC = b"PTW1"

NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_k: int
    d_ff: int
    vocab_size: int
    rope_base: float = 10000.0
    max_position: int = 4096

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.n_heads, self.d_k, self.d_ff) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.d_model != self.n_heads * self.d_k:
            raise ConfigError(
                f"d_model {self.d_model} != n_heads {self.n_heads} * d_k {self.d_k}"
            )
        if self.d_k % 2 != 0:
            raise ConfigError(f"d_k must be even for rotary pairs, got {self.d_k}")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")
        if self.max_position < 1:
            raise ConfigError("max_position must be positive")

    def rope(self) -> Rope:
        return rope_for(self.d_k, self.rope_base)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ffn_norm: np.ndarray
    w_ff1: np.ndarray
    w_ff2: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    head: np.ndarray

    def validate(self) -> None:
        cfg = self.config
        d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        expected = {
            "embedding": (self.embedding, (v, d)),
            "final_norm": (self.final_norm, (d,)),
            "head": (self.head, (d, v)),
        }
        if len(self.layers) != cfg.n_layers:
            raise ConfigError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        for li, lw in enumerate(self.layers):
            expected[f"layer{li}.attn_norm"] = (lw.attn_norm, (d,))
            expected[f"layer{li}.w_q"] = (lw.w_q, (d, d))
            expected[f"layer{li}.w_k"] = (lw.w_k, (d, d))
            expected[f"layer{li}.w_v"] = (lw.w_v, (d, d))
            expected[f"layer{li}.w_o"] = (lw.w_o, (d, d))
            expected[f"layer{li}.ffn_norm"] = (lw.ffn_norm, (d,))
            expected[f"layer{li}.w_ff1"] = (lw.w_ff1, (d, f))
            expected[f"layer{li}.w_ff2"] = (lw.w_ff2, (f, d))
        for name, (tensor, shape) in expected.items():
            if tensor.shape != shape:
                raise ConfigError(f"{name} has shape {tensor.shape}, expected {shape}")
            if not np.all(np.isfinite(tensor)):
                raise ConfigError(f"{name} contains non-finite entries")

    def tensors(self):
        """All tensors in the serialized file order."""
        yield self.embedding
        for lw in self.layers:
            yield lw.attn_norm
            yield lw.w_q
            yield lw.w_k
            yield lw.w_v
            yield lw.w_o
            yield lw.ffn_norm
            yield lw.w_ff1
            yield lw.w_ff2
        yield self.final_norm
        yield self.head


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Zero-mean gaussian matrices at scale 1/sqrt(d_model); unit norm gains."""
    rng = np.random.default_rng(seed)
    scale = config.d_model**-0.5
    d, f = config.d_model, config.d_ff

    def draw(*shape):
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    layers = [
        LayerWeights(
            attn_norm=np.ones(d, dtype=np.float32),
            w_q=draw(d, d),
            w_k=draw(d, d),
            w_v=draw(d, d),
            w_o=draw(d, d),
            ffn_norm=np.ones(d, dtype=np.float32),
            w_ff1=draw(d, f),
            w_ff2=draw(f, d),
        )
        for _ in range(config.n_layers)
    ]
    weights = ModelWeights(
        config=config,
        embedding=draw(config.vocab_size, d),
        layers=layers,
        final_norm=np.ones(d, dtype=np.float32),
        head=draw(d, config.vocab_size),
    )
    weights.validate()
    return weights


def save_weights(weights: ModelWeights, path: str) -> None:
    cfg = weights.config
    if cfg.rope_base != int(cfg.rope_base):
        raise ConfigError("weight files store rope_base as an integer")
    header = struct.pack(
        "<8I",
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_k,
        cfg.d_ff,
        cfg.vocab_size,
        int(cfg.rope_base),
        cfg.max_position,
    )
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(header)
        for tensor in weights.tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes(order="C"))


def load_weights(path: str) -> ModelWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHT_MAGIC:
        raise ConfigError(f"bad weight-file magic in {path!r}")
    fields = struct.unpack("<8I", blob[4:36])
    config = ModelConfig(
        n_layers=fields[0],
        d_model=fields[1],
        n_heads=fields[2],
        d_k=fields[3],
        d_ff=fields[4],
        vocab_size=fields[5],
        rope_base=float(fields[6]),
        max_position=fields[7],
    )
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes = [(v, d)]
    for _ in range(config.n_layers):
        shapes += [(d,), (d, d), (d, d), (d, d), (d, d), (d,), (d, f), (f, d)]
    shapes += [(d,), (d, v)]
    expected_floats = sum(int(np.prod(s)) for s in shapes)
    if len(blob) != 36 + 4 * expected_floats:
        raise ConfigError(
            f"weight file length {len(blob)} != expected {36 + 4 * expected_floats}"
        )
    flat = np.frombuffer(blob[36:], dtype="<f4")
    tensors = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        tensors.append(flat[offset : offset + count].reshape(shape).copy())
        offset += count
    it = iter(tensors)
    embedding = next(it)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                attn_norm=next(it),
                w_q=next(it),
                w_k=next(it),
                w_v=next(it),
                w_o=next(it),
                ffn_norm=next(it),
                w_ff1=next(it),
                w_ff2=next(it),
            )
        )
    weights = ModelWeights(
        config=config,
        embedding=embedding,
        layers=layers,
        final_norm=next(it),
        head=next(it),
    )
    weights.validate()
    return weights


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(np.square(x)) + NORM_EPS)
    return (x * scale * gain).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    # numerically stable: exp of a non-positive argument on both branches
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    e = np.exp(shifted)
    return e / np.sum(e)


def attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray, d_k: int) -> np.ndarray:
    """Per-head attention over a visible set.

    q: [n_heads, d_k]; keys/values: [n_vis, n_heads, d_k].
    Returns [n_heads, d_k].  A single-entry visible set reduces to that
    entry's value row exactly (softmax over one element is 1).
    """
    scores = np.einsum("nhd,hd->hn", keys, q) / np.sqrt(np.float32(d_k))
    out = np.empty_like(q)
    for h in range(q.shape[0]):
        out[h] = softmax(scores[h]) @ values[:, h, :]
    return out


REASONING = "reasoning"
SUMMARIZATION = "summarization"
FLAT = "flat"


@dataclass
class DecodeLayout:
    """Resolves a slot to its position, thought index, and visible segments.

    stage "reasoning": path slots see the prompt plus their own path;
    stage "summarization": answer slots see the prompt, every path, and the
    answer prefix; stage "flat" is a single causal segment with explicit
    per-slot positions (used by the re-prefill baseline).
    """

    stage: str
    assignment: PositionAssignment | None = None
    thought_labels: tuple[int, ...] = ()
    expected_lengths: dict[str, int] = field(default_factory=dict)
    flat_positions: tuple[int, ...] = ()

    def position(self, slot: SlotAddress) -> int:
        if self.stage == FLAT:
            return self.flat_positions[slot.index]
        return assign_position(self.assignment, slot.segment, slot.index + 1)

    def thought_index(self, segment: str) -> int:
        if self.stage == FLAT or segment in (PROMPT, ANSWER):
            return 0
        return self.thought_labels[path_index(segment)]

    def visible_segments(self, segment: str) -> tuple[str, ...]:
        if self.stage == FLAT:
            return (segment,)
        if self.stage == REASONING:
            if segment == PROMPT:
                return (PROMPT,)
            if is_path(segment):
                return (PROMPT, segment)
            raise LifecycleError("answer slots cannot be decoded during reasoning")
        if self.stage == SUMMARIZATION:
            if segment == ANSWER:
                paths = tuple(path_key(i) for i in range(len(self.thought_labels)))
                return (PROMPT,) + paths + (ANSWER,)
            raise LifecycleError("only answer slots are decoded during summarization")
        raise LifecycleError(f"unknown stage {self.stage!r}")


def forward_step(
    weights: ModelWeights,
    table: ThoughtEmbeddingTable,
    cache: PagedKVCache,
    layout: DecodeLayout,
    token: int,
    slot: SlotAddress,
) -> np.ndarray:
    """Decode one token at ``slot``: returns next-token logits.

    Appends the slot's augmented k/v stacks to its segment table, then
    attends over the layout's visible segments (stored slots first, this
    slot last).
    """
    cfg = weights.config
    if not 0 <= token < cfg.vocab_size:
        raise DataError(f"token id {token} outside vocab of size {cfg.vocab_size}")
    if slot.index != cache.length(slot.segment):
        raise CacheConsistencyError(
            f"slot {slot} does not extend segment (filled={cache.length(slot.segment)})"
        )
    position = layout.position(slot)
    if position > cfg.max_position:
        raise PositionOverflowError(
            f"position {position} exceeds max_position {cfg.max_position}"
        )
    visible = layout.visible_segments(slot.segment)
    for seg in visible:
        if seg == slot.segment:
            continue
        want = layout.expected_lengths.get(seg)
        if want is not None and cache.length(seg) != want:
            raise CacheConsistencyError(
                f"visible segment {seg!r} holds {cache.length(seg)} slots, expected {want}"
            )
    j = layout.thought_index(slot.segment)
    rope = cfg.rope()

    x = weights.embedding[token].copy()
    k_stack = np.empty((cfg.n_layers, cfg.n_heads, cfg.d_k), dtype=np.float32)
    v_stack = np.empty_like(k_stack)
    prior = [seg for seg in visible if seg != slot.segment] + [slot.segment]
    for li, lw in enumerate(weights.layers):
        u = rms_norm(x, lw.attn_norm)
        q = (u @ lw.w_q).reshape(cfg.n_heads, cfg.d_k)
        k = (u @ lw.w_k).reshape(cfg.n_heads, cfg.d_k)
        v = (u @ lw.w_v).reshape(cfg.n_heads, cfg.d_k)
        thought = table.layer_row(j, li)
        k_aug = rope.rotate(k + thought, position)
        v_aug = v + thought
        k_stack[li] = k_aug
        v_stack[li] = v_aug
        q_rot = rope.rotate(q, position)

        keys, values, _ = cache.gather(prior, li)
        keys = np.concatenate([keys, k_aug[None]], axis=0)
        values = np.concatenate([values, v_aug[None]], axis=0)
        attn = attend(q_rot, keys, values, cfg.d_k)
        x = x + attn.reshape(cfg.d_model) @ lw.w_o
        u2 = rms_norm(x, lw.ffn_norm)
        x = x + silu(u2 @ lw.w_ff1) @ lw.w_ff2

    cache.append(slot.segment, k_stack, v_stack, position, j)
    logits = rms_norm(x, weights.final_norm) @ weights.head
    if not np.all(np.isfinite(logits)):
        raise DataError("non-finite logits produced")
    return logits.astype(np.float32)


def prefill(
    weights: ModelWeights,
    table: ThoughtEmbeddingTable,
    cache: PagedKVCache,
    layout: DecodeLayout,
    tokens,
) -> np.ndarray:
    """Feed the prompt tokens in order; returns the last slot's logits."""
    tokens = list(tokens)
    if not tokens:
        raise DataError("prefill of an empty sequence yields no logits")
    start = cache.length(PROMPT)
    logits = None
    for offset, token in enumerate(tokens):
        logits = forward_step(
            weights, table, cache, layout, token, SlotAddress(PROMPT, start + offset)
        )
    return logits

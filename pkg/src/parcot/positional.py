"""Rotary positions, per-path thought embeddings, and position assignment.

Keys are stored with the path's thought embedding folded in before the
rotation (k_aug = R_t(k + T[j])) and values with it added directly
(v_aug = v + T[j]), so cached entries are valid for both the reasoning
and the summarization phase without reprocessing.

Local indices ``t`` are 1-based within a segment; the first prompt token
sits at absolute position 1.
"""

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, LayoutError

PROMPT = "prompt"
ANSWER = "answer"

SHARED = "shared"
FLATTENED = "flattened"


def path_key(i: int) -> str:
    """Segment key for the i-th reasoning path (0-based)."""
    return f"path:{i}"


def path_index(segment: str) -> int:
    if not segment.startswith("path:"):
        raise LayoutError(f"not a path segment: {segment!r}")
    return int(segment.split(":", 1)[1])


def is_path(segment: str) -> bool:
    return segment.startswith("path:")


class Rope:
    """Rotary rotation R_t over even-dimensional head vectors.

    R_t is block-diagonal in 2x2 rotations; pair d rotates by angle
    t * base^(-2d/d_k).  R_0 is the identity and (R_n)^T R_m = R_{m-n}.
    """

    def __init__(self, d_k: int, base: float):
        if d_k <= 0 or d_k % 2 != 0:
            raise ConfigError(f"rope dimension must be positive and even, got {d_k}")
        if base <= 0:
            raise ConfigError(f"rope base must be positive, got {base}")
        self.d_k = d_k
        self.base = float(base)
        self._inv_freq = self.base ** (-np.arange(0, d_k, 2, dtype=np.float64) / d_k)
        self._trig: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _cos_sin(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        cached = self._trig.get(t)
        if cached is None:
            angles = t * self._inv_freq
            cached = (np.cos(angles), np.sin(angles))
            self._trig[t] = cached
        return cached

    def rotate(self, v: np.ndarray, t: int) -> np.ndarray:
        """Apply R_t to the last axis of ``v`` (shape [..., d_k])."""
        v = np.asarray(v)
        if v.shape[-1] != self.d_k:
            raise ConfigError(
                f"vector dim {v.shape[-1]} does not match rope dim {self.d_k}"
            )
        cos, sin = self._cos_sin(int(t))
        even = v[..., 0::2]
        odd = v[..., 1::2]
        out = np.empty_like(v, dtype=v.dtype)
        out[..., 0::2] = (even * cos - odd * sin).astype(v.dtype, copy=False)
        out[..., 1::2] = (even * sin + odd * cos).astype(v.dtype, copy=False)
        return out

    def matrix(self, t: int) -> np.ndarray:
        """Dense float64 R_t, for algebra checks."""
        cos, sin = self._cos_sin(int(t))
        m = np.zeros((self.d_k, self.d_k), dtype=np.float64)
        for d in range(self.d_k // 2):
            m[2 * d, 2 * d] = cos[d]
            m[2 * d, 2 * d + 1] = -sin[d]
            m[2 * d + 1, 2 * d] = sin[d]
            m[2 * d + 1, 2 * d + 1] = cos[d]
        return m


@lru_cache(maxsize=8)
def rope_for(d_k: int, base: float) -> Rope:
    return Rope(d_k, base)


def apply_rope(v: np.ndarray, t: int, rope: Rope) -> np.ndarray:
    """R_t v; norm-preserving rotation of a head vector."""
    return rope.rotate(v, t)


THOUGHT_MAGIC = b"PTT1"


class ThoughtEmbeddingTable:
    """Per-segment vectors T[j], j = 0..p_max, one per (layer, head).

    Row 0 is reserved for prompt and summary tokens.  Rows are initialized
    identically across layers (one draw per row, tiled), but a loaded file
    may carry distinct per-layer values.
    """

    def __init__(self, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 4:
            raise ConfigError("thought table must have shape [rows, layers, heads, d_k]")
        if not np.all(np.isfinite(vectors)):
            raise ConfigError("thought table contains non-finite entries")
        rows = vectors.reshape(vectors.shape[0], -1)
        for a in range(len(rows)):
            for b in range(a + 1, len(rows)):
                if np.array_equal(rows[a], rows[b]):
                    raise ConfigError(f"thought rows {a} and {b} are identical")
        self.vectors = vectors

    @property
    def p_max(self) -> int:
        return self.vectors.shape[0] - 1

    def layer_row(self, j: int, layer: int) -> np.ndarray:
        """T[j] at one layer, shape [n_heads, d_k]."""
        if not 0 <= j <= self.p_max:
            raise IndexError(f"thought index {j} out of range [0, {self.p_max}]")
        return self.vectors[j, layer]


def init_thought_table(
    p_max: int, n_layers: int, n_heads: int, d_k: int, seed: int, scale: float = 0.02
) -> ThoughtEmbeddingTable:
    rng = np.random.default_rng(seed)
    per_row = rng.standard_normal((p_max + 1, n_heads, d_k)).astype(np.float32) * scale
    tiled = np.repeat(per_row[:, None, :, :], n_layers, axis=1)
    return ThoughtEmbeddingTable(tiled)


def zero_thought_table(p_max: int, n_layers: int, n_heads: int, d_k: int) -> ThoughtEmbeddingTable:
    """All-zero table for ablations; skips the row-distinctness check."""
    vectors = np.zeros((p_max + 1, n_layers, n_heads, d_k), dtype=np.float32)
    table = ThoughtEmbeddingTable.__new__(ThoughtEmbeddingTable)
    table.vectors = vectors
    return table


def save_thought_table(table: ThoughtEmbeddingTable, path: str) -> None:
    rows, n_layers, n_heads, d_k = table.vectors.shape
    with open(path, "wb") as fh:
        fh.write(THOUGHT_MAGIC)
        fh.write(struct.pack("<4I", rows, n_layers, n_heads, d_k))
        fh.write(table.vectors.astype("<f4").tobytes(order="C"))


def load_thought_table(path: str) -> ThoughtEmbeddingTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != THOUGHT_MAGIC:
        raise ConfigError(f"bad thought-table magic in {path!r}")
    rows, n_layers, n_heads, d_k = struct.unpack("<4I", blob[4:20])
    expected = 20 + rows * n_layers * n_heads * d_k * 4
    if len(blob) != expected:
        raise ConfigError(
            f"thought-table file length {len(blob)} != expected {expected}"
        )
    vectors = np.frombuffer(blob[20:], dtype="<f4").reshape(rows, n_layers, n_heads, d_k)
    return ThoughtEmbeddingTable(vectors.copy())


def augment_kv(
    k: np.ndarray,
    v: np.ndarray,
    j: int,
    t: int,
    table: ThoughtEmbeddingTable,
    rope: Rope,
    layer: int = 0,
    head: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Fold T[j] into a key/value pair and rotate the key to position t.

    Accepts per-head vectors of shape [d_k] (``head`` selects the embedding)
    or full head stacks of shape [n_heads, d_k].
    """
    row = table.layer_row(j, layer)
    thought = row[head] if np.asarray(k).ndim == 1 else row
    k_aug = rope.rotate(np.asarray(k) + thought, t)
    v_aug = np.asarray(v) + thought
    return k_aug, v_aug


def decompose_score(
    q: np.ndarray, n: int, k: np.ndarray, m: int, thought: np.ndarray, rope: Rope
) -> tuple[float, float]:
    """Split the rotary attention score into its two additive terms.

    Returns (content_content, content_segment):
      content_content = q . R_{m-n} k
      content_segment = q . R_{m-n} thought
    Their sum equals (R_n q) . R_m (k + thought).
    """
    q64 = np.asarray(q, dtype=np.float64)
    k64 = np.asarray(k, dtype=np.float64)
    t64 = np.asarray(thought, dtype=np.float64)
    if not (q64.shape == k64.shape == t64.shape) or q64.shape[-1] != rope.d_k:
        raise ConfigError("decompose_score operands must all have shape [d_k]")
    rel = m - n
    cc = float(q64 @ rope.rotate(k64, rel))
    cs = float(q64 @ rope.rotate(t64, rel))
    return cc, cs


@dataclass(frozen=True)
class PositionAssignment:
    """Maps (segment, 1-based local index t) to an absolute position.

    shared scheme:
        prompt t -> t
        path i, t -> l_x + t                    (identical across paths)
        answer t -> l_x + reasoning_len + t
    flattened scheme (paths indexed from 0):
        prompt t -> t
        path i, t -> l_x + i * l_max + t
        answer t -> l_x + (num_paths - 1) * l_max + reasoning_len + t

    ``reasoning_len`` is the uniform per-path written length at the stage
    switch; it is only required once answer positions are needed.
    """

    scheme: str
    l_x: int
    l_max: int
    num_paths: int = 1
    reasoning_len: int | None = None

    def __post_init__(self):
        if self.scheme not in (SHARED, FLATTENED):
            raise LayoutError(f"unknown position scheme {self.scheme!r}")
        if self.l_x < 0 or self.l_max < 0 or self.num_paths < 1:
            raise LayoutError("position assignment dimensions must be non-negative")


def assign_position(assignment: PositionAssignment, segment: str, t: int) -> int:
    """Absolute position of the t-th token (1-based) of a segment."""
    if t < 1:
        raise LayoutError(f"local index must be >= 1, got {t}")
    if segment == PROMPT:
        if t > assignment.l_x:
            raise LayoutError(f"prompt index {t} exceeds prompt length {assignment.l_x}")
        return t
    if segment == ANSWER:
        if assignment.reasoning_len is None:
            raise LayoutError("answer positions need the reasoning length")
        base = assignment.l_x + assignment.reasoning_len
        if assignment.scheme == FLATTENED:
            base += (assignment.num_paths - 1) * assignment.l_max
        return base + t
    i = path_index(segment)
    if t > assignment.l_max:
        raise LayoutError(f"path index {t} exceeds per-path cap {assignment.l_max}")
    if assignment.scheme == SHARED:
        return assignment.l_x + t
    return assignment.l_x + i * assignment.l_max + t


def max_path_position(assignment: PositionAssignment, written_len: int) -> int:
    """Largest absolute position used by path tokens of length ``written_len``."""
    last_path = assignment.num_paths - 1
    if assignment.scheme == SHARED:
        return assignment.l_x + written_len
    return assignment.l_x + last_path * assignment.l_max + written_len

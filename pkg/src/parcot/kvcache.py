"""Block-paged KV storage with per-segment tables and zero-copy summary views.

Each appended slot stores the augmented key/value stacks for every layer
(thought embedding folded in, key rotated), plus the slot's absolute
position and thought index.  Entries are append-only: a written slot is
never mutated, which is what makes reusing reasoning-phase blocks as the
summarization context exact.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import CacheConsistencyError, CapacityError, LifecycleError
from .masking import SUMMARIZATION, LayoutPlan
from .positional import ANSWER, PROMPT, path_key

DEFAULT_BLOCK_SLOTS = 16
DEFAULT_MAX_BLOCKS = 4096


@dataclass(frozen=True)
class SlotAddress:
    segment: str
    index: int


class KVBlock:
    """Fixed-capacity slab of per-layer (k, v) entries."""

    def __init__(self, block_id: int, n_layers: int, n_heads: int, d_k: int, capacity: int):
        self.block_id = block_id
        self.capacity = capacity
        self.k = np.zeros((n_layers, capacity, n_heads, d_k), dtype=np.float32)
        self.v = np.zeros((n_layers, capacity, n_heads, d_k), dtype=np.float32)
        self.positions = np.zeros(capacity, dtype=np.int64)
        self.thoughts = np.zeros(capacity, dtype=np.int64)

    def content_hash(self, filled: int) -> str:
        h = hashlib.sha256()
        h.update(self.k[:, :filled].tobytes())
        h.update(self.v[:, :filled].tobytes())
        h.update(self.positions[:filled].tobytes())
        h.update(self.thoughts[:filled].tobytes())
        return h.hexdigest()


class BlockTable:
    """Ordered block list for one segment; block order defines slot order."""

    def __init__(self, owner: str, n_layers: int, n_heads: int, d_k: int):
        self.owner = owner
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_k = d_k
        self.blocks: list[KVBlock] = []
        self.filled = 0

    def block_ids(self) -> list[int]:
        return [b.block_id for b in self.blocks]

    def _locate(self, index: int) -> tuple[KVBlock, int]:
        capacity = self.blocks[0].capacity
        return self.blocks[index // capacity], index % capacity

    def read(self, index: int) -> tuple[np.ndarray, np.ndarray, int, int]:
        if not 0 <= index < self.filled:
            raise CacheConsistencyError(
                f"segment {self.owner!r} has {self.filled} slots, asked for {index}"
            )
        block, off = self._locate(index)
        return (
            block.k[:, off],
            block.v[:, off],
            int(block.positions[off]),
            int(block.thoughts[off]),
        )

    def stacked(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """All written (k, v) at one layer, shape [filled, n_heads, d_k]."""
        parts_k = []
        parts_v = []
        remaining = self.filled
        for block in self.blocks:
            take = min(remaining, block.capacity)
            if take <= 0:
                break
            parts_k.append(block.k[layer, :take])
            parts_v.append(block.v[layer, :take])
            remaining -= take
        if not parts_k:
            shape = (0, self.n_heads, self.d_k)
            return np.zeros(shape, dtype=np.float32), np.zeros(shape, dtype=np.float32)
        return np.concatenate(parts_k, axis=0), np.concatenate(parts_v, axis=0)

    def positions(self) -> np.ndarray:
        out = []
        remaining = self.filled
        for block in self.blocks:
            take = min(remaining, block.capacity)
            if take <= 0:
                break
            out.append(block.positions[:take])
            remaining -= take
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        remaining = self.filled
        for block in self.blocks:
            take = min(remaining, block.capacity)
            if take <= 0:
                break
            h.update(block.content_hash(take).encode())
            remaining -= take
        return h.hexdigest()


class PagedKVCache:
    """Per-segment block tables over a shared block allocator."""

    def __init__(
        self,
        n_layers: int,
        n_heads: int,
        d_k: int,
        block_slots: int = DEFAULT_BLOCK_SLOTS,
        max_blocks: int = DEFAULT_MAX_BLOCKS,
    ):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_k = d_k
        self.block_slots = block_slots
        self.max_blocks = max_blocks
        self.tables: dict[str, BlockTable] = {}
        self._next_block_id = 0

    def table(self, segment: str) -> BlockTable:
        tab = self.tables.get(segment)
        if tab is None:
            tab = BlockTable(segment, self.n_layers, self.n_heads, self.d_k)
            self.tables[segment] = tab
        return tab

    def _allocate_block(self) -> KVBlock:
        if self._next_block_id >= self.max_blocks:
            raise CapacityError(f"block allocation limit {self.max_blocks} exceeded")
        block = KVBlock(
            self._next_block_id, self.n_layers, self.n_heads, self.d_k, self.block_slots
        )
        self._next_block_id += 1
        return block

    def length(self, segment: str) -> int:
        tab = self.tables.get(segment)
        return tab.filled if tab is not None else 0

    def append(
        self, segment: str, k: np.ndarray, v: np.ndarray, position: int, j: int
    ) -> SlotAddress:
        """Write one slot's full per-layer k/v stacks; returns its address."""
        expected = (self.n_layers, self.n_heads, self.d_k)
        if k.shape != expected or v.shape != expected:
            raise CacheConsistencyError(
                f"entry shape {k.shape} does not match cache dims {expected}"
            )
        tab = self.table(segment)
        offset = tab.filled % self.block_slots
        if offset == 0 and tab.filled == len(tab.blocks) * self.block_slots:
            tab.blocks.append(self._allocate_block())
        block = tab.blocks[tab.filled // self.block_slots]
        block.k[:, offset] = k
        block.v[:, offset] = v
        block.positions[offset] = position
        block.thoughts[offset] = j
        index = tab.filled
        tab.filled += 1
        return SlotAddress(segment, index)

    def gather(self, segments: list[str] | tuple[str, ...], layer: int):
        """Concatenated (K, V, positions) over segments, in segment order."""
        ks, vs, ps = [], [], []
        for segment in segments:
            tab = self.tables.get(segment)
            if tab is None or tab.filled == 0:
                continue
            k, v = tab.stacked(layer)
            ks.append(k)
            vs.append(v)
            ps.append(tab.positions())
        if not ks:
            shape = (0, self.n_heads, self.d_k)
            return (
                np.zeros(shape, dtype=np.float32),
                np.zeros(shape, dtype=np.float32),
                np.zeros(0, dtype=np.int64),
            )
        return np.concatenate(ks), np.concatenate(vs), np.concatenate(ps)

    def written_block_ids(self) -> set[int]:
        ids: set[int] = set()
        for tab in self.tables.values():
            ids.update(tab.block_ids())
        return ids

    def debug_tables(self) -> str:
        """JSON dump of the table structure, for lifecycle tests."""
        payload = {
            "block_slots": self.block_slots,
            "tables": {
                seg: {"blocks": tab.block_ids(), "filled": tab.filled}
                for seg, tab in sorted(self.tables.items())
            },
        }
        return json.dumps(payload, sort_keys=True)


class SummaryContextView:
    """Ordered references to the blocks the answer attends over.

    Holds the same BlockTable objects written during reasoning; nothing is
    copied, so block ids are stable and path entries stay byte-identical.
    """

    def __init__(self, entries: list[tuple[str, BlockTable]]):
        self.entries = list(entries)

    def segments(self) -> list[str]:
        return [seg for seg, _ in self.entries]

    def block_ids(self) -> set[int]:
        ids: set[int] = set()
        for _, tab in self.entries:
            ids.update(tab.block_ids())
        return ids

    def total_slots(self) -> int:
        return sum(tab.filled for _, tab in self.entries)


def assemble_summary_view(cache: PagedKVCache, layout: LayoutPlan) -> SummaryContextView:
    """Zero-copy summarization context: prompt, every path, then answer."""
    if layout.stage != SUMMARIZATION:
        raise LifecycleError("summary view requires a summarization-stage layout")
    entries: list[tuple[str, BlockTable]] = []
    if cache.length(PROMPT) != layout.l_x:
        raise CacheConsistencyError(
            f"prompt table holds {cache.length(PROMPT)} slots, layout says {layout.l_x}"
        )
    entries.append((PROMPT, cache.table(PROMPT)))
    for i, expected in enumerate(layout.path_lengths):
        seg = path_key(i)
        if cache.length(seg) != expected:
            raise LifecycleError(
                f"path {i} holds {cache.length(seg)} slots, layout says {expected}"
            )
        entries.append((seg, cache.table(seg)))
    entries.append((ANSWER, cache.table(ANSWER)))
    return SummaryContextView(entries)

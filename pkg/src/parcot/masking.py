"""Two-phase attention masks over a serialized slot layout.

Slots are numbered 0..total-1 in serialized order: prompt, then each
reasoning path in index order, then the answer.  Causality (j <= t) is
over this generation-order index; rotary positions play no role here.

Reasoning mask for path i: a query at slot t may see slot j iff
j <= t and j is a prompt slot or one of path i's own slots.

Summarization mask: a query at slot t may see slot j iff j <= t and j is
a prompt, path, or answer slot (with this layout, every live slot).
Both conventions are self-inclusive (j = t is visible).
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import LayoutError

REASONING = "reasoning"
SUMMARIZATION = "summarization"


@dataclass(frozen=True)
class LayoutPlan:
    """Prompt/path/answer index ranges for one serialized sequence."""

    l_x: int
    path_lengths: tuple[int, ...]
    answer_length: int
    stage: str

    def __post_init__(self):
        if self.stage not in (REASONING, SUMMARIZATION):
            raise LayoutError(f"unknown stage {self.stage!r}")
        if self.l_x < 1:
            raise LayoutError("prompt must contain at least one slot")
        if not self.path_lengths:
            raise LayoutError("layout needs at least one path")
        if any(n < 1 for n in self.path_lengths):
            raise LayoutError("every path needs at least one slot")
        if self.answer_length < 0:
            raise LayoutError("answer length must be non-negative")
        if self.stage == REASONING and len(set(self.path_lengths)) != 1:
            raise LayoutError("reasoning-stage layouts require equal path lengths")

    @property
    def num_paths(self) -> int:
        return len(self.path_lengths)

    @property
    def total_slots(self) -> int:
        return self.l_x + sum(self.path_lengths) + self.answer_length

    def prompt_slots(self) -> range:
        return range(0, self.l_x)

    def path_slots(self, i: int) -> range:
        if not 0 <= i < self.num_paths:
            raise IndexError(f"path {i} out of range [0, {self.num_paths})")
        start = self.l_x + sum(self.path_lengths[:i])
        return range(start, start + self.path_lengths[i])

    def answer_slots(self) -> range:
        start = self.l_x + sum(self.path_lengths)
        return range(start, start + self.answer_length)

    def with_stage(self, stage: str) -> "LayoutPlan":
        return replace(self, stage=stage)


class AttentionMask:
    """Dense visibility matrix; rows are queries, columns are keys."""

    def __init__(self, visible: np.ndarray):
        visible = np.asarray(visible, dtype=bool)
        if visible.ndim != 2 or visible.shape[0] != visible.shape[1]:
            raise LayoutError("mask must be square")
        self.visible = visible

    @property
    def size(self) -> int:
        return self.visible.shape[0]

    def dense(self) -> np.ndarray:
        """0 where visible, -inf where masked (additive form)."""
        out = np.where(self.visible, 0.0, -np.inf)
        return out.astype(np.float32)

    def visible_set(self, t: int) -> list[int]:
        if not 0 <= t < self.size:
            raise IndexError(f"slot {t} out of range [0, {self.size})")
        return [int(j) for j in np.flatnonzero(self.visible[t])]

    def grid(self) -> str:
        """Text rendering, '.' visible / 'x' masked, one row per query."""
        return "\n".join(
            "".join("." if v else "x" for v in row) for row in self.visible
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(
            self.visible, other.visible
        )


def _causal(n: int) -> np.ndarray:
    idx = np.arange(n)
    return idx[None, :] <= idx[:, None]


def build_reasoning_mask(layout: LayoutPlan, path: int) -> AttentionMask:
    """Mask decoded against during path ``path``'s reasoning phase."""
    if layout.stage != REASONING:
        raise LayoutError("reasoning mask requires a reasoning-stage layout")
    if not 0 <= path < layout.num_paths:
        raise IndexError(f"path {path} out of range [0, {layout.num_paths})")
    n = layout.total_slots
    allowed = np.zeros(n, dtype=bool)
    allowed[list(layout.prompt_slots())] = True
    allowed[list(layout.path_slots(path))] = True
    return AttentionMask(_causal(n) & allowed[None, :])


def build_summary_mask(layout: LayoutPlan) -> AttentionMask:
    """Mask decoded against while generating the answer."""
    if layout.stage != SUMMARIZATION:
        raise LayoutError("summary mask requires a summarization-stage layout")
    if layout.answer_length < 1:
        raise LayoutError("summary mask requires a non-empty answer range")
    n = layout.total_slots
    allowed = np.zeros(n, dtype=bool)
    allowed[list(layout.prompt_slots())] = True
    for i in range(layout.num_paths):
        allowed[list(layout.path_slots(i))] = True
    allowed[list(layout.answer_slots())] = True
    return AttentionMask(_causal(n) & allowed[None, :])


def visible_set(mask: AttentionMask, t: int) -> list[int]:
    """Slots visible to the query at slot t."""
    return mask.visible_set(t)

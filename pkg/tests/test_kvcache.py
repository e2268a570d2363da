import json

import numpy as np
import pytest

from parcot.errors import CacheConsistencyError, CapacityError, LifecycleError
from parcot.kvcache import PagedKVCache, assemble_summary_view
from parcot.masking import REASONING, SUMMARIZATION, LayoutPlan
from parcot.positional import ANSWER, PROMPT, path_key

RNG = np.random.default_rng(99)

DIMS = dict(n_layers=2, n_heads=2, d_k=4)


def make_cache(**kwargs):
    return PagedKVCache(**DIMS, **kwargs)


def entry():
    shape = (DIMS["n_layers"], DIMS["n_heads"], DIMS["d_k"])
    return (
        RNG.standard_normal(shape).astype(np.float32),
        RNG.standard_normal(shape).astype(np.float32),
    )


class TestAppendRead:
    def test_round_trip(self):
        cache = make_cache()
        k, v = entry()
        addr = cache.append(PROMPT, k, v, position=7, j=3)
        got_k, got_v, pos, j = cache.tables[PROMPT].read(addr.index)
        assert np.array_equal(got_k, k) and np.array_equal(got_v, v)
        assert (pos, j) == (7, 3)

    def test_seventeen_appends_make_two_blocks(self):
        cache = make_cache(block_slots=16)
        for t in range(17):
            k, v = entry()
            cache.append(PROMPT, k, v, position=t + 1, j=0)
        assert len(cache.tables[PROMPT].blocks) == 2
        assert cache.length(PROMPT) == 17

    def test_interleaved_appends_stay_per_path(self):
        cache = make_cache(block_slots=4)
        log = []  # flat reference: (segment, position, k-bytes)
        for step in range(6):
            for i in range(4):
                k, v = entry()
                pos = 10 * i + step
                cache.append(path_key(i), k, v, position=pos, j=i + 1)
                log.append((path_key(i), pos, k.tobytes()))
        for i in range(4):
            table = cache.tables[path_key(i)]
            expected = [(seg, pos, kb) for seg, pos, kb in log if seg == path_key(i)]
            assert table.filled == len(expected)
            for idx, (_, pos, kb) in enumerate(expected):
                got_k, _, got_pos, got_j = table.read(idx)
                assert got_pos == pos
                assert got_j == i + 1
                assert got_k.tobytes() == kb

    def test_bad_shape_rejected(self):
        cache = make_cache()
        bad = np.zeros((1, 2, 4), dtype=np.float32)
        with pytest.raises(CacheConsistencyError):
            cache.append(PROMPT, bad, bad, position=1, j=0)

    def test_capacity_limit(self):
        cache = make_cache(block_slots=2, max_blocks=1)
        k, v = entry()
        cache.append(PROMPT, k, v, 1, 0)
        cache.append(PROMPT, k, v, 2, 0)
        with pytest.raises(CapacityError):
            cache.append(PROMPT, k, v, 3, 0)

    def test_read_past_fill_rejected(self):
        cache = make_cache()
        k, v = entry()
        cache.append(PROMPT, k, v, 1, 0)
        with pytest.raises(CacheConsistencyError):
            cache.tables[PROMPT].read(1)


class TestGather:
    def test_order_and_block_boundaries(self):
        cache = make_cache(block_slots=2)
        ks = []
        for t in range(5):
            k, v = entry()
            cache.append(PROMPT, k, v, t + 1, 0)
            ks.append(k)
        for t in range(3):
            k, v = entry()
            cache.append(path_key(0), k, v, 6 + t, 1)
            ks.append(k)
        gathered_k, _, positions = cache.gather([PROMPT, path_key(0)], layer=1)
        want = np.stack([k[1] for k in ks])
        assert np.array_equal(gathered_k, want)
        assert positions.tolist() == [1, 2, 3, 4, 5, 6, 7, 8]

    def test_empty_segments_skipped(self):
        cache = make_cache()
        k, v = entry()
        cache.append(PROMPT, k, v, 1, 0)
        gathered_k, _, positions = cache.gather([PROMPT, path_key(0)], layer=0)
        assert gathered_k.shape[0] == 1 and positions.tolist() == [1]


def fill_session_like(cache, l_x=3, path_lengths=(4, 4), answer=0):
    for t in range(l_x):
        k, v = entry()
        cache.append(PROMPT, k, v, t + 1, 0)
    for i, length in enumerate(path_lengths):
        for t in range(length):
            k, v = entry()
            cache.append(path_key(i), k, v, l_x + t + 1, i + 1)
    for t in range(answer):
        k, v = entry()
        cache.append(ANSWER, k, v, l_x + max(path_lengths) + t + 1, 0)


class TestSummaryView:
    def test_single_path_view_is_the_sequential_cache(self):
        cache = make_cache()
        fill_session_like(cache, l_x=2, path_lengths=(3,))
        layout = LayoutPlan(2, (3,), 0, SUMMARIZATION)
        view = assemble_summary_view(cache, layout)
        assert view.segments() == [PROMPT, path_key(0), ANSWER]
        assert view.entries[0][1] is cache.tables[PROMPT]
        assert view.entries[1][1] is cache.tables[path_key(0)]

    def test_slot_count(self):
        cache = make_cache()
        fill_session_like(cache, l_x=2, path_lengths=(5, 5, 5))
        layout = LayoutPlan(2, (5, 5, 5), 0, SUMMARIZATION)
        view = assemble_summary_view(cache, layout)
        assert view.total_slots() == 2 + 3 * 5

    def test_zero_copy_block_identity(self):
        cache = make_cache(block_slots=2)
        fill_session_like(cache, l_x=3, path_lengths=(4, 4))
        written = cache.written_block_ids()
        layout = LayoutPlan(3, (4, 4), 0, SUMMARIZATION)
        view = assemble_summary_view(cache, layout)
        assert view.block_ids() <= written
        # later answer writes allocate new blocks, path blocks unchanged
        hashes = {
            seg: cache.tables[seg].content_hash()
            for seg in (PROMPT, path_key(0), path_key(1))
        }
        k, v = entry()
        cache.append(ANSWER, k, v, 8, 0)
        for seg, digest in hashes.items():
            assert cache.tables[seg].content_hash() == digest

    def test_requires_summarization_stage(self):
        cache = make_cache()
        fill_session_like(cache, l_x=2, path_lengths=(2, 2))
        with pytest.raises(LifecycleError):
            assemble_summary_view(cache, LayoutPlan(2, (2, 2), 0, REASONING))

    def test_rejects_length_mismatch(self):
        cache = make_cache()
        fill_session_like(cache, l_x=2, path_lengths=(2, 2))
        with pytest.raises(LifecycleError):
            assemble_summary_view(cache, LayoutPlan(2, (2, 3), 0, SUMMARIZATION))


class TestDebugDump:
    def test_json_structure(self):
        cache = make_cache(block_slots=2)
        fill_session_like(cache, l_x=3, path_lengths=(2,))
        dump = json.loads(cache.debug_tables())
        assert dump["block_slots"] == 2
        assert dump["tables"][PROMPT]["filled"] == 3
        assert len(dump["tables"][PROMPT]["blocks"]) == 2
        assert dump["tables"][path_key(0)]["filled"] == 2

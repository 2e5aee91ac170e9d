"""Byte layout: serialization modes, chunk policy, traversal, statistics."""

import io

import pytest
from hypothesis import given, settings, strategies as st

from locpar import layout as L
from locpar import eval_par as P
from locpar.eval_seq import run_seq

EXP_SCHEMA = L.Schema({"Lit": ("Int",), "Plus": ("Exp", "Exp")})

GOLDEN = L.Node("Plus", (L.Node("Lit", (L.Leaf(20),)),
                         L.Node("Lit", (L.Leaf(22),))))


def exp_trees(max_depth=5):
    leaf = st.integers(min_value=-(2**31), max_value=2**31).map(
        lambda n: L.Node("Lit", (L.Leaf(n),)))
    return st.recursive(
        leaf,
        lambda sub: st.tuples(sub, sub).map(
            lambda ab: L.Node("Plus", ab)),
        max_leaves=2**max_depth)


class TestFlatten:
    def test_sequential_value_flattens(self, load_program):
        tp = load_program("constfold.lcp")
        res = run_seq(tp)
        got = L.flatten_value(res.value.loc, "Exp", res.store, tp.decls)
        assert got == GOLDEN

    def test_fragmented_value_flattens_identically(self, load_program):
        tp = load_program("constfold.lcp")
        res = P.run_par(tp, P.always_fork())
        got = L.flatten_value(res.value.loc, "Exp", res.store, tp.decls)
        assert got == GOLDEN

    def test_missing_cell_raises(self, load_program):
        tp = load_program("constfold.lcp")
        res = run_seq(tp)
        store = res.store.copy()
        out_r = res.value.loc.region
        del store.regions[out_r][4]
        with pytest.raises(L.IncompleteValue):
            L.flatten_value(res.value.loc, "Exp", store, tp.decls)


class TestByteSerialization:
    def test_packed_golden_sizes(self):
        ch = L.byte_serialize(GOLDEN, EXP_SCHEMA, mode="packed")
        # 3 tags + 2 scalars, single chunk, no links
        assert len(ch.data) == 3 * L.TAG_BYTES + 2 * L.SCALAR_BYTES
        assert ch.chunk_count() == 1 and ch.links == 0

    def test_fragmented_golden_sizes(self):
        ch = L.byte_serialize(GOLDEN, EXP_SCHEMA, mode="per-node-fragmented")
        assert ch.chunk_count() == 3 and ch.links == 2

    @pytest.mark.parametrize("mode", ["packed", "per-node-fragmented"])
    def test_golden_round_trip(self, mode):
        ch = L.byte_serialize(GOLDEN, EXP_SCHEMA, mode=mode)
        assert L.byte_parse(ch) == GOLDEN

    @given(tree=exp_trees())
    @settings(max_examples=60, deadline=None)
    def test_round_trip_any_tree_packed(self, tree):
        ch = L.byte_serialize(tree, EXP_SCHEMA, mode="packed")
        assert L.byte_parse(ch) == tree

    @given(tree=exp_trees())
    @settings(max_examples=30, deadline=None)
    def test_round_trip_any_tree_fragmented(self, tree):
        ch = L.byte_serialize(tree, EXP_SCHEMA, mode="per-node-fragmented")
        assert L.byte_parse(ch) == tree

    @given(tree=exp_trees(), initial=st.integers(min_value=18, max_value=96))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_under_any_chunk_policy(self, tree, initial):
        policy = L.ChunkPolicy(initial=initial)
        ch = L.byte_serialize(tree, EXP_SCHEMA, policy, mode="packed")
        assert L.byte_parse(ch) == tree

    def test_chunk_growth_doubles(self):
        tree = L.full_tree(4)
        ch = L.byte_serialize(tree, L.tree_schema(), L.ChunkPolicy(initial=18),
                              mode="packed")
        sizes = ch.chunk_sizes()
        assert len(sizes) > 1
        caps = ch.capacities
        assert all(b == min(a * 2, L.ChunkPolicy().cap) or b == a
                   for a, b in zip(caps, caps[1:]))

    def test_cap_bounds_chunk_sizes(self):
        policy = L.ChunkPolicy(initial=18, cap=32)
        tree = L.full_tree(6)
        ch = L.byte_serialize(tree, L.tree_schema(), policy, mode="packed")
        assert ch.chunk_count() > 1
        assert all(sz <= 32 for sz in ch.chunk_sizes())
        assert L.byte_parse(ch) == tree

    def test_oversized_single_node_rejected(self):
        # one constructor with 8 scalar fields cannot fit a 32-byte chunk
        policy = L.ChunkPolicy(initial=18, cap=32)
        with pytest.raises(L.ValueTooLarge):
            L.byte_serialize(L.full_tree(2, leaf_scalars=8),
                             L.tree_schema(leaf_scalars=8), policy,
                             mode="packed")


class TestTraversal:
    def test_aggregates_agree_across_modes(self):
        tree = L.full_tree(6)
        schema = L.tree_schema()
        cp = L.byte_serialize(tree, schema, mode="packed")
        cf = L.byte_serialize(tree, schema, mode="per-node-fragmented")
        (agg_p, _), (agg_f, _) = L.traverse_bytes(cp), L.traverse_bytes(cf)
        assert agg_p == agg_f == (64, 64)

    @given(tree=exp_trees())
    @settings(max_examples=30, deadline=None)
    def test_traversal_matches_tree_sum(self, tree):
        def walk(n):
            if isinstance(n, L.Leaf):
                return (n.value, 0)
            s, c = 0, 1 if not n.children else 0
            for ch in n.children:
                a, b = walk(ch)
                s, c = s + a, c + b
            if all(isinstance(c2, L.Leaf) for c2 in n.children):
                c = 1
            return (s, c)

        expect = walk(tree)
        ch = L.byte_serialize(tree, EXP_SCHEMA, mode="packed")
        (agg, _) = L.traverse_bytes(ch, repeats=1)
        assert agg == expect


class TestMalformedBuffers:
    def test_truncated_buffer(self):
        ch = L.byte_serialize(GOLDEN, EXP_SCHEMA, mode="packed")
        ch.data = ch.data[:-3]
        with pytest.raises(L.MalformedBuffer):
            L.byte_parse(ch)

    def test_unknown_tag_byte(self):
        ch = L.byte_serialize(GOLDEN, EXP_SCHEMA, mode="packed")
        ch.data = bytearray(ch.data)
        ch.data[0] = 0xFD
        with pytest.raises(L.MalformedBuffer):
            L.byte_parse(ch)


class TestFilePersistence:
    def test_write_read_round_trip(self):
        ch = L.byte_serialize(GOLDEN, EXP_SCHEMA, mode="per-node-fragmented")
        buf = io.BytesIO()
        L.write_chunks(ch, buf)
        buf.seek(0)
        back = L.read_chunks(buf, EXP_SCHEMA)
        assert L.byte_parse(back) == GOLDEN

    def test_bad_magic_rejected(self):
        buf = io.BytesIO(b"NOPE" + b"\x00" * 16)
        with pytest.raises(L.MalformedBuffer):
            L.read_chunks(buf, EXP_SCHEMA)


class TestFragmentationReport:
    def test_sequential_run_fully_serialized(self, load_program):
        tp = load_program("constfold.lcp")
        res = run_seq(tp)
        rep = L.fragmentation_report(res.store, res.metrics)
        assert rep.extra_regions == 0 and rep.indirections == 0
        assert rep.serialized_fraction == 1.0

    def test_forked_run_reports_indirections(self, load_program):
        tp = load_program("constfold.lcp")
        res = P.run_par(tp, P.always_fork())
        rep = L.fragmentation_report(res.store, res.metrics)
        assert rep.extra_regions == 1 and rep.indirections == 1
        assert 0 < rep.serialized_fraction < 1


class TestPointerStats:
    def test_exact_counts_depth_10(self):
        stats = L.bottom_two_pack_stats(10, leaf_scalars=4)
        leaves = stats.leaves
        assert leaves == 2**10
        assert stats.per_node_links == 2 * leaves - 2
        assert stats.eliminated == 6 * (leaves // 4)
        assert stats.remaining == stats.per_node_links - stats.eliminated
        assert abs(stats.eliminated_ratio
                   - 0.75 * leaves / (leaves - 1)) < 1e-12

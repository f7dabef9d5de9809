import io

import numpy as np
import pytest

from hamrec.hamming import CodeMatrix, hamming_distances, pack
from hamrec.retrieval import (
    BenchReport, QueryResult, bench, build_index, probe_recall_radius, topk_probe, topk_scan,
    topk_scan_batch, write_results,
)


def random_codes(rng, n, K):
    return CodeMatrix.from_signs(rng.choice(np.array([-1, 1], dtype=np.int8), size=(n, K)))


def naive_topk(items: CodeMatrix, query, k, exclude=()):
    """Score every item with float dot products and fully sort."""
    dots = items.unpack().astype(np.float64) @ query.unpack().astype(np.float64)
    ids = np.array([i for i in range(len(items)) if i not in set(exclude)], dtype=np.int64)
    order = np.lexsort((ids, -dots[ids]))
    top = ids[order][:k]
    return top, dots[top].astype(np.int64)


def test_band_tables():
    rng = np.random.default_rng(0)
    items = random_codes(rng, 500, 64)
    index = build_index(items, 4)
    assert index.band_width == 16
    assert len(index.bucket_offsets) == 4
    assert all(len(off) == 2**16 + 1 for off in index.bucket_offsets)
    for b in range(4):
        members = index.bucket_items[b]
        assert sorted(members.tolist()) == list(range(500))
        off = index.bucket_offsets[b]
        for key in np.unique(index.band_keys[:, b])[:50]:
            bucket = members[off[key]:off[key + 1]]
            assert (np.diff(bucket) > 0).all()
            assert (index.band_keys[bucket, b] == key).all()


def test_identical_codes_share_buckets():
    rng = np.random.default_rng(1)
    signs = rng.choice([-1, 1], size=(10, 32))
    signs[7] = signs[2]
    index = build_index(CodeMatrix.from_signs(signs), 4)
    assert (index.band_keys[2] == index.band_keys[7]).all()
    for b in range(4):
        assert {2, 7} <= set(index.bucket(b, int(index.band_keys[2, b])).tolist())


def test_build_index_errors():
    items = random_codes(np.random.default_rng(2), 4, 64)
    with pytest.raises(ValueError, match="divide"):
        build_index(items, 3)
    with pytest.raises(ValueError, match="exceeds"):
        build_index(items, 2)
    assert build_index(items).bands is None


def test_scan_finds_exact_match_first():
    rng = np.random.default_rng(3)
    items = random_codes(rng, 300, 64)
    index = build_index(items)
    res = topk_scan(index, items[7], 5)
    assert res.items[0] == 7 and res.scores[0] == 64
    # duplicates: the lowest id wins the tie
    signs = items.unpack()
    signs[150] = signs[7]
    dup = build_index(CodeMatrix.from_signs(signs))
    assert topk_scan(dup, items[7], 2).items.tolist() == [7, 150]


def test_scan_exclusions_and_short_results():
    rng = np.random.default_rng(4)
    items = random_codes(rng, 30, 16)
    index = build_index(items)
    assert len(topk_scan(index, items[0], 5, exclude=range(30))) == 0
    res = topk_scan(index, items[0], 50, exclude={0, 1, 2})
    assert len(res) == 27 and not {0, 1, 2} & set(res.items.tolist())
    with pytest.raises(ValueError):
        topk_scan(index, items[0], 0)
    with pytest.raises(ValueError):
        topk_scan(index, pack([1] * 64), 3)


def test_scan_matches_full_sort_oracle():
    rng = np.random.default_rng(5)
    items = random_codes(rng, 2000, 64)
    queries = random_codes(rng, 100, 64)
    index = build_index(items)
    for q in range(len(queries)):
        excl = rng.choice(2000, size=q % 7, replace=False).tolist()
        res = topk_scan(index, queries[q], 20, exclude=excl)
        ids, scores = naive_topk(items, queries[q], 20, excl)
        assert res.items.tolist() == ids.tolist()
        assert res.scores.tolist() == scores.tolist()


def test_batch_scan_is_worker_independent():
    rng = np.random.default_rng(6)
    items = random_codes(rng, 800, 128)
    queries = random_codes(rng, 40, 128)
    index = build_index(items)
    excl = [rng.choice(800, size=int(rng.integers(0, 30)), replace=False) for _ in range(40)]
    one = topk_scan_batch(index, queries, 10, excl, workers=1)
    four = topk_scan_batch(index, queries, 10, excl, workers=4)
    for a, b in zip(one, four):
        assert np.array_equal(a, b)
    for q in range(40):
        single = topk_scan(index, queries[q], 10, exclude=excl[q])
        assert one[0][q, :one[2][q]].tolist() == single.items.tolist()


def test_probe_exhaustive_radius_equals_scan():
    rng = np.random.default_rng(7)
    items = random_codes(rng, 400, 32)
    index = build_index(items, 4)
    for q in range(20):
        query = random_codes(rng, 1, 32)[0]
        full = topk_probe(index, query, 15, radius=8)
        scan = topk_scan(index, query, 15)
        assert full.pairs() == scan.pairs()
        assert full.candidates == 400


def test_probe_always_finds_distance_zero():
    rng = np.random.default_rng(8)
    items = random_codes(rng, 1000, 64)
    index = build_index(items, 8)
    for r in range(20):
        assert topk_probe(index, items[r], 1, radius=0).items[0] == r


@pytest.mark.parametrize("radius", [0, 1])
def test_probe_pigeonhole_bound(radius):
    rng = np.random.default_rng(9)
    items = random_codes(rng, 2**10, 16)
    index = build_index(items, 4)
    bound = probe_recall_radius(4, radius)
    assert bound == 4 * (radius + 1) - 1
    for q in rng.choice(2**16, size=300, replace=False):
        signs = np.where((int(q) >> np.arange(16)) & 1, 1, -1)
        query = pack(signs)
        res = topk_probe(index, query, 2**10, radius=radius)
        d = hamming_distances(items, query)
        found = set(res.items.tolist())
        assert set(np.flatnonzero(d <= bound).tolist()) <= found
        # re-ranking is exact even for candidates past the bound
        assert (res.scores == 16 - 2 * d[res.items]).all()
        assert res.candidates == len(found)


def test_probe_requires_bands():
    items = random_codes(np.random.default_rng(10), 5, 16)
    with pytest.raises(ValueError):
        topk_probe(build_index(items), items[0], 2)
    with pytest.raises(ValueError):
        topk_probe(build_index(items, 2), items[0], 2, radius=-1)


def test_result_tsv():
    buf = io.StringIO()
    res = QueryResult(np.array([4, 2]), np.array([10, 8]))
    write_results(buf, ["u1"], [res])
    assert buf.getvalue() == "u1\t1\t4\t10\nu1\t2\t2\t8\n"


def test_bench_report_round_trip():
    rng = np.random.default_rng(11)
    index = build_index(random_codes(rng, 2000, 64))
    report = bench(index, random_codes(rng, 100, 64), k=10, repeats=1)
    assert BenchReport.from_json(report.to_json()) == report
    assert report.packed_qps > 0 and report.real_qps > 0
    assert "speedup" in report.to_text()
    with pytest.raises(ValueError):
        bench(index, random_codes(rng, 10, 64))

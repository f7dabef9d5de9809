"""Exact top-k Hamming retrieval over packed item codes.

``topk_scan`` scores every item with XOR + popcount and keeps a size-k heap.
``topk_probe`` uses band-bucket lookup tables: the code is cut into ``B``
contiguous slices of at most 16 bits and each band maps slice value to the
sorted list of items holding it. Probing all keys within radius ``r`` of
the query's slices is guaranteed to find every item whose total distance is
at most ``(r + 1) * B - 1``; candidates are always re-ranked exactly.

Ranking everywhere is by score descending, then item id ascending.
"""
from __future__ import annotations

import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np
from numba import njit, types
from numba.extending import intrinsic
from llvmlite import ir

from .hamming import CodeMatrix, HashCode, unpack_rows

MAX_BAND_BITS = 16


@intrinsic
def _ctpop64(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, args)

    return sig, codegen


@njit(nogil=True, cache=True)
def _heap_sift_down(hs, hi, pos, size):
    # min-heap on (score, -id): the root is the weakest kept item
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and (hs[child + 1] < hs[child] or (hs[child + 1] == hs[child] and hi[child + 1] > hi[child])):
            child += 1
        if hs[child] < hs[pos] or (hs[child] == hs[pos] and hi[child] > hi[pos]):
            hs[child], hs[pos] = hs[pos], hs[child]
            hi[child], hi[pos] = hi[pos], hi[child]
            pos = child
        else:
            break


@njit(nogil=True, cache=True)
def _heap_sift_up(hs, hi, pos):
    while pos > 0:
        parent = (pos - 1) // 2
        if hs[pos] < hs[parent] or (hs[pos] == hs[parent] and hi[pos] > hi[parent]):
            hs[pos], hs[parent] = hs[parent], hs[pos]
            hi[pos], hi[parent] = hi[parent], hi[pos]
            pos = parent
        else:
            break


@njit(nogil=True, cache=True)
def _offer(hs, hi, size, k, score, item):
    """Push ``(score, item)`` into a bounded heap; returns the new size."""
    if size < k:
        hs[size] = score
        hi[size] = item
        _heap_sift_up(hs, hi, size)
        return size + 1
    if score > hs[0] or (score == hs[0] and item < hi[0]):
        hs[0] = score
        hi[0] = item
        _heap_sift_down(hs, hi, 0, size)
    return size


@njit(nogil=True, cache=True)
def _drain_sorted(hs, hi, size):
    # insertion sort into score desc, id asc
    out_s = hs[:size].copy()
    out_i = hi[:size].copy()
    for a in range(1, size):
        s = out_s[a]
        it = out_i[a]
        b = a - 1
        while b >= 0 and (out_s[b] < s or (out_s[b] == s and out_i[b] > it)):
            out_s[b + 1] = out_s[b]
            out_i[b + 1] = out_i[b]
            b -= 1
        out_s[b + 1] = s
        out_i[b + 1] = it
    return out_i, out_s


@njit(nogil=True, cache=True)
def _scan_one(items, K, q, k, excluded):
    n, W = items.shape
    hs = np.empty(k, np.int64)
    hi = np.empty(k, np.int64)
    size = 0
    for r in range(n):
        if excluded[r]:
            continue
        d = 0
        for w in range(W):
            d += _ctpop64(items[r, w] ^ q[w])
        score = K - 2 * np.int64(d)
        # items arrive in ascending id, so equal scores never displace
        if size < k:
            size = _offer(hs, hi, size, k, score, r)
        elif score > hs[0]:
            size = _offer(hs, hi, size, k, score, r)
    return _drain_sorted(hs, hi, size)


@njit(nogil=True, cache=True)
def _scan_batch(items, K, queries, k, ex_offsets, ex_ids, out_ids, out_scores, out_len):
    n = items.shape[0]
    excluded = np.zeros(n, np.bool_)
    for qi in range(queries.shape[0]):
        for t in range(ex_offsets[qi], ex_offsets[qi + 1]):
            excluded[ex_ids[t]] = True
        ids, scores = _scan_one(items, K, queries[qi], k, excluded)
        m = ids.shape[0]
        out_len[qi] = m
        out_ids[qi, :m] = ids
        out_scores[qi, :m] = scores
        for t in range(ex_offsets[qi], ex_offsets[qi + 1]):
            excluded[ex_ids[t]] = False


@njit(nogil=True, cache=True)
def _rank_candidates(items, K, q, k, cand):
    hs = np.empty(k, np.int64)
    hi = np.empty(k, np.int64)
    size = 0
    W = items.shape[1]
    for t in range(cand.shape[0]):
        r = cand[t]
        d = 0
        for w in range(W):
            d += _ctpop64(items[r, w] ^ q[w])
        size = _offer(hs, hi, size, k, K - 2 * np.int64(d), r)
    return _drain_sorted(hs, hi, size)


@dataclass(frozen=True, eq=False)
class QueryResult:
    """Ranked ``(item, score)`` pairs; ``candidates`` is the number of items scored."""

    items: np.ndarray
    scores: np.ndarray
    candidates: int = 0

    def __len__(self):
        return len(self.items)

    def pairs(self):
        return list(zip(self.items.tolist(), self.scores.tolist()))


@dataclass(frozen=True, eq=False)
class CodeIndex:
    """Packed item codes plus optional per-band bucket tables.

    ``bucket_offsets[b]`` has ``2**width + 1`` entries into ``bucket_items[b]``.
    """

    items: CodeMatrix
    bands: int | None = None
    band_keys: np.ndarray | None = None
    bucket_offsets: tuple = ()
    bucket_items: tuple = ()

    @property
    def K(self) -> int:
        return self.items.K

    @property
    def band_width(self) -> int | None:
        return None if self.bands is None else self.K // self.bands

    def bucket(self, band: int, key: int) -> np.ndarray:
        off = self.bucket_offsets[band]
        return self.bucket_items[band][off[key]:off[key + 1]]


def slice_keys(signs: np.ndarray, bands: int) -> np.ndarray:
    """Integer key of each band slice for ``(n, K)`` ±1 rows -> ``(n, bands)``."""
    n, K = signs.shape
    width = K // bands
    bits = (signs > 0).reshape(n, bands, width).astype(np.int64)
    return bits @ (np.int64(1) << np.arange(width, dtype=np.int64))


def build_index(items: CodeMatrix, bands: int | None = None) -> CodeIndex:
    if bands is None:
        return CodeIndex(items)
    if bands < 1 or items.K % bands:
        raise ValueError(f"band count {bands} does not divide K={items.K}")
    width = items.K // bands
    if width > MAX_BAND_BITS:
        raise ValueError(f"band width {width} exceeds {MAX_BAND_BITS} bits")
    keys = slice_keys(items.unpack(), bands)
    offsets, members = [], []
    for b in range(bands):
        order = np.argsort(keys[:, b], kind="stable")  # stable keeps ids ascending per bucket
        counts = np.bincount(keys[:, b], minlength=1 << width)
        off = np.zeros((1 << width) + 1, dtype=np.int64)
        np.cumsum(counts, out=off[1:])
        offsets.append(off)
        members.append(order.astype(np.int64))
    return CodeIndex(items, bands, keys, tuple(offsets), tuple(members))


def _exclusion_mask(n, exclude):
    mask = np.zeros(n, dtype=np.bool_)
    if exclude is not None:
        ex = np.asarray(list(exclude) if isinstance(exclude, (set, frozenset)) else exclude, dtype=np.int64)
        ex = ex[(ex >= 0) & (ex < n)]
        mask[ex] = True
    return mask


def _check_query(index: CodeIndex, query: HashCode, k: int):
    if k < 1:
        raise ValueError("k must be >= 1")
    if query.K != index.K:
        raise ValueError(f"query has K={query.K}, index has K={index.K}")


def topk_scan(index: CodeIndex, query: HashCode, k: int, exclude=None) -> QueryResult:
    """Exact top-k by similarity score over all non-excluded items."""
    _check_query(index, query, k)
    mask = _exclusion_mask(len(index.items), exclude)
    ids, scores = _scan_one(index.items.words, index.K, query.words, k, mask)
    return QueryResult(ids, scores, int(len(mask) - mask.sum()))


def topk_scan_batch(index: CodeIndex, queries: CodeMatrix, k: int, exclude=None, workers: int = 1):
    """Scan many queries. ``exclude`` is a list of per-query id arrays (or None).

    Returns ``(ids, scores, lengths)``; row ``q`` is valid up to ``lengths[q]``.
    Output does not depend on ``workers``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if queries.K != index.K:
        raise ValueError(f"queries have K={queries.K}, index has K={index.K}")
    nq = len(queries)
    if exclude is None:
        ex_off = np.zeros(nq + 1, dtype=np.int64)
        ex_ids = np.zeros(0, dtype=np.int64)
    else:
        lens = np.array([len(e) for e in exclude], dtype=np.int64)
        ex_off = np.zeros(nq + 1, dtype=np.int64)
        np.cumsum(lens, out=ex_off[1:])
        ex_ids = np.concatenate([np.asarray(e, dtype=np.int64) for e in exclude]) if nq else np.zeros(0, np.int64)
    out_ids = np.full((nq, k), -1, dtype=np.int64)
    out_scores = np.zeros((nq, k), dtype=np.int64)
    out_len = np.zeros(nq, dtype=np.int64)
    items, qw = index.items.words, queries.words

    def run(lo, hi):
        _scan_batch(items, index.K, qw[lo:hi], k, ex_off[lo:hi + 1], ex_ids,
                    out_ids[lo:hi], out_scores[lo:hi], out_len[lo:hi])

    workers = max(1, int(workers))
    if workers == 1 or nq < 2 * workers:
        run(0, nq)
    else:
        cuts = np.linspace(0, nq, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda p: run(*p), zip(cuts[:-1], cuts[1:])))
    return out_ids, out_scores, out_len


def _keys_within(key: int, width: int, radius: int):
    radius = min(radius, width)
    out = [key]
    for r in range(1, radius + 1):
        for flips in itertools.combinations(range(width), r):
            m = 0
            for f in flips:
                m |= 1 << f
            out.append(key ^ m)
    return out


def topk_probe(index: CodeIndex, query: HashCode, k: int, radius: int = 0, exclude=None) -> QueryResult:
    """Top-k among items sharing a band slice within ``radius`` of the query's."""
    _check_query(index, query, k)
    if index.bands is None:
        raise ValueError("index was built without bands; use topk_scan")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    qkeys = slice_keys(unpack_rows(query.words[None, :], query.K), index.bands)[0]
    width = index.band_width
    parts = []
    for b in range(index.bands):
        off, members = index.bucket_offsets[b], index.bucket_items[b]
        if radius >= width:
            parts.append(members)
            continue
        for key in _keys_within(int(qkeys[b]), width, radius):
            if off[key + 1] > off[key]:
                parts.append(members[off[key]:off[key + 1]])
    cand = np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    if exclude is not None:
        cand = cand[~_exclusion_mask(len(index.items), exclude)[cand]]
    ids, scores = _rank_candidates(index.items.words, index.K, query.words, k, cand.astype(np.int64))
    return QueryResult(ids, scores, int(len(cand)))


def probe_recall_radius(bands: int, radius: int) -> int:
    """Largest total distance guaranteed to be found by ``topk_probe``."""
    return (radius + 1) * bands - 1


def write_results(fh, query_ids, results) -> None:
    """Write ``query_id<TAB>rank<TAB>item<TAB>score`` lines (rank starts at 1)."""
    for qid, res in zip(query_ids, results):
        for rank, (item, score) in enumerate(res.pairs(), start=1):
            fh.write(f"{qid}\t{rank}\t{item}\t{score}\n")


# --- benchmark ----------------------------------------------------------------

@dataclass
class BenchReport:
    n_items: int
    K: int
    k: int
    n_queries: int
    packed_qps: float
    packed_ns_per_item: float
    real_qps: float
    real_ns_per_item: float
    speedup: float
    popcount_path: str = "llvm.ctpop"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        rows = [
            ("items", f"{self.n_items}"), ("K", f"{self.K}"), ("k", f"{self.k}"),
            ("queries", f"{self.n_queries}"),
            ("packed q/s", f"{self.packed_qps:.1f}"), ("packed ns/item", f"{self.packed_ns_per_item:.3f}"),
            ("real q/s", f"{self.real_qps:.1f}"), ("real ns/item", f"{self.real_ns_per_item:.3f}"),
            ("speedup", f"{self.speedup:.2f}x"),
        ]
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{w}}  {b}" for a, b in rows)


def _real_topk(X, v, k):
    scores = X @ v
    k = min(k, len(scores))
    part = np.argpartition(-scores, k - 1)[:k]
    return part[np.lexsort((part, -scores[part]))]


def _timed(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(index: CodeIndex, queries: CodeMatrix, k: int = 20, repeats: int = 3, real_items=None, real_queries=None) -> BenchReport:
    """Time query-at-a-time top-k: packed XOR+popcount scan vs float32 inner products.

    Unless given, the real-valued side uses the ±1 codes as float32 vectors,
    so both sides rank the same items. Best-of-``repeats`` wall time.
    """
    nq = len(queries)
    if nq < 100:
        raise ValueError("bench needs at least 100 queries")
    n = len(index.items)
    X = index.items.unpack().astype(np.float32) if real_items is None else np.asarray(real_items, np.float32)
    Q = queries.unpack().astype(np.float32) if real_queries is None else np.asarray(real_queries, np.float32)
    mask = np.zeros(n, dtype=np.bool_)
    words, K = index.items.words, index.K
    qw = queries.words
    _scan_one(words, K, qw[0], k, mask)  # compile before timing

    def packed():
        for q in range(nq):
            _scan_one(words, K, qw[q], k, mask)

    def real():
        for q in range(nq):
            _real_topk(X, Q[q], k)

    tp = _timed(packed, repeats)
    tr = _timed(real, repeats)
    return BenchReport(
        n_items=n, K=K, k=k, n_queries=nq,
        packed_qps=nq / tp, packed_ns_per_item=tp / (nq * n) * 1e9,
        real_qps=nq / tr, real_ns_per_item=tr / (nq * n) * 1e9,
        speedup=tr / tp,
    )


def scan_seconds(index: CodeIndex, queries: CodeMatrix, k: int = 20, repeats: int = 3) -> float:
    """Best-of wall time for a packed scan of every query (for scaling checks)."""
    mask = np.zeros(len(index.items), dtype=np.bool_)
    words, K, qw = index.items.words, index.K, queries.words
    _scan_one(words, K, qw[0], k, mask)
    return _timed(lambda: [_scan_one(words, K, qw[q], k, mask) for q in range(len(qw))], repeats)

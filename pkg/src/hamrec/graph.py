"""Interaction logs, train/test splits, the user-item bipartite graph and
pairwise (BPR) triple sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MAX_TOKEN_BYTES = 256


class DataFormatError(ValueError):
    """Raised for unreadable interaction files; carries the offending line."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        where = f"{path}:{lineno}" if lineno else str(path)
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Deduplicated implicit-feedback events over dense ids.

    ``user``, ``item`` and ``timestamp`` are parallel int64 arrays. The
    token lists map dense id -> original token; train and test splits of the
    same log share them (and therefore share ``n_users``/``n_items``).
    """

    user: np.ndarray
    item: np.ndarray
    timestamp: np.ndarray
    user_tokens: tuple = ()
    item_tokens: tuple = ()
    n_users: int = 0
    n_items: int = 0

    def __post_init__(self):
        for name in ("user", "item", "timestamp"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not (len(self.user) == len(self.item) == len(self.timestamp)):
            raise ValueError("event arrays must have equal length")
        if len(self.user) and (self.user.min() < 0 or self.user.max() >= self.n_users):
            raise ValueError("user id out of range")
        if len(self.item) and (self.item.min() < 0 or self.item.max() >= self.n_items):
            raise ValueError("item id out of range")

    def __len__(self):
        return len(self.user)

    @property
    def n_events(self) -> int:
        return len(self.user)

    def user_map(self) -> dict:
        return {tok: i for i, tok in enumerate(self.user_tokens)}

    def item_map(self) -> dict:
        return {tok: i for i, tok in enumerate(self.item_tokens)}

    def subset(self, mask) -> "InteractionDataset":
        mask = np.asarray(mask)
        return InteractionDataset(
            self.user[mask], self.item[mask], self.timestamp[mask],
            self.user_tokens, self.item_tokens, self.n_users, self.n_items,
        )

    def edge_keys(self) -> np.ndarray:
        return self.user * self.n_items + self.item

    def items_by_user(self) -> list:
        """Per-user sorted arrays of item ids."""
        order = np.lexsort((self.item, self.user))
        bounds = np.searchsorted(self.user[order], np.arange(self.n_users + 1))
        items = self.item[order]
        return [items[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]


def load_interactions(path, format: str = "tsv") -> InteractionDataset:
    """Read a tab-separated interaction log.

    ``format="tsv"`` expects ``user<TAB>item[<TAB>timestamp][<TAB>rating]``;
    ``format="udata"`` is the MovieLens ``u.data`` column order
    ``user<TAB>item<TAB>rating<TAB>timestamp``. Ratings are ignored, lines
    starting with ``#`` are skipped. Duplicate pairs keep the earliest
    timestamp and the position of their first occurrence.
    """
    if format not in ("tsv", "udata"):
        raise ValueError(f"unknown interaction format {format!r}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"interaction file not found: {path}")

    users, items = {}, {}
    first = {}  # (u, i) -> index into events
    ev_user, ev_item, ev_time = [], [], []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip(b"\r\n")
            if not line.strip() or line.startswith(b"#"):
                continue
            cols = line.split(b"\t")
            if len(cols) < 2 or len(cols) > 4:
                raise DataFormatError(path, lineno, f"expected 2-4 tab-separated fields, got {len(cols)}")
            if format == "udata" and len(cols) != 4:
                raise DataFormatError(path, lineno, "u.data lines need user, item, rating, timestamp")
            utok, itok = cols[0].strip(), cols[1].strip()
            if not utok or not itok:
                raise DataFormatError(path, lineno, "empty user or item token")
            if len(utok) > MAX_TOKEN_BYTES or len(itok) > MAX_TOKEN_BYTES:
                raise DataFormatError(path, lineno, f"token longer than {MAX_TOKEN_BYTES} bytes")
            ts_col = 3 if format == "udata" else 2
            ts = 0
            if len(cols) > ts_col:
                try:
                    ts = int(cols[ts_col])
                except ValueError:
                    raise DataFormatError(path, lineno, f"bad timestamp {cols[ts_col]!r}") from None
            rating_col = 2 if format == "udata" else 3
            if len(cols) > rating_col:
                try:
                    float(cols[rating_col])
                except ValueError:
                    raise DataFormatError(path, lineno, f"bad rating {cols[rating_col]!r}") from None

            u = users.setdefault(utok.decode("utf-8", "replace"), len(users))
            i = items.setdefault(itok.decode("utf-8", "replace"), len(items))
            pos = first.get((u, i))
            if pos is None:
                first[(u, i)] = len(ev_user)
                ev_user.append(u)
                ev_item.append(i)
                ev_time.append(ts)
            elif ts < ev_time[pos]:
                ev_time[pos] = ts
    if not ev_user:
        raise DataFormatError(path, 0, "no interactions in file")
    return InteractionDataset(
        np.array(ev_user), np.array(ev_item), np.array(ev_time),
        tuple(users), tuple(items), len(users), len(items),
    )


def save_interactions(path, dataset: InteractionDataset) -> None:
    """Write dense-id events as ``user<TAB>item<TAB>timestamp`` lines."""
    with open(path, "w") as fh:
        for u, i, t in zip(dataset.user.tolist(), dataset.item.tolist(), dataset.timestamp.tolist()):
            fh.write(f"{u}\t{i}\t{t}\n")


@dataclass(frozen=True)
class SplitSpec:
    """``policy`` is one of ``leave-last-one``, ``leave-random-k`` or ``ratio``."""

    policy: str = "leave-last-one"
    seed: int = 0
    k: int = 1
    ratio: float = 0.2

    def __post_init__(self):
        if self.policy not in ("leave-last-one", "leave-random-k", "ratio"):
            raise ValueError(f"unknown split policy {self.policy!r}")
        if self.policy == "leave-random-k" and self.k < 1:
            raise ValueError("leave-random-k needs k >= 1")
        if self.policy == "ratio" and not 0.0 < self.ratio < 1.0:
            raise ValueError("ratio must be in (0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


def split(dataset: InteractionDataset, spec: SplitSpec):
    """Hold out events per user. Returns ``(train, test, summary)``.

    Users with fewer than two events stay train-only; ``summary`` counts them.
    """
    if dataset.n_events == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(int(spec.seed))
    n = dataset.n_events
    # group event positions by user, in event order
    order = np.argsort(dataset.user, kind="stable")
    bounds = np.searchsorted(dataset.user[order], np.arange(dataset.n_users + 1))
    held = np.zeros(n, dtype=bool)
    degenerate = 0
    for u in range(dataset.n_users):
        pos = order[bounds[u]:bounds[u + 1]]
        cnt = len(pos)
        if cnt == 0:
            continue
        if cnt < 2:
            degenerate += 1
            continue
        if spec.policy == "leave-last-one":
            ts = dataset.timestamp[pos]
            # latest timestamp; later file position wins ties
            last = np.flatnonzero(ts == ts.max())[-1]
            held[pos[last]] = True
        elif spec.policy == "leave-random-k":
            take = min(spec.k, cnt - 1)
            held[rng.choice(pos, size=take, replace=False)] = True
        else:
            take = min(int(round(spec.ratio * cnt)), cnt - 1)
            if take:
                held[rng.choice(pos, size=take, replace=False)] = True
    train, test = dataset.subset(~held), dataset.subset(held)
    summary = {
        "policy": spec.policy,
        "seed": int(spec.seed),
        "train_events": train.n_events,
        "test_events": test.n_events,
        "test_users": int(np.unique(test.user).size),
        "train_only_users": degenerate,
    }
    return train, test, summary


def dataset_summary(dataset: InteractionDataset, split_summary: dict | None = None) -> dict:
    out = {"N": dataset.n_users, "M": dataset.n_items, "edges": dataset.n_events}
    if split_summary:
        out["split"] = split_summary
    return out


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


PREPARED_FILES = ("train.tsv", "test.tsv", "users.txt", "items.txt", "summary.json")


def save_prepared(directory, train: InteractionDataset, test: InteractionDataset, summary: dict) -> None:
    """Write a split as dense-id event files plus the shared token vocabularies."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_interactions(directory / "train.tsv", train)
    save_interactions(directory / "test.tsv", test)
    (directory / "users.txt").write_text("".join(t + "\n" for t in train.user_tokens))
    (directory / "items.txt").write_text("".join(t + "\n" for t in train.item_tokens))
    write_summary(directory / "summary.json", summary)


def _read_dense(path, n_users, n_items, user_tokens, item_tokens) -> InteractionDataset:
    cols = [[], [], []]
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(path, lineno, "expected user, item, timestamp")
            try:
                for c, v in zip(cols, parts):
                    c.append(int(v))
            except ValueError:
                raise DataFormatError(path, lineno, "non-integer field") from None
    try:
        return InteractionDataset(*(np.array(c, dtype=np.int64) for c in cols),
                                  user_tokens, item_tokens, n_users, n_items)
    except ValueError as exc:
        raise DataFormatError(path, 0, str(exc)) from None


def load_prepared(directory):
    """Read back ``(train, test, summary)`` written by :func:`save_prepared`."""
    directory = Path(directory)
    for name in PREPARED_FILES:
        if not (directory / name).is_file():
            raise FileNotFoundError(f"prepared dataset file not found: {directory / name}")
    users = tuple((directory / "users.txt").read_text().splitlines())
    items = tuple((directory / "items.txt").read_text().splitlines())
    train = _read_dense(directory / "train.tsv", len(users), len(items), users, items)
    test = _read_dense(directory / "test.tsv", len(users), len(items), users, items)
    summary = json.loads((directory / "summary.json").read_text())
    return train, test, summary


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """CSR adjacency in both directions over ``n_users`` users and ``n_items`` items."""

    user_offsets: np.ndarray
    user_neighbors: np.ndarray
    item_offsets: np.ndarray
    item_neighbors: np.ndarray
    n_users: int
    n_items: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_edges(self) -> int:
        return int(self.user_offsets[-1])

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def user_degree(self) -> np.ndarray:
        return np.diff(self.user_offsets)

    def item_degree(self) -> np.ndarray:
        return np.diff(self.item_offsets)

    def items_of(self, u: int) -> np.ndarray:
        return self.user_neighbors[self.user_offsets[u]:self.user_offsets[u + 1]]

    def users_of(self, i: int) -> np.ndarray:
        return self.item_neighbors[self.item_offsets[i]:self.item_offsets[i + 1]]

    def neighbors(self, node: int) -> np.ndarray:
        """Neighbors of a node in the joint numbering (users first, items offset by N)."""
        if node < self.n_users:
            return self.items_of(node) + self.n_users
        return self.users_of(node - self.n_users)

    def degree(self) -> np.ndarray:
        """Degrees of all ``N + M`` nodes in joint numbering."""
        return np.concatenate([self.user_degree(), self.item_degree()])

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        users = np.repeat(np.arange(self.n_users), self.user_degree())
        return users, self.user_neighbors.copy()

    def has_edge(self, u, i):
        """Vectorized membership test for (user, item) pairs."""
        u = np.asarray(u, dtype=np.int64)
        i = np.asarray(i, dtype=np.int64)
        keys = self._cache.get("keys")
        if keys is None:
            eu, ei = self.edges()
            keys = self._cache["keys"] = eu * self.n_items + ei  # already sorted
        q = u * self.n_items + i
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        return (keys[pos] == q) if len(keys) else np.zeros(q.shape, dtype=bool)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric ``(N+M) x (N+M)`` 0/1 adjacency, users first."""
        A = self._cache.get("adjacency")
        if A is None:
            eu, ei = self.edges()
            N, M = self.n_users, self.n_items
            rows = np.concatenate([eu, ei + N])
            cols = np.concatenate([ei + N, eu])
            A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(N + M, N + M))
            A.sort_indices()
            self._cache["adjacency"] = A
        return A


def _csr(rows: np.ndarray, cols: np.ndarray, n_rows: int):
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    offsets = np.searchsorted(rows, np.arange(n_rows + 1)).astype(np.int64)
    return offsets, cols.astype(np.int64)


def build_graph(train: InteractionDataset) -> BipartiteGraph:
    keys = np.unique(train.edge_keys())
    u, i = np.divmod(keys, train.n_items) if train.n_items else (keys, keys)
    uo, un = _csr(u, i, train.n_users)
    io, inb = _csr(i, u, train.n_items)
    for a in (uo, un, io, inb):
        a.flags.writeable = False
    return BipartiteGraph(uo, un, io, inb, train.n_users, train.n_items)


class BprSampler:
    """Draws ``(user, positive item, negative item)`` triples.

    ``mode="edge"`` draws a uniform training edge (so users are picked in
    proportion to degree); ``mode="user"`` picks users uniformly among those
    with at least one edge. Negatives are uniform over non-neighbors.
    """

    def __init__(self, graph: BipartiteGraph, rng: np.random.Generator, mode: str = "edge"):
        if graph.n_edges == 0:
            raise ValueError("cannot sample from a graph without edges")
        if mode not in ("edge", "user"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        self.graph = graph
        self.rng = rng
        self.mode = mode
        deg = graph.user_degree()
        # users that interacted with every item have no negatives
        self._usable = (deg > 0) & (deg < graph.n_items)
        if not self._usable.any():
            raise ValueError("no user has both a positive and a negative item")
        self._edge_users, _ = graph.edges()
        self._usable_users = np.flatnonzero(self._usable)

    def _draw_positive(self, n):
        g = self.graph
        if self.mode == "edge":
            e = self.rng.integers(0, g.n_edges, size=n)
            return self._edge_users[e], g.user_neighbors[e]
        u = self._usable_users[self.rng.integers(0, len(self._usable_users), size=n)]
        off = g.user_offsets[u] + (self.rng.random(n) * g.user_degree()[u]).astype(np.int64)
        return u, g.user_neighbors[off]

    def sample_batch(self, n: int):
        """``n`` triples as three int64 arrays."""
        g = self.graph
        u, i = self._draw_positive(n)
        bad = ~self._usable[u]
        retries = 0
        # at least one usable user exists (checked in __init__), so this only
        # trips on pathological graphs
        while bad.any():
            retries += 1
            if retries > max(g.n_items, 1000):
                raise RuntimeError("could not draw a user with a negative item")
            u[bad], i[bad] = self._draw_positive(int(bad.sum()))
            bad = ~self._usable[u]
        j = self.rng.integers(0, g.n_items, size=n)
        clash = g.has_edge(u, j)
        while clash.any():
            j[clash] = self.rng.integers(0, g.n_items, size=int(clash.sum()))
            clash[clash] = g.has_edge(u[clash], j[clash])
        return u, i, j

    def sample(self):
        u, i, j = self.sample_batch(1)
        return int(u[0]), int(i[0]), int(j[0])


def sample_bpr_triple(graph: BipartiteGraph, rng: np.random.Generator, mode: str = "edge"):
    return BprSampler(graph, rng, mode).sample()

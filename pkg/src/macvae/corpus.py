"""Ingestion of interactions, documents and links; TF-IDF; item graph; splits."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, EmptyDatasetError, ParseError, UnknownIdError

SPLIT_HEADER = "# macvae-split v1"

INTRINSIC = 1
EXTRINSIC = 2


@dataclass
class InteractionMatrix:
    n_items: int
    n_tags: int
    rows: list[np.ndarray]
    item_ids: list[str] | None = None
    tag_ids: list[str] | None = None

    def __post_init__(self):
        if len(self.rows) != self.n_items:
            raise DataError(f"{len(self.rows)} rows for {self.n_items} items")
        for i, row in enumerate(self.rows):
            row = np.asarray(row, dtype=np.int64)
            if len(row) and (row.min() < 0 or row.max() >= self.n_tags):
                raise DataError(f"item {i} has a tag id outside [0, {self.n_tags})")
            if len(np.unique(row)) != len(row):
                raise DataError(f"item {i} repeats a tag")
            self.rows[i] = np.sort(row)

    @property
    def totals(self) -> np.ndarray:
        """Number of tags per item."""
        return np.array([len(r) for r in self.rows], dtype=np.int64)

    @property
    def n_pairs(self) -> int:
        return int(self.totals.sum())

    def dense(self, items: Sequence[int] | None = None) -> np.ndarray:
        items = range(self.n_items) if items is None else items
        out = np.zeros((len(items), self.n_tags))
        for k, i in enumerate(items):
            out[k, self.rows[i]] = 1.0
        return out

    def subset(self, items: Sequence[int]) -> "InteractionMatrix":
        items = list(items)
        return InteractionMatrix(len(items), self.n_tags, [self.rows[i].copy() for i in items],
                                 None if self.item_ids is None else [self.item_ids[i] for i in items],
                                 self.tag_ids)


@dataclass
class ContentFeatures:
    n_items: int
    vocab: list[str]
    rows: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if len(self.rows) != self.n_items:
            raise DataError(f"{len(self.rows)} content rows for {self.n_items} items")
        for terms, weights in self.rows:
            if len(terms) and (np.min(terms) < 0 or np.max(terms) >= len(self.vocab)):
                raise DataError("term id outside the vocabulary")
            if np.any(~np.isfinite(weights)) or np.any(weights < 0):
                raise DataError("tf-idf weights must be finite and non-negative")

    @property
    def width(self) -> int:
        return len(self.vocab)

    def dense(self, items: Sequence[int] | None = None) -> np.ndarray:
        items = range(self.n_items) if items is None else items
        out = np.zeros((len(items), self.width))
        for k, i in enumerate(items):
            terms, weights = self.rows[i]
            out[k, terms] = weights
        return out

    def subset(self, items: Sequence[int]) -> "ContentFeatures":
        items = list(items)
        return ContentFeatures(len(items), self.vocab, [self.rows[i] for i in items])


@dataclass
class SocialGraph:
    """Undirected, loop-free item graph; every present edge has weight 1.

    ``origin[(a, b)]`` (a < b) is a bit mask of INTRINSIC / EXTRINSIC.
    """

    n_items: int
    origin: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        self._adj = None

    @classmethod
    def from_edges(cls, n_items: int, edges: Iterable[tuple[int, int, int]]) -> "SocialGraph":
        origin: dict[tuple[int, int], int] = {}
        for a, b, kind in edges:
            a, b = int(a), int(b)
            for x in (a, b):
                if not 0 <= x < n_items:
                    raise UnknownIdError(f"item id {x} outside [0, {n_items})")
            if a == b:
                continue
            key = (a, b) if a < b else (b, a)
            origin[key] = origin.get(key, 0) | kind
        return cls(n_items, dict(sorted(origin.items())))

    @property
    def adjacency(self) -> list[np.ndarray]:
        if self._adj is None:
            nbrs: list[list[int]] = [[] for _ in range(self.n_items)]
            for a, b in self.origin:
                nbrs[a].append(b)
                nbrs[b].append(a)
            self._adj = [np.array(sorted(n), dtype=np.int64) for n in nbrs]
        return self._adj

    def neighbors(self, item: int) -> np.ndarray:
        return self.adjacency[item]

    def degree(self) -> np.ndarray:
        return np.array([len(n) for n in self.adjacency])

    def has_edge(self, a: int, b: int) -> bool:
        return ((a, b) if a < b else (b, a)) in self.origin

    @property
    def n_edges(self) -> int:
        return len(self.origin)

    def weight_matrix(self) -> np.ndarray:
        A = np.zeros((self.n_items, self.n_items))
        for a, b in self.origin:
            A[a, b] = A[b, a] = 1.0
        return A

    def isolated(self) -> np.ndarray:
        return np.flatnonzero(self.degree() == 0)

    def intrinsic_only(self, items: Iterable[int] | None = None) -> "SocialGraph":
        """Drop extrinsic-only edges touching ``items`` (all items when None)."""
        items = None if items is None else set(int(i) for i in items)
        kept = {}
        for (a, b), kind in self.origin.items():
            touches = items is None or a in items or b in items
            if touches and not kind & INTRINSIC:
                continue
            kept[(a, b)] = kind if not touches else INTRINSIC
        return SocialGraph(self.n_items, kept)

    def subgraph(self, items: Sequence[int]) -> "SocialGraph":
        """Induced subgraph re-indexed to ``range(len(items))``."""
        remap = {int(old): new for new, old in enumerate(items)}
        kept = {}
        for (a, b), kind in self.origin.items():
            if a in remap and b in remap:
                x, y = remap[a], remap[b]
                kept[(min(x, y), max(x, y))] = kind
        return SocialGraph(len(remap), dict(sorted(kept.items())))


@dataclass
class DatasetSplit:
    existing: np.ndarray
    cold: np.ndarray
    train: list[np.ndarray]
    valid: list[np.ndarray]
    test: list[np.ndarray]

    @property
    def n_items(self) -> int:
        return len(self.train)

    def train_matrix(self, n_tags: int) -> InteractionMatrix:
        return InteractionMatrix(self.n_items, n_tags, [t.copy() for t in self.train])


# -- readers ----------------------------------------------------------------------

def read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(path, line_no, f"expected 'a<TAB>b', got {line!r}")
            pairs.append((parts[0], parts[1]))
    return pairs


def read_documents(path) -> dict[str, list[str]]:
    docs = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            item, sep, text = line.partition("\t")
            if not sep or not item:
                raise ParseError(path, line_no, "expected 'item<TAB>tokens'")
            docs[item] = text.split()
    return docs


def _natural_key(s: str):
    return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)


def load_interactions(path, min_tag_count: int = 3) -> InteractionMatrix:
    """Read ``item<TAB>tag`` lines, drop rare tags and densify both id spaces."""
    pairs = sorted(set(read_pairs(path)))
    tag_counts = Counter(t for _, t in pairs)
    pairs = [(i, t) for i, t in pairs if tag_counts[t] >= min_tag_count]
    if not pairs:
        raise EmptyDatasetError(f"{path}: no interactions survive the tag filter (min count {min_tag_count})")
    item_ids = sorted({i for i, _ in pairs}, key=_natural_key)
    tag_ids = sorted({t for _, t in pairs}, key=_natural_key)
    item_index = {x: k for k, x in enumerate(item_ids)}
    tag_index = {x: k for k, x in enumerate(tag_ids)}
    rows: list[list[int]] = [[] for _ in item_ids]
    for i, t in pairs:
        rows[item_index[i]].append(tag_index[t])
    return InteractionMatrix(len(item_ids), len(tag_ids), [np.array(r, dtype=np.int64) for r in rows],
                             item_ids, tag_ids)


def write_id_map(path, ids: Sequence[str]):
    with open(path, "w", encoding="utf-8") as fh:
        for k, x in enumerate(ids):
            fh.write(f"{x}\t{k}\n")


def read_id_map(path) -> list[str]:
    pairs = read_pairs(path)
    ids = [None] * len(pairs)
    for ext, dense in pairs:
        ids[int(dense)] = ext
    return ids


# -- content --------------------------------------------------------------------

def build_content_features(documents: Sequence[Sequence[str]], vocab_size: int) -> ContentFeatures:
    """TF-IDF rows over the ``vocab_size`` most document-frequent terms.

    tf is the raw count, idf = ln(N / (1 + df)) clamped at 0, and every
    non-zero row is scaled to unit L2 norm.
    """
    n_docs = len(documents)
    df = Counter()
    for doc in documents:
        df.update(set(doc))
    vocab = [t for t, _ in sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))[:vocab_size]]
    if not vocab or vocab_size <= 0:
        raise ConfigError("content vocabulary is empty")
    index = {t: k for k, t in enumerate(vocab)}
    idf = np.array([max(0.0, math.log(n_docs / (1.0 + df[t]))) for t in vocab])
    rows = []
    for doc in documents:
        counts = Counter(index[t] for t in doc if t in index)
        terms = np.array(sorted(counts), dtype=np.int64)
        weights = np.array([counts[t] * idf[t] for t in terms], dtype=np.float64)
        norm = np.sqrt(np.sum(weights * weights))
        if norm > 0:
            weights = weights / norm
        rows.append((terms, weights))
    return ContentFeatures(n_docs, vocab, rows)


# -- graph ------------------------------------------------------------------------

def co_consumption_counts(n_items: int, user_item_log: Iterable[tuple[int, int]]) -> sp.csr_matrix:
    """Item x item matrix of distinct common users (diagonal cleared)."""
    users: dict = {}
    rows, cols = [], []
    for user, item in set((u, int(i)) for u, i in user_item_log):
        if not 0 <= item < n_items:
            raise UnknownIdError(f"item id {item} outside [0, {n_items})")
        rows.append(users.setdefault(user, len(users)))
        cols.append(item)
    B = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(users), n_items))
    C = (B.T @ B).tocsr()
    C.setdiag(0)
    C.eliminate_zeros()
    return C


def build_social_graph(n_items: int, intrinsic_edges: Iterable[tuple[int, int]],
                       user_item_log: Iterable[tuple[int, int]], co_threshold: int) -> SocialGraph:
    """Union of intrinsic links and co-consumption links (>= co_threshold users)."""
    edges = [(a, b, INTRINSIC) for a, b in intrinsic_edges]
    C = sp.triu(co_consumption_counts(n_items, user_item_log), k=1).tocoo()
    edges += [(a, b, EXTRINSIC) for a, b, c in zip(C.row, C.col, C.data) if c >= co_threshold]
    return SocialGraph.from_edges(n_items, edges)


# -- splits -----------------------------------------------------------------------

def split_dataset(inter: InteractionMatrix, n_cold: int, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetSplit:
    """Hold out ``n_cold`` items, then split each remaining item's tags."""
    if n_cold >= inter.n_items or n_cold < 0:
        raise ConfigError(f"n_cold={n_cold} must be in [0, {inter.n_items})")
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ConfigError(f"bad split ratios {ratios}")
    empty = [i for i, r in enumerate(inter.rows) if len(r) == 0]
    if empty:
        raise DataError(f"{len(empty)} items have no tags (first: {empty[0]})")
    rng = np.random.default_rng(seed)
    cold = np.sort(rng.choice(inter.n_items, size=n_cold, replace=False)).astype(np.int64)
    is_cold = np.zeros(inter.n_items, dtype=bool)
    is_cold[cold] = True
    existing = np.flatnonzero(~is_cold).astype(np.int64)
    total = float(sum(ratios))
    none = np.zeros(0, dtype=np.int64)
    train, valid, test = [none] * inter.n_items, [none] * inter.n_items, [none] * inter.n_items
    for i in existing:
        tags = rng.permutation(inter.rows[i])
        n = len(tags)
        n_valid = math.floor(n * ratios[1] / total)
        n_test = math.floor(n * ratios[2] / total)
        n_train = n - n_valid - n_test
        train[i] = tags[:n_train]
        valid[i] = tags[n_train:n_train + n_valid]
        test[i] = tags[n_train + n_valid:]
    seen = np.zeros(inter.n_tags, dtype=bool)
    for i in existing:
        seen[train[i]] = True
    for i in existing:
        for part in (valid, test):
            unseen = ~seen[part[i]]
            if unseen.any():
                train[i] = np.concatenate([train[i], part[i][unseen]])
                part[i] = part[i][~unseen]
    sort = lambda parts: [np.sort(p) for p in parts]
    return DatasetSplit(existing, cold, sort(train), sort(valid), sort(test))


def write_split(path, split: DatasetSplit):
    fmt = lambda a: " ".join(str(int(x)) for x in a)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SPLIT_HEADER + "\n")
        fh.write(f"n_items\t{split.n_items}\n")
        fh.write(f"cold\t{fmt(split.cold)}\n")
        for i in split.existing:
            fh.write(f"{i}\t{fmt(split.train[i])}\t{fmt(split.valid[i])}\t{fmt(split.test[i])}\n")


def read_split(path) -> DatasetSplit:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != SPLIT_HEADER:
        raise DataError(f"{path}: missing split header {SPLIT_HEADER!r}")
    parse = lambda s: np.array([int(x) for x in s.split()], dtype=np.int64)
    n_items = int(lines[1].split("\t")[1])
    cold = parse(lines[2].split("\t", 1)[1])
    none = np.zeros(0, dtype=np.int64)
    train, valid, test = [none] * n_items, [none] * n_items, [none] * n_items
    existing = []
    for line_no, line in enumerate(lines[3:], 4):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(path, line_no, "expected item, train, valid, test columns")
        i = int(parts[0])
        existing.append(i)
        train[i], valid[i], test[i] = parse(parts[1]), parse(parts[2]), parse(parts[3])
    return DatasetSplit(np.array(existing, dtype=np.int64), cold, train, valid, test)


# -- prepared dataset -------------------------------------------------------------

@dataclass
class Dataset:
    """Everything the models consume, over one densified item universe."""

    interactions: InteractionMatrix
    content: ContentFeatures
    graph: SocialGraph
    split: DatasetSplit

    def __post_init__(self):
        n = self.interactions.n_items
        sizes = {"content": self.content.n_items, "graph": self.graph.n_items, "split": self.split.n_items}
        bad = {k: v for k, v in sizes.items() if v != n}
        if bad:
            raise DataError(f"item universe mismatch: interactions has {n} items, {bad}")
        self._train = None
        self._graphs: dict[str, SocialGraph] = {}

    @property
    def n_items(self) -> int:
        return self.interactions.n_items

    @property
    def n_tags(self) -> int:
        return self.interactions.n_tags

    @property
    def train(self) -> InteractionMatrix:
        if self._train is None:
            self._train = self.split.train_matrix(self.n_tags)
        return self._train

    def training_graph(self) -> SocialGraph:
        """Edges among existing items only."""
        if "train" not in self._graphs:
            existing = set(int(i) for i in self.split.existing)
            self._graphs["train"] = SocialGraph(self.n_items, {e: k for e, k in self.graph.origin.items()
                                                               if e[0] in existing and e[1] in existing})
        return self._graphs["train"]

    def inference_graph(self) -> SocialGraph:
        """Training graph plus the intrinsic links of cold items."""
        if "infer" not in self._graphs:
            self._graphs["infer"] = self._inference_graph()
        return self._graphs["infer"]

    def _inference_graph(self) -> SocialGraph:
        existing = set(int(i) for i in self.split.existing)
        kept = {}
        for (a, b), kind in self.graph.origin.items():
            if a in existing and b in existing:
                kept[(a, b)] = kind
            elif kind & INTRINSIC:
                kept[(a, b)] = INTRINSIC
        return SocialGraph(self.n_items, kept)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        inter = self.interactions
        write_id_map(d / "items.map", inter.item_ids or [str(i) for i in range(inter.n_items)])
        write_id_map(d / "tags.map", inter.tag_ids or [str(t) for t in range(inter.n_tags)])
        with open(d / "interactions.tsv", "w", encoding="utf-8") as fh:
            for i, row in enumerate(inter.rows):
                for t in row:
                    fh.write(f"{i}\t{t}\n")
        with open(d / "vocab.txt", "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.content.vocab) + "\n")
        with open(d / "content.tsv", "w", encoding="utf-8") as fh:
            for i, (terms, weights) in enumerate(self.content.rows):
                cells = " ".join(f"{t}:{w!r}" for t, w in zip(terms, weights.tolist()))
                fh.write(f"{i}\t{cells}\n")
        with open(d / "graph.tsv", "w", encoding="utf-8") as fh:
            for (a, b), kind in self.graph.origin.items():
                fh.write(f"{a}\t{b}\t{kind}\n")
        write_split(d / "split.txt", self.split)

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        for name in ("items.map", "tags.map", "interactions.tsv", "vocab.txt", "content.tsv", "graph.tsv", "split.txt"):
            if not (d / name).exists():
                raise DataError(f"{d}: missing prepared file {name}")
        item_ids, tag_ids = read_id_map(d / "items.map"), read_id_map(d / "tags.map")
        rows: list[list[int]] = [[] for _ in item_ids]
        for i, t in read_pairs(d / "interactions.tsv"):
            rows[int(i)].append(int(t))
        inter = InteractionMatrix(len(item_ids), len(tag_ids), [np.array(r, dtype=np.int64) for r in rows],
                                  item_ids, tag_ids)
        vocab = (d / "vocab.txt").read_text(encoding="utf-8").split("\n")[:-1]
        crow = [(np.zeros(0, dtype=np.int64), np.zeros(0))] * len(item_ids)
        with open(d / "content.tsv", encoding="utf-8") as fh:
            for line in fh:
                item, _, cells = line.rstrip("\n").partition("\t")
                pairs = [c.split(":") for c in cells.split()]
                crow[int(item)] = (np.array([int(t) for t, _ in pairs], dtype=np.int64),
                                   np.array([float(w) for _, w in pairs]))
        content = ContentFeatures(len(item_ids), vocab, crow)
        edges = []
        with open(d / "graph.tsv", encoding="utf-8") as fh:
            for line in fh:
                a, b, kind = line.split()
                edges.append((int(a), int(b), int(kind)))
        graph = SocialGraph.from_edges(len(item_ids), edges)
        return cls(inter, content, graph, read_split(d / "split.txt"))


def prepare_dataset(raw_dir, *, min_tag_count=3, vocab_size=8000, co_threshold=4, n_cold=1000,
                    ratios=(0.6, 0.2, 0.2), seed=0) -> tuple[Dataset, dict]:
    """Raw TSV directory -> :class:`Dataset` plus a small statistics report.

    Tag filtering runs before removal of items without links.
    """
    raw = Path(raw_dir)
    inter = load_interactions(raw / "interactions.tsv", min_tag_count)
    index = {x: k for k, x in enumerate(inter.item_ids)}
    stats = {"items_after_tag_filter": inter.n_items, "tags": inter.n_tags}

    def known_pairs(path, both=True):
        out, dropped = [], 0
        if not path.exists():
            return out, dropped
        for a, b in read_pairs(path):
            if both and (a in index and b in index):
                out.append((index[a], index[b]))
            elif not both and b in index:
                out.append((a, index[b]))
            else:
                dropped += 1
        return out, dropped

    intrinsic, stats["intrinsic_dropped"] = known_pairs(raw / "edges_intrinsic.tsv")
    log, stats["log_dropped"] = known_pairs(raw / "user_item.tsv", both=False)
    graph = build_social_graph(inter.n_items, intrinsic, log, co_threshold)
    keep = np.flatnonzero(graph.degree() > 0)
    stats["isolated_removed"] = int(inter.n_items - len(keep))
    inter = inter.subset(keep)
    graph = graph.subgraph(keep)
    if inter.n_items == 0:
        raise EmptyDatasetError("every item is isolated in the social graph")
    docs = read_documents(raw / "docs.txt") if (raw / "docs.txt").exists() else {}
    content = build_content_features([docs.get(x, []) for x in inter.item_ids], vocab_size)
    split = split_dataset(inter, min(n_cold, inter.n_items - 1), ratios, seed)
    stats.update(items=inter.n_items, pairs=inter.n_pairs, edges=graph.n_edges, vocab=content.width,
                 cold=len(split.cold))
    return Dataset(inter, content, graph, split), stats

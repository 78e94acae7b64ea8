"""Seeded synthetic corpus with planted cluster structure.

Items belong to one of ``n_clusters`` clusters and every cluster owns a
window of ``cluster_tag_window`` consecutive tags (windows of adjacent
clusters overlap when it exceeds ``n_tags / n_clusters``). An item's tags
come mostly from its own window, the rest from the whole tag set, both with
a mild popularity skew. Documents
mix cluster words, noisy mentions of signature words of the item's tags and
background noise. Intrinsic links ("citations") stay inside the cluster
with probability ``p_link_in``; users read items of one cluster, biased
towards items carrying a tag they follow, which yields co-consumption
links. Output uses the raw formats read by ``prepare``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 500
    n_tags: int = 80
    n_clusters: int = 8
    cluster_tag_window: int = 12
    tags_per_item_mean: float = 6.0
    p_tag_in_cluster: float = 0.85
    popularity_exponent: float = 0.6
    words_per_tag: int = 4
    words_per_cluster: int = 8
    n_noise_words: int = 100
    p_mention: float = 0.6
    cluster_tokens: int = 4
    noise_tokens: int = 6
    citations_per_item: int = 4
    p_link_in: float = 0.85
    n_users: int = 3000
    items_per_user: int = 8
    seed: int = 0


def _zipf(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def generate(cfg: SynthConfig) -> dict:
    """Return raw records plus the planted cluster labels."""
    rng = np.random.default_rng(cfg.seed)
    block = cfg.n_tags // cfg.n_clusters
    tag_cluster = np.minimum(np.arange(cfg.n_tags) // block, cfg.n_clusters - 1)
    item_cluster = rng.integers(0, cfg.n_clusters, size=cfg.n_items)
    popularity = _zipf(cfg.n_tags, cfg.popularity_exponent)[rng.permutation(cfg.n_tags)]

    item_tags = []
    for i in range(cfg.n_items):
        k = int(np.clip(rng.poisson(cfg.tags_per_item_mean - 3) + 3, 3, cfg.n_tags // 2))
        own = (item_cluster[i] * block + np.arange(cfg.cluster_tag_window)) % cfg.n_tags
        chosen: set[int] = set()
        while len(chosen) < k:
            pool = own if rng.random() < cfg.p_tag_in_cluster else np.arange(cfg.n_tags)
            p = popularity[pool] / popularity[pool].sum()
            chosen.add(int(rng.choice(pool, p=p)))
        item_tags.append(sorted(chosen))

    docs = []
    for i in range(cfg.n_items):
        c = item_cluster[i]
        tokens = [f"c{c}w{rng.integers(cfg.words_per_cluster)}" for _ in range(cfg.cluster_tokens)]
        for t in item_tags[i]:
            for _ in range(2):
                if rng.random() < cfg.p_mention:
                    tokens.append(f"t{t}w{rng.integers(cfg.words_per_tag)}")
        tokens += [f"n{rng.integers(cfg.n_noise_words)}" for _ in range(cfg.noise_tokens)]
        docs.append([tokens[j] for j in rng.permutation(len(tokens))])

    members = [np.flatnonzero(item_cluster == c) for c in range(cfg.n_clusters)]
    citations = []
    for i in range(cfg.n_items):
        for _ in range(cfg.citations_per_item):
            same = rng.random() < cfg.p_link_in
            pool = members[item_cluster[i]] if same else np.arange(cfg.n_items)
            j = int(rng.choice(pool))
            if j != i:
                citations.append((i, j))

    tag_members = [[i for i in range(cfg.n_items) if t in set(item_tags[i])] for t in range(cfg.n_tags)]
    log = []
    for u in range(cfg.n_users):
        t = int(rng.choice(cfg.n_tags, p=popularity))
        pool = np.array(tag_members[t] or list(range(cfg.n_items)))
        take = min(cfg.items_per_user, len(pool))
        for i in rng.choice(pool, size=take, replace=False):
            log.append((u, int(i)))

    return {"item_tags": item_tags, "docs": docs, "citations": citations, "log": log,
            "item_cluster": item_cluster, "tag_cluster": tag_cluster}


def write_raw(directory, cfg: SynthConfig) -> Path:
    """Write ``interactions.tsv``, ``docs.txt``, ``edges_intrinsic.tsv``,
    ``user_item.tsv`` and the ground-truth cluster files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    data = generate(cfg)
    with open(d / "interactions.tsv", "w", encoding="utf-8") as fh:
        for i, tags in enumerate(data["item_tags"]):
            for t in tags:
                fh.write(f"i{i}\tt{t}\n")
    with open(d / "docs.txt", "w", encoding="utf-8") as fh:
        for i, tokens in enumerate(data["docs"]):
            fh.write(f"i{i}\t{' '.join(tokens)}\n")
    with open(d / "edges_intrinsic.tsv", "w", encoding="utf-8") as fh:
        for a, b in data["citations"]:
            fh.write(f"i{a}\ti{b}\n")
    with open(d / "user_item.tsv", "w", encoding="utf-8") as fh:
        for u, i in data["log"]:
            fh.write(f"u{u}\ti{i}\n")
    with open(d / "clusters.tsv", "w", encoding="utf-8") as fh:
        for i, c in enumerate(data["item_cluster"]):
            fh.write(f"i{i}\t{c}\n")
    with open(d / "tag_clusters.tsv", "w", encoding="utf-8") as fh:
        for t, c in enumerate(data["tag_cluster"]):
            fh.write(f"t{t}\t{c}\n")
    with open(d / "synth.cfg", "w", encoding="utf-8") as fh:
        for k, v in asdict(cfg).items():
            fh.write(f"{k}={v}\n")
    return d

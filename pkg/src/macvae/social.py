"""Inductive variational graph auto-encoder over the item graph.

Nodes are embedded from their own TF-IDF row and a sampled neighbourhood
with two mean-aggregation layers; nothing is stored per node, so unseen
items can be embedded from their features and links alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import SocialGraph
from .errors import ConfigError, SamplingError
from .numerics import GaussianParams, ParameterStore, autodiff as ad, glorot_uniform, loss_and_grad
from .numerics.autodiff import LOGVAR_MAX, LOGVAR_MIN


@dataclass
class SocialVGAEModel:
    feature_dim: int
    hidden: int = 64
    latent_dim: int = 64
    fanouts: tuple[int, ...] = (20, 20)
    concat_self: bool = False
    params: ParameterStore = field(default_factory=ParameterStore)

    @classmethod
    def create(cls, feature_dim, hidden=64, latent_dim=64, fanouts=(20, 20), concat_self=False, rng=None):
        if len(fanouts) != 2:
            raise ConfigError("the social encoder has exactly two aggregation layers")
        model = cls(feature_dim, hidden, latent_dim, tuple(int(f) for f in fanouts), concat_self)
        widen = 2 if concat_self else 1
        shapes = {"social.agg1": (widen * feature_dim, hidden),
                  "social.mu": (widen * hidden, latent_dim),
                  "social.logvar": (widen * hidden, latent_dim)}
        for prefix, (fan_in, fan_out) in shapes.items():
            w = glorot_uniform(rng, fan_in, fan_out) if rng is not None else np.zeros((fan_in, fan_out))
            model.params.add(f"{prefix}.W", w)
            model.params.add(f"{prefix}.b", np.zeros(fan_out))
        return model


@dataclass
class SubGraph:
    """Sampled two-layer neighbourhood of a batch of seed items.

    ``nodes[k]`` are the ids whose layer-k representation is needed
    (``nodes[0]`` carries raw features, ``nodes[-1]`` are the seeds).
    ``neighbors[k][i]`` indexes into ``nodes[k]`` the sampled neighbours of
    ``nodes[k + 1][i]`` and ``self_index[k][i]`` its own position.
    """

    seeds: np.ndarray
    nodes: list[np.ndarray]
    neighbors: list[list[np.ndarray]]
    self_index: list[np.ndarray]
    features: np.ndarray
    isolated: np.ndarray

    @property
    def n_touched(self) -> int:
        return len(self.nodes[0])


def _adjacency(graph) -> Sequence[np.ndarray]:
    return graph.adjacency if isinstance(graph, SocialGraph) else graph


def _draw(nbrs: np.ndarray, fanout: int, rng) -> np.ndarray:
    if rng is None or len(nbrs) == 0:
        return nbrs
    if len(nbrs) >= fanout:
        return rng.choice(nbrs, size=fanout, replace=False)
    # every neighbour once, topped up with replacement
    return np.concatenate([nbrs, rng.choice(nbrs, size=fanout - len(nbrs), replace=True)])


def sample_subgraph(graph, seeds, fanouts: Sequence[int], rng, features) -> SubGraph:
    """Sample the neighbourhood needed to embed ``seeds``.

    ``rng=None`` takes full neighbourhoods (deterministic inference). Each
    node's neighbours are drawn once per sub-graph, with the fan-out of the
    hop at which it is first reached.
    """
    if len(fanouts) != 2:
        raise ConfigError(f"expected two fan-outs, got {list(fanouts)}")
    adj = _adjacency(graph)
    seeds = np.asarray(seeds, dtype=np.int64)
    if len(np.unique(seeds)) != len(seeds):
        raise ConfigError("seed ids must be unique")
    drawn: dict[int, np.ndarray] = {}
    layers = [seeds]
    for fanout in fanouts:
        frontier = layers[-1]
        for u in frontier:
            u = int(u)
            if u not in drawn:
                drawn[u] = np.asarray(_draw(adj[u], fanout, rng), dtype=np.int64)
        parts = [frontier] + [drawn[int(u)] for u in frontier]
        layers.append(np.unique(np.concatenate(parts)))
    nodes = layers[::-1]
    neighbors, self_index = [], []
    for k in range(len(fanouts)):
        source, targets = nodes[k], nodes[k + 1]
        neighbors.append([np.searchsorted(source, drawn[int(u)]) for u in targets])
        self_index.append(np.searchsorted(source, targets))
    isolated = np.array([len(drawn[int(u)]) == 0 for u in seeds], dtype=bool)
    feats = _gather(features, nodes[0])
    return SubGraph(seeds, nodes, neighbors, self_index, np.asarray(feats, dtype=np.float64), isolated)


def _gather(features, ids) -> np.ndarray:
    if callable(features):
        return features(ids)
    if hasattr(features, "dense"):
        return features.dense(ids)
    return np.asarray(features)[ids]


def _aggregate(h, nbrs, selves, concat_self):
    if concat_self:
        groups = [n if len(n) else np.array([s]) for n, s in zip(nbrs, selves)]
        return ad.concat_cols(ad.take_rows(h, selves), ad.set_mean(h, groups))
    groups = [np.concatenate([[s], n]) for n, s in zip(nbrs, selves)]
    return ad.set_mean(h, groups)


def _encode(p, model: SocialVGAEModel, sub: SubGraph):
    if sub.features.shape[1] != model.feature_dim:
        raise ConfigError(f"node features have width {sub.features.shape[1]}, model expects {model.feature_dim}")
    h = ad.Tensor(sub.features)
    m = _aggregate(h, sub.neighbors[0], sub.self_index[0], model.concat_self)
    h = ad.tanh(ad.affine(m, p["social.agg1.W"], p["social.agg1.b"]))
    m = _aggregate(h, sub.neighbors[1], sub.self_index[1], model.concat_self)
    mu = ad.affine(m, p["social.mu.W"], p["social.mu.b"])
    lv = ad.clamp(ad.affine(m, p["social.logvar.W"], p["social.logvar.b"]), LOGVAR_MIN, LOGVAR_MAX)
    return mu, lv


def encode_social(sub: SubGraph, model: SocialVGAEModel) -> GaussianParams:
    """Posterior q(s | G) for the seeds of ``sub``, in seed order."""
    mu, lv = _encode(model.params.values, model, sub)
    return GaussianParams(mu.value, lv.value)


def infer_social(model: SocialVGAEModel, graph, features, items, batch_size: int = 256) -> GaussianParams:
    """Full-neighbourhood posteriors for ``items`` in batches."""
    items = np.asarray(items, dtype=np.int64)
    means, logvars = [], []
    for lo in range(0, len(items), batch_size):
        sub = sample_subgraph(graph, items[lo:lo + batch_size], model.fanouts, None, features)
        q = encode_social(sub, model)
        means.append(q.mean)
        logvars.append(q.logvar)
    if not means:
        return GaussianParams(np.zeros((0, model.latent_dim)), np.zeros((0, model.latent_dim)))
    return GaussianParams(np.concatenate(means), np.concatenate(logvars))


def relink(graph, item: int, neighbors) -> list[np.ndarray]:
    """Adjacency lists with ``item``'s links replaced by ``neighbors``."""
    adj = [a.copy() for a in _adjacency(graph)]
    item = int(item)
    new = np.unique(np.asarray(neighbors, dtype=np.int64))
    new = new[new != item]
    for u in adj[item]:
        adj[u] = adj[u][adj[u] != item]
    for u in new:
        adj[u] = np.sort(np.append(adj[u], item))
    adj[item] = new
    return adj


def encode_new_item(model: SocialVGAEModel, graph, features, item: int, feature_row, neighbors) -> GaussianParams:
    """Embed ``item`` as if it had just been linked to ``neighbors`` with the given features."""
    adj = list(_adjacency(graph))
    item = int(item)
    n_known = len(adj)
    if item >= n_known:
        # a brand-new id: grow the universe with empty slots
        adj = adj + [np.zeros(0, dtype=np.int64)] * (item + 1 - n_known)
    adj = relink(adj, item, neighbors)
    row = np.asarray(feature_row, dtype=np.float64)

    def gather(ids):
        out = np.zeros((len(ids), len(row)))
        known = ids < n_known
        if known.any():
            out[known] = _gather(features, ids[known])
        out[ids == item] = row
        return out

    sub = sample_subgraph(adj, [item], model.fanouts, None, gather)
    q = encode_social(sub, model)
    return q[0]


# -- triplets and the decoder ------------------------------------------------------

def random_walk_pairs(graph, walk_length: int, walks_per_node: int, rng, nodes=None) -> list[tuple[int, int]]:
    """(start, visited) pairs from uniform random walks; the start is never its own positive."""
    if walk_length < 1:
        raise ConfigError("walk_length must be at least 1")
    adj = _adjacency(graph)
    nodes = range(len(adj)) if nodes is None else nodes
    pairs = []
    for v in nodes:
        v = int(v)
        for _ in range(walks_per_node):
            cur = v
            for _ in range(walk_length):
                nb = adj[cur]
                if len(nb) == 0:
                    break
                cur = int(nb[rng.integers(len(nb))])
                if cur != v:
                    pairs.append((v, cur))
    return pairs


def sample_triplets(graph, walk_length: int = 3, walks_per_node: int = 5, rng=None, nodes=None, pool=None,
                    max_tries: int = 100) -> np.ndarray:
    """(v, v_pos, v_neg) rows: positives from random walks, negatives non-adjacent to v."""
    rng = np.random.default_rng(0) if rng is None else rng
    adj = _adjacency(graph)
    pool = np.arange(len(adj)) if pool is None else np.asarray(pool, dtype=np.int64)
    out = []
    for v, pos in random_walk_pairs(graph, walk_length, walks_per_node, rng, nodes):
        for _ in range(max_tries):
            neg = int(pool[rng.integers(len(pool))])
            if neg != v and not _adjacent(adj, v, neg):
                out.append((v, pos, neg))
                break
        else:
            raise SamplingError(f"no non-neighbour of item {v} found in {max_tries} draws")
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def _adjacent(adj, a, b) -> bool:
    nb = adj[a]
    k = np.searchsorted(nb, b)
    return bool(k < len(nb) and nb[k] == b)


def graph_bpr_loglik(s_v, s_pos, s_neg):
    """log sigmoid(s_v . s_pos - s_v . s_neg); row-wise for batches."""
    s_v, s_pos, s_neg = (np.asarray(a, dtype=np.float64) for a in (s_v, s_pos, s_neg))
    if not s_v.shape == s_pos.shape == s_neg.shape:
        raise ConfigError("embedding widths differ")
    margin = np.sum(s_v * s_pos, axis=-1) - np.sum(s_v * s_neg, axis=-1)
    out = ad.log_sigmoid(np.atleast_1d(margin)).value
    return float(out[0]) if np.ndim(margin) == 0 else out


def social_loss_fn(model: SocialVGAEModel, triplets, sub: SubGraph, v_hat, lam_s: float, noise):
    """-sum log sigmoid(margin) + KL over seeds + (lam_s / 2) ||v_hat - s||^2.

    ``triplets`` index rows of ``sub.seeds``; ``v_hat`` is aligned with them.
    """
    if lam_s < 0:
        raise ConfigError(f"lam_s must be non-negative, got {lam_s}")
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    noise = np.asarray(noise, dtype=np.float64).reshape(len(sub.seeds), model.latent_dim)

    def loss(p):
        mu, lv = _encode(p, model, sub)
        s = ad.reparameterize(mu, lv, noise)
        sv, sp, sn = (ad.take_rows(s, triplets[:, k]) for k in range(3))
        margin = ad.sub(ad.row_sum(ad.mul(sv, sp)), ad.row_sum(ad.mul(sv, sn)))
        total = ad.scale(ad.total(ad.log_sigmoid(margin)), -1.0) + ad.gaussian_kl(mu, lv)
        if lam_s > 0 and v_hat is not None:
            total = total + ad.scale(ad.total(ad.square(ad.sub(v_hat, s))), 0.5 * lam_s)
        return total

    return loss


def social_objective(model: SocialVGAEModel, triplets, sub: SubGraph, v_hat, lam_s: float, noise):
    return loss_and_grad(social_loss_fn(model, triplets, sub, v_hat, lam_s, noise), model.params)


def triplet_batch(triplets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique seed ids touched by ``triplets`` and the triplets re-indexed into them."""
    seeds = np.unique(triplets)
    return seeds, np.searchsorted(seeds, triplets)

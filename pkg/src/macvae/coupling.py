"""Model bundle, pretraining and the three-block coordinate-ascent loop.

Each epoch updates the item block, then the content block, then the
social block. A block reads the other models only through means inferred
at its start, which are plain arrays: no gradient crosses blocks.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .collab import MultVAEModel, encode_ratings, item_loss_fn, multvae_loss_fn
from .config import CouplingConfig
from .content import ContentVAEModel, content_loss_fn, encode_content
from .corpus import Dataset
from .errors import DataError, NumericalError
from .fusion import poe_fuse, poe_mean
from .numerics import load_checkpoint, loss_and_grad, save_checkpoint
from .ranking import evaluate
from .social import SocialVGAEModel, encode_new_item, infer_social, sample_subgraph, sample_triplets, \
    social_loss_fn, triplet_batch

__all__ = ["ModelBundle", "TrainState", "build_models", "poe_fuse", "pretrain", "rng_stream", "train"]

log = logging.getLogger(__name__)

STREAMS = {"split": 1, "init": 2, "noise": 3, "sampler": 4}
BLOCKS = {"item": 0, "content": 1, "social": 2}
PRETRAIN, COUPLED = 0, 1
CSV_COLUMNS = ("epoch", "item_loss", "content_loss", "social_loss", "val_recall", "val_ndcg", "val_mrr")


def rng_stream(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of the run seed."""
    return np.random.default_rng([int(seed), STREAMS[stream], *(int(k) for k in keys)])


@dataclass
class ModelBundle:
    collab: MultVAEModel
    content: ContentVAEModel | None
    social: SocialVGAEModel | None
    config: CouplingConfig

    @property
    def lam_c(self) -> float:
        return self.config.lam_c

    @property
    def lam_s(self) -> float:
        return self.config.lam_s

    def stores(self) -> dict:
        out = {"item": self.collab.params}
        if self.content is not None:
            out["content"] = self.content.params
        if self.social is not None:
            out["social"] = self.social.params
        return out

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    # -- detached means -----------------------------------------------------------

    def item_means(self, items, data: Dataset) -> np.ndarray:
        return encode_ratings(data.train.dense(items), self.collab).mean

    def content_means(self, items, data: Dataset) -> np.ndarray | None:
        if self.content is None:
            return None
        return encode_content(data.content.dense(items), self.content).mean

    def social_means(self, items, data: Dataset, graph=None) -> np.ndarray | None:
        if self.social is None:
            return None
        graph = data.training_graph() if graph is None else graph
        return infer_social(self.social, graph, data.content, items).mean

    def auxiliary_mean(self, items, data: Dataset, cold: bool = False) -> np.ndarray | None:
        """PoE mean of the available auxiliary experts for ``items``."""
        graph = data.inference_graph() if cold else data.training_graph()
        mu_c = self.content_means(items, data)
        mu_s = self.social_means(items, data, graph)
        if mu_c is None and mu_s is None:
            return None
        return poe_mean(mu_c, mu_s, self.lam_c, self.lam_s)

    def fuse_new_item(self, content_row, neighbors, data: Dataset, item: int | None = None) -> np.ndarray:
        content_row = np.asarray(content_row, dtype=np.float64)
        mu_c = encode_content(content_row[None, :], self.content).mean[0] if self.content is not None else None
        mu_s = None
        if self.social is not None:
            graph = data.inference_graph()
            item = graph.n_items if item is None else item
            mu_s = encode_new_item(self.social, graph, data.content, item, content_row, neighbors).mean
        if mu_c is None and mu_s is None:
            raise DataError("the collaborative-only model cannot score new items")
        return poe_mean(mu_c, mu_s, self.lam_c, self.lam_s)

    # -- persistence -----------------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        tensors = {}
        for store in self.stores().values():
            tensors.update(store.values)
        header = {"config": self.config.to_dict(), "n_tags": self.collab.n_tags,
                  "vocab_size": None if self.content is None else self.content.vocab_size,
                  "feature_dim": None if self.social is None else self.social.feature_dim,
                  "specs": {"collab.enc": self.collab.encoder.to_dict(), "collab.dec": self.collab.decoder.to_dict()}}
        if self.content is not None:
            header["specs"]["content.enc"] = self.content.encoder.to_dict()
            header["specs"]["content.dec"] = self.content.decoder.to_dict()
        header.update(extra or {})
        save_checkpoint(path, tensors, header)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        tensors, header = load_checkpoint(path)
        cfg = CouplingConfig(**header["config"])
        bundle = build_models(cfg, header["n_tags"], header["vocab_size"] or header["feature_dim"] or 1, rng=False)
        for store in bundle.stores().values():
            for name in store.values:
                if name not in tensors:
                    raise DataError(f"{path}: checkpoint lacks tensor {name!r}")
                store.values[name][...] = tensors[name]
        return bundle


def build_models(cfg: CouplingConfig, n_tags: int, vocab_size: int, rng=None) -> ModelBundle:
    """Fresh models for ``cfg.variant``; ``rng=False`` leaves every weight at zero."""
    def init(block):
        if rng is False:
            return None
        return rng if rng is not None else rng_stream(cfg.seed, "init", BLOCKS[block])

    collab = MultVAEModel.create(n_tags, cfg.latent_dim, cfg.collab_hidden, init("item"), cfg.normalize_input)
    content = social = None
    if cfg.use_content:
        content = ContentVAEModel.create(vocab_size, cfg.latent_dim, cfg.content_hidden_list, init("content"))
    if cfg.use_social:
        social = SocialVGAEModel.create(vocab_size, cfg.social_hidden, cfg.latent_dim, cfg.fanout_list,
                                        cfg.concat_self, init("social"))
    return ModelBundle(collab, content, social, cfg)


@dataclass
class TrainState:
    seed: int
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    steps: dict = field(default_factory=dict)
    best_epoch: int = -1
    best_recall: float = -math.inf
    best: ModelBundle | None = field(default=None, repr=False)
    stopped_early: bool = False

    def csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for row in self.history:
            lines.append(",".join(str(row[c]) if c == "epoch" else repr(float(row[c])) for c in CSV_COLUMNS))
        return "\n".join(lines) + "\n"


# -- block epochs ------------------------------------------------------------------

def _batches(ids, size, rng):
    ids = rng.permutation(np.asarray(ids, dtype=np.int64))
    return [ids[lo:lo + size] for lo in range(0, len(ids), size)]


def _step(store, make_loss, lr, block, epoch, batch_no):
    try:
        loss, _ = loss_and_grad(make_loss, store)
    except NumericalError as err:
        raise NumericalError(f"{block} block diverged at epoch {epoch}, batch {batch_no}: {err}", where=block) from err
    store.adam_step(lr)
    return loss


def _dropout_mask(cfg, rng, shape):
    if cfg.dropout <= 0:
        return None
    return (rng.random(shape) >= cfg.dropout) / (1.0 - cfg.dropout)


def item_epoch(bundle: ModelBundle, data: Dataset, epoch: int, lr: float, phase: int = COUPLED,
               content_mu=None, social_mu=None, plain_kl: float | None = None) -> tuple[float, int]:
    """One pass of the item block over existing items; returns (mean loss per item, steps).

    ``content_mu`` / ``social_mu`` are full (n_items, K) arrays of detached
    means. ``plain_kl`` switches to the plain Mult-VAE objective.
    """
    cfg, model = bundle.config, bundle.collab
    sampler = rng_stream(cfg.seed, "sampler", phase, BLOCKS["item"], epoch)
    noise_rng = rng_stream(cfg.seed, "noise", phase, BLOCKS["item"], epoch)
    total, steps = 0.0, 0
    existing = data.split.existing
    for b, batch in enumerate(_batches(existing, cfg.batch_size, sampler)):
        rows = data.train.dense(batch)
        noise = noise_rng.standard_normal((len(batch), model.latent_dim))
        mask = _dropout_mask(cfg, sampler, rows.shape)
        if plain_kl is not None:
            fn = multvae_loss_fn(model, rows, noise, plain_kl, mask)
        else:
            fn = item_loss_fn(model, rows, None if content_mu is None else content_mu[batch],
                              None if social_mu is None else social_mu[batch], cfg.lam_c, cfg.lam_s, noise,
                              aux_recon=cfg.aux_recon_enabled, mse_on_mean=cfg.mse_on_mean,
                              couple_via_poe=cfg.couple_via_poe, dropout_mask=mask)
        total += _step(model.params, fn, lr, "item", epoch, b)
        steps += 1
    return total / max(1, len(existing)), steps


def content_epoch(bundle: ModelBundle, data: Dataset, epoch: int, lr: float, phase: int = COUPLED,
                  item_mu=None) -> tuple[float, int]:
    cfg, model = bundle.config, bundle.content
    sampler = rng_stream(cfg.seed, "sampler", phase, BLOCKS["content"], epoch)
    noise_rng = rng_stream(cfg.seed, "noise", phase, BLOCKS["content"], epoch)
    lam = cfg.lam_c if item_mu is not None else 0.0
    total, steps = 0.0, 0
    existing = data.split.existing
    for b, batch in enumerate(_batches(existing, cfg.batch_size, sampler)):
        x = data.content.dense(batch)
        noise = noise_rng.standard_normal((len(batch), model.latent_dim))
        fn = content_loss_fn(model, x, None if item_mu is None else item_mu[batch], lam, noise)
        total += _step(model.params, fn, lr, "content", epoch, b)
        steps += 1
    return total / max(1, len(existing)), steps


def social_epoch(bundle: ModelBundle, data: Dataset, epoch: int, lr: float, phase: int = COUPLED,
                 item_mu=None) -> tuple[float, int]:
    cfg, model = bundle.config, bundle.social
    sampler = rng_stream(cfg.seed, "sampler", phase, BLOCKS["social"], epoch)
    noise_rng = rng_stream(cfg.seed, "noise", phase, BLOCKS["social"], epoch)
    graph = data.training_graph()
    existing = data.split.existing
    lam = cfg.lam_s if item_mu is not None else 0.0
    total, steps = 0.0, 0
    for b, anchors in enumerate(_batches(existing, cfg.social_batch_size, sampler)):
        triplets = sample_triplets(graph, cfg.walk_length, cfg.walks_per_node, sampler, nodes=np.sort(anchors),
                                   pool=existing)
        seeds = np.unique(np.concatenate([anchors, triplets.ravel()]))
        local = np.searchsorted(seeds, triplets)
        sub = sample_subgraph(graph, seeds, model.fanouts, sampler, data.content)
        noise = noise_rng.standard_normal((len(seeds), model.latent_dim))
        fn = social_loss_fn(model, local, sub, None if item_mu is None else item_mu[seeds], lam, noise)
        total += _step(model.params, fn, lr, "social", epoch, b)
        steps += 1
    return total / max(1, len(existing)), steps


# -- drivers ------------------------------------------------------------------------

def _full(values, items, n_items, width):
    out = np.zeros((n_items, width))
    out[items] = values
    return out


def pretrain(bundle: ModelBundle, data: Dataset, epochs: int | None = None,
             hook: Callable | None = None) -> ModelBundle:
    """Train each model on its own objective (no coupling) for warm-up epochs."""
    cfg = bundle.config
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    for epoch in range(epochs):
        losses = {"item": item_epoch(bundle, data, epoch, cfg.lr_pretrain, PRETRAIN,
                                     plain_kl=cfg.pretrain_kl_weight)[0]}
        if bundle.content is not None:
            losses["content"] = content_epoch(bundle, data, epoch, cfg.lr_pretrain, PRETRAIN)[0]
        if bundle.social is not None:
            losses["social"] = social_epoch(bundle, data, epoch, cfg.lr_pretrain, PRETRAIN)[0]
        log.debug("pretrain epoch %d: %s", epoch, losses)
        if hook:
            hook("pretrain_epoch", {"epoch": epoch, "losses": losses})
    return bundle


def train(bundle: ModelBundle, data: Dataset, epochs: int | None = None, hook: Callable | None = None) -> TrainState:
    """Coupled block coordinate ascent with per-epoch validation."""
    cfg = bundle.config
    epochs = cfg.epochs if epochs is None else epochs
    state = TrainState(cfg.seed)
    existing = data.split.existing
    n, k = data.n_items, cfg.latent_dim
    for epoch in range(epochs):
        row = {"epoch": epoch, "item_loss": math.nan, "content_loss": math.nan, "social_loss": math.nan}
        steps = {}

        mu_c = bundle.content_means(existing, data)
        mu_s = bundle.social_means(existing, data)
        mu_c = None if mu_c is None else _full(mu_c, existing, n, k)
        mu_s = None if mu_s is None else _full(mu_s, existing, n, k)
        if hook:
            hook("item_block", {"epoch": epoch, "content_mu": mu_c, "social_mu": mu_s})
        row["item_loss"], steps["item"] = item_epoch(bundle, data, epoch, cfg.lr_item, COUPLED, mu_c, mu_s)

        if bundle.content is not None:
            mu_v = _full(bundle.item_means(existing, data), existing, n, k)
            if hook:
                hook("content_block", {"epoch": epoch, "item_mu": mu_v})
            row["content_loss"], steps["content"] = content_epoch(bundle, data, epoch, cfg.lr_content, COUPLED, mu_v)

        if bundle.social is not None:
            mu_v = _full(bundle.item_means(existing, data), existing, n, k)
            if hook:
                hook("social_block", {"epoch": epoch, "item_mu": mu_v})
            row["social_loss"], steps["social"] = social_epoch(bundle, data, epoch, cfg.lr_social, COUPLED, mu_v)

        report = evaluate(data.split, bundle, data, n=cfg.val_at, segment="existing", truth="valid")
        row.update(val_recall=report.recall, val_ndcg=report.ndcg, val_mrr=report.mrr)
        state.history.append(row)
        state.steps = steps
        state.epoch = epoch + 1
        if report.recall > state.best_recall:
            state.best_recall, state.best_epoch = report.recall, epoch
            state.best = bundle.copy()
        log.info("epoch %d item=%.4f content=%.4f social=%.4f val_recall@%d=%.4f", epoch, row["item_loss"],
                 row["content_loss"], row["social_loss"], cfg.val_at, report.recall)
        if hook:
            hook("epoch_end", {"epoch": epoch, "row": row})
        if cfg.patience and epoch - state.best_epoch >= cfg.patience:
            state.stopped_early = True
            break
    if state.best is None:
        state.best = bundle.copy()
    return state

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances and budgets are fixed here and must not be relaxed.
"""
import math
import time

import numpy as np
import pytest

from acceptance_report import criterion
from macvae.cli import run_command
from macvae.collab import MultVAEModel, item_loss_fn, multinomial_nll
from macvae.config import desk_config
from macvae.content import ContentVAEModel, content_loss_fn
from macvae.corpus import INTRINSIC, SocialGraph, prepare_dataset
from macvae.coupling import build_models, pretrain, train
from macvae.fusion import poe_fuse
from macvae.numerics import GaussianParams, gaussian_kl, gradient_check
from macvae.ranking import evaluate, mrr_at_n, ndcg_at_n, rank_tags, recall_at_n
from macvae.social import (SocialVGAEModel, encode_new_item, infer_social, sample_subgraph, social_loss_fn)
from macvae.synth import SynthConfig, write_raw

GRAD_TOL = 1e-4
GRAD_SEEDS = 100
ABLATION_SEEDS = (0, 1, 2)
ABLATION_MARGIN = 0.03
COLD_FACTOR = 5.0
TOP_N = 10


# -- micro instances -------------------------------------------------------------

def micro_objectives(seed):
    """(name, loss closure, store) for every block objective on one random micro instance."""
    r = np.random.default_rng(seed)
    J, V, K = int(r.integers(2, 7)), int(r.integers(2, 9)), int(r.integers(1, 4))
    B = int(r.integers(1, 4))

    collab = MultVAEModel.create(J, K, int(r.integers(2, 5)), r)
    rows = (r.random((B, J)) < 0.5).astype(float)
    rows[:, r.integers(J)] = 1.0
    flags = {"mse_on_mean": bool(r.integers(2)), "couple_via_poe": bool(r.integers(2)), "aux_recon": True}
    item = item_loss_fn(collab, rows, r.standard_normal((B, K)), r.standard_normal((B, K)),
                        float(r.uniform(0.1, 5)), float(r.uniform(0.1, 5)), r.standard_normal((B, K)), **flags)

    content = ContentVAEModel.create(V, K, (int(r.integers(2, 5)),), r)
    cont = content_loss_fn(content, r.random((B, V)), r.standard_normal((B, K)), float(r.uniform(0.1, 5)),
                           r.standard_normal((B, K)))

    edges = {(0, 1), (1, 2), (2, 3), (3, 4)} | {(int(a), int(b)) for a, b in r.integers(0, 5, (3, 2)) if a != b}
    g = SocialGraph.from_edges(5, [(a, b, INTRINSIC) for a, b in edges])
    social = SocialVGAEModel.create(V, int(r.integers(2, 5)), K, (2, 2), bool(r.integers(2)), r)
    sub = sample_subgraph(g, np.arange(5), (2, 2), r, r.random((5, V)))
    trip = [[v, p, n] for v, p, n in ((0, 1, 3), (2, 3, 0), (4, 3, 1), (1, 2, 4)) if not g.has_edge(v, n)]
    soc = social_loss_fn(social, trip, sub, r.standard_normal((5, K)), float(r.uniform(0.1, 5)),
                         r.standard_normal((5, K)))
    return [("item", item, collab.params), ("content", cont, content.params), ("social", soc, social.params)]


def test_gradient_suite():
    with criterion("gradient suite (all block objectives vs central differences, 100 seeds)") as c:
        worst = {"item": 0.0, "content": 0.0, "social": 0.0}
        for seed in range(GRAD_SEEDS):
            for name, fn, store in micro_objectives(seed):
                worst[name] = max(worst[name], gradient_check(fn, store, store.names(), eps=1e-5))
        ok = max(worst.values()) < GRAD_TOL and c.elapsed < 60
        c.verdict(ok, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) +
                  f" (< {GRAD_TOL:g}); budget 60s")
    assert c.ok, c.detail


# -- closed forms -----------------------------------------------------------------

def test_closed_form_oracles():
    with criterion("closed-form oracles (KL Monte-Carlo, PoE hand value, NLL grid minimiser)") as c:
        r = np.random.default_rng(42)
        mu, lv = r.standard_normal(4) * 0.8, r.standard_normal(4) * 0.5
        z = mu + np.exp(0.5 * lv) * r.standard_normal((1_000_000, 4))
        log_q = -0.5 * np.sum(np.log(2 * np.pi) + lv + (z - mu) ** 2 / np.exp(lv), axis=1)
        log_p = -0.5 * np.sum(np.log(2 * np.pi) + z ** 2, axis=1)
        d = log_q - log_p
        exact = gaussian_kl(GaussianParams(mu, lv))
        se = d.std(ddof=1) / math.sqrt(len(d))
        kl_ok = abs(d.mean() - exact) < 3 * se

        fused = poe_fuse(GaussianParams(np.array([0.2, 0.0]), np.zeros(2)),
                         GaussianParams(np.array([0.4, 4.0]), np.zeros(2)), 1.0, 3.0)
        hand = np.array([(0.2 * 1 + 0.4 * 3) / 4, (0.0 * 1 + 4.0 * 3) / 4])
        poe_ok = np.array_equal(fused.mean, hand) and np.array_equal(fused.logvar, np.full(2, -math.log(4.0)))

        row = np.array([2.0, 1.0, 1.0])
        steps = 200
        grid = [(a, b, steps - a - b) for a in range(1, steps) for b in range(1, steps - a)]
        best = min(grid, key=lambda p: multinomial_nll(np.log(np.array(p) / steps), row))
        nll_ok = np.allclose(np.array(best) / steps, row / row.sum(), atol=1 / steps)

        ok = kl_ok and poe_ok and nll_ok and c.elapsed < 60
        c.verdict(ok, f"KL |MC-exact|={abs(d.mean() - exact):.2e} vs 3SE={3 * se:.2e}; PoE exact={poe_ok}; "
                      f"NLL argmin={[round(x / steps, 3) for x in best]} vs r/|r|; budget 60s")
    assert c.ok, c.detail


# -- metric oracles ---------------------------------------------------------------

def brute(top, truth):
    hits = [t in truth for t in top]
    recall = sum(hits) / len(truth)
    dcg = sum(1.0 / math.log2(i + 2) for i, h in enumerate(hits) if h)
    ndcg = min(1.0, max(0.0, dcg / (len(truth) / math.log(2))))
    mrr = next((1.0 / (i + 1) for i, h in enumerate(hits) if h), 0.0)
    return recall, ndcg, mrr


def test_metric_oracles():
    with criterion("metric oracles (recall/ndcg/mrr vs brute force, 1000 instances, exact)") as c:
        r = np.random.default_rng(7)
        mismatches = 0
        for _ in range(1000):
            J = int(r.integers(5, 60))
            n = int(r.integers(1, J + 1))
            ranked = rank_tags(r.random(J), n)
            truth = set(r.choice(J, size=int(r.integers(1, J + 1)), replace=False).tolist())
            got = (recall_at_n(ranked, truth), ndcg_at_n(ranked, truth), mrr_at_n(ranked, truth))
            mismatches += got != brute(ranked.tags.tolist(), truth)
        c.verdict(mismatches == 0 and c.elapsed < 10, f"{mismatches} mismatches; budget 10s")
    assert c.ok, c.detail


# -- ablation and cold start ------------------------------------------------------

@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    t0 = time.perf_counter()
    out = {"existing": {}, "cold": [], "random": []}
    for seed in ABLATION_SEEDS:
        raw = tmp_path_factory.mktemp(f"ablation{seed}")
        write_raw(raw, SynthConfig(seed=seed))
        data, _ = prepare_dataset(raw, vocab_size=400, n_cold=50, seed=seed)
        for variant in ("full", "content", "collab"):
            bundle = build_models(desk_config(variant=variant, seed=seed), data.n_tags, data.content.width)
            pretrain(bundle, data)
            best = train(bundle, data).best
            out["existing"].setdefault(variant, []).append(evaluate(data.split, best, data, TOP_N).recall)
            if variant == "full":
                out["cold"].append(evaluate(data.split, best, data, TOP_N, segment="cold").recall)
                # a uniformly random ranking hits each truth tag with probability N / J
                out["random"].append(min(TOP_N, data.n_tags) / data.n_tags)
    out["seconds"] = time.perf_counter() - t0
    return out


def test_ablation_ordering(ablation):
    with criterion("ablation ordering (Recall@10: full >= content >= collab, full - collab >= 0.03)") as c:
        mean = {v: float(np.mean(x)) for v, x in ablation["existing"].items()}
        ok = (mean["full"] >= mean["content"] >= mean["collab"]
              and mean["full"] - mean["collab"] >= ABLATION_MARGIN and ablation["seconds"] < 900)
        c.verdict(ok, f"full={mean['full']:.4f} content={mean['content']:.4f} collab={mean['collab']:.4f} "
                      f"margin={mean['full'] - mean['collab']:.4f} over seeds {ABLATION_SEEDS}; "
                      f"ablation run {ablation['seconds']:.0f}s (budget 900s)")
    assert c.ok, c.detail


def test_cold_start(ablation):
    with criterion("cold start (full-model Recall@10 on cold items >= 5x random)") as c:
        cold, rand = float(np.mean(ablation["cold"])), float(np.mean(ablation["random"]))
        c.verdict(cold >= COLD_FACTOR * rand, f"cold={cold:.4f} random={rand:.4f} ratio={cold / rand:.2f}x")
    assert c.ok, c.detail


# -- inductive invariant ---------------------------------------------------------

def test_inductive_invariant(tmp_path):
    with criterion("inductive invariant (cold-path re-encoding reproduces every social embedding exactly)") as c:
        raw = tmp_path / "raw"
        write_raw(raw, SynthConfig(seed=11))
        data, _ = prepare_dataset(raw, vocab_size=400, n_cold=50, seed=11)
        bundle = build_models(desk_config(seed=11), data.n_tags, data.content.width)
        pretrain(bundle, data, epochs=2)
        train(bundle, data, epochs=2)
        m, feats = bundle.social, data.content
        bad, checked = 0, 0
        intrinsic = data.graph.intrinsic_only()
        for g in (data.training_graph(), intrinsic):
            nodes = data.split.existing if g is not intrinsic else np.arange(data.n_items)
            reference = infer_social(m, g, feats, nodes).mean
            for k, v in enumerate(nodes):
                q = encode_new_item(m, g, feats, int(v), feats.dense([int(v)])[0], g.neighbors(int(v)))
                bad += not np.array_equal(q.mean, reference[k])
                checked += 1
        c.verdict(bad == 0 and c.elapsed < 60, f"{bad} of {checked} re-encodings differ; budget 60s")
    assert c.ok, c.detail


# -- determinism -----------------------------------------------------------------

def test_determinism(tmp_path):
    with criterion("determinism (two train runs: identical loss CSV and checkpoints)") as c:
        assert run_command(["synth", "--out", str(tmp_path / "raw"), "--seed", "3"]) == 0
        assert run_command(["prepare", "--raw", str(tmp_path / "raw"), "--out", str(tmp_path / "data"),
                            "--vocab-size", "400", "--n-cold", "50", "--seed", "3"]) == 0
        for name in ("a", "b"):
            assert run_command(["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / name),
                                "--preset", "desk", "--set", "seed=3"]) == 0
        files = ("loss.csv", "best.ckpt", "last.ckpt", "pretrain_loss.csv")
        differ = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
        c.verdict(not differ and c.elapsed < 900, f"differing files: {differ or 'none'} of {list(files)}; "
                                                  f"budget 900s")
    assert c.ok, c.detail


# -- block isolation ----------------------------------------------------------------

def coupled_losses(bundle, data, rng):
    """Each block's loss built the way the training loop builds it: from the
    other models' means taken at the start of the block."""
    cfg = bundle.config
    items = data.split.existing[:12]
    k = cfg.latent_dim
    mu_c, mu_s = bundle.content_means(items, data), bundle.social_means(items, data)
    mu_v = bundle.item_means(items, data)
    item = item_loss_fn(bundle.collab, data.train.dense(items), mu_c, mu_s, cfg.lam_c, cfg.lam_s,
                        rng.standard_normal((len(items), k)))
    cont = content_loss_fn(bundle.content, data.content.dense(items), mu_v, cfg.lam_c,
                           rng.standard_normal((len(items), k)))
    g = data.training_graph()
    sub = sample_subgraph(g, items, bundle.social.fanouts, rng, data.content)
    trip = [[0, 1, 2], [3, 4, 5], [6, 7, 8]]
    soc = social_loss_fn(bundle.social, trip, sub, mu_v, cfg.lam_s, rng.standard_normal((len(items), k)))
    return [("item", item, bundle.collab.params), ("content", cont, bundle.content.params),
            ("social", soc, bundle.social.params)]


def test_block_isolation(tmp_path):
    with criterion("block isolation (each block loss insensitive to other blocks' parameters)") as c:
        raw = tmp_path / "raw"
        write_raw(raw, SynthConfig(n_items=120, n_users=600, seed=4))
        data, _ = prepare_dataset(raw, vocab_size=200, n_cold=12, seed=4)
        bundle = build_models(desk_config(seed=4), data.n_tags, data.content.width)
        pretrain(bundle, data, epochs=1)
        sensitive, probes = 0, 0
        for seed in range(5):
            objectives = coupled_losses(bundle, data, np.random.default_rng(seed))
            for name, fn, store in objectives:
                base = fn(store.values).value
                for _, _, other in objectives:
                    if other is store:
                        continue
                    for slot in other.names():
                        arr = other.values[slot]
                        for idx in range(min(arr.size, 3)):
                            for eps in (1e-5, -1e-5):
                                arr.flat[idx] += eps
                                sensitive += fn(store.values).value != base
                                arr.flat[idx] -= eps
                                probes += 1
        c.verdict(sensitive == 0 and c.elapsed < 60, f"{sensitive} of {probes} probes changed a loss; budget 60s")
    assert c.ok, c.detail

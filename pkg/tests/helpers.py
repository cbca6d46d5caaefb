"""Shared oracles and tiny fixtures for the test suite."""

import numpy as np

from outfitcompat.data import DatasetSplit, Item, Outfit
from outfitcompat.model import CompatModel, ModelConfig
from outfitcompat.store import PairSet


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def push_from_kinks(arr, margin=1e-3, rng=None):
    """Move entries with ``|x| <= margin`` away from zero (L1 / ReLU kinks)."""
    small = np.abs(arr) <= margin
    arr[small] = np.where(arr[small] >= 0, 1, -1) * (margin + 0.05)
    return arr


def naive_dense(x, W, b):
    out = np.zeros((x.shape[0], W.shape[0]))
    for n in range(x.shape[0]):
        for p in range(W.shape[0]):
            s = 0.0
            for q in range(W.shape[1]):
                s += W[p, q] * x[n, q]
            out[n, p] = s + (b[p] if b is not None else 0.0)
    return out


def naive_conv(x, f, stride):
    N, C, H, W = x.shape
    F, _, k, _ = f.shape
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for o in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(C):
                        for a in range(k):
                            for b in range(k):
                                s += x[n, c, i * stride + a, j * stride + b] * f[o, c, a, b]
                    out[n, o, i, j] = s
    return out


def tiny_conv_config(**kw):
    base = dict(encoder="conv", conv_filters=(3, 4), kernel=3, stride=1, frozen_prefix=1,
                hidden=(6, 4), bins=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_precomputed_config(D=5, **kw):
    base = dict(encoder="precomputed", embedding_dim=D, hidden=(6, 4), bins=2)
    base.update(kw)
    return ModelConfig(**base)


def random_hist(rng, n, bins):
    h = rng.uniform(0.1, 1.0, size=(n, 3 * bins))
    return h / h.sum(axis=1, keepdims=True)


def tiny_problem(seed, conv=True, n_items=6, n_pairs=8, size=7, **kw):
    """A random tiny model, its item features and a batch of labeled pairs."""
    rng = np.random.default_rng(seed)
    cfg = tiny_conv_config(**kw) if conv else tiny_precomputed_config(**kw)
    model = CompatModel.init(cfg, seed=seed)
    # larger readout and BN scales keep gradients well away from round-off
    model.params["readout.w"] = rng.uniform(0.5, 1.5, model.params["readout.w"].shape) * \
        rng.choice([-1, 1], model.params["readout.w"].shape)
    hist = random_hist(rng, n_items, cfg.bins) if cfg.use_color else None
    if conv:
        images = rng.uniform(0, 1, size=(n_items, 3, size, size))
        feats = model.features(images=images, hist=hist)
    else:
        feats = model.features(embeddings=rng.normal(size=(n_items, cfg.embedding_dim)), hist=hist)
    right = rng.integers(0, n_items, n_pairs)
    left = (right + rng.integers(1, n_items, n_pairs)) % n_items
    labels = (rng.uniform(size=n_pairs) < 0.5).astype(float)
    labels[:2] = [0.0, 1.0]
    return model, feats, PairSet(right, left, labels)


def mini_dataset(n_outfits=12, n_cat=3, seed=0):
    """Hand-made dataset without images, categories round-robin."""
    rng = np.random.default_rng(seed)
    cats = [f"c{k}" for k in range(n_cat)]
    items, outfits = {}, []
    for n in range(n_outfits):
        members = []
        for k in range(int(rng.integers(2, n_cat + 1))):
            iid = f"i{len(items):04d}"
            items[iid] = Item(iid, cats[(n + k) % n_cat], None)
            members.append(iid)
        outfits.append(Outfit(f"o{n:03d}", tuple(members)))
    a, b = int(0.6 * n_outfits), int(0.8 * n_outfits)
    return DatasetSplit(items, outfits[:a], outfits[a:b], outfits[b:])


def trace_objective_oracle(W, restarts=200, iters=1500, eps=1e-8, seed=0, lr=0.05):
    """Brute-force ``min tr(W L^-1 W^T)`` over ``L = S S^T / tr(S S^T)``.

    Runs Adam from ``restarts`` random factors ``S`` at once, using the
    analytic gradient of the parametrized objective, and returns the best
    objective value reached.
    """
    rng = np.random.default_rng(seed)
    Q = W.shape[1]
    G0 = W.T @ W
    S = rng.normal(size=(restarts, Q, Q))
    m = np.zeros_like(S)
    v = np.zeros_like(S)
    eye = np.eye(Q)
    best = np.inf

    def value_and_grad(S):
        A = S @ S.transpose(0, 2, 1)
        t = np.trace(A, axis1=1, axis2=2)[:, None, None]
        M = np.linalg.inv(A / t + eps * eye)
        f = np.einsum("bij,ji->b", M, G0)
        G = -M @ G0 @ M
        H = G / t - (np.einsum("bij,bji->b", G, A)[:, None, None] / t ** 2) * eye
        return f, 2 * H @ S

    for k in range(1, iters + 1):
        f, g = value_and_grad(S)
        best = min(best, float(np.min(f)))
        # scale-free in S, so normalize to keep the iterates well conditioned
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        S = S - lr * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-12)
        S = S / np.linalg.norm(S, axis=(1, 2), keepdims=True)
    f, _ = value_and_grad(S)
    return min(best, float(np.min(f)))


def monte_carlo_precision(outfit_targets, pool_sizes, k, trials, rng):
    """Average precision@K of a recommender picking K pool items uniformly at random.

    ``outfit_targets`` lists, per outfit, the categories of its targets.
    Returns ``(mean, standard_error)`` over ``trials`` simulated evaluations.
    """
    per_trial = np.zeros(trials)
    for cats in outfit_targets:
        hits = np.zeros(trials)
        for c in cats:
            P = pool_sizes[c]
            # the K smallest of P iid uniform keys form a uniform K-subset;
            # the target (item 0) is inside iff fewer than K keys undercut it
            keys = rng.random((trials, P))
            hits += (keys[:, 1:] < keys[:, :1]).sum(axis=1) < k
        per_trial += hits / len(cats)
    per_trial /= len(outfit_targets)
    return per_trial.mean(), per_trial.std(ddof=1) / np.sqrt(trials)


def simulated_outfits(n_outfits, pool_sizes, seed):
    """Outfits drawn over fixed per-category pools; returns ``(outfits, items, pools)``."""
    from outfitcompat.data import Item, Outfit

    rng = np.random.default_rng(seed)
    items, pools = {}, {}
    for c, size in pool_sizes.items():
        pools[c] = [f"{c}-{k:04d}" for k in range(size)]
        for iid in pools[c]:
            items[iid] = Item(iid, c)
    cats = sorted(pool_sizes)
    outfits = []
    for n in range(n_outfits):
        chosen = rng.permutation(cats)[:int(rng.integers(2, len(cats) + 1))]
        outfits.append(Outfit(f"o{n}", tuple(pools[c][int(rng.integers(len(pools[c])))]
                                              for c in chosen)))
    return outfits, items, pools

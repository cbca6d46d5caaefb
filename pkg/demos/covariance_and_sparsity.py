"""The two regularizers in isolation.

1. The closed-form column covariance beats random unit-trace covariances
   on the trace penalty.
2. Soft-thresholding the readout with a growing L1 weight zeroes more of it.

    python3 demos/covariance_and_sparsity.py
"""

import numpy as np

from outfitcompat.data import make_pairs, synth_generate
from outfitcompat.model import CompatModel, ModelConfig
from outfitcompat.objective import RegWeights, covariance_update, trace_reg
from outfitcompat.store import ItemStore
from outfitcompat.trainer import TrainConfig, fit


def covariance_demo(rng):
    W = rng.normal(size=(6, 4))
    lam = covariance_update(W)
    best = trace_reg(W, lam)
    others = []
    for _ in range(1000):
        S = rng.normal(size=(4, 4))
        L = S @ S.T
        others.append(trace_reg(W, L / np.trace(L)))
    sv = np.linalg.svd(W, compute_uv=False)
    print(f"closed form: {best:.6f}   (sum of singular values)^2: {sv.sum() ** 2:.6f}"
          "  (gap from the 1e-8 inversion stabilizer)")
    print(f"best of 1000 random unit-trace covariances: {min(others):.6f}")


def sparsity_demo():
    synth = synth_generate(120, seed=11, size=16)

    class Store(ItemStore):
        def raw_images(self):
            return [synth.images[i] for i in self.ids]

    store = Store(synth.dataset)
    ds = synth.dataset
    config = ModelConfig(conv_filters=(8, 16), frozen_prefix=1, hidden=(32, 16))
    feats = store.model_features(CompatModel.init(config))
    train = store.pairs(make_pairs(ds.train, seed=0))
    val = store.pairs(make_pairs(ds.val, seed=1))
    for lam in (0.0, 0.1, 1.0, 10.0):
        res = fit(CompatModel.init(config, seed=0), feats, train, val,
                  TrainConfig(lr=1e-3, max_epochs=4, proximal_l1=True, reg=RegWeights(0, 0, lam)))
        w = res.model.params["readout.w"]
        print(f"lambda3 = {lam:5.1f}: {np.mean(np.abs(w) < 1e-6):.3f} of {w.size} readout weights are zero")


if __name__ == "__main__":
    covariance_demo(np.random.default_rng(0))
    sparsity_demo()

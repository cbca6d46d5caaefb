"""Siamese compatibility model.

A shared conv encoder (or a lookup table of precomputed embeddings) maps
each item to a vector.  The two vectors of a pair are merged, either with a
Hadamard product or by concatenation, the Hadamard product of the items'
color histograms is appended, and the result runs through a stack of
dense -> batch norm -> ReLU layers.  A linear readout followed by a sigmoid
gives the compatibility probability.

Parameters live in a flat ``name -> ndarray`` dict so that optimizers,
regularizers and the checkpoint writer can treat them uniformly::

    conv{i}.W             encoder filters, (F, C, k, k)
    fc{j}.W  [fc{j}.b]    metric weights, (out, in)
    bn{j}.scale, bn{j}.shift
    readout.w  [readout.b]

Batch-norm running statistics are kept apart in ``model.state``.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import nn

__all__ = ["ModelConfig", "ItemFeatures", "CompatModel"]


@dataclass
class ModelConfig:
    encoder: str = "conv"
    in_channels: int = 3
    conv_filters: tuple = (8, 16, 32, 64)
    kernel: int = 3
    stride: int = 2
    frozen_prefix: int = 2
    embedding_dim: int = None
    hidden: tuple = (256, 64)
    bins: int = 8
    merge: str = "hadamard"
    use_color: bool = True
    readout_bias: bool = False
    dense_bias: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.encoder not in ("conv", "precomputed"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.merge not in ("hadamard", "concat"):
            raise ValueError(f"unknown merge mode {self.merge!r}")
        if not self.hidden:
            raise ValueError("metric network needs at least one layer")
        if self.encoder == "conv":
            if not self.conv_filters:
                raise ValueError("conv encoder needs at least one layer")
            if not 0 <= self.frozen_prefix <= len(self.conv_filters):
                raise ValueError("frozen_prefix out of range")
            if self.embedding_dim is None:
                self.embedding_dim = self.conv_filters[-1]
            elif self.embedding_dim != self.conv_filters[-1]:
                raise ValueError("embedding_dim must equal the last conv width")
        elif self.embedding_dim is None:
            raise ValueError("precomputed encoder needs embedding_dim")
        self.embedding_dim = int(self.embedding_dim)

    @property
    def metric_input_dim(self):
        d = self.embedding_dim * (2 if self.merge == "concat" else 1)
        return d + (3 * self.bins if self.use_color else 0)

    @property
    def n_conv(self):
        return len(self.conv_filters) if self.encoder == "conv" else 0

    def to_dict(self):
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ItemFeatures:
    """Per-item model inputs, indexed by item position.

    ``stem`` holds either the output of the frozen encoder layers (conv
    mode) or the embedding table itself (precomputed mode).  ``hist`` holds
    the color histograms, or ``None`` for models without the color block.
    """

    stem: np.ndarray
    hist: np.ndarray = None

    def __len__(self):
        return self.stem.shape[0]


def images_to_array(images):
    """Stack ``(H, W, 3)`` uint8 images into a ``(N, 3, H, W)`` float array in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


class CompatModel:
    def __init__(self, config, params, state):
        self.config = config
        self.params = params
        self.state = state
        self._cache = None

    # -- construction --------------------------------------------------------

    @classmethod
    def init(cls, config, seed=0):
        """Random init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = np.random.default_rng(seed)
        cfg = config
        params, state = {}, {}

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        c_in = cfg.in_channels
        for i, f in enumerate(cfg.conv_filters if cfg.encoder == "conv" else ()):
            params[f"conv{i}.W"] = uniform((f, c_in, cfg.kernel, cfg.kernel),
                                           c_in * cfg.kernel ** 2)
            c_in = f
        q = cfg.metric_input_dim
        for j, p in enumerate(cfg.hidden):
            params[f"fc{j}.W"] = uniform((p, q), q)
            if cfg.dense_bias:
                params[f"fc{j}.b"] = np.zeros(p)
            params[f"bn{j}.scale"] = np.ones(p)
            params[f"bn{j}.shift"] = np.zeros(p)
            state[f"bn{j}.running_mean"] = np.zeros(p)
            state[f"bn{j}.running_var"] = np.ones(p)
            q = p
        params["readout.w"] = uniform((q,), q)
        if cfg.readout_bias:
            params["readout.b"] = np.zeros(())
        return cls(cfg, params, state)

    def copy(self):
        return CompatModel(self.config,
                           {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.state.items()})

    # -- parameter groups ------------------------------------------------------

    def trainable_names(self):
        cfg = self.config
        return [n for n in self.params
                if not (n.startswith("conv") and int(n[4:].split(".")[0]) < cfg.frozen_prefix)]

    def frozen_names(self):
        return [n for n in self.params if n not in set(self.trainable_names())]

    def filter_l1_names(self):
        """Fine-tuned encoder filters (the Laplacian-prior group)."""
        return [f"conv{i}.W" for i in range(self.config.frozen_prefix, self.config.n_conv)]

    def readout_l1_names(self):
        return ["readout.w"]

    def metric_weight_names(self):
        return [f"fc{j}.W" for j in range(len(self.config.hidden))]

    def metric_input_dims(self):
        """Column dimension Q of every metric weight matrix."""
        return [self.params[n].shape[1] for n in self.metric_weight_names()]

    def _bn(self, j, mode):
        return nn.BatchNormState(
            self.params[f"bn{j}.scale"], self.params[f"bn{j}.shift"],
            self.state[f"bn{j}.running_mean"], self.state[f"bn{j}.running_var"],
            momentum=self.config.bn_momentum, eps=self.config.bn_eps, mode=mode)

    # -- encoder ---------------------------------------------------------------

    def stem(self, images):
        """Run the frozen leading conv layers (identity in precomputed mode).

        ``images`` is ``(N, C, H, W)`` in conv mode; in precomputed mode it
        is the ``(N, D)`` embedding table.
        """
        x = np.asarray(images, dtype=np.float64)
        if self.config.encoder == "precomputed":
            if x.ndim != 2 or x.shape[1] != self.config.embedding_dim:
                raise nn.ShapeError("embedding table", ("n", self.config.embedding_dim), x.shape)
            return x
        for i in range(self.config.frozen_prefix):
            x = nn.relu(nn.conv2d_forward(x, self.params[f"conv{i}.W"], self.config.stride))
        return x

    def features(self, images=None, embeddings=None, hist=None):
        """Build :class:`ItemFeatures` from raw images or an embedding table."""
        if self.config.encoder == "conv":
            if images is None:
                raise ValueError("conv encoder needs images")
            stem = self.stem(images)
        else:
            if embeddings is None:
                raise ValueError("precomputed encoder needs an embedding table")
            stem = self.stem(embeddings)
        if self.config.use_color:
            if hist is None:
                raise ValueError("model uses color histograms but none were given")
            hist = np.asarray(hist, dtype=np.float64)
            if hist.shape != (stem.shape[0], 3 * self.config.bins):
                raise nn.ShapeError("histograms", (stem.shape[0], 3 * self.config.bins), hist.shape)
        else:
            hist = None
        return ItemFeatures(stem, hist)

    def _tail(self, x, keep):
        caches = []
        cfg = self.config
        for i in range(cfg.frozen_prefix, cfg.n_conv):
            z = nn.conv2d_forward(x, self.params[f"conv{i}.W"], cfg.stride)
            if keep:
                caches.append((x, z))
            x = nn.relu(z)
        if x.ndim == 4:
            x = x.mean(axis=(2, 3))
        return x, caches

    def embed(self, stem):
        """Embeddings from stem features (the trainable encoder tail + pooling)."""
        return self._tail(np.asarray(stem, dtype=np.float64), keep=False)[0]

    def encode(self, images):
        """Embeddings of raw ``(N, C, H, W)`` images (or the table in precomputed mode)."""
        return self.embed(self.stem(images))

    # -- head ------------------------------------------------------------------

    def metric_input(self, e_r, e_l, h_r=None, h_l=None):
        cfg = self.config
        e_r, e_l = np.atleast_2d(e_r), np.atleast_2d(e_l)
        if e_r.shape != e_l.shape or e_r.shape[1] != cfg.embedding_dim:
            raise nn.ShapeError("embeddings", ("n", cfg.embedding_dim), (e_r.shape, e_l.shape))
        blocks = [e_r * e_l] if cfg.merge == "hadamard" else [e_r, e_l]
        if cfg.use_color:
            h_r, h_l = np.atleast_2d(h_r), np.atleast_2d(h_l)
            if h_r.shape != h_l.shape or h_r.shape[1] != 3 * cfg.bins:
                raise nn.ShapeError("histograms", ("n", 3 * cfg.bins), (h_r.shape, h_l.shape))
            blocks.append(h_r * h_l)
        return np.concatenate(blocks, axis=1)

    def metric_forward(self, z, mode="infer", update_running=True, caches=None):
        """Dense -> batch norm -> ReLU per layer; returns the last activation."""
        h = z
        for j in range(len(self.config.hidden)):
            b = self.params.get(f"fc{j}.b")
            a = nn.dense_forward(h, self.params[f"fc{j}.W"], b)
            bn_out, bn_cache = nn.batchnorm_forward(a, self._bn(j, mode), mode,
                                                    update_running=update_running)
            if caches is not None:
                caches.append((h, bn_out, bn_cache))
            h = nn.relu(bn_out)
        return h

    def readout(self, x):
        s = x @ self.params["readout.w"]
        if "readout.b" in self.params:
            s = s + self.params["readout.b"]
        return s

    def logits_from_embeddings(self, E, hist, right, left, mode="infer", update_running=True):
        """Logits for pairs ``(right[i], left[i])`` given per-item embeddings."""
        h_r = hist[right] if hist is not None else None
        h_l = hist[left] if hist is not None else None
        z = self.metric_input(E[right], E[left], h_r, h_l)
        return self.readout(self.metric_forward(z, mode, update_running))

    # -- full pass -------------------------------------------------------------

    def forward(self, feats, right, left, mode="infer", update_running=True):
        """Logits ``w^T x`` for item pairs; train mode records a backward cache."""
        right = np.asarray(right, dtype=np.int64)
        left = np.asarray(left, dtype=np.int64)
        n = right.shape[0]
        uniq, inv = np.unique(np.concatenate([right, left]), return_inverse=True)
        keep = mode == "train"
        E, conv_caches = self._tail(feats.stem[uniq], keep)
        e_r, e_l = E[inv[:n]], E[inv[n:]]
        hist = feats.hist
        h_r = hist[right] if hist is not None else None
        h_l = hist[left] if hist is not None else None
        z = self.metric_input(e_r, e_l, h_r, h_l)
        layer_caches = [] if keep else None
        x = self.metric_forward(z, mode, update_running, layer_caches)
        if keep:
            self._cache = dict(inv=inv, n=n, n_uniq=uniq.shape[0], e_r=e_r, e_l=e_l,
                               conv=conv_caches, layers=layer_caches, x=x)
        return self.readout(x)

    def score(self, feats, right, left):
        """Compatibility probabilities in infer mode."""
        return nn.sigmoid(self.forward(feats, right, left, mode="infer"))

    def backward(self, dlogits):
        """Gradients of ``sum(dlogits * logits)`` for every trainable parameter."""
        if self._cache is None:
            raise RuntimeError("backward called before a train-mode forward pass")
        c = self._cache
        cfg = self.config
        grads = {}
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != (c["n"],):
            raise nn.ShapeError("logit gradient", (c["n"],), dlogits.shape)

        grads["readout.w"] = c["x"].T @ dlogits
        if "readout.b" in self.params:
            grads["readout.b"] = np.asarray(dlogits.sum())
        dh = np.outer(dlogits, self.params["readout.w"])

        for j in reversed(range(len(cfg.hidden))):
            h_in, bn_out, bn_cache = c["layers"][j]
            da = nn.relu_backward(dh, bn_out)
            da, grads[f"bn{j}.scale"], grads[f"bn{j}.shift"] = nn.batchnorm_backward(da, bn_cache)
            with_bias = f"fc{j}.b" in self.params
            dh, grads[f"fc{j}.W"], db = nn.dense_backward(da, h_in, self.params[f"fc{j}.W"], with_bias)
            if with_bias:
                grads[f"fc{j}.b"] = db

        D = cfg.embedding_dim
        if cfg.merge == "hadamard":
            de_r, de_l = dh[:, :D] * c["e_l"], dh[:, :D] * c["e_r"]
        else:
            de_r, de_l = dh[:, :D], dh[:, D:2 * D]

        conv = c["conv"]
        if conv:
            dE = np.zeros((c["n_uniq"], D))
            np.add.at(dE, c["inv"], np.concatenate([de_r, de_l]))
            _, z_last = conv[-1]
            dx = np.broadcast_to(dE[:, :, None, None] / (z_last.shape[2] * z_last.shape[3]),
                                 z_last.shape)
            for k in reversed(range(len(conv))):
                x_in, z = conv[k]
                i = cfg.frozen_prefix + k
                dz = nn.relu_backward(dx, z)
                W = self.params[f"conv{i}.W"]
                if k > 0:
                    dx, grads[f"conv{i}.W"] = nn.conv2d_backward(dz, x_in, W, cfg.stride)
                else:
                    grads[f"conv{i}.W"] = np.tensordot(
                        dz, nn._windows(x_in, W.shape[2], cfg.stride),
                        axes=([0, 2, 3], [0, 2, 3]))
        return grads

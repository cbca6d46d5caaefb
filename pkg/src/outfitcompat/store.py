"""Per-item feature cache shared by training, evaluation and the CLI."""

from dataclasses import dataclass

import numpy as np

from .data import DatasetError
from .features import color_histogram, hog
from .model import images_to_array

__all__ = ["PairSet", "ItemStore"]


@dataclass
class PairSet:
    """Pairs as integer item positions plus labels."""

    right: np.ndarray
    left: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.right.shape[0]

    def take(self, idx):
        return PairSet(self.right[idx], self.left[idx], self.labels[idx])


class ItemStore:
    """Items of a dataset in a fixed order with lazily computed features.

    ``embeddings`` optionally maps item ids to precomputed embedding vectors
    (given as ``(ids, array)``); every dataset item must be covered.
    """

    def __init__(self, dataset, embeddings=None):
        self.dataset = dataset
        self.ids = list(dataset.items)
        self.index = {i: k for k, i in enumerate(self.ids)}
        self.categories = [dataset.items[i].category for i in self.ids]
        self._images = None
        self._cache = {}
        self.embeddings = None
        if embeddings is not None:
            e_ids, table = embeddings
            pos = {i: k for k, i in enumerate(e_ids)}
            missing = [i for i in self.ids if i not in pos]
            if missing:
                raise DatasetError(f"no embedding for item {missing[0]!r} "
                                   f"({len(missing)} item(s) missing)")
            self.embeddings = np.asarray(table, dtype=np.float64)[[pos[i] for i in self.ids]]

    def __len__(self):
        return len(self.ids)

    def raw_images(self):
        if self._images is None:
            imgs = self.dataset.load_images(self.ids)
            self._images = [imgs[i] for i in self.ids]
        return self._images

    def image_array(self):
        if "images" not in self._cache:
            shapes = {im.shape for im in self.raw_images()}
            if len(shapes) != 1:
                raise DatasetError(f"conv encoder needs equally sized images, found {sorted(shapes)}")
            self._cache["images"] = images_to_array(self.raw_images())
        return self._cache["images"]

    def histograms(self, bins=8):
        key = ("hist", bins)
        if key not in self._cache:
            self._cache[key] = np.stack([color_histogram(im, bins) for im in self.raw_images()])
        return self._cache[key]

    def hog_features(self, orientations=8, cell=15):
        key = ("hog", orientations, cell)
        if key not in self._cache:
            self._cache[key] = np.stack([hog(im, orientations, cell) for im in self.raw_images()])
        return self._cache[key]

    def model_features(self, model):
        cfg = model.config
        hist = self.histograms(cfg.bins) if cfg.use_color else None
        if cfg.encoder == "conv":
            return model.features(images=self.image_array(), hist=hist)
        if self.embeddings is None:
            raise DatasetError("model uses precomputed embeddings but none were loaded")
        return model.features(embeddings=self.embeddings, hist=hist)

    def pairs(self, samples):
        right = np.array([self.index[p.right] for p in samples], dtype=np.int64)
        left = np.array([self.index[p.left] for p in samples], dtype=np.int64)
        labels = np.array([p.label for p in samples], dtype=np.float64)
        return PairSet(right, left, labels)

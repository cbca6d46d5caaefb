"""Outfit datasets: file format, validation, training pairs and a synthetic generator.

A dataset is one JSON document (``dataset.json``) plus an image directory::

    {
      "format": "outfitcompat-dataset",
      "version": 1,
      "items": [{"id": "i00001", "category": "tops", "image": "images/i00001.ppm"}, ...],
      "splits": {
        "train": [{"id": "o00001", "items": ["i00001", "i00002"]}, ...],
        "val": [...],
        "test": [...]
      }
    }

Image paths are relative to the directory holding the document.  The first
item of an outfit is its query item at test time.
"""

import colorsys
import csv
import json
import logging
import os
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .features import read_ppm, write_ppm

__all__ = [
    "DATASET_FORMAT",
    "DATASET_VERSION",
    "SPLITS",
    "DatasetError",
    "SplitOverlapError",
    "Item",
    "Outfit",
    "DatasetSplit",
    "PairSample",
    "load_dataset",
    "save_dataset",
    "gen_positive_pairs",
    "gen_negative_pairs",
    "make_pairs",
    "synth_generate",
    "write_synthetic",
    "read_feature_csv",
    "write_feature_csv",
]

log = logging.getLogger(__name__)

DATASET_FORMAT = "outfitcompat-dataset"
DATASET_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_CATEGORIES = ("bottoms", "tops", "dresses", "gowns", "suits", "outerwear")


class DatasetError(ValueError):
    pass


class SplitOverlapError(DatasetError):
    def __init__(self, a, b, ids):
        self.ids = sorted(ids)
        shown = ", ".join(self.ids[:10]) + (" ..." if len(self.ids) > 10 else "")
        super().__init__(f"splits {a!r} and {b!r} share {len(self.ids)} item(s): {shown}")


@dataclass(frozen=True)
class Item:
    id: str
    category: str
    image: str = None


@dataclass(frozen=True)
class Outfit:
    id: str
    items: tuple


@dataclass(frozen=True)
class PairSample:
    right: str
    left: str
    label: int


@dataclass
class DatasetSplit:
    items: dict
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    root: str = "."
    dropped: int = 0

    def split(self, name):
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def split_item_ids(self, name):
        return {i for o in self.split(name) for i in o.items}

    def categories(self):
        return sorted({it.category for it in self.items.values()})

    def validate(self):
        """Check item references and three-way item disjointness of the splits."""
        for name in SPLITS:
            for k, outfit in enumerate(self.split(name)):
                if len(outfit.items) < 2:
                    raise DatasetError(f"splits.{name}[{k}] ({outfit.id}): fewer than 2 items")
                if len(set(outfit.items)) != len(outfit.items):
                    raise DatasetError(f"splits.{name}[{k}] ({outfit.id}): duplicate item ids")
                for i in outfit.items:
                    if i not in self.items:
                        raise DatasetError(f"splits.{name}[{k}] ({outfit.id}): unknown item {i!r}")
        ids = {name: self.split_item_ids(name) for name in SPLITS}
        for a, b in combinations(SPLITS, 2):
            shared = ids[a] & ids[b]
            if shared:
                raise SplitOverlapError(a, b, shared)
        return self

    def image_path(self, item_id):
        img = self.items[item_id].image
        if img is None:
            raise DatasetError(f"item {item_id!r} has no image")
        return os.path.join(self.root, img)

    def load_images(self, ids=None):
        ids = list(self.items) if ids is None else ids
        return {i: read_ppm(self.image_path(i)) for i in ids}

    def to_document(self):
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "items": [{k: v for k, v in (("id", it.id), ("category", it.category),
                                          ("image", it.image)) if v is not None}
                      for it in self.items.values()],
            "splits": {name: [{"id": o.id, "items": list(o.items)} for o in self.split(name)]
                       for name in SPLITS},
        }


def _doc_path(path):
    return os.path.join(path, "dataset.json") if os.path.isdir(path) else path


def load_dataset(path):
    """Parse and validate a dataset document (or a directory containing ``dataset.json``).

    Outfits with fewer than two items are dropped; their count is logged and
    kept in ``DatasetSplit.dropped``.
    """
    path = _doc_path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}: not an {DATASET_FORMAT} document")
    if doc.get("version") != DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {doc.get('version')!r}")

    items = {}
    for k, rec in enumerate(doc.get("items", [])):
        where = f"{path}: items[{k}]"
        if not isinstance(rec, dict):
            raise DatasetError(f"{where}: expected an object")
        iid, cat = rec.get("id"), rec.get("category")
        if not isinstance(iid, str) or not iid:
            raise DatasetError(f"{where}: missing or empty id")
        if not isinstance(cat, str) or not cat:
            raise DatasetError(f"{where} ({iid}): missing or empty category")
        if iid in items:
            raise DatasetError(f"{where}: duplicate item id {iid!r}")
        image = rec.get("image")
        if image is not None and not isinstance(image, str):
            raise DatasetError(f"{where} ({iid}): image must be a path string")
        items[iid] = Item(iid, cat, image)

    splits = doc.get("splits")
    if not isinstance(splits, dict):
        raise DatasetError(f"{path}: missing splits object")
    parsed, dropped = {}, 0
    for name in SPLITS:
        outfits = []
        for k, rec in enumerate(splits.get(name, [])):
            where = f"{path}: splits.{name}[{k}]"
            if not isinstance(rec, dict) or not isinstance(rec.get("items"), list):
                raise DatasetError(f"{where}: expected an object with an items list")
            oid = rec.get("id", f"{name}-{k}")
            members = rec["items"]
            if not all(isinstance(i, str) for i in members):
                raise DatasetError(f"{where} ({oid}): item ids must be strings")
            if len(members) < 2:
                dropped += 1
                continue
            outfits.append(Outfit(str(oid), tuple(members)))
        parsed[name] = outfits
    if dropped:
        log.warning("%s: dropped %d outfit(s) with fewer than 2 items", path, dropped)
    ds = DatasetSplit(items, parsed["train"], parsed["val"], parsed["test"],
                      root=os.path.dirname(os.path.abspath(path)), dropped=dropped)
    return ds.validate()


def save_dataset(ds, path):
    path = _doc_path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ds.to_document(), fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- training pairs ------------------------------------------------------------


def gen_positive_pairs(outfits):
    """All within-outfit item pairs, ``C(n, 2)`` per outfit, sorted by id pair."""
    pairs = []
    for outfit in outfits:
        for a, b in combinations(outfit.items, 2):
            pairs.append((a, b) if a <= b else (b, a))
    pairs.sort()
    return [PairSample(a, b, 1) for a, b in pairs]


def gen_negative_pairs(outfits, count=None, seed=0, factor=6, max_tries=None):
    """Random item pairs drawn from different outfits.

    ``count`` defaults to ``factor`` times the number of positive pairs.
    Draws reject pairs that co-occur in some outfit and pairs already drawn;
    after ``max_tries`` rejected draws sampling gives up.
    """
    if len(outfits) < 2:
        raise DatasetError("negative sampling needs at least two outfits")
    if count is None:
        count = factor * sum(len(o.items) * (len(o.items) - 1) // 2 for o in outfits)
    ids = sorted({i for o in outfits for i in o.items})
    index = {i: k for k, i in enumerate(ids)}
    together = set()
    for o in outfits:
        for a, b in combinations(sorted(index[i] for i in o.items), 2):
            together.add((a, b))
    n = len(ids)
    feasible = n * (n - 1) // 2 - len(together)
    if count > feasible:
        raise DatasetError(
            f"requested {count} negative pairs but only {feasible} distinct cross-outfit pairs exist")

    rng = np.random.default_rng(seed)
    max_tries = max_tries if max_tries is not None else 100 * count + 1000
    seen, out, tries = set(), [], 0
    while len(out) < count:
        a, b = (int(v) for v in rng.integers(0, n, size=2))
        key = (a, b) if a < b else (b, a)
        if a == b or key in together or key in seen:
            tries += 1
            if tries > max_tries:
                raise DatasetError(
                    f"gave up after {tries} rejected draws with {len(out)}/{count} negatives")
            continue
        seen.add(key)
        out.append(PairSample(ids[a], ids[b], 0))
    return out


def make_pairs(outfits, seed=0, factor=6):
    """Positives plus ``factor`` times as many sampled negatives."""
    pos = gen_positive_pairs(outfits)
    return pos + gen_negative_pairs(outfits, count=factor * len(pos), seed=seed)


# -- synthetic data ------------------------------------------------------------


@dataclass
class SynthData:
    dataset: DatasetSplit
    images: dict
    hues: dict


def synth_generate(n_outfits, categories=DEFAULT_CATEGORIES[:4], palette_rule="hue",
                   seed=0, size=32, hue_spread=15.0, noise=6.0):
    """Outfits of flat-colored items that are compatible by construction.

    Each outfit draws a base color; its items take hues within
    ``+-hue_spread`` degrees of the base hue (saturation and value jitter
    slightly) plus Gaussian pixel noise.  Outfits hold 2 to
    ``len(categories)`` items with categories assigned round-robin.  Split
    sizes are 76% / 14% / 10% of the outfits.
    """
    if n_outfits < 10:
        raise ValueError("synthetic datasets need at least 10 outfits")
    if palette_rule != "hue":
        raise ValueError(f"unknown palette rule {palette_rule!r}")
    categories = list(categories)
    if len(categories) < 2:
        raise ValueError("need at least two categories")
    rng = np.random.default_rng(seed)
    items, images, hues, outfits = {}, {}, {}, []
    n_cat = len(categories)
    for n in range(n_outfits):
        base_h = rng.uniform(0.0, 360.0)
        base_s = rng.uniform(0.45, 0.85)
        base_v = rng.uniform(0.45, 0.85)
        n_items = int(rng.integers(2, n_cat + 1))
        members = []
        for k in range(n_items):
            iid = f"i{len(items):06d}"
            cat = categories[(n + k) % n_cat]
            hue = (base_h + rng.uniform(-hue_spread, hue_spread)) % 360.0
            sat = np.clip(base_s + rng.uniform(-0.05, 0.05), 0.0, 1.0)
            val = np.clip(base_v + rng.uniform(-0.05, 0.05), 0.0, 1.0)
            rgb = np.array(colorsys.hsv_to_rgb(hue / 360.0, sat, val)) * 255.0
            pix = rgb + rng.normal(0.0, noise, size=(size, size, 3))
            images[iid] = np.clip(np.rint(pix), 0, 255).astype(np.uint8)
            items[iid] = Item(iid, cat, f"images/{iid}.ppm")
            hues[iid] = hue
            members.append(iid)
        outfits.append(Outfit(f"o{n:05d}", tuple(members)))
    n_train = int(round(0.76 * n_outfits))
    n_val = int(round(0.14 * n_outfits))
    ds = DatasetSplit(items, outfits[:n_train], outfits[n_train:n_train + n_val],
                      outfits[n_train + n_val:])
    return SynthData(ds.validate(), images, hues)


def write_synthetic(synth, out_dir):
    """Write ``dataset.json`` and ``images/*.ppm`` under ``out_dir``."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for iid, img in synth.images.items():
        write_ppm(os.path.join(out_dir, synth.dataset.items[iid].image), img)
    synth.dataset.root = os.path.abspath(out_dir)
    save_dataset(synth.dataset, os.path.join(out_dir, "dataset.json"))
    return os.path.join(out_dir, "dataset.json")


# -- feature tables ------------------------------------------------------------


def write_feature_csv(path, ids, values, prefix="f"):
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id"] + [f"{prefix}_{k}" for k in range(values.shape[1])])
        for iid, row in zip(ids, values):
            w.writerow([iid] + [repr(float(v)) for v in row])


def read_feature_csv(path):
    """Read an ``item_id,x_0,...`` table; returns ``(ids, array)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "item_id":
        raise DatasetError(f"{path}: expected a header starting with item_id")
    width = len(rows[0]) - 1
    ids, vals = [], []
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != width + 1:
            raise DatasetError(f"{path}:{k}: expected {width + 1} fields, got {len(row)}")
        ids.append(row[0])
        try:
            vals.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DatasetError(f"{path}:{k}: {exc}") from exc
    return ids, np.array(vals, dtype=np.float64).reshape(len(ids), width)

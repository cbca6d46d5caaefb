"""Top-K complementary-item recommendation and lift evaluation.

For every test outfit the first item is the query.  Each other category
present in the outfit contributes one target, the first outfit item of that
category; candidates are all pool items of that category.  An outfit's
precision@K is the fraction of its targets found in the top K, and lift
divides the average precision@K by that of a uniform random recommender,
which is known in closed form: a random K-subset of P candidates contains
the target with probability min(K / P, 1).
"""

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelScorer",
    "DistanceScorer",
    "ConstantScorer",
    "FunctionScorer",
    "complementary_targets",
    "build_pools",
    "recommend",
    "precision_at_k",
    "random_baseline",
    "lift_at_k",
    "evaluate",
    "EvalReport",
]

log = logging.getLogger(__name__)

DEFAULT_KS = (3, 7, 12)


class ModelScorer:
    """Ranks by the model's readout logit (monotone in the probability).

    The query goes in the right branch and the candidate in the left.
    """

    def __init__(self, model, feats, ids, name="model", chunk=2048):
        self.name = name
        self.model = model
        self.index = {i: k for k, i in enumerate(ids)}
        self.hist = feats.hist
        self.E = np.concatenate([model.embed(feats.stem[s:s + chunk])
                                 for s in range(0, len(feats), chunk)])

    def score(self, query, candidates):
        cand = np.array([self.index[c] for c in candidates], dtype=np.int64)
        right = np.full(cand.shape, self.index[query])
        return self.model.logits_from_embeddings(self.E, self.hist, right, cand)


class DistanceScorer:
    """Negated Euclidean distance between per-item feature vectors."""

    def __init__(self, name, ids, vectors):
        self.name = name
        self.index = {i: k for k, i in enumerate(ids)}
        self.vectors = np.asarray(vectors, dtype=np.float64)

    def score(self, query, candidates):
        q = self.vectors[self.index[query]]
        c = self.vectors[[self.index[i] for i in candidates]]
        return -np.sqrt(((c - q) ** 2).sum(axis=1))


class ConstantScorer:
    def __init__(self, name="constant", value=0.0):
        self.name = name
        self.value = value

    def score(self, query, candidates):
        return np.full(len(candidates), float(self.value))


class FunctionScorer:
    """Wraps ``fn(query_id, candidate_id) -> float``."""

    def __init__(self, name, fn):
        self.name = name
        self.fn = fn

    def score(self, query, candidates):
        return np.array([self.fn(query, c) for c in candidates], dtype=np.float64)


# -- ranking -------------------------------------------------------------------


def recommend(query, pool, scorer, k, category=None, items=None, rng=None):
    """Top-``k`` pool items for ``query``, as ``[(item_id, score), ...]``.

    Ties are broken by ascending item id unless ``rng`` is given, in which
    case tied items come out in random order.
    """
    pool = list(pool)
    if not pool:
        raise ValueError("empty candidate pool")
    if query in pool:
        raise ValueError(f"query {query!r} must not be in its own candidate pool")
    if category is not None and items is not None:
        wrong = [i for i in pool if items[i].category != category]
        if wrong:
            raise ValueError(f"pool item {wrong[0]!r} is not in category {category!r}")
    if k <= 0:
        return []
    scores = np.asarray(scorer.score(query, pool), dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError(f"scorer {scorer.name!r} returned non-finite scores")
    if rng is None:
        order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i]))
    else:
        perm = rng.permutation(len(pool))
        order = perm[np.argsort(-scores[perm], kind="stable")]
    return [(pool[i], float(scores[i])) for i in order[:k]]


def complementary_targets(outfit, items):
    """``{category: item_id}`` of the outfit's non-query categories."""
    query_cat = items[outfit.items[0]].category
    targets = {}
    for iid in outfit.items[1:]:
        cat = items[iid].category
        if cat != query_cat and cat not in targets:
            targets[cat] = iid
    return targets


def build_pools(dataset, splits=("train", "val", "test")):
    """Candidate ids per category over the items of ``splits``, sorted."""
    pools = {}
    for name in splits:
        for iid in dataset.split_item_ids(name):
            pools.setdefault(dataset.items[iid].category, set()).add(iid)
    return {c: sorted(v) for c, v in sorted(pools.items())}


def precision_at_k(targets, recommendations, k):
    """Fraction of ``targets`` (category -> id) inside the first ``k`` recommendations."""
    if not targets:
        raise ValueError("outfit has no complementary categories")
    hits = 0
    for cat, target in targets.items():
        if cat not in recommendations:
            raise KeyError(f"no recommendations for category {cat!r}")
        top = [r[0] if isinstance(r, tuple) else r for r in recommendations[cat][:k]]
        hits += target in top
    return hits / len(targets)


def random_baseline(outfits, pool_sizes, k, items):
    """Expected average precision@K of a uniform random recommender."""
    vals = []
    for outfit in outfits:
        targets = complementary_targets(outfit, items)
        if not targets:
            continue
        per = []
        for cat in targets:
            if cat not in pool_sizes:
                raise KeyError(f"unknown category {cat!r}")
            p = pool_sizes[cat]
            if p < 1:
                raise ValueError(f"category {cat!r} has an empty pool")
            per.append(min(k / p, 1.0))
        vals.append(sum(per) / len(per))
    if not vals:
        raise ValueError("no outfit with complementary categories")
    return float(np.mean(vals))


def lift_at_k(avg_precision, baseline):
    if not baseline > 0:
        raise ValueError("random baseline must be positive")
    return avg_precision / baseline


# -- full evaluation -----------------------------------------------------------


@dataclass
class EvalReport:
    ks: tuple
    rows: list
    n_outfits: int
    pool_sizes: dict
    per_outfit: dict = field(default_factory=dict)

    def cell(self, scorer, k):
        for r in self.rows:
            if r["scorer"] == scorer and r["K"] == k:
                return r
        raise KeyError((scorer, k))

    def lift(self, scorer, k):
        return self.cell(scorer, k)["lift"]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scorer", "K", "avg_precision", "random_baseline", "lift"])
            for r in self.rows:
                w.writerow([r["scorer"], r["K"], repr(r["avg_precision"]),
                            repr(r["random_baseline"]), repr(r["lift"])])

    def write_json(self, path):
        doc = {"ks": list(self.ks), "n_outfits": self.n_outfits,
               "pool_sizes": self.pool_sizes, "rows": self.rows}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_plot_csv(self, path):
        """One row per K, one lift column per scorer."""
        scorers = list(dict.fromkeys(r["scorer"] for r in self.rows))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["K"] + scorers)
            for k in self.ks:
                w.writerow([k] + [repr(self.lift(s, k)) for s in scorers])


def evaluate(outfits, items, pools, scorers, ks=DEFAULT_KS, rng=None):
    """Average precision@K, random baseline and Lift@K for each scorer.

    ``pools`` maps category -> candidate ids.  With ``rng`` ties are broken
    randomly instead of by id.
    """
    ks = tuple(sorted(ks))
    kmax = ks[-1]
    pool_sizes = {c: len(v) for c, v in pools.items()}
    pool_sets = {c: set(v) for c, v in pools.items()}
    used = []
    for outfit in outfits:
        targets = complementary_targets(outfit, items)
        if not targets:
            log.warning("outfit %s has no complementary category; skipped", outfit.id)
            continue
        for cat, iid in targets.items():
            if iid not in pool_sets.get(cat, ()):
                raise ValueError(f"item {iid!r} missing from the {cat!r} candidate pool")
        used.append((outfit, targets))
    if not used:
        raise ValueError("no evaluable outfits")

    baselines = {k: random_baseline([o for o, _ in used], pool_sizes, k, items) for k in ks}
    rows, per_outfit = [], {}
    for scorer in scorers:
        prec = np.zeros((len(used), len(ks)))
        for n, (outfit, targets) in enumerate(used):
            query = outfit.items[0]
            recs = {cat: recommend(query, pools[cat], scorer, kmax, rng=rng) for cat in targets}
            prec[n] = [precision_at_k(targets, recs, k) for k in ks]
        per_outfit[scorer.name] = prec
        for j, k in enumerate(ks):
            avg = float(prec[:, j].mean())
            rows.append({"scorer": scorer.name, "K": k, "avg_precision": avg,
                         "random_baseline": baselines[k],
                         "lift": lift_at_k(avg, baselines[k])})
    return EvalReport(ks, rows, len(used), pool_sizes, per_outfit)

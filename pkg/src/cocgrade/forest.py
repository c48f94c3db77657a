"""Random forest over the 31-feature layout.

Trees are CART classifiers grown on bootstrap samples with Gini splits.
The forest posterior is the weighted average of per-tree leaf
distributions, ``sum(a_n * p_n) / sum(a_n)`` with every ``a_n > 0``; the
assigned grade is its argmax.

Randomness: tree ``t`` draws its bootstrap and its per-node feature subsets
from ``numpy.random.PCG64(seed ^ t)``, so trees are independent of build
order. Permutations for importance come from
``PCG64(SeedSequence([seed, t, j]))`` for tree ``t`` and column ``j``.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import (EmptyInput, EmptyTrainingSet, IncompatibleModel, InvalidData,
                     InvalidParams, InvalidPosterior)
from .features import LAYOUT_VERSION, N_FEATURES, FeatureVector
from .grades import GRADES, Grade

N_CLASSES = len(GRADES)
FORMAT_VERSION = 1
POSTERIOR_TOL = 1e-9
ASSIGN_TOL = 1e-6
WEIGHT_MODES = ("uniform", "oob_accuracy")
_LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    mtry: int | None = None  # None -> ceil(sqrt(number of candidate columns))
    seed: int = 0
    weight_mode: str = "uniform"
    columns: tuple[int, ...] | None = None  # candidate feature columns; None = all

    def __post_init__(self):
        if self.columns is not None:
            cols = tuple(int(c) for c in self.columns)
            if not cols or len(set(cols)) != len(cols) or min(cols) < 0 or max(cols) >= N_FEATURES:
                raise InvalidParams(f"invalid feature column subset {self.columns!r}")
            object.__setattr__(self, "columns", tuple(sorted(cols)))
        if self.n_trees < 1:
            raise InvalidParams("n_trees must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise InvalidParams("max_depth must be non-negative")
        if self.min_leaf < 1:
            raise InvalidParams("min_leaf must be at least 1")
        if self.mtry is not None and not 1 <= self.mtry <= len(self.candidate_columns):
            raise InvalidParams(f"mtry must lie in [1, {len(self.candidate_columns)}]")
        if self.weight_mode not in WEIGHT_MODES:
            raise InvalidParams(f"weight_mode must be one of {WEIGHT_MODES}")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidParams("seed must be a 64-bit unsigned integer")

    @property
    def candidate_columns(self) -> tuple[int, ...]:
        return self.columns if self.columns is not None else tuple(range(N_FEATURES))

    @property
    def effective_mtry(self) -> int:
        if self.mtry is not None:
            return self.mtry
        return math.ceil(math.sqrt(len(self.candidate_columns)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["columns"] = None if self.columns is None else list(self.columns)
        return d


# -- posterior & assignment --------------------------------------------------

@dataclass(frozen=True, eq=False)
class GradePosterior:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(-1)
        if p.shape != (N_CLASSES,) or not np.all(np.isfinite(p)):
            raise InvalidPosterior(f"posterior needs {N_CLASSES} finite values")
        if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > ASSIGN_TOL:
            raise InvalidPosterior(f"posterior {p.tolist()} is not a distribution")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    def __getitem__(self, grade) -> float:
        return float(self.p[int(Grade.parse(grade))])

    def as_dict(self) -> dict:
        return {g.name: float(self.p[g]) for g in GRADES}


def assign(post: GradePosterior | Sequence[float]) -> Grade:
    """Argmax grade; exact ties go to the lower ordinal (A before D)."""
    if not isinstance(post, GradePosterior):
        post = GradePosterior(post)
    return Grade(int(np.argmax(post.p)))


def aggregate_votes(preds: Iterable) -> Grade:
    """Modal grade among per-pixel (or per-tree) votes, ties toward A."""
    counts = Counter(Grade.parse(g) for g in preds)
    if not counts:
        raise EmptyInput("cannot aggregate an empty list of votes")
    top = max(counts.values())
    return min(g for g, c in counts.items() if c == top)


def weighted_average(probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Combine per-tree distributions ``probs[t, ..., c]`` with weights ``a_t``."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise InvalidParams("tree weights must all be positive")
    num = np.tensordot(w, probs, axes=(0, 0))
    # every tree distribution sums to one, so the class total of num equals
    # sum(w); dividing by it keeps each component <= 1 in floating point
    return num / num.sum(axis=-1, keepdims=True)


# -- trees -------------------------------------------------------------------

@dataclass(eq=False)
class Tree:
    """Flat preorder tree; ``feature[k] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, 4), zero rows on internal nodes

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def used_features(self) -> set[int]:
        return set(int(f) for f in self.feature if f != _LEAF)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] != _LEAF
        while active.any():
            rows = np.nonzero(active)[0]
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] != _LEAF
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        c = self.counts[self.apply(X)].astype(np.float64)
        return c / c.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.counts[self.apply(X)], axis=1)

    def to_json(self) -> dict:
        nodes = []
        for k in range(self.n_nodes):
            if self.feature[k] == _LEAF:
                nodes.append({"counts": [int(c) for c in self.counts[k]]})
            else:
                nodes.append({"f": int(self.feature[k]), "t": float(self.threshold[k]),
                              "l": int(self.left[k]), "r": int(self.right[k])})
        return {"nodes": nodes}

    @classmethod
    def from_json(cls, obj: dict) -> "Tree":
        nodes = obj["nodes"]
        n = len(nodes)
        if n == 0:
            raise InvalidData("tree has no nodes")
        feature = np.full(n, _LEAF, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        counts = np.zeros((n, N_CLASSES), dtype=np.int64)
        for k, nd in enumerate(nodes):
            if "counts" in nd:
                c = np.asarray(nd["counts"], dtype=np.int64)
                if c.shape != (N_CLASSES,) or c.min() < 0 or c.sum() <= 0:
                    raise InvalidData(f"leaf {k} has an invalid class histogram")
                counts[k] = c
            else:
                f, l, r = int(nd["f"]), int(nd["l"]), int(nd["r"])
                if not (0 <= f < N_FEATURES and k < l < n and k < r < n):
                    raise InvalidData(f"node {k} has invalid links")
                feature[k], threshold[k], left[k], right[k] = f, float(nd["t"]), l, r
        return cls(feature, threshold, left, right, counts)


def _split_score(cl: np.ndarray, tot: np.ndarray, nl: np.ndarray, nr: np.ndarray) -> np.ndarray:
    # maximizing sum_c nL_c^2/nL + sum_c nR_c^2/nR maximizes the Gini decrease
    cr = tot[None, :] - cl
    return (cl * cl).sum(axis=1) / nl + (cr * cr).sum(axis=1) / nr


def _exact_score(cl: np.ndarray, tot: np.ndarray, nl: int, nr: int) -> Fraction:
    cr = tot - cl
    return Fraction(int((cl * cl).sum()), nl) + Fraction(int((cr * cr).sum()), nr)


def best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int = 1):
    """Best Gini split of ``(X, y)`` over ``features``.

    Candidate thresholds are midpoints between consecutive distinct values.
    Ties (exact, in rational arithmetic) go to the lower feature index,
    then the lower threshold. Returns ``(feature, threshold)`` or ``None``.
    """
    m = len(y)
    onehot = np.zeros((m, N_CLASSES), dtype=np.int64)
    onehot[np.arange(m), y] = 1
    tot = onehot.sum(axis=0)
    cands = []  # (float score, feature, threshold, cl, nl)
    for f in sorted(int(f) for f in features):
        v = X[:, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        cum = np.cumsum(onehot[order], axis=0)
        k = np.nonzero(vs[:-1] < vs[1:])[0] + 1  # left part holds the first k samples
        k = k[(k >= min_leaf) & (m - k >= min_leaf)]
        if len(k) == 0:
            continue
        cl = cum[k - 1]
        scores = _split_score(cl, tot, k.astype(np.float64), (m - k).astype(np.float64))
        for s, kk, c in zip(scores, k, cl):
            lo, hi = vs[kk - 1], vs[kk]
            t = 0.5 * (lo + hi)
            if not lo <= t < hi:
                t = lo
            cands.append((float(s), f, float(t), c, int(kk)))
    if not cands:
        return None
    top = max(c[0] for c in cands)
    near = [c for c in cands if c[0] >= top - 1e-9 * abs(top)]
    best, best_exact = None, None
    for s, f, t, cl, nl in near:
        ex = _exact_score(cl, tot, nl, m - nl)
        if best_exact is None or ex > best_exact:
            best, best_exact = (f, t), ex
    return best


def build_tree(X: np.ndarray, y: np.ndarray, sample: np.ndarray, rng: np.random.Generator,
               columns: Sequence[int], mtry: int, max_depth: int | None = None,
               min_leaf: int = 1) -> Tree:
    """Grow one CART tree on the rows ``sample`` (repeats allowed)."""
    columns = np.asarray(columns, dtype=np.int64)
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node():
        feature.append(_LEAF)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.zeros(N_CLASSES, dtype=np.int64))
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.asarray(sample, dtype=np.int64), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        hist = np.bincount(ys, minlength=N_CLASSES)
        split = None
        if ((max_depth is None or depth < max_depth) and len(idx) >= 2 * min_leaf
                and np.count_nonzero(hist) > 1):
            order = rng.permutation(columns)
            split = best_split(X[idx], ys, order[:mtry], min_leaf)
            # if every drawn column is constant here, keep drawing until one splits
            for f in order[mtry:]:
                if split is not None:
                    break
                split = best_split(X[idx], ys, [f], min_leaf)
        if split is None:
            counts[node] = hist
            continue
        f, t = split
        go_left = X[idx, f] <= t
        li, ri = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, t, li, ri
        # right pushed first so the left subtree is expanded (and numbered) first
        stack.append((ri, idx[~go_left], depth + 1))
        stack.append((li, idx[go_left], depth + 1))

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.vstack(counts))


def tree_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) ^ int(t)))


def bootstrap_indices(n: int, seed: int, t: int) -> np.ndarray:
    """The bootstrap of tree ``t``; the first draw from its stream."""
    return tree_rng(seed, t).integers(0, n, size=n)


# -- forest model ------------------------------------------------------------

@dataclass(eq=False)
class ForestModel:
    trees: list[Tree]
    weights: np.ndarray
    params: ForestParams
    oob_error: float
    importances: np.ndarray
    layout_version: str = LAYOUT_VERSION
    n_train: int = 0
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.importances = np.asarray(self.importances, dtype=np.float64)
        if len(self.trees) != len(self.weights) or len(self.trees) == 0:
            raise InvalidData("a forest needs one positive weight per tree")
        if np.any(self.weights <= 0) or not np.all(np.isfinite(self.weights)):
            raise InvalidData("tree weights must all be positive and finite")
        if self.importances.shape != (N_FEATURES,):
            raise InvalidData(f"importances must have {N_FEATURES} entries")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def tree_probabilities(self, X: np.ndarray) -> np.ndarray:
        """Per-tree leaf distributions, shape ``(T, n, 4)``."""
        X = _as_matrix(X)
        return np.stack([t.predict_proba(X) for t in self.trees])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return weighted_average(self.tree_probabilities(X), self.weights)

    def predict(self, X: np.ndarray) -> list[Grade]:
        return [Grade(int(k)) for k in np.argmax(self.predict_proba(X), axis=1)]

    # persistence
    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "layout_version": self.layout_version,
            "params": self.params.to_dict(),
            "n_train": int(self.n_train),
            "weights": [float(w) for w in self.weights],
            "oob_error": float(self.oob_error),
            "importances": [float(v) for v in self.importances],
            "training": self.training,
            "trees": [t.to_json() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "ForestModel":
        if obj.get("format_version") != FORMAT_VERSION:
            raise IncompatibleModel(f"unsupported model format_version {obj.get('format_version')!r}")
        try:
            p = dict(obj["params"])
            if p.get("columns") is not None:
                p["columns"] = tuple(p["columns"])
            params = ForestParams(**p)
            return cls(trees=[Tree.from_json(t) for t in obj["trees"]],
                       weights=obj["weights"], params=params,
                       oob_error=float(obj["oob_error"]), importances=obj["importances"],
                       layout_version=obj["layout_version"], n_train=int(obj.get("n_train", 0)),
                       training=dict(obj.get("training", {})))
        except (KeyError, TypeError) as exc:
            raise InvalidData(f"malformed model file: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidData(f"model file is not valid JSON: {exc}") from None
        return cls.from_dict(obj)

    def save(self, path: str | os.PathLike) -> None:
        from .io_utils import atomic_write_text
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ForestModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise InvalidData(f"feature matrix must have {N_FEATURES} columns, got shape {X.shape}")
    return X


def posterior(model: ForestModel, x: FeatureVector | np.ndarray) -> GradePosterior:
    """Weighted per-tree average of leaf distributions for one sample."""
    if isinstance(x, FeatureVector):
        if x.layout_version != model.layout_version:
            raise IncompatibleModel(
                f"feature layout {x.layout_version!r} does not match model layout {model.layout_version!r}")
        x = x.values
    p = model.predict_proba(_as_matrix(x))[0]
    return GradePosterior(np.clip(p, 0.0, 1.0))


def check_layout(model: ForestModel, layout_version: str = LAYOUT_VERSION) -> None:
    if model.layout_version != layout_version:
        raise IncompatibleModel(
            f"model layout {model.layout_version!r} does not match extractor layout {layout_version!r}")


def _validate_training(features, labels) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(features, dtype=np.float64)
    if X.size == 0 or len(X) == 0:
        raise EmptyTrainingSet("no training samples")
    X = _as_matrix(X)
    if not np.all(np.isfinite(X)):
        raise InvalidData("training features contain non-finite values")
    y = np.array([int(Grade.parse(g)) for g in labels], dtype=np.int64)
    if len(y) != len(X):
        raise InvalidData(f"{len(X)} feature rows but {len(y)} labels")
    return X, y


def _oob_masks(n: int, params: ForestParams) -> list[np.ndarray]:
    masks = []
    for t in range(params.n_trees):
        inbag = np.zeros(n, dtype=bool)
        inbag[bootstrap_indices(n, params.seed, t)] = True
        masks.append(~inbag)
    return masks


def train(features, labels, params: ForestParams | None = None, n_jobs: int = 1,
          importance_seed: int | None = None) -> ForestModel:
    """Fit a forest; also computes OOB error and permutation importances."""
    params = params or ForestParams()
    X, y = _validate_training(features, labels)
    n = len(y)
    cols, mtry = params.candidate_columns, params.effective_mtry

    def grow(t: int) -> Tree:
        rng = tree_rng(params.seed, t)
        sample = rng.integers(0, n, size=n)
        return build_tree(X, y, sample, rng, cols, mtry, params.max_depth, params.min_leaf)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(grow, range(params.n_trees)))
    else:
        trees = [grow(t) for t in range(params.n_trees)]

    oob = _oob_masks(n, params)
    weights = np.ones(params.n_trees)
    if params.weight_mode == "oob_accuracy":
        for t, (tree, m) in enumerate(zip(trees, oob)):
            if m.any():
                weights[t] = max(float(np.mean(tree.predict(X[m]) == y[m])), 1e-3)

    model = ForestModel(trees, weights, params, oob_error=0.0,
                        importances=np.zeros(N_FEATURES), n_train=n)
    model.oob_error = oob_error(model, X, y, oob)
    seed = params.seed if importance_seed is None else importance_seed
    model.importances = permutation_importance(model, X, y, seed, oob)
    return model


def oob_error(model: ForestModel, X: np.ndarray, y: np.ndarray,
              oob: list[np.ndarray] | None = None) -> float:
    """Misclassification rate using, per sample, only trees that never saw it."""
    X, y = _validate_training(X, y)
    oob = oob if oob is not None else _oob_masks(len(y), model.params)
    probs = model.tree_probabilities(X)                 # (T, n, 4)
    m = np.stack(oob).astype(np.float64)                # (T, n)
    w = model.weights[:, None] * m
    denom = w.sum(axis=0)
    seen = denom > 0
    if not seen.any():
        return 0.0
    avg = np.einsum("tn,tnc->nc", w, probs)[seen] / denom[seen, None]
    return float(np.mean(np.argmax(avg, axis=1) != y[seen]))


def permutation_importance(model: ForestModel, features, labels, seed: int,
                           oob: list[np.ndarray] | None = None) -> np.ndarray:
    """Mean increase in per-tree OOB error when one column is shuffled.

    ``features``/``labels`` must be the training set, since each tree's OOB
    rows are recovered from its bootstrap stream. Values may be negative.
    """
    X, y = _validate_training(features, labels)
    if model.n_train and len(y) != model.n_train:
        raise InvalidData(f"model was trained on {model.n_train} rows, got {len(y)}")
    oob = oob if oob is not None else _oob_masks(len(y), model.params)
    total = np.zeros(N_FEATURES)
    n_eval = 0
    for t, (tree, m) in enumerate(zip(model.trees, oob)):
        if not m.any():
            continue
        n_eval += 1
        Xo, yo = X[m], y[m]
        base = float(np.mean(tree.predict(Xo) != yo))
        used = tree.used_features()
        for j in range(N_FEATURES):
            if j not in used:
                continue
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), t, j])))
            Xp = Xo.copy()
            Xp[:, j] = Xo[rng.permutation(len(Xo)), j]
            total[j] += float(np.mean(tree.predict(Xp) != yo)) - base
    return total / n_eval if n_eval else total

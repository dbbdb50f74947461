"""Black-box KV-usage estimation from inter-token latency windows.

Feature windows from probe-request ITL traces are classified into uniform
usage bins by a small gradient-boosted ensemble of shallow regression
trees, trained in-repo: the features are low-dimensional and near-linearly
separable, so no external ML dependency is needed and training stays
bit-deterministic.
"""

import json
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import rng
from .metrics import percentile

FEATURE_NAMES = ["mean", "median", "p95", "stddev", "min", "max",
                 "last_gap", "trend_slope"]
MODEL_FORMAT_VERSION = 1
DEFAULT_MIN_WINDOW = 8


class ProbeError(Exception):
    pass


class WindowTooShort(ProbeError):
    pass


class InsufficientCoverage(ProbeError):
    pass


@dataclass
class ItlWindow:
    gaps_us: List[int]
    request_id: int = -1
    t_end_us: int = 0


@dataclass
class LabeledSample:
    features: np.ndarray
    true_bin: int


def extract_features(window: ItlWindow,
                     min_window: int = DEFAULT_MIN_WINDOW) -> np.ndarray:
    if len(window.gaps_us) < min_window:
        raise WindowTooShort(
            f"window has {len(window.gaps_us)} gaps, need {min_window}")
    gaps = np.asarray(window.gaps_us, dtype=np.float64)
    n = gaps.size
    x = np.arange(n, dtype=np.float64)
    # least-squares slope in us per step
    slope = float(np.cov(x, gaps, bias=True)[0, 1] / np.var(x))
    return np.array([
        float(gaps.mean()),
        float(percentile(gaps.tolist(), 50)),
        float(percentile(gaps.tolist(), 95)),
        float(gaps.std()),
        float(gaps.min()),
        float(gaps.max()),
        float(gaps[-1]),
        slope,
    ])


def bin_edges(n_bins: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_bins + 1)


def usage_to_bin(used_fraction: float, n_bins: int) -> int:
    return min(int(used_fraction * n_bins), n_bins - 1)


# -- shallow regression trees -------------------------------------------------


def _fit_tree(X: np.ndarray, residual: np.ndarray, max_depth: int,
              min_samples_leaf: int = 8) -> dict:
    """Exact greedy variance-reduction split; nested-dict nodes."""

    def build(indices: np.ndarray, depth: int) -> dict:
        values = residual[indices]
        node_value = float(values.mean())
        if depth >= max_depth or indices.size < 2 * min_samples_leaf:
            return {"value": node_value}
        best = None  # (sse, feature, threshold, left_idx, right_idx)
        for f in range(X.shape[1]):
            col = X[indices, f]
            order = np.argsort(col, kind="stable")
            col_sorted = col[order]
            res_sorted = values[order]
            csum = np.cumsum(res_sorted)
            csq = np.cumsum(res_sorted ** 2)
            total_sum = csum[-1]
            total_sq = csq[-1]
            n = indices.size
            # candidate split after position i (left = [0..i])
            counts = np.arange(1, n)
            left_sum = csum[:-1]
            left_sq = csq[:-1]
            right_sum = total_sum - left_sum
            right_sq = total_sq - left_sq
            sse = (left_sq - left_sum ** 2 / counts
                   + right_sq - right_sum ** 2 / (n - counts))
            valid = (col_sorted[1:] > col_sorted[:-1]) \
                & (counts >= min_samples_leaf) \
                & (counts <= n - min_samples_leaf)
            if not valid.any():
                continue
            sse = np.where(valid, sse, np.inf)
            i = int(np.argmin(sse))
            if best is None or sse[i] < best[0]:
                threshold = (col_sorted[i] + col_sorted[i + 1]) / 2.0
                mask = col <= threshold
                best = (float(sse[i]), f, float(threshold),
                        indices[mask], indices[~mask])
        if best is None:
            return {"value": node_value}
        _, f, threshold, left_idx, right_idx = best
        return {
            "feature": f,
            "threshold": threshold,
            "left": build(left_idx, depth + 1),
            "right": build(right_idx, depth + 1),
        }

    return build(np.arange(X.shape[0]), 0)


def _tree_predict(node: dict, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])

    def walk(node: dict, indices: np.ndarray) -> None:
        if "value" in node:
            out[indices] = node["value"]
            return
        mask = X[indices, node["feature"]] <= node["threshold"]
        walk(node["left"], indices[mask])
        walk(node["right"], indices[~mask])

    walk(node, np.arange(X.shape[0]))
    return out


# -- boosted multiclass ensemble ----------------------------------------------


@dataclass
class ProbeModel:
    n_bins: int
    feature_spec: List[str]
    learning_rate: float
    trees: List[List[dict]]            # rounds x classes
    edges: List[float]
    min_window: int = DEFAULT_MIN_WINDOW
    version: int = MODEL_FORMAT_VERSION

    def decision_scores(self, X: np.ndarray) -> np.ndarray:
        scores = np.zeros((X.shape[0], self.n_bins))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                scores[:, k] += self.learning_rate * _tree_predict(tree, X)
        return scores

    def predict_bins(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.decision_scores(X), axis=1)

    def bin_midpoint(self, b: int) -> float:
        return (self.edges[b] + self.edges[b + 1]) / 2.0

    def save(self, path: str) -> None:
        doc = {
            "version": self.version,
            "n_bins": self.n_bins,
            "feature_spec": self.feature_spec,
            "learning_rate": self.learning_rate,
            "min_window": self.min_window,
            "edges": self.edges,
            "trees": self.trees,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path: str) -> "ProbeModel":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != MODEL_FORMAT_VERSION:
            raise ProbeError(f"unsupported model version {doc.get('version')}")
        return cls(n_bins=doc["n_bins"], feature_spec=doc["feature_spec"],
                   learning_rate=doc["learning_rate"], trees=doc["trees"],
                   edges=doc["edges"], min_window=doc["min_window"])


@dataclass
class Prediction:
    bin: int
    usage_estimate: float


@dataclass
class TrainResult:
    model: ProbeModel
    holdout_accuracy: float
    confusion: np.ndarray              # true x predicted


@dataclass
class Hyper:
    n_trees: int = 30                  # boosting rounds
    max_depth: int = 3
    learning_rate: float = 0.2


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train(samples: Sequence[LabeledSample], hyper: Hyper = Hyper(),
          n_bins: int = 10, seed: int = 0,
          holdout_frac: float = 0.2) -> TrainResult:
    """Fit the boosted ensemble; deterministic given seed.

    Requires every bin represented with at least 10 samples and a total of
    n_bins * 50: training-data coverage of usage states is what makes the
    estimator usable near saturation.
    """
    if len(samples) < n_bins * 50:
        raise InsufficientCoverage(
            f"need >= {n_bins * 50} samples, got {len(samples)}")
    y = np.array([s.true_bin for s in samples], dtype=np.int64)
    counts = np.bincount(y, minlength=n_bins)
    thin = [b for b in range(n_bins) if counts[b] < 10]
    if thin:
        raise InsufficientCoverage(f"bins {thin} have < 10 samples")
    X = np.stack([s.features for s in samples])

    order = rng.stream(seed, "probe.train").permutation(len(samples))
    n_hold = max(1, int(round(holdout_frac * len(samples))))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    X_tr, y_tr = X[train_idx], y[train_idx]

    onehot = np.zeros((len(y_tr), n_bins))
    onehot[np.arange(len(y_tr)), y_tr] = 1.0
    scores = np.zeros((len(y_tr), n_bins))
    trees: List[List[dict]] = []
    for _ in range(hyper.n_trees):
        probs = _softmax(scores)
        round_trees: List[dict] = []
        for k in range(n_bins):
            residual = onehot[:, k] - probs[:, k]
            tree = _fit_tree(X_tr, residual, hyper.max_depth)
            round_trees.append(tree)
            scores[:, k] += hyper.learning_rate * _tree_predict(tree, X_tr)
        trees.append(round_trees)

    model = ProbeModel(n_bins=n_bins, feature_spec=list(FEATURE_NAMES),
                       learning_rate=hyper.learning_rate, trees=trees,
                       edges=bin_edges(n_bins).tolist())
    pred = model.predict_bins(X[hold_idx])
    accuracy = float((pred == y[hold_idx]).mean())
    confusion = np.zeros((n_bins, n_bins), dtype=np.int64)
    for t, p in zip(y[hold_idx], pred):
        confusion[t, p] += 1
    return TrainResult(model=model, holdout_accuracy=accuracy,
                       confusion=confusion)


def predict(model: ProbeModel, window: ItlWindow) -> Prediction:
    features = extract_features(window, model.min_window)
    b = int(model.predict_bins(features.reshape(1, -1))[0])
    return Prediction(bin=b, usage_estimate=model.bin_midpoint(b))


# -- labeled-sample CSV interchange ---------------------------------------------

SAMPLE_HEADER = [f"feature_{i}" for i in range(len(FEATURE_NAMES))] + ["true_bin"]


def write_samples_csv(samples: Sequence[LabeledSample], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(SAMPLE_HEADER) + "\n")
        for s in samples:
            row = [repr(float(v)) for v in s.features] + [str(s.true_bin)]
            fh.write(",".join(row) + "\n")


def read_samples_csv(path: str) -> List[LabeledSample]:
    samples: List[LabeledSample] = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != SAMPLE_HEADER:
            raise ProbeError(f"{path}: bad header")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(SAMPLE_HEADER):
                raise ProbeError(f"{path}:{lineno}: bad row")
            features = np.array([float(v) for v in parts[:-1]])
            samples.append(LabeledSample(features, int(parts[-1])))
    return samples

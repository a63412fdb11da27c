"""Linear probes on FFN keys that pick the edit layer for each decoding position.

For position p and decoder layer l, keys captured at edit-request contexts
(label 1) are contrasted with keys captured at ordinary training contexts in
the same role (label 0). The layer whose probe separates them best is where
the new associations are written.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .editor import capture_site_keys
from .errors import InputError

log = logging.getLogger(__name__)

SEPARABILITY_WARNING = 0.7


@dataclass
class ProbeDataset:
    position: int
    layer: int
    X: np.ndarray  # (n, d_ff) keys
    y: np.ndarray  # (n,) labels in {0, 1}

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise InputError("probe features and labels differ in length")
        if len(np.unique(self.y)) < 2:
            raise InputError("probe dataset needs both classes")


@dataclass(frozen=True)
class LayerChoice:
    position: int
    layer: int
    validation_accuracy: float


@dataclass
class ProbeResult:
    theta: np.ndarray  # weights then bias, in standardized feature space
    mean: np.ndarray
    scale: np.ndarray
    validation_accuracy: float

    def predict_proba(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return _sigmoid(Z @ self.theta[:-1] + self.theta[-1])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sample_original(samples, n: int, seed: int):
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(samples), size=n, replace=len(samples) < n))
    return [samples[i] for i in idx]


def build_probe_datasets(model, request_sites, original_samples, layers, n: int | None = None, seed: int = 0) -> dict:
    """layer -> ProbeDataset for one position, from a single capture pass.

    ``request_sites`` are the position's edit requests (label 1) and
    ``original_samples`` ordinary training contexts at the same position
    (label 0), of which ``n`` (default: as many as requests) are drawn.
    """
    m = len(request_sites)
    n = m if n is None else n
    if m == 0 or n == 0:
        raise InputError("probe needs at least one request and one original sample")
    if not original_samples:
        raise InputError("no original samples to draw label-0 keys from")
    position = request_sites[0].position
    layers = list(layers)
    orig = _sample_original(original_samples, n, seed)
    pos_keys = capture_site_keys(model, list(request_sites), layers, position)
    neg_keys = capture_site_keys(model, orig, layers, position)
    y = np.concatenate([np.ones(m), np.zeros(n)])
    return {l: ProbeDataset(position, l, np.concatenate([pos_keys[l][0], neg_keys[l][0]]), y) for l in layers}


def build_probe_dataset(model, request_sites, original_samples, layer: int, n: int | None = None, seed: int = 0) -> ProbeDataset:
    return build_probe_datasets(model, request_sites, original_samples, [layer], n, seed)[layer]


def _split(y, ratio, rng):
    perm = rng.permutation(len(y))
    cut = int(round(ratio * len(y)))
    return perm[:cut], perm[cut:]


def train_probe(ds: ProbeDataset, split_ratio: float = 0.8, seed: int = 0, steps: int = 500, lr: float = 0.1,
                l2: float = 1e-4) -> ProbeResult:
    """Logistic regression by full-batch gradient descent; accuracy on the held-out part.

    Features are standardized with statistics of the training part.
    """
    rng = np.random.default_rng(seed)
    tr, va = _split(ds.y, split_ratio, rng)
    if len(np.unique(ds.y[tr])) < 2:
        tr, va = _split(ds.y, split_ratio, rng)
        if len(np.unique(ds.y[tr])) < 2:
            raise InputError(f"probe training split at (p={ds.position}, l={ds.layer}) has a single class")
    X = np.asarray(ds.X, dtype=np.float64)
    mean = X[tr].mean(0)
    scale = X[tr].std(0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    Ztr, ytr = Z[tr], ds.y[tr]
    A = np.hstack([Ztr, np.ones((len(tr), 1))])
    theta = np.zeros(A.shape[1])
    reg = np.ones_like(theta)
    reg[-1] = 0.0
    for _ in range(steps):
        g = A.T @ (_sigmoid(A @ theta) - ytr) / len(tr) + l2 * reg * theta
        theta -= lr * g
    res = ProbeResult(theta, mean, scale, float("nan"))
    if len(va):
        pred = res.predict_proba(X[va]) >= 0.5
        res.validation_accuracy = float(np.mean(pred == (ds.y[va] == 1)))
    return res


def select_layers(accuracies: dict) -> dict:
    """position -> LayerChoice by argmax accuracy; ties go to the shallower layer.

    ``accuracies`` maps (position, layer) to validation accuracy.
    """
    best: dict = {}
    for (p, l), acc in sorted(accuracies.items()):
        cur = best.get(p)
        if cur is None or acc > cur.validation_accuracy:
            best[p] = LayerChoice(p, l, float(acc))
    return best


def locate(model, request_sites_by_position: dict, original_by_position: dict, layers=None, n: int | None = None,
           seed: int = 0, split_ratio: float = 0.8):
    """Probe every (position, layer) cell and select one layer per position.

    Returns (choices, accuracies).
    """
    layers = list(range(model.cfg.n_dec_layers)) if layers is None else list(layers)
    acc = {}
    for p in sorted(request_sites_by_position):
        sites = request_sites_by_position[p]
        if not sites:
            continue
        dsets = build_probe_datasets(model, sites, original_by_position[p], layers, n, seed + 1000 * p)
        for l in layers:
            acc[(p, l)] = train_probe(dsets[l], split_ratio, seed + 1000 * p + l).validation_accuracy
    choices = select_layers(acc)
    for p, c in choices.items():
        if c.validation_accuracy < SEPARABILITY_WARNING:
            log.warning("position %d: best probe accuracy %.3f < %.1f; edits may not separate", p,
                        c.validation_accuracy, SEPARABILITY_WARNING)
    return choices, acc


def probes_table(choices: dict, accuracies: dict) -> str:
    layers = sorted({l for _, l in accuracies})
    lines = ["pos layer    acc | " + " ".join(f"L{l:<5d}" for l in layers)]
    for p in sorted(choices):
        c = choices[p]
        cells = " ".join(f"{accuracies.get((p, l), float('nan')):.3f} " for l in layers)
        lines.append(f"{p:3d} {c.layer:5d} {c.validation_accuracy:6.3f} | {cells}")
    return "\n".join(lines)


def write_probes(choices: dict, accuracies: dict, path):
    with open(path, "w") as fh:
        for (p, l), a in sorted(accuracies.items()):
            fh.write(json.dumps({"position": p, "layer": l, "accuracy": round(a, 6),
                                 "selected": choices.get(p) is not None and choices[p].layer == l}) + "\n")


def read_probes(path) -> tuple:
    acc = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                acc[(int(d["position"]), int(d["layer"]))] = float(d["accuracy"])
    return select_layers(acc), acc

"""Adversarial perturbations of a tiny fixed ReLU classifier.

Two modes on an 8-dimensional input box:

* ``max-loss``: maximize the margin of the wrong classes subject to a
  distance budget ``d(x, x~) <= eps`` and ``x~ in [0, 1]^8``;
* ``min-distortion``: minimize ``d(x, x~)`` subject to misclassification.

The distance is either plain Euclidean or a perceptual-style embedding
distance ``||phi(x) - phi(x~)||_2`` through a fixed random ReLU embedder.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import concat
from ..problem import ProblemDefinition, VariableSpec
from . import GalleryExample

DESCRIPTION = "margin attack on a tiny ReLU net (max-loss / min-distortion)"
DEFAULTS = {"seed": 0, "mode": "max-loss", "metric": "l2", "eps": 0.5}

DIM = 8
CLASSES = 3
HIDDEN = 16
EMBED = 4

_INSTANCE_SCAN = 4000      # box samples checked for a misclassified point
_INSTANCE_ATTEMPTS = 20    # weight redraws before giving up on a seed


def _make_weights(rng: np.random.Generator) -> dict:
    return {
        "W1": rng.normal(size=(HIDDEN, DIM)) / np.sqrt(DIM),
        "b1": 0.1 * rng.normal(size=HIDDEN),
        "W2": rng.normal(size=(CLASSES, HIDDEN)) / np.sqrt(HIDDEN),
        "b2": 0.1 * rng.normal(size=CLASSES),
        "We": rng.normal(size=(EMBED, DIM)) / np.sqrt(DIM),
        "be": 0.1 * rng.normal(size=EMBED),
    }


def logits_np(w: dict, x: np.ndarray) -> np.ndarray:
    return w["W2"] @ np.maximum(w["W1"] @ x + w["b1"], 0.0) + w["b2"]


def embed_np(w: dict, x: np.ndarray) -> np.ndarray:
    return np.maximum(w["We"] @ x + w["be"], 0.0)


def margin_np(w: dict, x: np.ndarray, label: int) -> float:
    """Highest wrong-class logit minus the true logit; >= 0 iff misclassified."""
    z = logits_np(w, x)
    wrong = np.delete(z, label)
    return float(wrong.max() - z[label])


def distance_np(w: dict, metric: str, x_nat: np.ndarray,
                x: np.ndarray) -> float:
    if metric == "l2":
        return float(np.linalg.norm(x - x_nat))
    return float(np.linalg.norm(embed_np(w, x) - embed_np(w, x_nat)))


def _draw_instance(seed: int):
    """Deterministic weights/input draw, redrawn until non-degenerate.

    A degenerate classifier labels the whole box with one class, which
    makes misclassification constraints infeasible; such draws are skipped
    in a reproducible way.
    """
    for attempt in range(_INSTANCE_ATTEMPTS):
        rng = np.random.default_rng([seed, attempt])
        w = _make_weights(rng)
        x_nat = rng.random(DIM)
        label = int(np.argmax(logits_np(w, x_nat)))
        best, best_margin = None, 0.01
        for c in rng.random(size=(_INSTANCE_SCAN, DIM)):
            mg = margin_np(w, c, label)
            if mg > best_margin:
                best, best_margin = c, mg
        if best is not None:
            return w, x_nat, label, best
    raise ValueError(f"no usable classifier found for seed {seed}")


def build_attack(seed: int, mode: str = "max-loss", metric: str = "l2",
                 eps: float = 0.5) -> GalleryExample:
    if mode not in ("max-loss", "min-distortion"):
        raise ValueError(f"unknown mode '{mode}'")
    if metric not in ("l2", "embed"):
        raise ValueError(f"unknown metric '{metric}'")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    w, x_nat, label, misclassified = _draw_instance(seed)

    def fn(box):
        xt = box.x_tilde
        h = (w["W1"] @ xt + w["b1"]).relu()
        z = w["W2"] @ h + w["b2"]
        wrong = concat([z[:label], z[label + 1:]])
        margin = wrong.max() - z[label]
        if metric == "l2":
            dist = (xt - x_nat).norm(2)
        else:
            e_nat = embed_np(w, x_nat)
            dist = ((w["We"] @ xt + w["be"]).relu() - e_nat).norm(2)
        box_rows = [-xt, xt - 1.0]
        if mode == "max-loss":
            return -margin, [dist - eps] + box_rows, None
        return dist, [-margin] + box_rows, None

    problem = ProblemDefinition(VariableSpec({"x_tilde": (DIM,)}), fn,
                                name=f"attack-{mode}")
    if mode == "max-loss":
        feasible = {"x_tilde": x_nat.copy()}
    else:
        feasible = {"x_tilde": misclassified.copy()}
    return GalleryExample(
        name="attack",
        problem=problem,
        oracle={"weights": w, "x_nat": x_nat, "label": label,
                "mode": mode, "metric": metric, "eps": eps},
        feasible_point=feasible,
        config={"seed": seed, "mode": mode, "metric": metric, "eps": eps},
    )


def random_search_baseline(example: GalleryExample, num_samples: int,
                           seed: int) -> float:
    """Best feasible value found by pure random search.

    Entirely numpy forward passes, independent of the tape. Returns the
    best margin (max-loss) or the smallest misclassifying distance
    (min-distortion; ``inf`` when no sample misclassifies).
    """
    o = example.oracle
    w, x_nat, label = o["weights"], o["x_nat"], o["label"]
    mode, metric, eps = o["mode"], o["metric"], o["eps"]
    rng = np.random.default_rng(seed)
    if mode == "max-loss":
        best = -np.inf
        for _ in range(num_samples):
            # half local ball samples, half global box samples
            if rng.random() < 0.5:
                direction = rng.normal(size=DIM)
                direction /= max(np.linalg.norm(direction), 1e-12)
                r = eps * rng.random() ** (1.0 / DIM)
                cand = np.clip(x_nat + r * direction, 0.0, 1.0)
            else:
                cand = rng.random(DIM)
            if distance_np(w, metric, x_nat, cand) <= eps:
                best = max(best, margin_np(w, cand, label))
        return best
    best = np.inf
    for _ in range(num_samples):
        cand = rng.random(DIM)
        if margin_np(w, cand, label) >= 0.0:
            best = min(best, distance_np(w, metric, x_nat, cand))
    return best


def from_config(cfg: dict) -> GalleryExample:
    return build_attack(int(cfg["seed"]), str(cfg["mode"]),
                        str(cfg["metric"]), float(cfg["eps"]))

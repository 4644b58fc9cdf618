"""Local fidelity: how well {query} u CFs trace the model's decision boundary.

A 1-nearest-neighbor surrogate is fitted on the query point and its
counterfactuals, labeled by the model itself, and scored by agreement with
the model on synthetic neighbors sampled within MAD-scaled radii around the
query.
"""

from dataclasses import dataclass

import numpy as np

from .data import synthetic_neighbors


@dataclass
class OneNearestNeighbor:
    """L2 nearest-neighbor classifier; distance ties go to the lowest index."""

    points: np.ndarray
    labels: np.ndarray

    def predict(self, X):
        X = np.atleast_2d(X)
        d2 = ((X[:, None, :] - self.points[None, :, :]) ** 2).sum(axis=2)
        return self.labels[np.argmin(d2, axis=1)]


def fit_1nn(points, labels):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if len(points) == 0:
        raise ValueError("1-NN needs at least one training point")
    if len(points) != len(labels):
        raise ValueError("points/labels length mismatch")
    return OneNearestNeighbor(points, labels)


def encoded_radii(encoder, mads_raw, radius_factor):
    """Map raw-scale per-feature MADs into encoded-unit radii."""
    radii = np.zeros(len(encoder.features))
    for i, _ in encoder.continuous_columns():
        f = encoder.features[i]
        radii[i] = radius_factor * mads_raw[i] / (f.max - f.min)
    return radii


def fidelity_score(model, x, cfs, radius_factor, count, seed, encoder, mads_raw,
                   cat_resample_prob=None):
    """Agreement between the model and the 1-NN surrogate near x.

    The surrogate trains on {x} u cfs labeled by the model's own predictions.
    Neighbors of x are drawn with per-feature radius = radius_factor * MAD
    (raw-scale MAD mapped through the encoder); categorical blocks resample
    with probability min(radius_factor, 1).
    """
    if radius_factor <= 0:
        raise ValueError("radius_factor must be > 0")
    x = np.asarray(x, dtype=float)
    cfs = np.atleast_2d(cfs) if len(np.atleast_1d(cfs)) else np.empty((0, len(x)))
    pts = np.vstack([x[None, :], cfs]) if len(cfs) else x[None, :]
    surrogate = fit_1nn(pts, (model.predict_proba(pts) >= 0.5).astype(int))
    if cat_resample_prob is None:
        cat_resample_prob = min(radius_factor, 1.0)
    neighbors = synthetic_neighbors(encoder, x, encoded_radii(encoder, mads_raw, radius_factor),
                                    count, seed, cat_resample_prob=cat_resample_prob)
    model_labels = (model.predict_proba(neighbors) >= 0.5).astype(int)
    return float(np.mean(surrogate.predict(neighbors) == model_labels))

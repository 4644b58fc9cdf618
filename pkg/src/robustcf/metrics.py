"""Post-hoc evaluation of a generated counterfactual set."""

from dataclasses import dataclass, asdict

import numpy as np

from .cfgen import diversity_score, proximity_loss, robustness_loss, sparsity


@dataclass
class MetricsReport:
    validity: float
    proximity: float
    sparsity: float
    diversity: float
    robustness: float
    generation_time: float

    FIELDS = ("validity", "proximity", "sparsity", "diversity", "robustness",
              "generation_time")

    def as_dict(self):
        return {k: float(v) for k, v in asdict(self).items()}


def validity(cs, model, desired):
    """Fraction of candidates whose predicted class equals `desired`."""
    preds = (model.predict_proba(cs.cfs) >= 0.5).astype(int)
    return float(np.mean(preds == desired))


def robustness_eval(cs, cfg, trials, seed):
    """Mean Dice-Sorensen coefficient under repeated perturbation draws.

    Higher is better (1.0 = binarized form never changes). Trial t draws its
    perturbation from seed+t, so trials=1 is exactly the complement of the
    hard robustness loss at that seed.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    scores = [1.0 - robustness_loss(cs.cfs, seed + t, cfg, mode="hard")
              for t in range(trials)]
    return float(np.mean(scores))


def evaluate(cs, model, cfg, encoder, trials=10, seed=0):
    """Five-metric report for one counterfactual set (hard-mode robustness).

    Diversity is reported with zero jitter so identical candidates score 0.
    """
    return MetricsReport(
        validity=validity(cs, model, cs.desired_class),
        proximity=proximity_loss(cs.cfs, cs.origin, cfg.p_norm, cfg.feature_weights),
        sparsity=sparsity(cs.cfs, cs.origin, encoder),
        diversity=diversity_score(cs.cfs, cfg.p_norm, jitter=0.0),
        robustness=robustness_eval(cs, cfg, trials, seed),
        generation_time=cs.generation_time,
    )

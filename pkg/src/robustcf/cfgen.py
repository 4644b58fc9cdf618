"""Counterfactual generation.

The objective combines class loss (BCE toward the desired class), mean p-norm
proximity, a determinant-of-similarity-kernel diversity reward, and a
stability penalty: the Dice-Sorensen distance between each candidate's
binarized form and the binarized form of a randomly perturbed copy.

Two optimizers share the objective: joint Adam gradient descent for
differentiable models (soft, sigmoid-relaxed binarization on the gradient
path) and random-restart hill climbing for black-box predictors (hard
binarization throughout).
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import sigmoid
from .rng import derive_seed

_DELTA_TAG = 0xDE17A
_INIT_TAG = 0x1417
CAT_FLIP_PROB = 0.25  # per-feature category flip chance in a local mutation
RESTART_PROB = 0.1    # chance a hill-climbing proposal is a full redraw


class NonFiniteLoss(Exception):
    """A loss component became non-finite during optimization."""


@dataclass
class LossWeights:
    lambda_p: float = 0.5
    lambda_d: float = 1.0
    lambda_r: float = 0.4

    def validate(self):
        if min(self.lambda_p, self.lambda_d, self.lambda_r) < 0:
            raise ValueError("loss weights must be >= 0")
        return self


@dataclass
class CfConfig:
    k: int = 10
    desired_class: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    p_norm: int = 1
    max_iterations: int = 500
    learning_rate: float = 0.05
    perturbation_scale: float = 0.05
    binarize_threshold: float = 0.5
    soft_binarize_temperature: float = 10.0
    diag_jitter: float = 1e-4
    convergence_tol: float = 1e-6
    convergence_patience: int = 10
    init_noise: float = 0.01
    # minimize y + lp*prox - ld*det + lr*rob by default; True flips the
    # robustness sign to the literal objective (subtracting the penalty)
    literal_robustness_sign: bool = False
    # optional per-encoded-dimension proximity weights (e.g. inverse MAD)
    feature_weights: np.ndarray | None = None
    seed: int = 0

    def validate(self):
        self.weights.validate()
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.binarize_threshold < 1:
            raise ValueError("binarize_threshold must be in (0, 1)")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.p_norm not in (1, 2):
            raise ValueError("p_norm must be 1 or 2")
        if self.desired_class not in (0, 1):
            raise ValueError("desired_class must be 0 or 1")
        return self


@dataclass
class LossTrace:
    """Per-iteration loss components; the plot-ready convergence record."""

    records: list = field(default_factory=list)

    FIELDS = ("iteration", "y_loss", "proximity_loss", "diversity_loss",
              "robustness_loss", "total_loss")

    def append(self, iteration, components):
        rec = {"iteration": iteration}
        rec.update({k: components[k] for k in self.FIELDS[1:]})
        self.records.append(rec)

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def __len__(self):
        return len(self.records)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(self.FIELDS) + "\n")
            for r in self.records:
                cells = [str(r["iteration"])]
                cells += [format(float(r[k]), ".17g") for k in self.FIELDS[1:]]
                fh.write(",".join(cells) + "\n")


@dataclass
class CounterfactualSet:
    cfs: np.ndarray
    origin: np.ndarray
    desired_class: int
    achieved_class: np.ndarray
    trace: LossTrace
    generation_time: float = 0.0

    @property
    def valid_mask(self):
        return self.achieved_class == self.desired_class

    @property
    def found_any(self):
        return bool(np.any(self.valid_mask))

    @property
    def k(self):
        return len(self.cfs)


def y_loss(probs, desired_class):
    """Mean BCE of predicted probabilities against the desired class."""
    p = np.clip(np.asarray(probs, dtype=float), 1e-12, 1.0 - 1e-12)
    t = float(desired_class)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))


def _distances(diff, p_norm, feature_weights=None):
    if feature_weights is not None:
        diff = diff * feature_weights
    if p_norm == 1:
        return np.abs(diff).sum(axis=-1)
    return np.sqrt((diff * diff).sum(axis=-1))


def proximity_loss(cfs, x, p_norm=1, feature_weights=None):
    """Mean p-norm distance between the candidates and the query row."""
    cfs = np.atleast_2d(cfs)
    return float(_distances(cfs - x, p_norm, feature_weights).mean())


def sparsity(cfs, x, encoder, tol=1e-6):
    """1 - mean fraction of original features changed.

    A continuous feature counts as changed when |c - x| > tol; a categorical
    feature when its one-hot argmax differs.
    """
    cfs = np.atleast_2d(cfs)
    k = len(cfs)
    d = len(encoder.features)
    changed = 0
    for _, col in encoder.continuous_columns():
        changed += int(np.sum(np.abs(cfs[:, col] - x[col]) > tol))
    for _, sl in encoder.categorical_blocks():
        changed += int(np.sum(np.argmax(cfs[:, sl], axis=1) != np.argmax(x[sl])))
    return 1.0 - changed / (k * d)


def kernel_matrix(cfs, p_norm=1):
    """Similarity kernel K_ij = 1 / (1 + dist(c_i, c_j))."""
    cfs = np.atleast_2d(cfs)
    diff = cfs[:, None, :] - cfs[None, :, :]
    return 1.0 / (1.0 + _distances(diff, p_norm))


def diversity_score(cfs, p_norm=1, jitter=0.0):
    """det(K + jitter*I); higher means a more spread-out candidate set."""
    K = kernel_matrix(cfs, p_norm)
    if jitter:
        K = K + jitter * np.eye(len(K))
    return float(np.linalg.det(K))


def dice_sorensen(a, b):
    """2|A n B| / (|A| + |B|) on binary vectors; two empty sets give 1."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("vectors must have equal length")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (a * b).sum() / denom)


def binarize(rows, threshold):
    return (np.asarray(rows) > threshold).astype(float)


def soft_binarize(rows, threshold, temperature):
    return sigmoid(temperature * (np.asarray(rows) - threshold))


def draw_delta(shape, scale, seed):
    return np.random.default_rng(seed).normal(0.0, scale, size=shape)


def robustness_loss(cfs, delta_seed, cfg, mode="hard", delta=None):
    """Mean Dice-Sorensen distance between candidates and perturbed copies.

    delta ~ N(0, perturbation_scale) per coordinate (or passed explicitly);
    perturbed rows are clamped to [0,1]. Hard mode thresholds both sides and
    is used for reporting; soft mode uses the sigmoid relaxation
    2*sum(a*b)/(sum(a)+sum(b)) and backs the gradient path.
    """
    cfs = np.atleast_2d(cfs)
    if delta is None:
        delta = draw_delta(cfs.shape, cfg.perturbation_scale, delta_seed)
    pert = np.clip(cfs + delta, 0.0, 1.0)
    if mode == "hard":
        A = binarize(cfs, cfg.binarize_threshold)
        B = binarize(pert, cfg.binarize_threshold)
        return float(np.mean([1.0 - dice_sorensen(A[i], B[i]) for i in range(len(cfs))]))
    A = soft_binarize(cfs, cfg.binarize_threshold, cfg.soft_binarize_temperature)
    B = soft_binarize(pert, cfg.binarize_threshold, cfg.soft_binarize_temperature)
    num = 2.0 * (A * B).sum(axis=1)
    den = A.sum(axis=1) + B.sum(axis=1)
    return float(np.mean(1.0 - num / den))


def _robustness_sign(cfg):
    return -1.0 if cfg.literal_robustness_sign else 1.0


def total_loss(cfs, x, model, cfg, delta_seed=None, mode="soft", delta=None):
    """Composite objective; returns (total, components).

    total = y_loss + lambda_p*proximity - lambda_d*det(K) + lambda_r*robustness
    (robustness sign flips when literal_robustness_sign is set). Components
    are reported unweighted.
    """
    cfs = np.atleast_2d(cfs)
    probs = model.predict_proba(cfs)
    y = y_loss(probs, cfg.desired_class)
    prox = proximity_loss(cfs, x, cfg.p_norm, cfg.feature_weights)
    div = diversity_score(cfs, cfg.p_norm, cfg.diag_jitter)
    rob = robustness_loss(cfs, delta_seed, cfg, mode=mode, delta=delta)
    w = cfg.weights
    total = y + w.lambda_p * prox - w.lambda_d * div + _robustness_sign(cfg) * w.lambda_r * rob
    components = {"y_loss": y, "proximity_loss": prox, "diversity_loss": div,
                  "robustness_loss": rob, "total_loss": total}
    if not all(math.isfinite(v) for v in components.values()):
        raise NonFiniteLoss(f"non-finite loss component: {components}")
    return total, components


def total_loss_gradient(cfs, x, model, cfg, delta):
    """Analytic gradient of total_loss (soft robustness, fixed delta).

    Requires a model exposing logit_input_gradient (the differentiable
    backend). ReLU kinks and clamp boundaries use subgradient 0.
    """
    cfs = np.atleast_2d(cfs)
    k, d = cfs.shape
    w = cfg.weights
    t = float(cfg.desired_class)

    # class loss: dBCE/dx = (p - t) * dlogit/dx, averaged over candidates
    probs = model.predict_proba(cfs)
    grad = (probs - t)[:, None] * model.logit_input_gradient(cfs) / k

    # proximity
    diff = cfs - x
    fw = cfg.feature_weights
    if cfg.p_norm == 1:
        g = np.sign(diff)
        if fw is not None:
            g = g * fw
    else:
        wdiff = diff if fw is None else diff * fw
        norms = np.sqrt((wdiff * wdiff).sum(axis=1, keepdims=True))
        g = np.where(norms > 0, wdiff / np.where(norms > 0, norms, 1.0), 0.0)
        if fw is not None:
            g = g * fw
    grad += w.lambda_p * g / k

    # diversity: d(-ld*det(A))/dc via the adjugate, A = K + jitter*I
    if w.lambda_d != 0 and k > 1:
        pair = cfs[:, None, :] - cfs[None, :, :]
        D = _distances(pair, cfg.p_norm)
        K = 1.0 / (1.0 + D)
        A = K + cfg.diag_jitter * np.eye(k)
        M = np.linalg.det(A) * np.linalg.inv(A).T
        W = w.lambda_d * (M + M.T) * (K * K)
        np.fill_diagonal(W, 0.0)
        if cfg.p_norm == 1:
            S = np.sign(pair)
        else:
            Dsafe = np.where(D > 0, D, 1.0)
            S = pair / Dsafe[:, :, None]
        grad += (W[:, :, None] * S).sum(axis=1)

    # robustness (soft): both sides depend on c; clamp zeroes the pushed side
    if w.lambda_r != 0:
        T = cfg.soft_binarize_temperature
        raw = cfs + delta
        pert = np.clip(raw, 0.0, 1.0)
        in_range = ((raw > 0) & (raw < 1)).astype(float)
        A = soft_binarize(cfs, cfg.binarize_threshold, T)
        B = soft_binarize(pert, cfg.binarize_threshold, T)
        num = 2.0 * (A * B).sum(axis=1, keepdims=True)
        den = (A.sum(axis=1) + B.sum(axis=1))[:, None]
        dd_dA = (2.0 * B * den - num) / (den * den)
        dd_dB = (2.0 * A * den - num) / (den * den)
        ddice = dd_dA * T * A * (1 - A) + dd_dB * T * B * (1 - B) * in_range
        grad += _robustness_sign(cfg) * w.lambda_r * (-ddice) / k

    return grad


def _init_candidates(x, cfg, encoder, continuous_only=False):
    rng = np.random.default_rng(derive_seed(cfg.seed, _INIT_TAG))
    C = np.tile(x, (cfg.k, 1))
    noise = rng.normal(0.0, cfg.init_noise, size=C.shape)
    act = encoder.actionable_mask()
    if continuous_only:
        cont = np.zeros(encoder.width, dtype=bool)
        for _, col in encoder.continuous_columns():
            cont[col] = True
        act = act & cont
    C[:, act] += noise[:, act]
    return np.clip(C, 0.0, 1.0), encoder.actionable_mask()


def _finish(C, x, model, cfg, encoder, trace, t0):
    proj = encoder.project_onehot(C)
    act = encoder.actionable_mask()
    proj[:, ~act] = x[~act]
    achieved = (model.predict_proba(proj) >= 0.5).astype(int)
    return CounterfactualSet(cfs=proj, origin=np.array(x, dtype=float),
                             desired_class=cfg.desired_class,
                             achieved_class=achieved, trace=trace,
                             generation_time=time.perf_counter() - t0)


def generate_gradient(model, x, cfg, encoder):
    """Joint Adam descent on the composite loss for differentiable models.

    Candidates start at x plus small seeded noise on actionable dimensions;
    every step clamps to [0,1] and holds non-actionable dimensions at x.
    A fresh perturbation delta is drawn each iteration for the soft
    robustness term. Stops at max_iterations or after `convergence_patience`
    consecutive iterations with |d total| < convergence_tol. Categorical
    blocks are projected to one-hot at the end.
    """
    cfg.validate()
    if not hasattr(model, "logit_input_gradient"):
        raise TypeError("gradient optimizer needs a differentiable model")
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float)
    C, act = _init_candidates(x, cfg, encoder)
    C[:, ~act] = x[~act]

    m_state = np.zeros_like(C)
    v_state = np.zeros_like(C)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    trace = LossTrace()
    prev_total = None
    calm = 0

    for it in range(cfg.max_iterations):
        delta = draw_delta(C.shape, cfg.perturbation_scale,
                           derive_seed(cfg.seed, _DELTA_TAG, it))
        total, comps = total_loss(C, x, model, cfg, mode="soft", delta=delta)
        trace.append(it, comps)

        grad = total_loss_gradient(C, x, model, cfg, delta)
        grad[:, ~act] = 0.0

        m_state = beta1 * m_state + (1 - beta1) * grad
        v_state = beta2 * v_state + (1 - beta2) * grad * grad
        mh = m_state / (1 - beta1 ** (it + 1))
        vh = v_state / (1 - beta2 ** (it + 1))
        C = np.clip(C - cfg.learning_rate * mh / (np.sqrt(vh) + eps), 0.0, 1.0)
        C[:, ~act] = x[~act]

        if prev_total is not None and abs(total - prev_total) < cfg.convergence_tol:
            calm += 1
            if calm >= cfg.convergence_patience:
                break
        else:
            calm = 0
        prev_total = total

    return _finish(C, x, model, cfg, encoder, trace, t0)


class _SetState:
    """Cached per-candidate loss pieces for incremental hill climbing."""

    def __init__(self, C, x, model, cfg):
        self.C = C
        self.x = x
        self.model = model
        self.cfg = cfg
        self.probs = model.predict_proba(C)
        self.prox = _distances(C - x, cfg.p_norm, cfg.feature_weights)
        diff = C[:, None, :] - C[None, :, :]
        self.K = 1.0 / (1.0 + _distances(diff, cfg.p_norm))

    def det(self, K=None):
        K = self.K if K is None else K
        return float(np.linalg.det(K + self.cfg.diag_jitter * np.eye(len(K))))

    def rob_terms(self, C, delta):
        cfg = self.cfg
        pert = np.clip(C + delta, 0.0, 1.0)
        A = binarize(C, cfg.binarize_threshold)
        B = binarize(pert, cfg.binarize_threshold)
        return np.array([1.0 - dice_sorensen(A[i], B[i]) for i in range(len(C))])

    def total(self, y, prox_mean, det, rob_mean):
        w = self.cfg.weights
        return (y + w.lambda_p * prox_mean - w.lambda_d * det
                + _robustness_sign(self.cfg) * w.lambda_r * rob_mean)

    def replace_row(self, i, row, prob):
        self.C[i] = row
        self.probs[i] = prob
        self.prox[i] = _distances(row - self.x, self.cfg.p_norm,
                                  self.cfg.feature_weights)
        drow = 1.0 / (1.0 + _distances(self.C - row, self.cfg.p_norm))
        self.K[i, :] = drow
        self.K[:, i] = drow
        self.K[i, i] = 1.0


def _mutate(row, x, cfg, encoder, rng, act):
    """Local mutation (or occasional full redraw) of actionable dimensions."""
    row = row.copy()
    if rng.random() < RESTART_PROB:
        for _, col in encoder.continuous_columns():
            if act[col]:
                row[col] = rng.random()
        for _, sl in encoder.categorical_blocks():
            if act[sl.start]:
                row[sl] = 0.0
                row[sl.start + rng.integers(0, sl.stop - sl.start)] = 1.0
        return row
    for _, col in encoder.continuous_columns():
        if act[col]:
            row[col] = np.clip(row[col] + rng.normal(0.0, cfg.learning_rate), 0.0, 1.0)
    for _, sl in encoder.categorical_blocks():
        if act[sl.start] and rng.random() < CAT_FLIP_PROB:
            row[sl] = 0.0
            row[sl.start + rng.integers(0, sl.stop - sl.start)] = 1.0
    return row


def generate_blackbox(model, x, cfg, encoder):
    """Random-restart hill climbing for any predictor (hard robustness mode).

    The k candidates evolve jointly so the diversity determinant is shared:
    each iteration mutates one candidate round-robin and accepts the move
    only when the composite loss decreases under that iteration's
    perturbation draw. Stopping and projection match the gradient path.
    """
    cfg.validate()
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float)
    C, act = _init_candidates(x, cfg, encoder, continuous_only=True)
    C[:, ~act] = x[~act]
    rng = np.random.default_rng(derive_seed(cfg.seed, 0xB1AC))

    state = _SetState(C, x, model, cfg)
    trace = LossTrace()
    prev_total = None
    calm = 0

    for it in range(cfg.max_iterations):
        delta = draw_delta(C.shape, cfg.perturbation_scale,
                           derive_seed(cfg.seed, _DELTA_TAG, it))
        rob = state.rob_terms(state.C, delta)
        y = y_loss(state.probs, cfg.desired_class)
        det = state.det()
        prox_mean = float(state.prox.mean())
        rob_mean = float(rob.mean())
        cur_total = state.total(y, prox_mean, det, rob_mean)
        trace.append(it, {"y_loss": y, "proximity_loss": prox_mean,
                          "diversity_loss": det, "robustness_loss": rob_mean,
                          "total_loss": cur_total})
        if not math.isfinite(cur_total):
            raise NonFiniteLoss(f"non-finite loss at iteration {it}")

        i = it % cfg.k
        cand = _mutate(state.C[i], x, cfg, encoder, rng, act)
        cand_prob = float(model.predict_proba(cand[None, :])[0])

        new_probs = state.probs.copy()
        new_probs[i] = cand_prob
        y_new = y_loss(new_probs, cfg.desired_class)
        prox_new = state.prox.copy()
        prox_new[i] = _distances(cand - x, cfg.p_norm, cfg.feature_weights)
        Knew = state.K.copy()
        krow = 1.0 / (1.0 + _distances(state.C - cand, cfg.p_norm))
        Knew[i, :] = krow
        Knew[:, i] = krow
        Knew[i, i] = 1.0
        rob_new = rob.copy()
        pert_i = np.clip(cand + delta[i], 0.0, 1.0)
        rob_new[i] = 1.0 - dice_sorensen(binarize(cand, cfg.binarize_threshold),
                                         binarize(pert_i, cfg.binarize_threshold))
        new_total = state.total(y_new, float(prox_new.mean()),
                                state.det(Knew), float(rob_new.mean()))
        if new_total < cur_total:
            state.replace_row(i, cand, cand_prob)

        if prev_total is not None and abs(cur_total - prev_total) < cfg.convergence_tol:
            calm += 1
            if calm >= cfg.convergence_patience:
                break
        else:
            calm = 0
        prev_total = cur_total

    return _finish(state.C, x, model, cfg, encoder, trace, t0)


def config_for_lambda_r(cfg, lambda_r):
    """Copy of cfg with the robustness weight replaced (ablation switch)."""
    return replace(cfg, weights=replace(cfg.weights, lambda_r=lambda_r))

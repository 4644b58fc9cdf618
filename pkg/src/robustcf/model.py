"""Classifier backends behind one predictor contract.

Two backends: a differentiable two-layer MLP (hidden ReLU layer, sigmoid
output) trained with mini-batch Adam on binary cross-entropy, and a CART
random forest (Gini splits, unlimited depth, bootstrap sampling). Both expose
predict_proba(X) -> probabilities; the MLP additionally exposes exact input
gradients for the gradient-based counterfactual optimizer.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Encoder, FeatureSchema
from .rng import derive_seed


class TrainingError(Exception):
    pass


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce(probs, targets):
    """Mean binary cross-entropy with probability clamping."""
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    t = np.asarray(targets, dtype=float)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))


@dataclass
class MlpModel:
    """sigma(W2 . relu(W1 x + b1) + b2) with W1 (n,d), W2 (1,n)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.W2 = np.asarray(self.W2, dtype=float)
        self.b2 = float(self.b2)
        n, d = self.W1.shape
        if self.b1.shape != (n,) or self.W2.shape != (1, n):
            raise ValueError("inconsistent parameter shapes")
        for arr in (self.W1, self.b1, self.W2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("parameters must be finite")

    @property
    def d(self):
        return self.W1.shape[1]

    @property
    def hidden(self):
        return self.W1.shape[0]

    def logit(self, X):
        X = np.atleast_2d(X)
        if X.shape[1] != self.d:
            raise ValueError(f"expected width {self.d}, got {X.shape[1]}")
        H = np.maximum(X @ self.W1.T + self.b1, 0.0)
        return H @ self.W2.T + self.b2  # (m, 1)

    def predict_proba(self, X):
        return sigmoid(self.logit(X))[:, 0]

    def logit_input_gradient(self, X):
        """d logit / d x per row; ReLU subgradient 0 at the kink."""
        X = np.atleast_2d(X)
        A = X @ self.W1.T + self.b1
        return ((A > 0) * self.W2[0]) @ self.W1  # (m, d)

    def copy(self):
        return MlpModel(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2)


def mlp_forward(model, x):
    """Predicted probability for one encoded row."""
    return float(model.predict_proba(np.atleast_2d(x))[0])


def mlp_input_gradient(model, x):
    """Exact gradient of the predicted probability w.r.t. the input row."""
    p = model.predict_proba(np.atleast_2d(x))[0]
    return p * (1.0 - p) * model.logit_input_gradient(x)[0]


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 10
    batch_train: int = 16
    batch_eval: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stopping_patience: int = 3
    hidden: int = 32
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_train < 1 or self.batch_eval < 1:
            raise ValueError("batch sizes must be >= 1")
        return self


@dataclass
class TrainResult:
    model: MlpModel
    train_losses: list
    val_losses: list
    best_epoch: int
    stopped_epoch: int


def _eval_loss(model, X, y, batch):
    total = 0.0
    for i in range(0, len(X), batch):
        p = np.clip(model.predict_proba(X[i:i + batch]), 1e-12, 1.0 - 1e-12)
        t = y[i:i + batch]
        total += float(-np.sum(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))
    return total / len(X)


def train_mlp(train, val, cfg):
    """Mini-batch Adam on BCE with validation-loss early stopping.

    Stops once validation loss fails to improve for `early_stopping_patience`
    consecutive epochs and returns the parameters with the best validation
    loss. Deterministic for a fixed cfg.seed.
    """
    cfg.validate()
    if train.n == 0 or val.n == 0:
        raise TrainingError("empty train or validation split")
    X, y = train.X, train.y.astype(float)
    d, n = X.shape[1], cfg.hidden
    rng = np.random.default_rng(derive_seed(cfg.seed, 0x31A7))

    def init(fan_in, shape):
        lim = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    model = MlpModel(init(d, (n, d)), init(d, (n,)), init(n, (1, n)), float(init(n, ())))
    params = [model.W1, model.b1, model.W2]
    m_state = [np.zeros_like(p) for p in params] + [0.0]
    v_state = [np.zeros_like(p) for p in params] + [0.0]
    step = 0

    best = model.copy()
    best_val = math.inf
    best_epoch = 0
    since_improve = 0
    train_losses, val_losses = [], []
    stopped = cfg.epochs

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        epoch_loss = 0.0
        for i in range(0, len(X), cfg.batch_train):
            bidx = order[i:i + cfg.batch_train]
            xb, tb = X[bidx], y[bidx]
            mb = len(bidx)

            A = xb @ model.W1.T + model.b1
            H = np.maximum(A, 0.0)
            Z = H @ model.W2.T + model.b2
            P = sigmoid(Z)[:, 0]
            pc = np.clip(P, 1e-12, 1.0 - 1e-12)
            epoch_loss += float(-np.sum(tb * np.log(pc) + (1 - tb) * np.log(1 - pc)))

            dZ = (P - tb)[:, None] / mb
            gW2 = dZ.T @ H
            gb2 = float(dZ.sum())
            dH = dZ @ model.W2
            dA = dH * (A > 0)
            gW1 = dA.T @ xb
            gb1 = dA.sum(axis=0)

            step += 1
            grads = [gW1, gb1, gW2, gb2]
            b1c = 1.0 - cfg.beta1 ** step
            b2c = 1.0 - cfg.beta2 ** step
            for j, g in enumerate(grads):
                m_state[j] = cfg.beta1 * m_state[j] + (1 - cfg.beta1) * g
                v_state[j] = cfg.beta2 * v_state[j] + (1 - cfg.beta2) * (g * g)
                upd = cfg.learning_rate * (m_state[j] / b1c) / (np.sqrt(v_state[j] / b2c) + cfg.adam_eps)
                if j < 3:
                    params[j] -= upd
                else:
                    model.b2 -= float(upd)

        epoch_loss /= len(X)
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"training diverged at epoch {epoch} (loss={epoch_loss})")
        train_losses.append(epoch_loss)
        val_loss = _eval_loss(model, val.X, val.y.astype(float), cfg.batch_eval)
        val_losses.append(val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= cfg.early_stopping_patience:
                stopped = epoch
                break

    return TrainResult(best, train_losses, val_losses, best_epoch, stopped)


@dataclass
class ForestModel:
    """CART random forest stored as flattened node arrays per tree.

    Per tree: feature (-1 for leaves), threshold, left, right, leaf class-1
    probability. Prediction averages leaf probabilities across trees.
    """

    trees: list
    n_estimators: int
    d: int
    criterion: str = "gini"
    # concatenated arrays for batch traversal, built lazily
    _flat: tuple = field(default=None, repr=False, compare=False)

    def _flatten(self):
        if self._flat is None:
            feats, thrs, lefts, rights, probs, roots = [], [], [], [], [], []
            off = 0
            for t in self.trees:
                n = len(t["feature"])
                roots.append(off)
                feats.append(np.asarray(t["feature"], dtype=np.int64))
                thrs.append(np.asarray(t["threshold"], dtype=float))
                lefts.append(np.asarray(t["left"], dtype=np.int64) + off)
                rights.append(np.asarray(t["right"], dtype=np.int64) + off)
                probs.append(np.asarray(t["prob"], dtype=float))
                off += n
            self._flat = (np.concatenate(feats), np.concatenate(thrs),
                          np.concatenate(lefts), np.concatenate(rights),
                          np.concatenate(probs), np.asarray(roots, dtype=np.int64))
        return self._flat

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ValueError(f"expected width {self.d}, got {X.shape[1]}")
        feat, thr, left, right, prob, roots = self._flatten()
        m = len(X)
        idx = np.tile(roots, (m, 1))
        rows = np.arange(m)[:, None]
        active = feat[idx] >= 0
        while active.any():
            f = feat[idx]
            xv = X[rows, np.maximum(f, 0)]
            nxt = np.where(xv <= thr[idx], left[idx], right[idx])
            idx = np.where(active, nxt, idx)
            active = feat[idx] >= 0
        return prob[idx].mean(axis=1)


def _best_split(X, y, candidates):
    """Best (cost, feature, threshold) by weighted Gini over midpoints."""
    n = len(y)
    best_cost, best_f, best_thr = math.inf, None, None
    for f in candidates:
        v = X[:, f]
        order = np.argsort(v, kind="stable")
        vs, ys = v[order], y[order]
        cut = np.flatnonzero(vs[1:] > vs[:-1]) + 1  # split before these positions
        if cut.size == 0:
            continue
        ones = np.cumsum(ys)
        nl = cut.astype(float)
        nr = n - nl
        ol = ones[cut - 1].astype(float)
        orr = ones[-1] - ol
        gini_l = 1.0 - (ol / nl) ** 2 - ((nl - ol) / nl) ** 2
        gini_r = 1.0 - (orr / nr) ** 2 - ((nr - orr) / nr) ** 2
        cost = (nl * gini_l + nr * gini_r) / n
        j = int(np.argmin(cost))
        if cost[j] < best_cost:
            best_cost = float(cost[j])
            best_f = int(f)
            best_thr = float((vs[cut[j] - 1] + vs[cut[j]]) / 2.0)
    return best_cost, best_f, best_thr


def _grow_tree(X, y, rng, max_features):
    feature, threshold, left, right, prob = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        prob.append(0.0)
        return len(feature) - 1

    d = X.shape[1]
    root = new_node()
    stack = [(root, np.arange(len(y)))]
    while stack:
        nid, idx = stack.pop()
        ysub = y[idx]
        p1 = float(ysub.mean())
        prob[nid] = p1
        if p1 == 0.0 or p1 == 1.0 or len(idx) < 2:
            continue
        cand = rng.choice(d, size=min(max_features, d), replace=False)
        _, f, thr = _best_split(X[idx], ysub, cand)
        if f is None:
            continue
        go_left = X[idx, f] <= thr
        feature[nid] = f
        threshold[nid] = thr
        lid, rid = new_node(), new_node()
        left[nid], right[nid] = lid, rid
        stack.append((lid, idx[go_left]))
        stack.append((rid, idx[~go_left]))
    return {"feature": feature, "threshold": threshold,
            "left": left, "right": right, "prob": prob}


def train_forest(train, n_estimators=100, seed=0, bootstrap=True, max_features="sqrt"):
    """Bootstrap-sampled CART trees with Gini splits, grown to purity.

    sqrt(d) features are considered per split; per-tree RNGs derive from the
    master seed so fitting is reproducible.
    """
    if train.n == 0:
        raise TrainingError("empty training data")
    X, y = train.X, train.y
    d = X.shape[1]
    if max_features == "sqrt":
        mf = max(1, int(math.sqrt(d)))
    else:
        mf = int(max_features)
    trees = []
    for t in range(n_estimators):
        rng = np.random.default_rng(derive_seed(seed, 0xF07E, t))
        if bootstrap:
            idx = rng.integers(0, len(y), size=len(y))
            Xt, yt = X[idx], y[idx]
        else:
            Xt, yt = X, y
        trees.append(_grow_tree(Xt, yt, rng, mf))
    return ForestModel(trees=trees, n_estimators=n_estimators, d=d)


def predict_class(model, x):
    """Hard class for one row: 1 iff probability >= 0.5."""
    p = model.predict_proba(np.atleast_2d(x))[0]
    return 1 if p >= 0.5 else 0


def accuracy(model, ds):
    preds = (model.predict_proba(ds.X) >= 0.5).astype(int)
    return float(np.mean(preds == ds.y))


@dataclass
class ModelBundle:
    """A trained predictor plus everything needed to use it on raw data."""

    backend: str  # "mlp" | "forest"
    model: object
    encoder: Encoder
    train_mad_raw: np.ndarray
    accuracy: float | None = None


def save_model(path, bundle):
    if bundle.backend == "mlp":
        m = bundle.model
        params = {"W1": m.W1.tolist(), "b1": m.b1.tolist(),
                  "W2": m.W2.tolist(), "b2": m.b2}
    elif bundle.backend == "forest":
        m = bundle.model
        params = {"n_estimators": m.n_estimators, "d": m.d,
                  "trees": [{k: list(v) for k, v in t.items()} for t in m.trees]}
    else:
        raise ValueError(f"unknown backend {bundle.backend!r}")
    doc = {
        "format": "robustcf-model",
        "version": 1,
        "backend": bundle.backend,
        "schema": bundle.encoder.schema.to_dict(),
        "train_mad_raw": [float(v) for v in bundle.train_mad_raw],
        "accuracy": bundle.accuracy,
        "params": params,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "robustcf-model" or doc.get("version") != 1:
        raise ValueError("not a recognized model file")
    encoder = Encoder(FeatureSchema.from_dict(doc["schema"]))
    p = doc["params"]
    if doc["backend"] == "mlp":
        model = MlpModel(np.array(p["W1"]), np.array(p["b1"]), np.array(p["W2"]), p["b2"])
    else:
        model = ForestModel(trees=p["trees"], n_estimators=p["n_estimators"], d=p["d"])
    return ModelBundle(doc["backend"], model, encoder,
                       np.array(doc["train_mad_raw"], dtype=float), doc.get("accuracy"))

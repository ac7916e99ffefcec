"""Fitting query and item embeddings to a sparse score matrix.

Two estimators share one objective, the squared error over observed
entries ``sum_(q,i) (G[q,i] - U[q] . V[i])**2``:

* :class:`TransductiveMF` treats ``U`` and ``V`` as free parameters,
  optionally initialized from base embeddings.
* :class:`InductiveMF` keeps base embeddings frozen and learns one small
  skip-connected MLP tower per side, so unseen queries and items can be
  embedded with :meth:`InductiveMF.transform`.

Training is minibatch Adam (or plain SGD) in float64 and is bitwise
reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf, expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix
from .core import (
    AxnError,
    DimensionMismatchError,
    EmbeddingMatrix,
    SparseScoreMatrix,
    load_embeddings,
    save_embeddings,
)

log = logging.getLogger(__name__)

__all__ = [
    "NonFiniteLossError",
    "MfHyperparams",
    "MlpTower",
    "TowerGrads",
    "MfModel",
    "TransductiveMF",
    "InductiveMF",
    "mf_loss",
    "mlp_forward",
    "mlp_gradient",
    "init_tower",
    "train_transductive",
    "train_inductive",
    "embed_items",
    "save_model",
    "load_model",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteLossError(AxnError, FloatingPointError):
    pass


@dataclass
class MfHyperparams:
    dim: int | None = 16
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0
    max_wall_seconds: float | None = None
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    tol: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dim is not None and self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


# -- loss --------------------------------------------------------------------


def _check_factor_shapes(g: SparseScoreMatrix, U: np.ndarray, V: np.ndarray):
    if U.shape[1] != V.shape[1]:
        raise DimensionMismatchError(f"U has dim {U.shape[1]}, V has dim {V.shape[1]}")
    if U.shape[0] != g.n_queries or V.shape[0] != g.n_items:
        raise DimensionMismatchError(
            f"factors {U.shape[0]}x{V.shape[0]} do not match matrix shape {g.shape}"
        )


def mf_loss(g: SparseScoreMatrix, U, V) -> float:
    """Squared reconstruction error restricted to the observed entries."""
    U, V = as_matrix(U, "U"), as_matrix(V, "V")
    _check_factor_shapes(g, U, V)
    pred = np.einsum("ij,ij->i", U[g.query_ids], V[g.item_ids])
    r = g.scores - pred
    return float(r @ r)


# -- MLP tower ---------------------------------------------------------------


@dataclass
class MlpTower:
    """Parameters of ``x -> s*(b2 + W2^T gelu(b1 + W1^T x)) + (1-s)*x``, ``s = sigmoid(w_skip)``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    w_skip: np.ndarray

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2", "w_skip"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        d = self.W1.shape[0]
        if (
            self.W1.shape != (d, 2 * d)
            or self.b1.shape != (2 * d,)
            or self.W2.shape != (2 * d, d)
            or self.b2.shape != (d,)
            or self.w_skip.shape != ()
        ):
            raise DimensionMismatchError("inconsistent MLP tower shapes")

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2, self.w_skip]

    def copy(self) -> "MlpTower":
        return MlpTower(*[p.copy() for p in self.params()])

    def to_dict(self) -> dict:
        return {
            name: {"shape": list(p.shape), "data": p.ravel().tolist()}
            for name, p in zip(("W1", "b1", "W2", "b2", "w_skip"), self.params())
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpTower":
        arrs = {
            k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in doc.items()
        }
        return cls(**arrs)


@dataclass
class TowerGrads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    w_skip: np.ndarray

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2, self.w_skip]


def init_tower(dim: int, rng: np.random.Generator, w_skip: float = -5.0) -> MlpTower:
    """Fan-in uniform init ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and biases."""
    b_in, b_hid = 1.0 / math.sqrt(dim), 1.0 / math.sqrt(2 * dim)
    return MlpTower(
        W1=rng.uniform(-b_in, b_in, (dim, 2 * dim)),
        b1=rng.uniform(-b_in, b_in, 2 * dim),
        W2=rng.uniform(-b_hid, b_hid, (2 * dim, dim)),
        b2=rng.uniform(-b_hid, b_hid, dim),
        w_skip=w_skip,
    )


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _forward(X: np.ndarray, t: MlpTower):
    pre = X @ t.W1 + t.b1
    hid = _gelu(pre)
    inner = hid @ t.W2 + t.b2
    s = expit(t.w_skip)
    return s * inner + (1.0 - s) * X, (pre, hid, inner, s)


def mlp_forward(x, t: MlpTower) -> np.ndarray:
    """Apply the tower to one vector or to each row of a matrix."""
    X = np.asarray(x, dtype=np.float64)
    if X.shape[-1] != t.dim:
        raise DimensionMismatchError(f"input dim {X.shape[-1]} != tower dim {t.dim}")
    out, _ = _forward(np.atleast_2d(X), t)
    return out.reshape(X.shape)


def mlp_gradient(x, grad_out, t: MlpTower) -> tuple[TowerGrads, np.ndarray]:
    """Backpropagate ``grad_out = dL/d(output)`` through the tower.

    ``x`` and ``grad_out`` are a vector or a batch of rows. Returns the
    parameter gradients (summed over the batch) and ``dL/dx``.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    G = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if X.shape != G.shape or X.shape[1] != t.dim:
        raise DimensionMismatchError("x and grad_out must share the tower's shape")
    _, (pre, hid, inner, s) = _forward(X, t)
    d_inner = s * G
    d_pre = (d_inner @ t.W2.T) * _gelu_grad(pre)
    grads = TowerGrads(
        W1=X.T @ d_pre,
        b1=d_pre.sum(axis=0),
        W2=hid.T @ d_inner,
        b2=d_inner.sum(axis=0),
        w_skip=np.array(s * (1.0 - s) * np.sum((inner - X) * G)),
    )
    dX = d_pre @ t.W1.T + (1.0 - s) * G
    return grads, dX.reshape(np.shape(x))


# -- optimizer ---------------------------------------------------------------


class _Optimizer:
    """Adam with decoupled weight decay, or plain SGD; updates arrays in place."""

    def __init__(self, params: list[np.ndarray], h: MfHyperparams):
        self.params = params
        self.h = h
        self.t = 0
        if h.optimizer == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]):
        h = self.h
        lr = h.learning_rate
        if h.optimizer == "sgd":
            for p, g in zip(self.params, grads):
                if h.weight_decay:
                    g = g + h.weight_decay * p
                p -= lr * g
            return
        self.t += 1
        c1 = 1.0 - h.beta1**self.t
        c2 = 1.0 - h.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if h.weight_decay:
                p -= lr * h.weight_decay * p
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + h.eps)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _check_finite(loss: float, epoch: int):
    if not math.isfinite(loss):
        raise NonFiniteLossError(
            f"loss became non-finite at epoch {epoch}; lower the learning rate or normalize scores"
        )


# -- model container ---------------------------------------------------------


@dataclass
class MfModel:
    kind: str
    U: EmbeddingMatrix
    V: EmbeddingMatrix
    query_tower: MlpTower | None = None
    item_tower: MlpTower | None = None
    base_query: EmbeddingMatrix | None = None
    base_item: EmbeddingMatrix | None = None
    hyperparams: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("transductive", "inductive"):
            raise ValueError(f"unknown model kind {self.kind!r}")


def embed_items(m: MfModel) -> EmbeddingMatrix:
    if m.kind == "transductive":
        return m.V
    if m.base_item is None:
        return m.V
    return EmbeddingMatrix(mlp_forward(m.base_item.data, m.item_tower), role="item")


def save_model(m: MfModel, directory) -> None:
    """Write ``query_embeddings.axne``, ``item_embeddings.axne`` and ``model.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_embeddings(m.U, d / "query_embeddings.axne")
    save_embeddings(m.V, d / "item_embeddings.axne")
    doc = {"kind": m.kind, "hyperparams": m.hyperparams, "loss_history": m.loss_history}
    if m.kind == "inductive":
        doc["towers"] = {"query": m.query_tower.to_dict(), "item": m.item_tower.to_dict()}
    (d / "model.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_model(directory) -> MfModel:
    d = Path(directory)
    doc = json.loads((d / "model.json").read_text())
    towers = doc.get("towers", {})
    return MfModel(
        kind=doc["kind"],
        U=load_embeddings(d / "query_embeddings.axne"),
        V=load_embeddings(d / "item_embeddings.axne"),
        query_tower=MlpTower.from_dict(towers["query"]) if towers else None,
        item_tower=MlpTower.from_dict(towers["item"]) if towers else None,
        hyperparams=doc.get("hyperparams", {}),
        loss_history=doc.get("loss_history", []),
    )


# -- estimators --------------------------------------------------------------


class _BaseMF(BaseEstimator):
    def _hyperparams(self) -> MfHyperparams:
        return MfHyperparams(
            dim=self.dim,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            max_wall_seconds=self.max_wall_seconds,
            optimizer=self.optimizer,
            weight_decay=self.weight_decay,
            tol=self.tol,
        )

    def _run(self, g: SparseScoreMatrix, h: MfHyperparams, params, step, loss_fn):
        """Shared epoch loop: shuffle entries, call ``step`` per batch, track full loss.

        Stops early once the relative restricted error
        ``sqrt(loss) / ||G_obs||`` drops to ``self.tol``.
        """
        rng = self._rng
        opt = _Optimizer(params, h)
        with np.errstate(over="ignore", invalid="ignore"):
            self._epochs(g, h, rng, opt, step, loss_fn)

    def _epochs(self, g, h, rng, opt, step, loss_fn):
        history = [loss_fn()]
        _check_finite(history[0], 0)
        target = None if self.tol is None else (self.tol**2) * float(g.scores @ g.scores)
        t0 = time.perf_counter()
        epochs_run = 0
        for epoch in range(1, h.epochs + 1):
            if target is not None and history[-1] <= target:
                break
            for idx in _batches(g.nnz, h.batch_size, rng):
                opt.step(step(g.query_ids[idx], g.item_ids[idx], g.scores[idx]))
            loss = loss_fn()
            _check_finite(loss, epoch)
            history.append(loss)
            epochs_run = epoch
            if h.max_wall_seconds is not None and time.perf_counter() - t0 > h.max_wall_seconds:
                log.warning("stopping after %d epochs: wall-clock cap reached", epoch)
                break
        self.loss_history_ = history
        self.n_epochs_run_ = epochs_run


class TransductiveMF(_BaseMF):
    """Free query and item embeddings fit to the observed entries of ``G``.

    Rows that never appear in ``G`` receive no gradient and keep their
    initial values.
    """

    def __init__(
        self,
        dim=16,
        learning_rate=1e-3,
        epochs=20,
        batch_size=256,
        optimizer="adam",
        weight_decay=0.0,
        init_std=0.1,
        tol=None,
        seed=0,
        max_wall_seconds=None,
    ):
        self.dim = dim
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.init_std = init_std
        self.tol = tol
        self.seed = seed
        self.max_wall_seconds = max_wall_seconds

    def fit(self, G: SparseScoreMatrix, init_query_embeddings=None, init_item_embeddings=None):
        h = self._hyperparams()
        self._rng = np.random.default_rng(self.seed)
        nq, ni = G.shape
        U = (
            as_matrix(init_query_embeddings).copy()
            if init_query_embeddings is not None
            else self.init_std * self._rng.standard_normal((nq, h.dim))
        )
        V = (
            as_matrix(init_item_embeddings).copy()
            if init_item_embeddings is not None
            else self.init_std * self._rng.standard_normal((ni, h.dim))
        )
        if U.shape[1] != h.dim or V.shape[1] != h.dim:
            raise DimensionMismatchError(f"initial embeddings must have dim {h.dim}")
        _check_factor_shapes(G, U, V)

        def step(q, i, target):
            r = np.einsum("ij,ij->i", U[q], V[i]) - target
            coef = (2.0 / len(r)) * r[:, None]
            gU = np.zeros_like(U)
            gV = np.zeros_like(V)
            np.add.at(gU, q, coef * V[i])
            np.add.at(gV, i, coef * U[q])
            return [gU, gV]

        self._run(G, h, [U, V], step, lambda: mf_loss(G, U, V))
        self.query_embeddings_ = U
        self.item_embeddings_ = V
        return self

    def predict(self, query_ids, item_ids) -> np.ndarray:
        check_is_fitted(self)
        q = np.asarray(query_ids, dtype=np.int64)
        i = np.asarray(item_ids, dtype=np.int64)
        return np.einsum("ij,ij->i", self.query_embeddings_[q], self.item_embeddings_[i])

    def embed_items(self) -> EmbeddingMatrix:
        check_is_fitted(self)
        return EmbeddingMatrix(self.item_embeddings_, role="item")

    def to_model(self) -> MfModel:
        check_is_fitted(self)
        return MfModel(
            kind="transductive",
            U=EmbeddingMatrix(self.query_embeddings_, role="query"),
            V=EmbeddingMatrix(self.item_embeddings_, role="item"),
            hyperparams=asdict(self._hyperparams()),
            loss_history=list(self.loss_history_),
        )


class InductiveMF(TransformerMixin, _BaseMF):
    """Two skip-connected MLP towers over frozen base embeddings.

    ``fit(G, base_query_embeddings, base_item_embeddings)`` trains both
    towers; ``transform(X, role=...)`` maps any base embeddings through the
    matching tower.
    """

    def __init__(
        self,
        dim=None,
        learning_rate=1e-3,
        epochs=20,
        batch_size=256,
        optimizer="adam",
        weight_decay=0.0,
        w_skip_init=-5.0,
        tol=None,
        seed=0,
        max_wall_seconds=None,
    ):
        self.dim = dim
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.w_skip_init = w_skip_init
        self.tol = tol
        self.seed = seed
        self.max_wall_seconds = max_wall_seconds

    def fit(self, G: SparseScoreMatrix, base_query_embeddings, base_item_embeddings):
        Xq = as_matrix(base_query_embeddings, "base_query_embeddings")
        Xi = as_matrix(base_item_embeddings, "base_item_embeddings")
        if Xq.shape[1] != Xi.shape[1]:
            raise DimensionMismatchError("base query and item embeddings differ in dimension")
        d = Xq.shape[1]
        if self.dim is not None and self.dim != d:
            raise DimensionMismatchError(f"dim={self.dim} but base embeddings have dim {d}")
        _check_factor_shapes(G, Xq, Xi)
        h = self._hyperparams()
        h.dim = d
        self._rng = np.random.default_rng(self.seed)
        tq = init_tower(d, self._rng, self.w_skip_init)
        ti = init_tower(d, self._rng, self.w_skip_init)

        def step(q, i, target):
            uq, inv_q = np.unique(q, return_inverse=True)
            ui, inv_i = np.unique(i, return_inverse=True)
            Uq, _ = _forward(Xq[uq], tq)
            Vi, _ = _forward(Xi[ui], ti)
            r = np.einsum("ij,ij->i", Uq[inv_q], Vi[inv_i]) - target
            coef = (2.0 / len(r)) * r[:, None]
            dU = np.zeros_like(Uq)
            dV = np.zeros_like(Vi)
            np.add.at(dU, inv_q, coef * Vi[inv_i])
            np.add.at(dV, inv_i, coef * Uq[inv_q])
            gq, _ = mlp_gradient(Xq[uq], dU, tq)
            gi, _ = mlp_gradient(Xi[ui], dV, ti)
            return gq.params() + gi.params()

        def loss():
            return mf_loss(G, mlp_forward(Xq, tq), mlp_forward(Xi, ti))

        self._run(G, h, tq.params() + ti.params(), step, loss)
        self.query_tower_ = tq
        self.item_tower_ = ti
        self.base_query_ = EmbeddingMatrix(Xq, role="query")
        self.base_item_ = EmbeddingMatrix(Xi, role="item")
        return self

    def transform(self, X, role="item") -> np.ndarray:
        check_is_fitted(self)
        if role not in ("query", "item"):
            raise ValueError("role must be 'query' or 'item'")
        tower = self.query_tower_ if role == "query" else self.item_tower_
        return mlp_forward(as_matrix(X), tower)

    def embed_items(self) -> EmbeddingMatrix:
        return EmbeddingMatrix(self.transform(self.base_item_.data), role="item")

    def to_model(self) -> MfModel:
        check_is_fitted(self)
        hp = asdict(self._hyperparams())
        hp["dim"] = self.base_item_.dim
        return MfModel(
            kind="inductive",
            U=EmbeddingMatrix(self.transform(self.base_query_.data, role="query"), role="query"),
            V=self.embed_items(),
            query_tower=self.query_tower_.copy(),
            item_tower=self.item_tower_.copy(),
            base_query=self.base_query_,
            base_item=self.base_item_,
            hyperparams=hp,
            loss_history=list(self.loss_history_),
        )


def _estimator_kwargs(h: MfHyperparams) -> dict:
    return dict(
        learning_rate=h.learning_rate,
        epochs=h.epochs,
        batch_size=h.batch_size,
        optimizer=h.optimizer,
        weight_decay=h.weight_decay,
        tol=h.tol,
        seed=h.seed,
        max_wall_seconds=h.max_wall_seconds,
    )


def train_transductive(g: SparseScoreMatrix, init_U, init_V, h: MfHyperparams) -> MfModel:
    dim = h.dim if h.dim is not None else as_matrix(init_V).shape[1]
    est = TransductiveMF(dim=dim, **_estimator_kwargs(h))
    return est.fit(g, init_U, init_V).to_model()


def train_inductive(g: SparseScoreMatrix, base_q, base_i, h: MfHyperparams) -> MfModel:
    est = InductiveMF(dim=h.dim, **_estimator_kwargs(h))
    return est.fit(g, base_q, base_i).to_model()

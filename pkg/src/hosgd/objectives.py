"""Finite-sum objectives F(x, k) with analytic per-sample gradients.

Each objective averages a per-sample loss over ``num_samples`` samples and
exposes vectorized ``losses``/``grads`` over an index array. Full-data sums
are accumulated sequentially in index order (``np.cumsum``) so that the full
gradient equals the ordered mean of per-sample gradients bit for bit.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"HOSG"
FORMAT_VERSION = 1


def ordered_sum(rows: np.ndarray) -> np.ndarray:
    """Sum along axis 0 strictly in index order."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        return np.zeros(rows.shape[1:])
    return np.cumsum(rows, axis=0)[-1]


class Objective:
    """Base class. Subclasses implement ``losses`` and ``grads``."""

    dimension: int
    num_samples: int
    L_estimate: float
    f_star_estimate: float = 0.0
    sigma_estimate: float = 0.0
    name = "objective"

    def losses(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grads(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eval(self, x, sample_index: int) -> float:
        return float(self.losses(np.asarray(x, dtype=np.float64), np.array([sample_index]))[0])

    def grad(self, x, sample_index: int) -> np.ndarray:
        return self.grads(np.asarray(x, dtype=np.float64), np.array([sample_index]))[0]

    def _all(self) -> np.ndarray:
        return np.arange(self.num_samples)

    def full_loss(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(ordered_sum(self.losses(x, self._all())) / self.num_samples)

    def full_grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return ordered_sum(self.grads(x, self._all())) / self.num_samples

    def full_loss_many(self, X: np.ndarray) -> np.ndarray:
        """f at each row of ``X``. Subclasses may vectorize."""
        return np.array([self.full_loss(row) for row in np.atleast_2d(X)])

    def gradient_variance(self, x) -> float:
        """Mean over samples of ||grad F(x, k) - grad f(x)||^2."""
        x = np.asarray(x, dtype=np.float64)
        G = self.grads(x, self._all())
        dev = G - self.full_grad(x)
        return float(np.mean(np.einsum("ij,ij->i", dev, dev)))

    def describe(self) -> dict:
        return {"name": self.name, "dimension": self.dimension,
                "num_samples": self.num_samples, "L_estimate": self.L_estimate,
                "f_star_estimate": self.f_star_estimate}


# ---------------------------------------------------------------------------
# deterministic sanity objectives


class Quadratic(Objective):
    """f(x) = 1/2 x^T D x with diagonal D; every sample is the same function."""

    name = "quadratic"

    def __init__(self, diag: Sequence[float]):
        self.diag = np.asarray(diag, dtype=np.float64)
        self.dimension = self.diag.shape[0]
        self.num_samples = 1
        self.L_estimate = float(self.diag.max())
        self.f_star_estimate = 0.0
        self.sigma_estimate = 0.0

    def _value(self, x):
        return 0.5 * float(np.dot(self.diag * x, x))

    def losses(self, x, idx):
        return np.full(len(idx), self._value(x))

    def grads(self, x, idx):
        return np.tile(self.diag * x, (len(idx), 1))

    def full_loss(self, x):
        return self._value(np.asarray(x, dtype=np.float64))

    def full_grad(self, x):
        return self.diag * np.asarray(x, dtype=np.float64)

    def full_loss_many(self, X):
        X = np.atleast_2d(X)
        return 0.5 * np.einsum("ij,j,ij->i", X, self.diag, X)


def make_quadratic(d: int, condition_spread: float = 1.0) -> Quadratic:
    if d < 1:
        raise ValueError("d must be >= 1")
    if not condition_spread > 0:
        raise ValueError("condition_spread must be positive")
    diag = np.geomspace(1.0, condition_spread, d) if d > 1 else np.array([1.0])
    if d > 1:
        diag[-1] = condition_spread
    return Quadratic(diag)


class Linear(Objective):
    """f(x) = a . x. Unbounded below; used as an exact oracle in smoothing checks."""

    name = "linear"

    def __init__(self, a, L_estimate: float = 1.0):
        self.a = np.asarray(a, dtype=np.float64)
        self.dimension = self.a.shape[0]
        self.num_samples = 1
        # any L > 0 is a valid smoothness constant for an affine map
        self.L_estimate = L_estimate
        self.f_star_estimate = -np.inf

    def losses(self, x, idx):
        return np.full(len(idx), float(np.dot(self.a, x)))

    def grads(self, x, idx):
        return np.tile(self.a, (len(idx), 1))

    def full_loss(self, x):
        return float(np.dot(self.a, np.asarray(x, dtype=np.float64)))

    def full_grad(self, x):
        return self.a.copy()

    def full_loss_many(self, X):
        return np.atleast_2d(X) @ self.a


class Constant(Objective):
    name = "constant"

    def __init__(self, d: int, value: float = 0.0):
        self.dimension = d
        self.value = float(value)
        self.num_samples = 1
        self.L_estimate = 1.0
        self.f_star_estimate = self.value

    def losses(self, x, idx):
        return np.full(len(idx), self.value)

    def grads(self, x, idx):
        return np.zeros((len(idx), self.dimension))

    def full_loss_many(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.value)


# ---------------------------------------------------------------------------
# smoothness estimation


def estimate_smoothness(obj: Objective, points: np.ndarray, iters: int = 30,
                        h: float = 1e-5, seed: int = 0) -> float:
    """Largest Hessian spectral norm of f over ``points``.

    Power iteration on finite-difference Hessian-vector products of the full
    gradient; returns the max over points (no safety factor applied).
    """
    rng = np.random.default_rng(seed)
    best = 0.0
    for x in np.atleast_2d(points):
        v = rng.standard_normal(obj.dimension)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            hv = (obj.full_grad(x + h * v) - obj.full_grad(x - h * v)) / (2 * h)
            lam = float(np.linalg.norm(hv))
            if lam == 0.0:
                break
            v = hv / lam
        best = max(best, lam)
    return best


# ---------------------------------------------------------------------------
# sigmoid least squares


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class SigmoidRegression(Objective):
    """F(x, k) = (sigmoid(a_k . x) - y_k)^2."""

    name = "sigmoid"

    def __init__(self, features: np.ndarray, targets: np.ndarray,
                 L_estimate: Optional[float] = None, x_true: Optional[np.ndarray] = None,
                 smoothness_points: int = 100, seed: int = 0):
        self.A = np.ascontiguousarray(features, dtype=np.float64)
        self.y = np.asarray(targets, dtype=np.float64).reshape(-1)
        if self.A.shape[0] != self.y.shape[0]:
            raise ValueError("features and targets disagree on K")
        self.num_samples, self.dimension = self.A.shape
        self.x_true = x_true
        self.f_star_estimate = 0.0
        if L_estimate is None:
            rng = np.random.default_rng([seed, 1])
            pts = 2.0 / np.sqrt(self.dimension) * rng.standard_normal((smoothness_points, self.dimension))
            L_estimate = 2.0 * self.max_hessian_norm(pts)
        self.L_estimate = float(L_estimate)

    def losses(self, x, idx):
        r = _sigmoid(self.A[idx] @ x) - self.y[idx]
        return r * r

    def grads(self, x, idx):
        Ai = self.A[idx]
        s = _sigmoid(Ai @ x)
        coef = 2.0 * (s - self.y[idx]) * s * (1.0 - s)
        return coef[:, None] * Ai

    def full_loss_many(self, X):
        S = _sigmoid(np.atleast_2d(X) @ self.A.T)
        R = S - self.y
        return np.mean(R * R, axis=1)

    def hessian(self, x) -> np.ndarray:
        s = _sigmoid(self.A @ x)
        w = 2.0 * ((s * (1 - s)) ** 2 + (s - self.y) * s * (1 - s) * (1 - 2 * s))
        return (self.A * w[:, None]).T @ self.A / self.num_samples

    def max_hessian_norm(self, points) -> float:
        return max(float(np.max(np.abs(np.linalg.eigvalsh(self.hessian(p))))) for p in points)


def make_sigmoid_regression(d: int, K: int, noise_level: float = 0.1,
                            data_seed: int = 0, smoothness_points: int = 100) -> SigmoidRegression:
    """Synthetic data: a_k ~ N(0, I), x_true ~ N(0, 4 I / d), y = sigmoid(a.x_true) + noise."""
    if d < 1 or K < 1:
        raise ValueError("d and K must be >= 1")
    rng = np.random.default_rng(data_seed)
    A = rng.standard_normal((K, d))
    x_true = 2.0 / np.sqrt(d) * rng.standard_normal(d)
    y = _sigmoid(A @ x_true) + noise_level * rng.standard_normal(K)
    return SigmoidRegression(A, y, x_true=x_true, smoothness_points=smoothness_points,
                             seed=data_seed)


# ---------------------------------------------------------------------------
# two-layer tanh regression network


class TwoLayerTanh(Objective):
    """Squared error of y_hat = w2 . tanh(W1 a + b1) + b2.

    Parameter layout: W1 (hidden x d_in, row-major), b1, w2, b2.
    """

    name = "tanh_net"

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, hidden: int,
                 L_estimate: Optional[float] = None, smoothness_points: int = 20,
                 seed: int = 0):
        self.X = np.ascontiguousarray(inputs, dtype=np.float64)
        self.y = np.asarray(targets, dtype=np.float64).reshape(-1)
        self.num_samples, self.d_in = self.X.shape
        self.hidden = hidden
        self.dimension = hidden * (self.d_in + 1) + hidden + 1
        if self.dimension > 5000:
            raise ValueError(f"parameter count {self.dimension} exceeds 5000")
        self.f_star_estimate = 0.0
        if L_estimate is None:
            rng = np.random.default_rng([seed, 2])
            pts = 0.5 * rng.standard_normal((smoothness_points, self.dimension))
            L_estimate = 2.0 * estimate_smoothness(self, pts, seed=seed)
        self.L_estimate = float(L_estimate)

    def unpack(self, x):
        h, n = self.hidden, self.d_in
        W1 = x[: h * n].reshape(h, n)
        b1 = x[h * n: h * n + h]
        w2 = x[h * n + h: h * n + 2 * h]
        b2 = x[-1]
        return W1, b1, w2, b2

    def _forward(self, x, idx):
        W1, b1, w2, b2 = self.unpack(x)
        H = np.tanh(self.X[idx] @ W1.T + b1)
        r = H @ w2 + b2 - self.y[idx]
        return H, r

    def losses(self, x, idx):
        _, r = self._forward(x, idx)
        return r * r

    def grads(self, x, idx):
        W1, b1, w2, b2 = self.unpack(x)
        H, r = self._forward(x, idx)
        dr = 2.0 * r
        dZ = (dr[:, None] * w2[None, :]) * (1.0 - H * H)
        dW1 = dZ[:, :, None] * self.X[idx][:, None, :]
        return np.concatenate(
            [dW1.reshape(len(idx), -1), dZ, dr[:, None] * H, dr[:, None]], axis=1)


def make_two_layer_tanh(d_in: int, hidden: int, K: int, data_seed: int = 0,
                        smoothness_points: int = 20) -> TwoLayerTanh:
    """Teacher-student regression: targets come from a random teacher network."""
    rng = np.random.default_rng(data_seed)
    inputs = rng.standard_normal((K, d_in))
    W1 = rng.standard_normal((hidden, d_in)) / np.sqrt(d_in)
    b1 = 0.1 * rng.standard_normal(hidden)
    w2 = rng.standard_normal(hidden) / np.sqrt(hidden)
    targets = np.tanh(inputs @ W1.T + b1) @ w2
    return TwoLayerTanh(inputs, targets, hidden, smoothness_points=smoothness_points,
                        seed=data_seed)


# ---------------------------------------------------------------------------
# universal adversarial perturbation loss


class ClassifierModel:
    """Linear softmax classifier; ``scores`` are log-probabilities."""

    def __init__(self, weights: np.ndarray, biases: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.biases.shape[0]:
            raise ValueError("weights must be (I, d_img) and biases (I,)")
        if self.weights.shape[0] < 2:
            raise ValueError("need at least two classes")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def logits(self, Z):
        return np.atleast_2d(Z) @ self.weights.T + self.biases

    def scores(self, Z):
        u = self.logits(Z)
        u = u - u.max(axis=1, keepdims=True)
        return u - np.log(np.exp(u).sum(axis=1, keepdims=True))

    def predict(self, Z):
        return np.argmax(self.logits(Z), axis=1)


def fit_linear_classifier(images: np.ndarray, labels: np.ndarray, num_classes: int,
                          steps: int = 300, lr: float = 2.0, l2: float = 1e-3) -> ClassifierModel:
    """Full-batch gradient descent on softmax cross-entropy from a zero init."""
    X = np.asarray(images, dtype=np.float64)
    Y = np.eye(num_classes)[np.asarray(labels)]
    W = np.zeros((num_classes, X.shape[1]))
    b = np.zeros(num_classes)
    for _ in range(steps):
        u = X @ W.T + b
        u -= u.max(axis=1, keepdims=True)
        P = np.exp(u)
        P /= P.sum(axis=1, keepdims=True)
        E = (P - Y) / X.shape[0]
        W -= lr * (E.T @ X + l2 * W)
        b -= lr * E.sum(axis=0)
    return ClassifierModel(W, b)


def make_attack_dataset(K: int, d_img: int, num_classes: int = 3, data_seed: int = 0):
    """Class-blob images strictly inside (-0.5, 0.5)^d_img."""
    rng = np.random.default_rng(data_seed)
    centers = rng.uniform(-0.25, 0.25, size=(num_classes, d_img))
    labels = rng.integers(num_classes, size=K)
    images = centers[labels] + 0.08 * rng.standard_normal((K, d_img))
    return np.clip(images, -0.45, 0.45), labels


class AttackLoss(Objective):
    """c * max(0, f_y(z) - max_{j!=y} f_j(z)) + ||z - a||^2, z = 0.5 tanh(atanh(2a) + x).

    All maps act elementwise. At a margin of exactly zero the hinge
    contributes a zero subgradient.
    """

    name = "attack"

    def __init__(self, model: ClassifierModel, images: np.ndarray, labels: np.ndarray,
                 c: float, L_estimate: Optional[float] = None, smoothness_points: int = 20,
                 seed: int = 0):
        images = np.atleast_2d(np.asarray(images, dtype=np.float64))
        if np.any(np.abs(images) >= 0.5):
            raise ValueError("images must lie strictly inside (-0.5, 0.5)")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape[0] != images.shape[0]:
            raise ValueError("images and labels disagree on K")
        if np.any(labels < 0) or np.any(labels >= model.num_classes):
            raise ValueError("label out of range")
        if images.shape[1] != model.weights.shape[1]:
            raise ValueError("image size does not match classifier")
        if c < 0:
            raise ValueError("c must be nonnegative")
        self.model = model
        self.images = images
        self.labels = labels
        self.c = float(c)
        self.w0 = np.arctanh(2.0 * images)
        self.num_samples, self.dimension = images.shape
        self.f_star_estimate = 0.0
        if L_estimate is None:
            rng = np.random.default_rng([seed, 3])
            pts = 0.5 * rng.standard_normal((smoothness_points, self.dimension))
            L_estimate = 2.0 * estimate_smoothness(self, pts, seed=seed)
        self.L_estimate = float(L_estimate)

    def _parts(self, x, idx):
        T = np.tanh(self.w0[idx] + x)
        Z = 0.5 * T
        S = self.model.scores(Z)
        y = self.labels[idx]
        rows = np.arange(len(idx))
        own = S[rows, y]
        masked = S.copy()
        masked[rows, y] = -np.inf
        rival = np.argmax(masked, axis=1)
        margin = own - S[rows, rival]
        return T, Z, y, rival, margin

    def margins(self, x, idx) -> np.ndarray:
        return self._parts(np.asarray(x, dtype=np.float64), idx)[4]

    def losses(self, x, idx):
        _, Z, _, _, margin = self._parts(x, idx)
        dist = Z - self.images[idx]
        return self.c * np.maximum(0.0, margin) + np.einsum("ij,ij->i", dist, dist)

    def grads(self, x, idx):
        T, Z, y, rival, margin = self._parts(x, idx)
        dz_dx = 0.5 * (1.0 - T * T)
        W = self.model.weights
        active = (margin > 0).astype(np.float64)
        dZ = self.c * active[:, None] * (W[y] - W[rival]) + 2.0 * (Z - self.images[idx])
        return dZ * dz_dx


def make_attack_loss(model: ClassifierModel, images, labels, c: float, **kwargs) -> AttackLoss:
    return AttackLoss(model, images, labels, c, **kwargs)


# ---------------------------------------------------------------------------
# binary data files


def dump_matrix(path, matrix: np.ndarray) -> None:
    """Write ``b"HOSG"``, u32 version, u64 K, u64 d, then K*d float64 (row-major, little-endian)."""
    M = np.ascontiguousarray(matrix, dtype="<f8")
    if M.ndim != 2:
        raise ValueError("expected a 2-D array")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQ", FORMAT_VERSION, M.shape[0], M.shape[1]))
        fh.write(M.tobytes(order="C"))


def load_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic bytes")
    version, K, d = struct.unpack_from("<IQQ", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = raw[4 + struct.calcsize("<IQQ"):]
    if len(body) != 8 * K * d:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(body, dtype="<f8").reshape(K, d).astype(np.float64)


def save_regression_data(obj, path) -> None:
    """Dump features with the target appended as the last column."""
    features = obj.A if isinstance(obj, SigmoidRegression) else obj.X
    dump_matrix(path, np.column_stack([features, obj.y]))


def load_sigmoid_regression(path, **kwargs) -> SigmoidRegression:
    M = load_matrix(path)
    return SigmoidRegression(M[:, :-1], M[:, -1], **kwargs)

"""Single-hidden-layer tanh networks for the surrogate dynamics and the
heuristic error-covariance model, with hand-written backprop.

Parameters are always stored in raw input/output units. Training works in
standardised coordinates and folds the affine maps back into ``W1, b1`` and
``W2, b2`` afterwards, so a trained network is still a plain
``W2 tanh(W1 [x; u] + b1) + b2``.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, solve_triangular

log = logging.getLogger(__name__)

PARAMS_FORMAT = "cpsls-mlp"
PARAMS_VERSION = 1

DIAG_FLOOR = 1e-4

# desk-scale defaults; full widths are (4096, 2048) for the car and 1024 for the quad
DESK_HIDDEN = {"car": 64, "quad": 128}
FULL_HIDDEN = {"car": (4096, 2048), "quad": (1024, 1024)}


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.W2 = np.asarray(self.W2, dtype=float)
        self.b2 = np.asarray(self.b2, dtype=float)
        H, n_in = self.W1.shape
        if self.b1.shape != (H,) or self.W2.shape[1] != H or self.b2.shape != (self.W2.shape[0],):
            raise ValueError(
                f"inconsistent MLP shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )
        for a in (self.W1, self.b1, self.W2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("MLP parameters contain non-finite entries")

    @property
    def hidden(self):
        return self.W1.shape[0]

    @property
    def n_in(self):
        return self.W1.shape[1]

    @property
    def n_out(self):
        return self.W2.shape[0]

    def copy(self):
        return MlpParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    @classmethod
    def init(cls, n_in, hidden, n_out, seed=0, out_scale=0.1):
        rng = np.random.default_rng(seed)
        W1 = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(hidden, n_in))
        b1 = rng.normal(0.0, 0.1, size=hidden)
        W2 = rng.normal(0.0, out_scale / math.sqrt(hidden), size=(n_out, hidden))
        return cls(W1, b1, W2, np.zeros(n_out))


def _stack_input(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return np.concatenate([x, u], axis=-1)


def mlp_forward(params, x, u):
    """W2 tanh(W1 [x; u] + b1) + b2, batched over leading axes."""
    xu = _stack_input(x, u)
    if xu.shape[-1] != params.n_in:
        raise ValueError(f"input width {xu.shape[-1]} does not match network input {params.n_in}")
    h = np.tanh(xu @ params.W1.T + params.b1)
    return h @ params.W2.T + params.b2


def mlp_jacobian(params, x, u):
    """Analytic Jacobian of :func:`mlp_forward` split into (d/dx, d/du)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    xu = _stack_input(x, u)
    if xu.shape[-1] != params.n_in:
        raise ValueError(f"input width {xu.shape[-1]} does not match network input {params.n_in}")
    h = np.tanh(xu @ params.W1.T + params.b1)
    # J = W2 diag(1 - h^2) W1, batched over leading axes
    J = np.einsum("oh,...h,hi->...oi", params.W2, 1.0 - h ** 2, params.W1)
    n_x = x.shape[-1]
    return J[..., :n_x], J[..., n_x:]


# ---------------------------------------------------------------------------
# covariance head
# ---------------------------------------------------------------------------

def n_tril(n):
    return n * (n + 1) // 2


def _n_from_tril(m):
    n = int(round((math.sqrt(8 * m + 1) - 1) / 2))
    if n_tril(n) != m:
        raise ValueError(f"{m} raw outputs do not fill a lower triangle")
    return n


def raw_to_cholesky(raw, floor=DIAG_FLOOR):
    """Map raw outputs to a lower-triangular factor with diag exp(raw) + floor."""
    raw = np.asarray(raw, dtype=float)
    n = _n_from_tril(raw.shape[-1])
    rows, cols = np.tril_indices(n)
    L = np.zeros(raw.shape[:-1] + (n, n))
    vals = raw.copy()
    diag = rows == cols
    vals[..., diag] = np.exp(raw[..., diag]) + floor
    L[..., rows, cols] = vals
    return L


@dataclass
class CovModelOutput:
    L: np.ndarray
    Sigma: np.ndarray


def blend(Sigma, tau):
    n = Sigma.shape[-1]
    return (1.0 - tau) * np.eye(n) + tau * Sigma


def cov_forward(params, z, v, tau=1.0, floor=DIAG_FLOOR):
    """Blended covariance (1 - tau) I + tau L L^T and its Cholesky factor."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("blend tau must lie in [0, 1]")
    raw = mlp_forward(params, z, v)
    L0 = raw_to_cholesky(raw, floor)
    Sigma = blend(L0 @ np.swapaxes(L0, -1, -2), tau)
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, -1, -2))
    if tau == 1.0:
        L = L0
    else:
        try:
            L = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("blended covariance is not positive definite") from exc
    return CovModelOutput(L=L, Sigma=Sigma)


def mgnll_loss(Sigma, residual):
    """0.5 (r^T Sigma^{-1} r + ln det Sigma) via the Cholesky factor."""
    Sigma = np.asarray(Sigma, dtype=float)
    r = np.asarray(residual, dtype=float)
    try:
        c, lower = cho_factor(Sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Sigma is not positive definite") from exc
    L = np.tril(c)
    y = solve_triangular(L, r, lower=True)
    return 0.5 * float(y @ y) + float(np.sum(np.log(np.diag(L))))


# ---------------------------------------------------------------------------
# surrogate wrappers used by the planner
# ---------------------------------------------------------------------------

@dataclass
class LearnedDynamics:
    """f_hat(x, u) = x + mlp(x, u) when ``residual``; otherwise mlp(x, u)."""

    params: MlpParams
    residual: bool = True

    @property
    def n_x(self):
        return self.params.n_out

    @property
    def n_u(self):
        return self.params.n_in - self.params.n_out

    def predict(self, x, u):
        y = mlp_forward(self.params, x, u)
        return np.asarray(x, dtype=float) + y if self.residual else y

    def jacobian(self, x, u):
        A, B = mlp_jacobian(self.params, x, u)
        if self.residual:
            A = A + np.eye(self.n_x)
        return A, B


@dataclass
class CovarianceModel:
    params: MlpParams
    tau: float = 1.0
    floor: float = DIAG_FLOOR

    def __call__(self, z, v):
        return cov_forward(self.params, z, v, self.tau, self.floor)

    def cholesky(self, z, v):
        return self(z, v).L


@dataclass
class IdentityCovariance:
    """Sigma = I everywhere; turns the ellipsoid calibration into the ball one."""

    n_x: int

    def __call__(self, z, v):
        z = np.asarray(z, dtype=float)
        I = np.broadcast_to(np.eye(self.n_x), z.shape[:-1] + (self.n_x, self.n_x)).copy()
        return CovModelOutput(L=I, Sigma=I.copy())

    def cholesky(self, z, v):
        return self(z, v).L


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 128
    seed: int = 0
    tau: float = 1.0
    optimizer: str = "adam"
    floor: float = DIAG_FLOOR
    lr_final: float = None  # cosine decay target; None keeps lr constant

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class _Affine:
    mean: np.ndarray
    scale: np.ndarray


def _fold_in(p, inp, out):
    """Raw-unit params -> standardised-coordinate params."""
    W1 = p.W1 * inp.scale
    b1 = p.b1 + p.W1 @ inp.mean
    W2 = p.W2 / out.scale[:, None]
    b2 = (p.b2 - out.mean) / out.scale
    return MlpParams(W1, b1, W2, b2)


def _fold_out(p, inp, out):
    """Standardised-coordinate params -> raw-unit params."""
    W1 = p.W1 / inp.scale
    b1 = p.b1 - W1 @ inp.mean
    W2 = p.W2 * out.scale[:, None]
    b2 = p.b2 * out.scale + out.mean
    return MlpParams(W1, b1, W2, b2)


def _stats(a):
    mean = a.mean(axis=0)
    scale = a.std(axis=0)
    scale = np.where(scale < 1e-8, 1.0, scale)
    return _Affine(mean, scale)


def _cov_out_affine(R, n_out):
    """Output scaling for raw Cholesky entries: 1 on the log-diagonal, the
    residual spread of row i on the off-diagonal entries of that row."""
    nx = _n_from_tril(n_out)
    rows, cols = np.tril_indices(nx)
    std = np.std(R, axis=0) + 1e-8
    scale = np.where(rows == cols, 1.0, std[rows])
    return _Affine(np.zeros(n_out), scale)


class _Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


def _mse_grads(p, X, T, out_scale):
    a = X @ p.W1.T + p.b1
    h = np.tanh(a)
    y = h @ p.W2.T + p.b2
    diff = (y - T) * out_scale  # raw-unit error
    B = X.shape[0]
    loss = float(np.sum(diff ** 2) / B)
    gy = 2.0 * diff * out_scale / B
    ga = (gy @ p.W2) * (1.0 - h ** 2)
    return loss, [ga.T @ X, ga.sum(0), gy.T @ h, gy.sum(0)]


def mgnll_batch(raw, R, floor=DIAG_FLOOR):
    """Mean MGNLL over a batch and its gradient w.r.t. the raw outputs."""
    L = raw_to_cholesky(raw, floor)
    n = L.shape[-1]
    y = solve_lower_batch(L, R)
    diagL = np.diagonal(L, axis1=-2, axis2=-1)
    per = 0.5 * np.sum(y * y, axis=-1) + np.sum(np.log(diagL), axis=-1)
    B = R.shape[0]
    # dloss/dL = -tril(L^{-T} y y^T) + diag(1/L_ii)
    w = solve_upper_batch(np.swapaxes(L, -1, -2), y)
    G = -w[:, :, None] * y[:, None, :]
    idx = np.arange(n)
    G[:, idx, idx] += 1.0 / diagL
    rows, cols = np.tril_indices(n)
    graw = G[:, rows, cols]
    diag = rows == cols
    graw[:, diag] *= np.exp(raw[:, diag])
    return float(per.mean()), graw / B


def solve_lower_batch(L, b):
    """Forward substitution for a batch of lower-triangular systems."""
    n = L.shape[-1]
    y = np.empty_like(b)
    for i in range(n):
        y[..., i] = (b[..., i] - np.einsum("...j,...j->...", L[..., i, :i], y[..., :i])) / L[..., i, i]
    return y


def solve_upper_batch(U, b):
    n = U.shape[-1]
    y = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        y[..., i] = (b[..., i] - np.einsum("...j,...j->...", U[..., i, i + 1:], y[..., i + 1:])) / U[..., i, i]
    return y


def _mgnll_grads(p, X, R, floor, out):
    a = X @ p.W1.T + p.b1
    h = np.tanh(a)
    raw = (h @ p.W2.T + p.b2) * out.scale + out.mean
    loss, gy = mgnll_batch(raw, R, floor)
    gy = gy * out.scale
    ga = (gy @ p.W2) * (1.0 - h ** 2)
    return loss, [ga.T @ X, ga.sum(0), gy.T @ h, gy.sum(0)]


def train(model, data, loss="mse", cfg=None, return_history=False):
    """Fit ``model`` (an :class:`MlpParams`) to ``data = (X, U, Y)``.

    For ``loss="mse"`` ``Y`` is the regression target. For ``loss="mgnll"``
    ``Y`` holds dynamics residuals f(x, u) - f_hat(x, u) and the network's
    outputs are read as raw Cholesky entries.
    """
    cfg = cfg or TrainConfig()
    X, U, Y = (np.asarray(a, dtype=float) for a in data)
    if X.shape[0] == 0:
        raise ValueError("training set is empty")
    if loss not in ("mse", "mgnll"):
        raise ValueError("loss must be 'mse' or 'mgnll'")
    history = []
    if cfg.epochs == 0:
        return (model.copy(), history) if return_history else model.copy()

    XU = np.concatenate([X, U], axis=1)
    inp = _stats(XU)
    if loss == "mse":
        out = _stats(Y)
    else:
        out = _cov_out_affine(Y, model.n_out)
    p = _fold_in(model, inp, out)
    Xn = (XU - inp.mean) / inp.scale
    Tn = (Y - out.mean) / out.scale if loss == "mse" else None

    opt = _Adam([a.shape for a in (p.W1, p.b1, p.W2, p.b2)], cfg.lr) if cfg.optimizer == "adam" else _Sgd(cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    N = Xn.shape[0]
    for epoch in range(cfg.epochs):
        if cfg.lr_final is not None and cfg.epochs > 1:
            frac = epoch / (cfg.epochs - 1)
            opt.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))
        perm = rng.permutation(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if loss == "mse":
                val, grads = _mse_grads(p, Xn[idx], Tn[idx], out.scale)
            else:
                val, grads = _mgnll_grads(p, Xn[idx], Y[idx], cfg.floor, out)
            if not math.isfinite(val):
                raise FloatingPointError(
                    f"{loss} loss became non-finite at epoch {epoch}, batch offset {start}"
                )
            total += val * idx.size
            opt.step([p.W1, p.b1, p.W2, p.b2], grads)
        history.append(total / N)
        log.debug("epoch %d %s loss %.6g", epoch, loss, history[-1])

    trained = _fold_out(p, inp, out)
    return (trained, history) if return_history else trained


def dataset_loss(params, data, loss="mse", floor=DIAG_FLOOR):
    X, U, Y = (np.asarray(a, dtype=float) for a in data)
    if loss == "mse":
        return float(np.mean(np.sum((mlp_forward(params, X, U) - Y) ** 2, axis=1)))
    raw = mlp_forward(params, X, U)
    return mgnll_batch(raw, Y, floor)[0]


def init_cov_bias(params, residuals):
    """Start the diagonal Cholesky outputs at the log residual spread."""
    n = params.n_out
    nx = _n_from_tril(n)
    rows, cols = np.tril_indices(nx)
    std = np.std(residuals, axis=0) + 1e-6
    p = params.copy()
    p.W2[:] = 0.0
    p.b2[:] = 0.0
    p.b2[rows == cols] = np.log(std)
    return p


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def params_to_dict(params, **meta):
    return {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "meta": meta,
        "shapes": {k: list(getattr(params, k).shape) for k in ("W1", "b1", "W2", "b2")},
        "arrays": {k: getattr(params, k).ravel(order="C").tolist() for k in ("W1", "b1", "W2", "b2")},
    }


def params_from_dict(d, expect_in=None, expect_out=None):
    if d.get("format") != PARAMS_FORMAT:
        raise ValueError(f"not a {PARAMS_FORMAT} blob")
    if d.get("version") != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter file version {d.get('version')}")
    arrays = {}
    for k in ("W1", "b1", "W2", "b2"):
        shape = tuple(d["shapes"][k])
        flat = np.asarray(d["arrays"][k], dtype=float)
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"array {k} has {flat.size} entries, shape {shape} needs {int(np.prod(shape))}")
        arrays[k] = flat.reshape(shape)
    p = MlpParams(**arrays)
    if expect_in is not None and p.n_in != expect_in:
        raise ValueError(f"network input width {p.n_in} != expected {expect_in}")
    if expect_out is not None and p.n_out != expect_out:
        raise ValueError(f"network output width {p.n_out} != expected {expect_out}")
    return p


def save_params(path, params, **meta):
    with open(path, "w") as fh:
        json.dump(params_to_dict(params, **meta), fh)


def load_params(path, expect_in=None, expect_out=None):
    with open(path) as fh:
        d = json.load(fh)
    return params_from_dict(d, expect_in, expect_out), d.get("meta", {})

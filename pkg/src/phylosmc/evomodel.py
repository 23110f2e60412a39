"""Continuous-time Markov chain substitution models.

A RateModel bundles a reversible rate matrix Q over ACGT, its stationary
distribution eta, and the unconstrained parameter vector theta that
generated it. Q is normalized so that -sum_i eta_i Q_ii = 1, one expected
substitution per unit branch length; that pins the otherwise arbitrary
Q-scale so branch lengths read as expected substitutions per site.

Transition probabilities exp(bQ) are computed from the symmetric
eigendecomposition of A = diag(sqrt(eta)) Q diag(sqrt(eta))^-1, valid by
reversibility. The decomposition is done once per model and cached on the
instance, which is immutable and therefore safe for concurrent readers.

Derivatives: dP/db = Q exp(bQ) exactly; dP/dtheta goes through the
eigendecomposition differential with the divided-difference kernel
(exp(b l_i) - exp(b l_j)) / (l_i - l_j), switching to the confluent limit
b exp(b l_i) when |l_i - l_j| < 1e-10.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# order of the six GTR exchangeability parameters
_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

# A 4x4 transition matrix is represented as a plain ndarray.
TransitionMatrix = np.ndarray


@dataclass(frozen=True)
class RateModel:
    kind: str                 # "JC69" or "GTR"
    theta: np.ndarray         # unconstrained parameters; empty for JC69
    Q: np.ndarray             # (4, 4) rate matrix, rows sum to 0
    eta: np.ndarray           # (4,) stationary distribution
    # cached symmetric eigendecomposition of A = D Q D^-1, D = diag(sqrt eta)
    A: np.ndarray
    evals: np.ndarray
    V: np.ndarray
    # construction Jacobians, empty leading axis for JC69
    dQ_dtheta: np.ndarray     # (n_theta, 4, 4)
    deta_dtheta: np.ndarray   # (n_theta, 4)

    @property
    def n_theta(self) -> int:
        return self.theta.shape[0]

    def __eq__(self, other):
        return self is other

    def __hash__(self):
        return id(self)


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _finish(kind, theta, Q, eta, dQ, deta) -> RateModel:
    d = np.sqrt(eta)
    A = (d[:, None] * Q) / d[None, :]
    A = 0.5 * (A + A.T)
    evals, V = np.linalg.eigh(A)
    _freeze(theta, Q, eta, A, evals, V, dQ, deta)
    return RateModel(kind=kind, theta=theta, Q=Q, eta=eta, A=A,
                     evals=evals, V=V, dQ_dtheta=dQ, deta_dtheta=deta)


def build_jc69() -> RateModel:
    """Fixed Jukes-Cantor model: uniform eta, equal off-diagonal rates."""
    Q = np.full((4, 4), 1.0 / 3.0)
    np.fill_diagonal(Q, -1.0)
    eta = np.full(4, 0.25)
    return _finish("JC69", np.empty(0), Q, eta,
                   np.empty((0, 4, 4)), np.empty((0, 4)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softmax(x):
    z = np.exp(x - np.max(x))
    return z / z.sum()


def build_gtr(theta) -> RateModel:
    """General time-reversible model from a 10-vector.

    theta[0:6] map through softplus to the exchangeabilities in the order
    AC, AG, AT, CG, CT, GT; theta[6:10] map through softmax to eta. The
    resulting Q_ij = r_ij eta_j is rescaled to unit expected rate. Every
    finite theta is feasible. theta = 0 reproduces the JC69 rate matrix.
    """
    theta = np.asarray(theta, dtype=np.float64).copy()
    if theta.shape != (10,) or not np.all(np.isfinite(theta)):
        raise ValueError("GTR theta must be a finite 10-vector")
    r6 = _softplus(theta[:6])
    dr6 = 1.0 / (1.0 + np.exp(-theta[:6]))   # d softplus
    eta = _softmax(theta[6:])

    R = np.zeros((4, 4))
    for k, (p, q) in enumerate(_PAIRS):
        R[p, q] = R[q, p] = r6[k]

    def q_unnorm(Rm, et):
        Q0 = Rm * et[None, :]
        np.fill_diagonal(Q0, 0.0)
        np.fill_diagonal(Q0, -Q0.sum(axis=1))
        return Q0

    Q0 = q_unnorm(R, eta)
    c = -float(np.dot(eta, np.diag(Q0)))
    Q = Q0 / c

    dQ = np.zeros((10, 4, 4))
    deta = np.zeros((10, 4))
    for k, (p, q) in enumerate(_PAIRS):
        dR = np.zeros((4, 4))
        dR[p, q] = dR[q, p] = dr6[k]
        dQ0 = q_unnorm(dR, eta)
        dc = 2.0 * eta[p] * dr6[k] * eta[q]
        dQ[k] = (dQ0 - Q * dc) / c
    for k in range(4):
        de = eta * (np.eye(4)[k] - eta[k])
        deta[6 + k] = de
        dQ0 = R * de[None, :]
        np.fill_diagonal(dQ0, 0.0)
        np.fill_diagonal(dQ0, -dQ0.sum(axis=1))
        # d c = sum_{i != j} (deta_i r_ij eta_j + eta_i r_ij deta_j)
        dc = 2.0 * float(de @ (R @ eta))
        dQ[6 + k] = (dQ0 - Q * dc) / c
    return _finish("GTR", theta, Q, eta, dQ, deta)


def transition_probs(model: RateModel, b: float) -> TransitionMatrix:
    """P(b) = exp(bQ) via the cached symmetric eigendecomposition."""
    if not (np.isfinite(b) and b >= 0.0):
        raise ValueError(f"branch length must be finite and >= 0, got {b}")
    d = np.sqrt(model.eta)
    scaled = model.V * np.exp(b * model.evals)[None, :]
    P = (scaled @ model.V.T) * (d[None, :] / d[:, None])
    return np.clip(P, 0.0, 1.0)


def transition_grads(model: RateModel, b: float):
    """(dP/db, dP/dtheta) at branch length b.

    dP/db = Q exp(bQ). Each theta component goes through the chain
    A = D Q D^-1, X = exp(bA), P = D^-1 X D with D = diag(sqrt eta),
    using the divided-difference kernel on the eigenbasis of A.
    """
    if not (np.isfinite(b) and b >= 0.0):
        raise ValueError(f"branch length must be finite and >= 0, got {b}")
    d = np.sqrt(model.eta)
    ew = np.exp(b * model.evals)
    X = (model.V * ew[None, :]) @ model.V.T
    P = X * (d[None, :] / d[:, None])
    dP_db = model.Q @ P

    n = model.n_theta
    dP_dtheta = np.zeros((n, 4, 4))
    if n == 0:
        return dP_db, dP_dtheta

    lam = model.evals
    diff = lam[:, None] - lam[None, :]
    close = np.abs(diff) < 1e-10
    safe = np.where(close, 1.0, diff)
    kernel = np.where(close, b * np.exp(b * 0.5 * (lam[:, None] + lam[None, :])),
                      (ew[:, None] - ew[None, :]) / safe)
    for k in range(n):
        u = model.deta_dtheta[k] / (2.0 * model.eta)   # dD D^-1 diagonal
        dA = (u[:, None] - u[None, :]) * model.A \
            + (d[:, None] * model.dQ_dtheta[k]) / d[None, :]
        W = model.V.T @ dA @ model.V
        dX = model.V @ (kernel * W) @ model.V.T
        dP_dtheta[k] = (-u[:, None] + u[None, :]) * P \
            + dX * (d[None, :] / d[:, None])
    return dP_db, dP_dtheta


def _f17(x) -> str:
    return format(float(x), ".17g")


def save_params(model: RateModel, path: str) -> None:
    """Write {kind, theta, Q row-major, eta} with 17 significant digits."""
    theta = ", ".join(_f17(t) for t in model.theta)
    q = ", ".join(_f17(v) for v in model.Q.ravel())
    eta = ", ".join(_f17(v) for v in model.eta)
    text = ('{\n'
            f'  "kind": "{model.kind}",\n'
            f'  "theta": [{theta}],\n'
            f'  "Q": [{q}],\n'
            f'  "eta": [{eta}]\n'
            '}\n')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_params(path: str) -> RateModel:
    """Rebuild a RateModel from a params.json file."""
    with open(path, "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    kind = blob["kind"]
    if kind == "JC69":
        model = build_jc69()
    elif kind == "GTR":
        model = build_gtr(np.asarray(blob["theta"], dtype=np.float64))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    stored_q = np.asarray(blob["Q"], dtype=np.float64).reshape(4, 4)
    stored_eta = np.asarray(blob["eta"], dtype=np.float64)
    if not (np.allclose(stored_q, model.Q, atol=1e-12)
            and np.allclose(stored_eta, model.eta, atol=1e-12)):
        raise ValueError("stored Q/eta do not match the parameterization")
    return model

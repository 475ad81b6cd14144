"""Dynamic local aggregation: learnable VLAD-style prototypes.

Feature vectors ``f_n`` (the ``N = H*W`` columns of ``F``) are softly
assigned to ``L`` centers, residuals are aggregated per center, and only the
first ``M`` aggregated columns become prototypes; the remaining ``G = L - M``
clusters still take assignment mass but never reach the decoder. Each
feature then reads out a convex mix of prototypes weighted by a softmax over
cosine similarities.

Batched arrays use ``f`` of shape (B, N, D).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .ac import AcResult
from .diffcore import ConfigError, Parameter


@dataclass
class DlanState:
    M: int
    centers: Parameter          # (L, D)
    assign_w: Parameter         # (L, D)
    assign_b: Parameter         # (L,)
    proj_w: Parameter           # (D, D)
    proj_b: Parameter           # (D,)
    alpha: float = 10.0

    @property
    def L(self) -> int:
        return self.centers.shape[0]

    @property
    def D(self) -> int:
        return self.centers.shape[1]

    @property
    def G(self) -> int:
        return self.L - self.M

    @property
    def params(self) -> dict[str, Parameter]:
        return {"dlan.centers": self.centers, "dlan.assign_w": self.assign_w,
                "dlan.assign_b": self.assign_b, "dlan.proj_w": self.proj_w,
                "dlan.proj_b": self.proj_b}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def init_from_centers(centers: np.ndarray, M: int, alpha: float,
                      rng: np.random.Generator, proj_noise: float = 1e-2) -> DlanState:
    centers = np.asarray(centers, dtype=np.float64)
    L, D = centers.shape
    if M < 1 or M > L:
        raise ConfigError(f"need 1 <= M <= L, got M={M}, L={L}")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    return DlanState(
        M=int(M),
        centers=Parameter(centers),
        assign_w=Parameter(2.0 * alpha * centers),
        assign_b=Parameter(-alpha * (centers ** 2).sum(axis=1)),
        proj_w=Parameter(np.eye(D) + proj_noise * rng.standard_normal((D, D))),
        proj_b=Parameter(np.zeros(D)),
        alpha=alpha,
    )


def init_from_ac(ac: AcResult, alpha: float = 10.0, rng: np.random.Generator | None = None,
                 M: int | None = None) -> DlanState:
    """Seed centers and the 1x1 assignment layer from the clusterer output.

    ``M`` overrides the clusterer's estimate (``M = L`` disables the
    redundant clusters).
    """
    rng = rng or np.random.default_rng(0)
    return init_from_centers(ac.centers_ordered, ac.M if M is None else M, alpha, rng)


def init_random(L: int, M: int, D: int, alpha: float, rng: np.random.Generator) -> DlanState:
    """Unit-Gaussian centers, for the ablations that bypass the clusterer."""
    return init_from_centers(rng.standard_normal((L, D)), M, alpha, rng)


def to_rows(F: np.ndarray) -> np.ndarray:
    """(B, D, H, W) -> (B, N, D)."""
    b, d, h, w = F.shape
    return F.transpose(0, 2, 3, 1).reshape(b, h * w, d)


def from_rows(f: np.ndarray, h: int, w: int) -> np.ndarray:
    """(B, N, D) -> (B, D, H, W)."""
    b, n, d = f.shape
    return f.reshape(b, h, w, d).transpose(0, 3, 1, 2)


# -- individual stages (single map or batch) -------------------------------

def soft_assign(F: np.ndarray, s: DlanState) -> np.ndarray:
    """Assignment weights beta of shape (N, L) for a (D, H, W) map, or (B, N, L)."""
    f = to_rows(F[None] if F.ndim == 3 else F)
    beta = dc.softmax_rows(f @ s.assign_w.value.T + s.assign_b.value)
    return beta[0] if F.ndim == 3 else beta


def aggregate_residuals(F: np.ndarray, beta: np.ndarray, s: DlanState) -> np.ndarray:
    """V[j, l] = sum_n beta[n, l] * (f_n[j] - c_l[j]); returns (D, L) or (B, D, L)."""
    single = F.ndim == 3
    f = to_rows(F[None] if single else F)
    beta = beta[None] if single else beta
    Vt = beta.transpose(0, 2, 1) @ f - beta.sum(axis=1)[..., None] * s.centers.value
    V = Vt.transpose(0, 2, 1)
    return V[0] if single else V


def prototypes(V: np.ndarray, s: DlanState) -> np.ndarray:
    """Keep the first M residual columns, normalize, project: (M, D) or (B, M, D)."""
    R = np.swapaxes(V, -1, -2)[..., :s.M, :]
    u = dc.l2_normalize_rows(R)
    return u @ s.proj_w.value.T + s.proj_b.value


def matching_weights(F: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Softmax over prototypes of the cosine similarity; (N, M) or (B, N, M)."""
    single = F.ndim == 3
    f = to_rows(F[None] if single else F)
    P = P[None] if single else P
    S = dc.l2_normalize_rows(f) @ np.swapaxes(dc.l2_normalize_rows(P), -1, -2)
    w = dc.softmax_rows(S)
    return w[0] if single else w


def readout(w: np.ndarray, P: np.ndarray, h: int, wd: int) -> np.ndarray:
    """Per-site convex mix of prototypes, reshaped to (D, H, W) or (B, D, H, W)."""
    single = w.ndim == 2
    Pt = (w[None] if single else w) @ (P[None] if single else P)
    out = from_rows(Pt, h, wd)
    return out[0] if single else out


def fuse(F: np.ndarray, P_tilde: np.ndarray) -> np.ndarray:
    return dc.channel_concat(F, P_tilde)


# -- composed forward/backward used for training ---------------------------

def forward(F: np.ndarray, s: DlanState):
    """Full pass for a (B, D, H, W) batch.

    Returns ``(P_tilde, P, w, cache)`` with ``P`` (B, M, D) and ``w`` (B, N, M).
    """
    b, d, h, wd = F.shape
    f = to_rows(F)
    c = s.centers.value
    beta = dc.softmax_rows(f @ s.assign_w.value.T + s.assign_b.value)
    mass = beta.sum(axis=1)                                     # (B, L)
    Vt = beta.transpose(0, 2, 1) @ f - mass[..., None] * c      # (B, L, D)
    R = Vt[:, :s.M]
    u = dc.l2_normalize_rows(R)
    P = u @ s.proj_w.value.T + s.proj_b.value
    fn = dc.l2_normalize_rows(f)
    pn = dc.l2_normalize_rows(P)
    w = dc.softmax_rows(fn @ pn.transpose(0, 2, 1))
    Pt = w @ P
    cache = (f, beta, mass, R, u, P, fn, pn, w, h, wd)
    return from_rows(Pt, h, wd), P, w, cache


def backward(dP_tilde: np.ndarray, cache, s: DlanState, dP_extra=None, df_extra=None):
    """Backprop through :func:`forward`; returns dF of shape (B, D, H, W).

    ``dP_extra`` (B, M, D) and ``df_extra`` (B, N, D) carry gradients that
    losses place directly on prototypes and feature rows.
    """
    f, beta, mass, R, u, P, fn, pn, w, h, wd = cache
    dPt = to_rows(dP_tilde)
    dw = dPt @ P.transpose(0, 2, 1)
    dP = w.transpose(0, 2, 1) @ dPt
    if dP_extra is not None:
        dP = dP + dP_extra
    dS = dc.softmax_rows_backward(dw, w)
    df = dc.l2_normalize_rows_backward(dS @ pn, f)
    if df_extra is not None:
        df = df + df_extra
    dP = dP + dc.l2_normalize_rows_backward(dS.transpose(0, 2, 1) @ fn, P)

    s.proj_w.accumulate(np.einsum("bmi,bmj->ij", dP, u))
    s.proj_b.accumulate(dP.sum(axis=(0, 1)))
    dR = dc.l2_normalize_rows_backward(dP @ s.proj_w.value, R)

    L = s.L
    dVt = np.zeros(R.shape[:1] + (L,) + R.shape[2:], dtype=R.dtype)
    dVt[:, :s.M] = dR
    c = s.centers.value
    dbeta = f @ dVt.transpose(0, 2, 1) - (dVt * c).sum(axis=-1)[:, None, :]
    df = df + beta @ dVt
    s.centers.accumulate(-(mass[..., None] * dVt).sum(axis=0))
    dlogits = dc.softmax_rows_backward(dbeta, beta)
    s.assign_w.accumulate(np.einsum("bnl,bnd->ld", dlogits, f))
    s.assign_b.accumulate(dlogits.sum(axis=(0, 1)))
    df = df + dlogits @ s.assign_w.value
    return from_rows(df, h, wd)

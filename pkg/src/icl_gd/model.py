"""One-layer linear self-attention: forward passes, closed-form minimizers, GD baselines.

Prompts are anything with ``X``, ``y`` and ``x_query`` attributes; a single
``PromptInstance`` gives a float, a ``PromptBatch`` gives one prediction per
instance. The query token is ``[x_query; 0]`` and never enters the Gram sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .io import decode_array, encode_array
from .numerics import check_spd, spd_inv_sqrt, spd_inverse

PARAMS_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class LsaParams:
    W_K: np.ndarray
    W_Q: np.ndarray
    W_V: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        s = np.shape(self.h)
        if len(s) != 1:
            raise ValueError("h must be a vector")
        for name in ("W_K", "W_Q", "W_V"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (s[0], s[0]):
                raise ValueError(f"{name} must be {s[0]}x{s[0]}, got {m.shape}")
            object.__setattr__(self, name, m)
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))

    @property
    def d(self) -> int:
        return self.h.shape[0] - 1

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W_K": self.W_K, "W_Q": self.W_Q, "W_V": self.W_V, "h": self.h}


@dataclass(frozen=True, eq=False)
class ReducedParams:
    w: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        M = np.asarray(self.M, dtype=float)
        if w.ndim != 1 or M.shape != (w.shape[0], w.shape[0]):
            raise ValueError(f"inconsistent reduced shapes w{w.shape} M{M.shape}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "M", M)

    @property
    def d(self) -> int:
        return self.w.shape[0] - 1

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "M": self.M}


@dataclass(frozen=True)
class EffectiveDecomposition:
    """Blocks of ``w = (w_x, w_y)`` and ``A = M[:, :d]^T = [A_x | a_y]``."""

    w_x: np.ndarray
    w_y: float
    A_x: np.ndarray
    a_y: np.ndarray
    gd_matrix: np.ndarray


def tokens(prompt) -> np.ndarray:
    """Support tokens ``[x_i; y_i]`` stacked along the second-to-last axis."""
    return np.concatenate([prompt.X, np.asarray(prompt.y)[..., None]], axis=-1)


def gram(prompt) -> np.ndarray:
    z = tokens(prompt)
    return np.einsum("...ni,...nj->...ij", z, z)


def query_token(prompt) -> np.ndarray:
    xq = np.asarray(prompt.x_query, dtype=float)
    return np.concatenate([xq, np.zeros(xq.shape[:-1] + (1,))], axis=-1)


def _scalar(out):
    return float(out) if np.ndim(out) == 0 else out


def _check_dims(d: int, prompt):
    if prompt.X.shape[-1] != d:
        raise ValueError(f"parameter dimension d={d} does not match prompt dimension {prompt.X.shape[-1]}")


def forward_full(p: LsaParams, prompt):
    """Attention-form evaluation: ``h^T sum_j (W_V v_j)(v_j^T W_K^T W_Q v_q)``."""
    _check_dims(p.d, prompt)
    z = tokens(prompt)
    q = query_token(prompt) @ p.W_Q.T
    keys = z @ p.W_K.T
    scores = np.einsum("...ni,...i->...n", keys, q)
    values = z @ p.W_V.T
    out = np.einsum("...n,...ni->...i", scores, values)
    return _scalar(out @ p.h)


def reduce(p: LsaParams) -> ReducedParams:
    return ReducedParams(p.W_V.T @ p.h, p.W_K.T @ p.W_Q)


def forward_reduced(r: ReducedParams, prompt):
    """``w^T G M v_q`` evaluated without forming ``G``."""
    _check_dims(r.d, prompt)
    z = tokens(prompt)
    mv = np.asarray(prompt.x_query) @ r.M[:, :-1].T
    zw = z @ r.w
    zmv = np.einsum("...ni,...i->...n", z, mv)
    return _scalar(np.einsum("...n,...n->...", zw, zmv))


def predict(params, prompt):
    if isinstance(params, LsaParams):
        return forward_full(params, prompt)
    return forward_reduced(params, prompt)


def construct_gd_minimizer(d: int, eta: float) -> LsaParams:
    if not np.isfinite(eta):
        raise ValueError("eta must be finite")
    proj = np.zeros((d + 1, d + 1))
    proj[:d, :d] = np.eye(d)
    W_V = np.zeros((d + 1, d + 1))
    W_V[d, d] = eta
    h = np.zeros(d + 1)
    h[d] = 1.0
    return LsaParams(proj.copy(), proj.copy(), W_V, h)


def construct_preconditioned_minimizer(sigma_mat: np.ndarray, eta: float) -> LsaParams:
    """Isotropic construction pulled back through ``H = diag(Sigma^{1/2}, 1)``.

    Every weight matrix is right-multiplied by ``H^{-1}``; the head is kept.
    The reduced form is ``w = [0; eta]``, ``M = diag(Sigma^{-1}, 0)``.
    """
    sigma_mat = np.asarray(sigma_mat, dtype=float)
    check_spd(sigma_mat, "Sigma")
    d = sigma_mat.shape[0]
    base = construct_gd_minimizer(d, eta)
    h_inv = np.zeros((d + 1, d + 1))
    h_inv[:d, :d] = spd_inv_sqrt(sigma_mat)
    h_inv[d, d] = 1.0
    return LsaParams(base.W_K @ h_inv, base.W_Q @ h_inv, base.W_V @ h_inv, base.h)


def one_step_gd_predict(prompt, eta: float, preconditioner: np.ndarray | None = None):
    """``eta * y^T X P x_query``: one GD step from zero, then the query."""
    X = np.asarray(prompt.X)
    xq = np.asarray(prompt.x_query)
    if preconditioner is not None:
        P = np.asarray(preconditioner, dtype=float)
        if P.shape != (X.shape[-1], X.shape[-1]):
            raise ValueError("preconditioner dimension does not match d")
        xq = xq @ P.T
    xty = np.einsum("...ni,...n->...i", X, np.asarray(prompt.y))
    return _scalar(eta * np.einsum("...i,...i->...", xty, xq))


def decompose(r: ReducedParams) -> EffectiveDecomposition:
    d = r.d
    A_x = r.M[:d, :d].T.copy()
    w_y = float(r.w[d])
    return EffectiveDecomposition(
        w_x=r.w[:d].copy(),
        w_y=w_y,
        A_x=A_x,
        a_y=r.M[d, :d].copy(),
        gd_matrix=w_y * A_x,
    )


def block_expansion_predict(dec: EffectiveDecomposition, prompt):
    """Four-term expansion of ``x_q^T A G w`` with ``A = [A_x | a_y]``."""
    X = np.asarray(prompt.X)
    y = np.asarray(prompt.y)
    xq = np.asarray(prompt.x_query)
    xtx_wx = np.einsum("...ni,...nj,j->...i", X, X, dec.w_x)
    xty = np.einsum("...ni,...n->...i", X, y)
    vec = xtx_wx @ dec.A_x.T + dec.w_y * (xty @ dec.A_x.T)
    scal = xty @ dec.w_x + dec.w_y * np.einsum("...n,...n->...", y, y)
    out = np.einsum("...i,...i->...", vec, xq) + scal * (xq @ dec.a_y)
    return _scalar(out)


def preconditioner_for(spec) -> np.ndarray | None:
    """The one-step-GD preconditioner a global minimizer uses for ``spec``."""
    if spec.cov is None:
        return None
    return spd_inverse(spec.cov)


def params_to_json(params: LsaParams | ReducedParams) -> str:
    kind = "lsa" if isinstance(params, LsaParams) else "reduced"
    doc = {
        "format_version": PARAMS_FORMAT_VERSION,
        "kind": kind,
        "d": params.d,
        "matrices": {k: encode_array(v) for k, v in params.arrays().items()},
    }
    return json.dumps(doc, sort_keys=True)


def params_from_json(text: str) -> LsaParams | ReducedParams:
    doc = json.loads(text)
    if doc.get("format_version") != PARAMS_FORMAT_VERSION:
        raise ValueError(f"unsupported params format_version {doc.get('format_version')}")
    m = {k: decode_array(v) for k, v in doc["matrices"].items()}
    if doc["kind"] == "lsa":
        out = LsaParams(m["W_K"], m["W_Q"], m["W_V"], m["h"])
    elif doc["kind"] == "reduced":
        out = ReducedParams(m["w"], m["M"])
    else:
        raise ValueError(f"unknown params kind {doc['kind']!r}")
    if out.d != doc["d"]:
        raise ValueError("params d does not match matrix shapes")
    return out

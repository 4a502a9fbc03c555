"""Empirical pre-training loss, analytic gradients and the streaming training loop."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import canonical_json
from .model import LsaParams, ReducedParams, forward_reduced, reduce, tokens
from .numerics import RngStream
from .tasks import PromptBatch, TaskSpec, draw_chunk


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GradReduced:
    d_w: np.ndarray
    d_M: np.ndarray


@dataclass(frozen=True)
class GradFull:
    d_WK: np.ndarray
    d_WQ: np.ndarray
    d_WV: np.ndarray
    d_h: np.ndarray


def _as_reduced(params) -> ReducedParams:
    return reduce(params) if isinstance(params, LsaParams) else params


def _targets(batch: PromptBatch, noiseless: bool) -> np.ndarray:
    return batch.y_query_clean if noiseless else batch.y_query


def residuals(params, batch: PromptBatch, noiseless: bool = False) -> np.ndarray:
    return forward_reduced(_as_reduced(params), batch) - _targets(batch, noiseless)


def empirical_loss(params, batch: PromptBatch, noiseless: bool = False) -> float:
    """Batch mean of ``(prediction - y_query)^2``.

    ``noiseless`` scores against the clean query label; it shifts the loss by
    a parameter-independent constant and is meant for evaluation only.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    e = residuals(params, batch, noiseless)
    return float(np.mean(e * e))


def per_instance_grad_reduced(r: ReducedParams, batch: PromptBatch):
    """Per-instance gradient pieces ``(2e G M v_q, 2e (G w) x_q^T)``."""
    z = tokens(batch)
    xq = batch.x_query
    gw = np.einsum("bni,bn->bi", z, z @ r.w)
    mv = xq @ r.M[:, :-1].T
    gmv = np.einsum("bni,bn->bi", z, np.einsum("bni,bi->bn", z, mv))
    e = np.einsum("bi,bi->b", gw, mv) - batch.y_query
    return 2 * e[:, None] * gmv, 2 * e[:, None, None] * gw[:, :, None] * xq[:, None, :]


def grad_reduced(r: ReducedParams, batch: PromptBatch) -> GradReduced:
    gw, gm = per_instance_grad_reduced(r, batch)
    d_M = np.zeros_like(r.M)
    d_M[:, :-1] = gm.mean(axis=0)
    return GradReduced(gw.mean(axis=0), d_M)


def chain_to_full(p: LsaParams, g: GradReduced) -> GradFull:
    """Pull a reduced gradient back through ``M = W_K^T W_Q``, ``w = W_V^T h``."""
    return GradFull(
        d_WK=p.W_Q @ g.d_M.T,
        d_WQ=p.W_K @ g.d_M,
        d_WV=np.outer(p.h, g.d_w),
        d_h=p.W_V @ g.d_w,
    )


def grad_full(p: LsaParams, batch: PromptBatch) -> GradFull:
    return chain_to_full(p, grad_reduced(reduce(p), batch))


def gradient(params, batch: PromptBatch):
    if isinstance(params, LsaParams):
        return grad_full(params, batch)
    return grad_reduced(params, batch)


def flatten(obj) -> np.ndarray:
    """Concatenate parameter or gradient arrays in declaration order."""
    if isinstance(obj, LsaParams):
        parts = [obj.W_K, obj.W_Q, obj.W_V, obj.h]
    elif isinstance(obj, ReducedParams):
        parts = [obj.w, obj.M]
    elif isinstance(obj, GradFull):
        parts = [obj.d_WK, obj.d_WQ, obj.d_WV, obj.d_h]
    elif isinstance(obj, GradReduced):
        parts = [obj.d_w, obj.d_M]
    else:
        raise TypeError(f"cannot flatten {type(obj).__name__}")
    return np.concatenate([np.ravel(a) for a in parts])


def unflatten(vec: np.ndarray, like):
    s = like.d + 1
    if isinstance(like, LsaParams):
        k = s * s
        return LsaParams(
            vec[:k].reshape(s, s), vec[k : 2 * k].reshape(s, s), vec[2 * k : 3 * k].reshape(s, s), vec[3 * k :].copy()
        )
    return ReducedParams(vec[:s].copy(), vec[s:].reshape(s, s))


def finite_diff_check(params, batch: PromptBatch, step: float = 1e-5) -> float:
    """Max over coordinates of ``|a - f| / (|a| + |f| + 1e-12)`` with central differences."""
    if step <= 0:
        raise ValueError("step must be > 0")
    analytic = flatten(gradient(params, batch))
    x0 = flatten(params)
    numeric = np.empty_like(x0)
    for j in range(x0.size):
        xp = x0.copy()
        xp[j] += step
        xm = x0.copy()
        xm[j] -= step
        numeric[j] = (empirical_loss(unflatten(xp, params), batch) - empirical_loss(unflatten(xm, params), batch)) / (
            2 * step
        )
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)))


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser settings; ``init_scale=None`` means ``0.1 / sqrt(d + 1)``.

    ``schedule="cosine"`` anneals the step size to zero over the run.
    """

    optimizer: str = "adam"
    step_size: float = 1e-3
    steps: int = 5000
    batch_size: int = 256
    init_scale: float | None = None
    seed: int = 0
    parameterization: str = "full"
    schedule: str = "cosine"
    log_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("adam", "plain-gd"):
            raise ValueError(f"optimizer must be 'adam' or 'plain-gd', got {self.optimizer!r}")
        if self.step_size < 0 or not np.isfinite(self.step_size):
            raise ValueError("step_size must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.parameterization not in ("full", "reduced"):
            raise ValueError("parameterization must be 'full' or 'reduced'")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def resolved_init_scale(self, d: int) -> float:
        return 0.1 / np.sqrt(d + 1) if self.init_scale is None else float(self.init_scale)


@dataclass
class TrainReport:
    loss_curve: list[tuple[int, float]]
    grad_norm_curve: list[tuple[int, float]]
    final_params: LsaParams | None
    final_reduced: ReducedParams
    config: TrainConfig
    spec: TaskSpec
    wall_time: float = field(default=0.0, compare=False)

    def canonical(self) -> dict:
        out = {
            "config": asdict(self.config),
            "spec": self.spec.to_dict(),
            "loss_curve": [[s, v] for s, v in self.loss_curve],
            "grad_norm_curve": [[s, v] for s, v in self.grad_norm_curve],
            "final_reduced": {"w": self.final_reduced.w, "M": self.final_reduced.M},
        }
        if self.final_params is not None:
            out["final_params"] = self.final_params.arrays()
        return out

    def to_json(self) -> str:
        return canonical_json(self.canonical())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss", "grad_norm"])
        for (s, loss), (_, g) in zip(self.loss_curve, self.grad_norm_curve):
            writer.writerow([s, repr(loss), repr(g)])
        return buf.getvalue()


def init_params(d: int, cfg: TrainConfig, rng: RngStream):
    gen = rng.generator()
    s = d + 1
    scale = cfg.resolved_init_scale(d)
    if cfg.parameterization == "full":
        return LsaParams(*(scale * gen.standard_normal((s, s)) for _ in range(3)), scale * gen.standard_normal(s))
    return ReducedParams(scale * gen.standard_normal(s), scale * gen.standard_normal((s, s)))


def train(
    spec: TaskSpec, cfg: TrainConfig, divergence_factor: float = 1e6, rng: RngStream | None = None
) -> TrainReport:
    """Stream a fresh batch every step and optimise the empirical loss.

    With ``root = rng or RngStream(cfg.seed)``, step ``t`` draws its batch
    from ``root.split(1).split(t)`` and initial parameters come from
    ``root.split(0)``. Raises
    :class:`TrainingDivergedError` once the batch loss exceeds
    ``divergence_factor`` times its first value.
    """
    t0 = time.perf_counter()
    root = rng if rng is not None else RngStream(cfg.seed)
    data = root.split(1)
    params = init_params(spec.d, cfg, root.split(0))
    x = flatten(params)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    loss_curve: list[tuple[int, float]] = []
    grad_curve: list[tuple[int, float]] = []
    first_loss = None
    for t in range(cfg.steps):
        batch = draw_chunk(spec, cfg.batch_size, data.split(t))
        current = unflatten(x, params)
        loss = empirical_loss(current, batch)
        g = flatten(gradient(current, batch))
        if first_loss is None:
            first_loss = max(loss, 1e-300)
        if not np.isfinite(loss) or loss > divergence_factor * first_loss:
            raise TrainingDivergedError(f"loss {loss:.3g} at step {t} exceeds {divergence_factor:g}x initial {first_loss:.3g}")
        if t % cfg.log_every == 0 or t == cfg.steps - 1:
            loss_curve.append((t, loss))
            grad_curve.append((t, float(np.linalg.norm(g))))
        lr = cfg.step_size
        if cfg.schedule == "cosine":
            lr = cfg.step_size * 0.5 * (1 + np.cos(np.pi * t / cfg.steps))
        if cfg.optimizer == "adam":
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** (t + 1))
            vhat = v / (1 - cfg.beta2 ** (t + 1))
            x = x - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        else:
            x = x - lr * g
    final = unflatten(x, params)
    full = final if isinstance(final, LsaParams) else None
    return TrainReport(
        loss_curve,
        grad_curve,
        full,
        _as_reduced(final),
        cfg,
        spec,
        wall_time=time.perf_counter() - t0,
    )

"""Monte Carlo estimators for the optimal step size and the supporting moment identities.

Every estimator draws prompts in fixed-size chunks; chunk ``i`` uses
``rng.split(i)`` and per-chunk moments are merged in chunk order, so results
do not depend on the worker count. Ratios are ratio-of-means with paired
(common random number) numerator and denominator samples.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import ReducedParams, tokens
from .numerics import RngStream, SingularMatrixError, ridge_solve_batch, spd_inverse
from .tasks import InvalidSpecError, MlpTargetSpec, PromptBatch, TaskKind, TaskSpec, draw_chunk

CHUNK = 8192
MIN_ETA_SAMPLES = 1000


@dataclass(frozen=True)
class Moments:
    """Sample mean and covariance of a vector statistic over ``n`` draws."""

    n: int
    mean: np.ndarray
    cov: np.ndarray
    chunk_sums: np.ndarray = field(repr=False)
    chunk_counts: np.ndarray = field(repr=False)

    @property
    def cov_of_mean(self) -> np.ndarray:
        return self.cov / self.n

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov_of_mean), 0.0))

    def ratio(self, i: int, j: int) -> tuple[float, float]:
        """Ratio of means ``mean[i] / mean[j]`` with delta-method stderr."""
        a, b = self.mean[i], self.mean[j]
        c = self.cov_of_mean
        r = a / b
        var = (c[i, i] - 2 * r * c[i, j] + r * r * c[j, j]) / (b * b)
        return float(r), float(np.sqrt(max(var, 0.0)))

    def jackknife_ratio(self, i: int, j: int) -> float:
        """Delete-one-chunk jackknife stderr of ``mean[i] / mean[j]``."""
        k = len(self.chunk_counts)
        if k < 2:
            return float("nan")
        tot = self.chunk_sums.sum(axis=0)
        # only the last chunk can differ in size; the unweighted form is adequate
        loo = np.array([(tot[i] - self.chunk_sums[c, i]) / (tot[j] - self.chunk_sums[c, j]) for c in range(k)])
        return float(np.sqrt((k - 1) / k * np.sum((loo - loo.mean()) ** 2)))


def _chunk_sizes(samples: int, chunk: int) -> list[int]:
    full, rest = divmod(samples, chunk)
    return [chunk] * full + ([rest] if rest else [])


def monte_carlo(
    spec: TaskSpec,
    samples: int,
    rng: RngStream,
    stat: Callable[[PromptBatch], np.ndarray],
    workers: int = 1,
    chunk: int = CHUNK,
    extra_queries: int = 0,
) -> Moments:
    """Mean and covariance of ``stat(batch)`` (shape ``(B, k)``) over ``samples`` prompts."""
    if samples < 2:
        raise ValueError("need at least 2 samples")
    sizes = _chunk_sizes(samples, chunk)

    def run(i):
        s = np.asarray(stat(draw_chunk(spec, sizes[i], rng.split(i), extra_queries)), dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        mu = s.mean(axis=0)
        c = s - mu
        return s.shape[0], mu, c.T @ c, s.sum(axis=0)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(i) for i in range(len(sizes))]

    # Chan et al. pairwise merge, applied in chunk order.
    n, mean, m2, _ = parts[0]
    for nb, mb, m2b, _ in parts[1:]:
        delta = mb - mean
        tot = n + nb
        mean = mean + delta * (nb / tot)
        m2 = m2 + m2b + np.outer(delta, delta) * (n * nb / tot)
        n = tot
    return Moments(
        n=n,
        mean=mean,
        cov=m2 / (n - 1),
        chunk_sums=np.array([p[3] for p in parts]),
        chunk_counts=np.array([p[0] for p in parts]),
    )


# --- per-prompt statistics -------------------------------------------------


def xty(batch: PromptBatch) -> np.ndarray:
    return np.einsum("bni,bn->bi", batch.X, batch.y)


def bayes_weights(batch: PromptBatch) -> np.ndarray:
    """Posterior-mean weights ``(X^T X + sigma^2 Sigma)^{-1} X^T y`` (``Sigma = I`` if isotropic)."""
    spec = batch.spec
    if not spec.is_linear:
        raise InvalidSpecError("ridge weights are only defined for linear tasks")
    lam = spec.sigma**2
    if lam == 0 and spec.n < spec.d:
        raise SingularMatrixError("sigma = 0 with n < d makes the ridge system singular")
    return ridge_solve_batch(batch.X, batch.y, lam, reg=spec.cov)


def query_surrogate(batch: PromptBatch) -> np.ndarray:
    """``y_q x_q``: its conditional mean given the prefix is the best linear predictor."""
    return batch.y_query[:, None] * batch.x_query


# --- eta --------------------------------------------------------------------


@dataclass(frozen=True)
class EtaEstimate:
    value: float
    stderr: float
    num_samples: int
    numerator_mean: float
    denominator_mean: float
    jackknife_stderr: float | None = None

    @property
    def sign_flag(self) -> str:
        """``"nonpositive"`` when the estimate is <= 0 beyond 4 stderr."""
        if self.value <= 0 and abs(self.value) > 4 * self.stderr:
            return "nonpositive"
        if self.value > 4 * self.stderr:
            return "positive"
        return "indeterminate"

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "stderr": self.stderr,
            "num_samples": self.num_samples,
            "numerator_mean": self.numerator_mean,
            "denominator_mean": self.denominator_mean,
            "jackknife_stderr": self.jackknife_stderr,
            "sign_flag": self.sign_flag,
        }


def _eta_from(mom: Moments, jackknife: bool) -> EtaEstimate:
    value, se = mom.ratio(0, 1)
    return EtaEstimate(
        value=value,
        stderr=se,
        num_samples=mom.n,
        numerator_mean=float(mom.mean[0]),
        denominator_mean=float(mom.mean[1]),
        jackknife_stderr=mom.jackknife_ratio(0, 1) if jackknife else None,
    )


def eta_statistic(batch: PromptBatch) -> np.ndarray:
    """Per-prompt ``(numerator, denominator)`` of the optimal step size.

    Linear kinds use the Bayes weights in the numerator and ``X^T y`` weighted
    by ``Sigma^{-1}`` in the denominator; the nonlinear kind replaces the
    numerator by ``y_q x_q^T X^T y`` (same expectation by the tower property).
    """
    spec = batch.spec
    v = xty(batch)
    if spec.kind is TaskKind.NONLINEAR:
        num = np.einsum("bi,bi->b", query_surrogate(batch), v)
    else:
        num = np.einsum("bi,bi->b", bayes_weights(batch), v)
    if spec.kind is TaskKind.SKEWED:
        den = np.einsum("bi,ij,bj->b", v, spd_inverse(spec.cov), v)
    else:
        den = np.einsum("bi,bi->b", v, v)
    return np.stack([num, den], axis=1)


def estimate_eta(
    spec: TaskSpec, samples: int, rng: RngStream, workers: int = 1, jackknife: bool = False
) -> EtaEstimate:
    if samples < MIN_ETA_SAMPLES:
        raise ValueError(f"samples must be >= {MIN_ETA_SAMPLES}, got {samples}")
    if spec.is_linear and spec.sigma == 0 and spec.n < spec.d:
        raise SingularMatrixError("sigma = 0 with n < d makes the ridge system singular")
    return _eta_from(monte_carlo(spec, samples, rng, eta_statistic, workers), jackknife)


def estimate_eta_linear(d, n, sigma, samples, rng, workers=1, jackknife=False) -> EtaEstimate:
    return estimate_eta(TaskSpec.isotropic(d, n, sigma), samples, rng, workers, jackknife)


def estimate_eta_skewed(sigma_mat, n, sigma, samples, rng, workers=1, jackknife=False) -> EtaEstimate:
    return estimate_eta(TaskSpec.skewed(sigma_mat, n, sigma), samples, rng, workers, jackknife)


def estimate_eta_nonlinear(
    target: MlpTargetSpec, d, n, sigma, samples, rng, workers=1, jackknife=False
) -> EtaEstimate:
    if target.layer_widths[0] != d:
        raise InvalidSpecError("first target width must equal d")
    return estimate_eta(TaskSpec.nonlinear(target, n, sigma), samples, rng, workers, jackknife)


def eta_closed_form_noiseless(d: int, n: int) -> float:
    """``1 / (n + d + 1)``: the optimal step for sigma = 0, isotropic data."""
    return 1.0 / (n + d + 1)


# --- isotropy ---------------------------------------------------------------

ISOTROPY_KINDS = ("YYT", "YRIDGE", "YUBAR")


@dataclass(frozen=True)
class IsotropyReport:
    kind: str
    matrix_mean: np.ndarray
    c_estimate: float
    max_offdiag_abs: float
    per_entry_stderr: np.ndarray
    max_offdiag_z: float
    max_diag_diff_z: float
    num_samples: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _cross_factor(kind: str, batch: PromptBatch) -> np.ndarray:
    if kind == "YYT":
        return xty(batch)
    if kind == "YRIDGE":
        return bayes_weights(batch)
    if kind == "YUBAR":
        return query_surrogate(batch)
    raise ValueError(f"unknown isotropy statistic {kind!r}; expected one of {ISOTROPY_KINDS}")


def moment_matrix(kind: str, spec: TaskSpec, samples: int, rng: RngStream, workers: int = 1) -> IsotropyReport:
    """Entrywise MC estimate of ``E[X^T y b^T]`` with ``b`` chosen by ``kind``.

    Unlike :func:`check_isotropy` this accepts any task kind, which makes it
    usable as a negative control on skewed data.
    """
    if kind not in ISOTROPY_KINDS:
        raise ValueError(f"unknown isotropy statistic {kind!r}; expected one of {ISOTROPY_KINDS}")
    d = spec.d

    def stat(batch):
        a = xty(batch)
        b = _cross_factor(kind, batch)
        return np.einsum("bi,bj->bij", a, b).reshape(len(batch), d * d)

    mom = monte_carlo(spec, samples, rng, stat, workers)
    mean = mom.mean.reshape(d, d)
    se = mom.stderr.reshape(d, d)
    c = mom.cov_of_mean
    off = ~np.eye(d, dtype=bool)
    max_off = float(np.max(np.abs(mean[off]))) if d > 1 else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        off_z = float(np.max(np.abs(mean[off]) / se[off])) if d > 1 else 0.0
    diag_idx = [i * d + i for i in range(d)]
    diff_z = 0.0
    for a in range(d):
        for b in range(a + 1, d):
            ia, ib = diag_idx[a], diag_idx[b]
            var = c[ia, ia] + c[ib, ib] - 2 * c[ia, ib]
            diff_z = max(diff_z, abs(mom.mean[ia] - mom.mean[ib]) / np.sqrt(max(var, 1e-300)))
    return IsotropyReport(
        kind=kind,
        matrix_mean=mean,
        c_estimate=float(np.mean(np.diag(mean))),
        max_offdiag_abs=max_off,
        per_entry_stderr=se,
        max_offdiag_z=off_z,
        max_diag_diff_z=float(diff_z),
        num_samples=mom.n,
    )


def _require_rotation_invariant(spec: TaskSpec, what: str):
    if spec.kind is TaskKind.SKEWED:
        raise InvalidSpecError(f"{what} requires an isotropic or nonlinear task; the identity fails for skewed covariance")


def check_isotropy(kind: str, spec: TaskSpec, samples: int, rng: RngStream, workers: int = 1) -> IsotropyReport:
    _require_rotation_invariant(spec, "check_isotropy")
    if kind == "YRIDGE" and not spec.is_linear:
        raise InvalidSpecError("YRIDGE needs a linear task; use YUBAR for nonlinear targets")
    return moment_matrix(kind, spec, samples, rng, workers)


# --- trace identity -----------------------------------------------------------


def _target_weights(batch: PromptBatch) -> np.ndarray:
    return bayes_weights(batch) if batch.spec.is_linear else query_surrogate(batch)


def check_trace_identity(
    spec: TaskSpec,
    samples: int,
    rng: RngStream,
    eta: float | None = None,
    eta_scale: float = 1.0,
    workers: int = 1,
) -> float:
    """``|eta c1 - c2|`` in standard-error units.

    ``c1 = tr E[X^T y y^T X] / d`` and ``c2 = tr E[X^T y t^T] / d`` with ``t``
    the ridge weights (linear) or the query surrogate (nonlinear). If ``eta``
    is omitted it is estimated on an independent stream and its uncertainty
    is propagated.
    """
    _require_rotation_invariant(spec, "check_trace_identity")
    eta_var = 0.0
    if eta is None:
        est = estimate_eta(spec, samples, rng.split(1), workers)
        eta, eta_var = est.value, est.stderr**2
    eta_used = eta * eta_scale
    eta_var *= eta_scale**2

    def stat(batch):
        v = xty(batch)
        return np.stack([np.einsum("bi,bi->b", _target_weights(batch), v), np.einsum("bi,bi->b", v, v)], axis=1)

    mom = monte_carlo(spec, samples, rng.split(0), stat, workers)
    n_bar, d_bar = mom.mean
    c = mom.cov_of_mean
    resid = (eta_used * d_bar - n_bar) / spec.d
    var = (eta_used**2 * c[1, 1] + c[0, 0] - 2 * eta_used * c[0, 1] + d_bar**2 * eta_var) / spec.d**2
    return float(abs(resid) / np.sqrt(var))


# --- loss-difference constancy ----------------------------------------------


@dataclass(frozen=True)
class ConstancyReport:
    probe_count: int
    differences: list[float]
    spread: float
    mean_scale: float
    eta: float

    @property
    def relative_spread(self) -> float:
        return self.spread / self.mean_scale

    def to_dict(self) -> dict:
        return {
            "probe_count": self.probe_count,
            "differences": list(self.differences),
            "spread": self.spread,
            "mean_scale": self.mean_scale,
            "relative_spread": self.relative_spread,
            "eta": self.eta,
        }


def default_probe_scale(d: int, n: int) -> float:
    """Entry scale making ``A G w`` O(1): entries of size ``(n sqrt(d))^{-1/2}``."""
    return float((n * np.sqrt(d)) ** -0.5)


def sample_probes(
    d: int, n: int, count: int, rng: RngStream, eta: float, jitter: float = 0.25, max_gain: float = 2.0
) -> list[ReducedParams]:
    """Probes spread along the one-step-GD family plus a random perturbation.

    Probe ``i`` is ``w = [0; sqrt(eta)]``, ``M = diag(g_i sqrt(eta) I, 0)`` with
    gains ``g_i`` evenly spaced over ``(0, max_gain)``, plus i.i.d. Gaussian
    noise of size ``jitter * default_probe_scale(d, n)`` on every entry.
    Spreading the gain makes ``J1 - J2`` depend on the probe whenever the
    ``eta`` in ``J2`` is off.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if eta <= 0:
        raise ValueError("probe family needs eta > 0")
    gen = rng.generator()
    s = jitter * default_probe_scale(d, n)
    root = np.sqrt(eta)
    out = []
    for i in range(count):
        g = max_gain * (i + 0.5) / count
        w = np.zeros(d + 1)
        w[d] = root
        M = np.zeros((d + 1, d + 1))
        M[:d, :d] = g * root * np.eye(d)
        out.append(ReducedParams(w + s * gen.standard_normal(d + 1), M + s * gen.standard_normal((d + 1, d + 1))))
    return out


def sample_isotropic_probes(d: int, count: int, scale: float, rng: RngStream) -> list[ReducedParams]:
    """I.i.d. Gaussian ``(w, M)`` entries of size ``scale``."""
    gen = rng.generator()
    return [
        ReducedParams(scale * gen.standard_normal(d + 1), scale * gen.standard_normal((d + 1, d + 1)))
        for _ in range(count)
    ]


def check_loss_constancy(
    spec: TaskSpec,
    probes: int,
    samples: int,
    rng: RngStream,
    eta: float | None = None,
    eta_scale: float = 1.0,
    probe_params: Sequence[ReducedParams] | None = None,
    workers: int = 1,
) -> ConstancyReport:
    """Evaluate ``J1 - J2`` for ``probes`` parameter settings on one shared prompt sample.

    ``J1 = E||A G w - t||^2`` with ``t`` the ridge weights (linear) or the
    conditional mean ``E[y_q x_q | prefix]`` (nonlinear); ``J2`` targets
    ``eta X^T y``. For nonlinear tasks ``||t||^2`` is estimated without bias
    from two independent queries on the same task. The expected outcome is a
    probe-independent difference. ``eta`` is estimated on ``rng.split(1)`` if
    omitted; probes come from :func:`sample_probes` on ``rng.split(2)``.
    """
    _require_rotation_invariant(spec, "check_loss_constancy")
    if eta is None:
        eta = estimate_eta(spec, 2 * samples, rng.split(1), workers).value
    if probe_params is None:
        if probes < 8:
            raise ValueError("probes must be >= 8")
        probe_params = sample_probes(spec.d, spec.n, probes, rng.split(2), eta)
    eta_used = eta * eta_scale
    k = len(probe_params)
    W = np.stack([p.w for p in probe_params])  # (k, d+1)
    A = np.stack([p.M[:, :-1] for p in probe_params])  # (k, d+1, d): A^T per probe
    linear = spec.is_linear

    def stat(batch):
        z = tokens(batch)
        gw = np.einsum("bni,bnk->bki", z, z @ W.T)  # (B, k, d+1)
        agw = np.einsum("bki,kij->bkj", gw, A)  # (B, k, d)
        v = eta_used * xty(batch)[:, None, :]
        j2 = np.sum((agw - v) ** 2, axis=2)
        if linear:
            j1 = np.sum((agw - bayes_weights(batch)[:, None, :]) ** 2, axis=2)
        else:
            t = query_surrogate(batch)
            t_sq = np.einsum("bi,bi->b", t, batch.y_extra[:, 0, None] * batch.x_extra[:, 0])
            j1 = np.sum(agw * agw, axis=2) - 2 * np.einsum("bkj,bj->bk", agw, t) + t_sq[:, None]
        return np.concatenate([j1, j2], axis=1)

    mom = monte_carlo(spec, samples, rng.split(0), stat, workers, extra_queries=0 if linear else 1)
    j1, j2 = mom.mean[:k], mom.mean[k:]
    diffs = j1 - j2
    return ConstancyReport(
        probe_count=k,
        differences=[float(x) for x in diffs],
        spread=float(np.std(diffs, ddof=1)),
        mean_scale=float(np.mean(np.abs(j1))),
        eta=float(eta_used),
    )


# --- odd / even moments ---------------------------------------------------------


@dataclass(frozen=True)
class MomentReport:
    names: list[str]
    means: np.ndarray
    stderrs: np.ndarray
    num_samples: int
    odd_names: list[str]

    def z(self, name: str) -> float:
        i = self.names.index(name)
        return float(abs(self.means[i]) / self.stderrs[i])

    def get(self, name: str) -> tuple[float, float]:
        i = self.names.index(name)
        return float(self.means[i]), float(self.stderrs[i])

    @property
    def max_odd_z(self) -> float:
        """Largest |mean| / stderr among statistics that vanish by sign symmetry."""
        return max(self.z(nm) for nm in self.odd_names)

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "max_odd_z": self.max_odd_z,
            "moments": {nm: {"mean": float(m), "stderr": float(s)} for nm, m, s in zip(self.names, self.means, self.stderrs)},
        }


def check_odd_even_moments(spec: TaskSpec, samples: int, rng: RngStream, workers: int = 1) -> MomentReport:
    """Moments of the support labels that sign symmetry forces to zero, plus ``E[y_1^2]``."""
    _require_rotation_invariant(spec, "check_odd_even_moments")
    d = spec.d
    names = ["y1", "y1^3", "y1^2"]
    if spec.n >= 2:
        names.append("y1*y2")
    names += [f"y1^2*yq*xq[{i}]" for i in range(d)]
    odd = ["y1", "y1^3"] + [f"y1^2*yq*xq[{i}]" for i in range(d)]

    def stat(batch):
        y1 = batch.y[:, 0]
        cols = [y1, y1**3, y1**2]
        if spec.n >= 2:
            cols.append(y1 * batch.y[:, 1])
        surr = (y1**2)[:, None] * query_surrogate(batch)
        return np.column_stack(cols + [surr[:, i] for i in range(d)])

    mom = monte_carlo(spec, samples, rng, stat, workers)
    return MomentReport(names, mom.mean, mom.stderr, mom.n, odd)

"""Prompt generators for the isotropic, skewed-covariance and nonlinear task families."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np

from .io import decode_array, encode_array
from .numerics import RngStream, check_spd, spd_inv_sqrt, spd_sqrt

BATCH_MAGIC = "ICLGD-PROMPTBATCH"
BATCH_VERSION = 1

ACTIVATIONS = {
    "tanh": np.tanh,
    "relu": lambda z: np.maximum(z, 0.0),
}


class InvalidSpecError(ValueError):
    pass


class TaskKind(str, Enum):
    ISOTROPIC = "isotropic"
    SKEWED = "skewed"
    NONLINEAR = "nonlinear"


@dataclass(frozen=True)
class MlpTargetSpec:
    """Bias-free random MLP family; every layer has i.i.d. N(0, 1) weights.

    ``output_scale`` multiplies the last layer; 0 gives the constant-zero target.
    """

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    output_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise InvalidSpecError("an MLP target needs at least 2 layer widths")
        if self.layer_widths[-1] != 1:
            raise InvalidSpecError("last layer width must be 1")
        if min(self.layer_widths) < 1:
            raise InvalidSpecError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpecError(f"unknown activation {self.activation!r}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        w = self.layer_widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]


@dataclass(frozen=True)
class TargetFunction:
    weights: tuple[np.ndarray, ...]
    activation: str = "tanh"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return evaluate_target(self, x)


def evaluate_target(f: TargetFunction, x: np.ndarray) -> np.ndarray | float:
    """Forward pass of a bias-free MLP; ``x`` is ``(d,)`` or ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != f.weights[0].shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match target width {f.weights[0].shape[1]}")
    act = ACTIVATIONS[f.activation]
    h = x
    for i, W in enumerate(f.weights):
        h = h @ W.T
        if i < len(f.weights) - 1:
            h = act(h)
    out = h[..., 0]
    return float(out) if out.ndim == 0 else out


def sample_target(target: MlpTargetSpec, rng: RngStream) -> TargetFunction:
    gen = rng.generator()
    weights = [gen.standard_normal(s) for s in target.shapes]
    weights[-1] = target.output_scale * weights[-1]
    return TargetFunction(tuple(weights), target.activation)


@dataclass(frozen=True, eq=False)
class TaskSpec:
    kind: TaskKind
    d: int
    n: int
    sigma: float
    cov: np.ndarray | None = None
    target: MlpTargetSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.d < 1:
            raise InvalidSpecError(f"d must be >= 1, got {self.d}")
        if self.n < 1:
            raise InvalidSpecError(f"n must be >= 1, got {self.n}")
        if not (self.sigma >= 0 and np.isfinite(self.sigma)):
            raise InvalidSpecError(f"sigma must be finite and >= 0, got {self.sigma}")
        if self.kind is TaskKind.SKEWED:
            if self.cov is None:
                raise InvalidSpecError("skewed task needs a covariance matrix")
            cov = np.array(self.cov, dtype=float)
            if cov.shape != (self.d, self.d):
                raise InvalidSpecError(f"covariance must be {self.d}x{self.d}, got {cov.shape}")
            check_spd(cov, "covariance")
            cov.setflags(write=False)
            object.__setattr__(self, "cov", cov)
        elif self.cov is not None:
            raise InvalidSpecError("covariance is only valid for skewed tasks")
        if self.kind is TaskKind.NONLINEAR:
            if self.target is None:
                raise InvalidSpecError("nonlinear task needs an MLP target")
            if self.target.layer_widths[0] != self.d:
                raise InvalidSpecError("first target width must equal d")
        elif self.target is not None:
            raise InvalidSpecError("MLP target is only valid for nonlinear tasks")

    @classmethod
    def isotropic(cls, d: int, n: int, sigma: float) -> TaskSpec:
        return cls(TaskKind.ISOTROPIC, d, n, sigma)

    @classmethod
    def skewed(cls, cov: np.ndarray, n: int, sigma: float) -> TaskSpec:
        cov = np.asarray(cov, dtype=float)
        return cls(TaskKind.SKEWED, cov.shape[0], n, sigma, cov=cov)

    @classmethod
    def nonlinear(cls, target: MlpTargetSpec, n: int, sigma: float) -> TaskSpec:
        return cls(TaskKind.NONLINEAR, target.layer_widths[0], n, sigma, target=target)

    @cached_property
    def cov_sqrt(self) -> np.ndarray:
        return spd_sqrt(self.cov)

    @cached_property
    def cov_inv_sqrt(self) -> np.ndarray:
        return spd_inv_sqrt(self.cov)

    @property
    def is_linear(self) -> bool:
        return self.kind is not TaskKind.NONLINEAR

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "d": self.d, "n": self.n, "sigma": self.sigma}
        if self.cov is not None:
            out["cov"] = self.cov.tolist()
        if self.target is not None:
            out["target"] = {
                "layer_widths": list(self.target.layer_widths),
                "activation": self.target.activation,
                "output_scale": self.target.output_scale,
            }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> TaskSpec:
        target = data.get("target")
        return cls(
            TaskKind(data["kind"]),
            int(data["d"]),
            int(data["n"]),
            float(data["sigma"]),
            cov=None if data.get("cov") is None else np.asarray(data["cov"], dtype=float),
            target=None
            if target is None
            else MlpTargetSpec(
                tuple(target["layer_widths"]), target["activation"], float(target.get("output_scale", 1.0))
            ),
        )

    def __eq__(self, other):
        if not isinstance(other, TaskSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))


@dataclass(frozen=True, eq=False)
class PromptInstance:
    X: np.ndarray
    y: np.ndarray
    x_query: np.ndarray
    y_query: float
    ground_truth: np.ndarray | None = None
    y_query_clean: float | None = None


@dataclass(frozen=True, eq=False)
class PromptBatch:
    """Array-backed batch of prompts; axis 0 indexes instances.

    ``X`` is ``(B, n, d)``, ``y`` is ``(B, n)``, ``x_query`` is ``(B, d)`` and
    ``y_query`` is ``(B,)``. ``y_query_clean`` holds the noiseless query label
    and ``ground_truth`` the per-prompt weight vector (linear kinds only).
    ``x_extra`` ``(B, k, d)`` and ``y_extra`` ``(B, k)`` optionally hold further
    independent query draws from the same task; they are not serialised.
    """

    spec: TaskSpec
    X: np.ndarray
    y: np.ndarray
    x_query: np.ndarray
    y_query: np.ndarray
    y_query_clean: np.ndarray
    ground_truth: np.ndarray | None = None
    x_extra: np.ndarray | None = None
    y_extra: np.ndarray | None = None

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, k: int) -> PromptInstance:
        return PromptInstance(
            self.X[k],
            self.y[k],
            self.x_query[k],
            float(self.y_query[k]),
            None if self.ground_truth is None else self.ground_truth[k],
            float(self.y_query_clean[k]),
        )

    @property
    def instances(self) -> list[PromptInstance]:
        return [self[k] for k in range(len(self))]

    def subset(self, idx) -> PromptBatch:
        return PromptBatch(
            self.spec,
            self.X[idx],
            self.y[idx],
            self.x_query[idx],
            self.y_query[idx],
            self.y_query_clean[idx],
            None if self.ground_truth is None else self.ground_truth[idx],
            None if self.x_extra is None else self.x_extra[idx],
            None if self.y_extra is None else self.y_extra[idx],
        )

    @classmethod
    def stack(cls, spec: TaskSpec, batches: Sequence[PromptBatch]) -> PromptBatch:
        def cat(name):
            if getattr(batches[0], name) is None:
                return None
            return np.concatenate([getattr(b, name) for b in batches])

        return cls(
            spec,
            np.concatenate([b.X for b in batches]),
            np.concatenate([b.y for b in batches]),
            np.concatenate([b.x_query for b in batches]),
            np.concatenate([b.y_query for b in batches]),
            np.concatenate([b.y_query_clean for b in batches]),
            cat("ground_truth"),
            cat("x_extra"),
            cat("y_extra"),
        )


def draw_prompts(spec: TaskSpec, count: int, gen: np.random.Generator, extra_queries: int = 0) -> PromptBatch:
    """Vectorised draw of ``count`` prompts from one generator.

    Draw order is fixed: support inputs, query inputs, task (weight vector or
    MLP weights), support noise, query noise, then the optional extra queries
    (inputs, noise). Requesting extra queries leaves every other array unchanged.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if extra_queries < 0:
        raise ValueError("extra_queries must be >= 0")
    d, n = spec.d, spec.n
    X = gen.standard_normal((count, n, d))
    xq = gen.standard_normal((count, d))
    w = None
    if spec.kind is TaskKind.NONLINEAR:
        weights = [gen.standard_normal((count,) + s) for s in spec.target.shapes]
        weights[-1] = spec.target.output_scale * weights[-1]
        act = ACTIVATIONS[spec.target.activation]

        def f(pts):
            h = pts
            for i, W in enumerate(weights):
                h = np.einsum("bpi,boi->bpo", h, W)
                if i < len(weights) - 1:
                    h = act(h)
            return h[..., 0]

        vals = f(np.concatenate([X, xq[:, None, :]], axis=1))
        clean, clean_q = vals[:, :n], vals[:, n]
    else:
        w = gen.standard_normal((count, d))
        if spec.kind is TaskKind.SKEWED:
            X = X @ spec.cov_sqrt
            xq = xq @ spec.cov_sqrt
            w = w @ spec.cov_inv_sqrt

        def f(pts):
            return np.einsum("bpd,bd->bp", pts, w)

        clean = f(X)
        clean_q = np.einsum("bd,bd->b", xq, w)
    y = clean + spec.sigma * gen.standard_normal((count, n))
    yq = clean_q + spec.sigma * gen.standard_normal(count)
    x_extra = y_extra = None
    if extra_queries:
        x_extra = gen.standard_normal((count, extra_queries, d))
        if spec.kind is TaskKind.SKEWED:
            x_extra = x_extra @ spec.cov_sqrt
        y_extra = f(x_extra) + spec.sigma * gen.standard_normal((count, extra_queries))
    return PromptBatch(spec, X, y, xq, yq, clean_q, w, x_extra, y_extra)


def sample_prompt(spec: TaskSpec, rng: RngStream) -> PromptInstance:
    return draw_prompts(spec, 1, rng.generator())[0]


def sample_batch(spec: TaskSpec, count: int, rng: RngStream, workers: int = 1) -> PromptBatch:
    """``count`` prompts where instance ``k`` is drawn from ``rng.split(k)``."""
    if count < 1:
        raise ValueError("count must be >= 1")

    def one(k):
        return draw_prompts(spec, 1, rng.split(k).generator())

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, range(count)))
    else:
        parts = [one(k) for k in range(count)]
    return PromptBatch.stack(spec, parts)


def draw_chunk(spec: TaskSpec, count: int, rng: RngStream, extra_queries: int = 0) -> PromptBatch:
    """Fast path for Monte Carlo: one generator for the whole chunk."""
    return draw_prompts(spec, count, rng.generator(), extra_queries)


def batch_to_json(batch: PromptBatch) -> str:
    arrays = {
        "X": batch.X,
        "y": batch.y,
        "x_query": batch.x_query,
        "y_query": batch.y_query,
        "y_query_clean": batch.y_query_clean,
    }
    if batch.ground_truth is not None:
        arrays["ground_truth"] = batch.ground_truth
    doc = {
        "magic": BATCH_MAGIC,
        "version": BATCH_VERSION,
        "spec": batch.spec.to_dict(),
        "count": len(batch),
        "arrays": {k: encode_array(v) for k, v in arrays.items()},
    }
    return json.dumps(doc)


def batch_from_json(text: str) -> PromptBatch:
    doc = json.loads(text)
    if doc.get("magic") != BATCH_MAGIC:
        raise ValueError("not a prompt batch file (bad magic)")
    if doc.get("version") != BATCH_VERSION:
        raise ValueError(f"unsupported prompt batch version {doc.get('version')}")
    arr = {k: decode_array(v) for k, v in doc["arrays"].items()}
    return PromptBatch(
        TaskSpec.from_dict(doc["spec"]),
        arr["X"],
        arr["y"],
        arr["x_query"],
        arr["y_query"],
        arr["y_query_clean"],
        arr.get("ground_truth"),
    )

"""Black-box proposers over flattened per-class contact parameter vectors.

Vectors stack (sliding_friction, armature, stiffness, damping) per class in
canonical class order; masses are fixed and never optimized.  Every proposer
emits in-bounds vectors of the right dimension and is deterministic under a
seeded generator (and a replayed client, for the model-driven proposer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .physics import CLASSES, CLASS_ORDER, PhysicsParams
from .scene_dsl import ProgramParseError, extract_class_params, parse_program

__all__ = [
    "PARAM_FIELDS",
    "Bounds",
    "bounds_for_classes",
    "flatten_params",
    "unflatten_params",
    "OptimizerStepError",
    "TracePoint",
    "OptTrace",
    "RandomProposer",
    "ScriptedProposer",
    "CMAES",
    "CMAESProposer",
    "gp_bo_propose",
    "GPBOProposer",
    "LLMProposer",
]

PARAM_FIELDS = ("sliding_friction", "armature", "stiffness", "damping")

# (lower, upper, lower_open, upper_open) per field, matching generation.
_FIELD_BOUNDS = {
    "sliding_friction": (0.1, 1.0, True, False),
    "armature": (0.0, 1.0, True, True),
    "stiffness": (0.0, 1.0, True, True),
    "damping": (0.0, 10.0, True, True),
}

_OPEN_EPS = 1e-9
_GRID = 0.1


class OptimizerStepError(RuntimeError):
    """A proposer failed to produce a usable vector for this iteration."""


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray
    lower_open: np.ndarray
    upper_open: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def clamp(self, x: np.ndarray) -> np.ndarray:
        lo = self.lower + np.where(self.lower_open, _OPEN_EPS, 0.0)
        hi = self.upper - np.where(self.upper_open, _OPEN_EPS, 0.0)
        return np.clip(np.asarray(x, dtype=float), lo, hi)

    def clamp_to_grid(self, x: np.ndarray) -> np.ndarray:
        """Round to one decimal, then snap onto the open-interval grid."""
        v = np.round(np.asarray(x, dtype=float), 1)
        lo_grid = self.lower + np.where(self.lower_open, _GRID, 0.0)
        hi_grid = self.upper - np.where(self.upper_open, _GRID, 0.0)
        return np.round(np.clip(v, lo_grid, hi_grid), 1)

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=float)
        above = np.where(self.lower_open, x > self.lower, x >= self.lower)
        below = np.where(self.upper_open, x < self.upper, x <= self.upper)
        return bool(np.all(above) and np.all(below))


def bounds_for_classes(class_names) -> tuple[tuple, Bounds]:
    """Canonically ordered class tuple plus the stacked coordinate bounds."""
    ordered = tuple(c for c in CLASS_ORDER if c in set(class_names))
    lo, hi, lo_open, hi_open = [], [], [], []
    for _ in ordered:
        for f in PARAM_FIELDS:
            a, b, ao, bo = _FIELD_BOUNDS[f]
            lo.append(a)
            hi.append(b)
            lo_open.append(ao)
            hi_open.append(bo)
    return ordered, Bounds(
        lower=np.array(lo), upper=np.array(hi),
        lower_open=np.array(lo_open), upper_open=np.array(hi_open),
    )


def flatten_params(class_params: dict, classes) -> np.ndarray:
    values = []
    for cls in classes:
        p = class_params[cls]
        values.extend([p.sliding_friction, p.armature, p.stiffness, p.damping])
    return np.array(values, dtype=float)


def unflatten_params(vector, classes) -> dict:
    vector = np.asarray(vector, dtype=float)
    if vector.shape[0] != 4 * len(classes):
        raise ValueError(f"expected {4 * len(classes)} coordinates, got {vector.shape[0]}")
    out = {}
    for i, cls in enumerate(classes):
        f, a, s, d = vector[4 * i : 4 * i + 4]
        out[cls] = PhysicsParams(
            sliding_friction=float(f), armature=float(a), stiffness=float(s),
            damping=float(d), mass=CLASSES[cls].default_mass,
        )
    return out


@dataclass(frozen=True)
class TracePoint:
    """One evaluated proposal: the vector, its per-object errors and their
    mean, plus the (possibly noise-injected) values shown to the optimizer."""

    vector: tuple
    per_object_error: dict  # class or id -> error
    total_error: float
    feedback_per_object: dict
    feedback_total: float
    class_params: dict | None = None


@dataclass
class OptTrace:
    points: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    def append(self, point: TracePoint) -> None:
        self.points.append(point)

    @property
    def best_index(self) -> int:
        if not self.points:
            raise ValueError("empty trace has no best point")
        errs = [p.total_error for p in self.points]
        return errs.index(min(errs))

    @property
    def best(self) -> TracePoint:
        return self.points[self.best_index]

    def vectors(self) -> np.ndarray:
        return np.array([p.vector for p in self.points], dtype=float)

    def feedback_values(self) -> np.ndarray:
        return np.array([p.feedback_total for p in self.points], dtype=float)


class RandomProposer:
    """Uniform per-coordinate sampling on the one-decimal grid."""

    def propose(self, trace: OptTrace, bounds: Bounds, rng) -> np.ndarray:
        raw = rng.uniform(bounds.lower, bounds.upper)
        return bounds.clamp_to_grid(raw)


class ScriptedProposer:
    """Deterministic test double: replays a fixed list of vectors."""

    def __init__(self, script):
        script = [np.asarray(v, dtype=float) for v in script]
        if not script:
            raise ValueError("script must be nonempty")
        self.script = script

    def propose(self, trace: OptTrace, bounds: Bounds, rng) -> np.ndarray:
        idx = min(len(trace), len(self.script) - 1)
        return bounds.clamp(self.script[idx])


class CMAES:
    """Covariance matrix adaptation evolution strategy (ask/tell form).

    Standard reference defaults: lambda = 4 + floor(3 ln n), log-linear
    recombination weights, cumulative step-size adaptation, rank-1 plus
    rank-mu covariance updates.  Candidates are clamped coordinate-wise to
    the given bounds.
    """

    def __init__(self, mean, sigma: float, bounds: Bounds | None = None,
                 popsize: int | None = None, seed: int = 0):
        self.mean = np.asarray(mean, dtype=float).copy()
        n = self.mean.shape[0]
        self.n = n
        self.sigma = float(sigma)
        self.bounds = bounds
        self.rng = np.random.default_rng(seed)

        self.lam = popsize if popsize is not None else 4 + int(3 * math.log(n))
        self.mu = self.lam // 2
        w = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights**2)

        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.ds = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(
            1 - self.c1,
            2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff),
        )
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self._update_eigen()
        self.counteval = 0
        self.generation = 0
        self._pending: list | None = None

    def _update_eigen(self) -> None:
        self.C = (self.C + self.C.T) / 2
        d2, self.B = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(d2, 1e-20))

    def ask(self) -> list:
        zs = self.rng.standard_normal((self.lam, self.n))
        ys = zs @ (self.B * self.D).T  # y = B D z
        xs = self.mean + self.sigma * ys
        if self.bounds is not None:
            xs = np.array([self.bounds.clamp(x) for x in xs])
        self._pending = [x.copy() for x in xs]
        return [x.copy() for x in xs]

    def tell(self, solutions, values) -> None:
        if self._pending is None:
            raise OptimizerStepError("tell called before ask")
        if len(solutions) != self.lam or len(values) != self.lam:
            raise OptimizerStepError(
                f"tell needs exactly {self.lam} candidates, got {len(solutions)}"
            )
        self._pending = None
        self.counteval += self.lam
        order = np.argsort(values)
        xs = np.array([np.asarray(solutions[i], dtype=float) for i in order[: self.mu]])

        old_mean = self.mean
        self.mean = self.weights @ xs
        y = (self.mean - old_mean) / self.sigma

        inv_sqrt = self.B @ np.diag(1.0 / self.D) @ self.B.T
        self.ps = (1 - self.cs) * self.ps + math.sqrt(
            self.cs * (2 - self.cs) * self.mueff
        ) * (inv_sqrt @ y)
        self.generation += 1
        hsig = float(
            np.linalg.norm(self.ps)
            / math.sqrt(1 - (1 - self.cs) ** (2 * self.generation))
            / self.chi_n
            < 1.4 + 2 / (self.n + 1)
        )
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(
            self.cc * (2 - self.cc) * self.mueff
        ) * y

        artmp = (xs - old_mean) / self.sigma
        delta_hsig = (1 - hsig) * self.cc * (2 - self.cc)
        self.C = (
            (1 - self.c1 - self.cmu) * self.C
            + self.c1 * (np.outer(self.pc, self.pc) + delta_hsig * self.C)
            + self.cmu * (artmp.T * self.weights) @ artmp
        )
        self.sigma *= math.exp(
            (self.cs / self.ds) * (np.linalg.norm(self.ps) / self.chi_n - 1)
        )
        self._update_eigen()


class CMAESProposer:
    """Adapter that feeds a CMA-ES generation through the one-proposal-per-
    iteration loop: candidates are handed out one at a time and the strategy
    is told once all of a generation's errors have arrived in the trace."""

    def __init__(self, seed: int = 0, sigma0: float = 0.25, popsize: int | None = None):
        self.seed = seed
        self.sigma0 = sigma0
        self.popsize = popsize
        self._es: CMAES | None = None
        self._queue: list = []
        self._issued: list = []
        self._gen_start = 0

    def propose(self, trace: OptTrace, bounds: Bounds, rng) -> np.ndarray:
        if self._es is None:
            center = (bounds.lower + bounds.upper) / 2.0
            # Work in the raw space but scale sigma per coordinate through C.
            es = CMAES(center, self.sigma0, bounds=bounds,
                       popsize=self.popsize, seed=self.seed)
            span = bounds.upper - bounds.lower
            es.C = np.diag((span / span.max()) ** 2)
            es._update_eigen()
            es.sigma = self.sigma0 * float(span.max())
            self._es = es
        if not self._queue:
            if self._issued and len(trace) >= self._gen_start + self._es.lam:
                values = trace.feedback_values()[self._gen_start : self._gen_start + self._es.lam]
                self._es.tell(self._issued, list(values))
                self._issued = []
            if not self._issued:
                self._gen_start = len(trace)
                self._queue = self._es.ask()
                self._issued = [x.copy() for x in self._queue]
        return self._queue.pop(0)


def _space_filling_sample(bounds: Bounds, rng) -> np.ndarray:
    return bounds.clamp(rng.uniform(bounds.lower, bounds.upper))


def gp_bo_propose(trace: OptTrace, bounds: Bounds, rng) -> np.ndarray:
    """Expected-improvement proposal from a Gaussian-process surrogate.

    Squared-exponential kernel on inputs normalized per coordinate to [0, 1],
    observation jitter 1e-6, length scale from the median pairwise distance;
    the acquisition is maximized over 1024 random candidates.  Fewer than five
    observations (or a degenerate design) fall back to a random sample.
    """
    if len(trace) < 5:
        return _space_filling_sample(bounds, rng)

    span = bounds.upper - bounds.lower
    X = (trace.vectors() - bounds.lower) / span
    y = trace.feedback_values()

    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    upper = d2[np.triu_indices(len(X), k=1)]
    positive = upper[upper > 0]
    if positive.size == 0 or float(np.std(y)) == 0.0:
        return _space_filling_sample(bounds, rng)
    length_scale2 = float(np.median(positive))

    y_mean, y_std = float(np.mean(y)), float(np.std(y))
    yn = (y - y_mean) / y_std
    K = np.exp(-0.5 * d2 / length_scale2) + 1e-6 * np.eye(len(X))
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return _space_filling_sample(bounds, rng)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, yn))

    cand = rng.uniform(0.0, 1.0, size=(1024, bounds.dim))
    cross = np.sum((cand[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    k_star = np.exp(-0.5 * cross / length_scale2)
    mu = k_star @ alpha
    v = np.linalg.solve(L, k_star.T)
    var = np.maximum(1.0 - np.sum(v * v, axis=0), 1e-12)
    sd = np.sqrt(var)

    best = float(np.min(yn))
    z = (best - mu) / sd
    cdf = 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    ei = (best - mu) * cdf + sd * pdf
    pick = int(np.argmax(ei))
    return bounds.clamp(bounds.lower + cand[pick] * span)


class GPBOProposer:
    def propose(self, trace: OptTrace, bounds: Bounds, rng) -> np.ndarray:
        return gp_bo_propose(trace, bounds, rng)


class LLMProposer:
    """Model-driven proposer: assemble the estimation prompt, complete it,
    parse the returned program, and flatten the per-class parameters.

    Unparseable completions are retried up to twice with a corrective
    message; persistent failure surfaces as :class:`OptimizerStepError`.
    """

    MAX_PARSE_RETRIES = 2

    def __init__(self, client, context, classes, feedback_mode: str = "full"):
        from .llm import build_phase1_messages, corrective_message

        self._build = build_phase1_messages
        self._corrective = corrective_message
        self.client = client
        self.context = context
        self.classes = tuple(classes)
        self.feedback_mode = feedback_mode
        self.programs: list = []

    def propose(self, trace: OptTrace, bounds: Bounds, rng=None) -> np.ndarray:
        messages = self._build(self.context, trace, self.feedback_mode)
        last_error = None
        for _ in range(self.MAX_PARSE_RETRIES + 1):
            text = self.client.complete(messages)
            try:
                program = parse_program(text)
                class_params, _ = extract_class_params(program)
                missing = [c for c in self.classes if c not in class_params]
                if missing:
                    raise ProgramParseError(f"program omits classes {missing}")
            except ProgramParseError as exc:
                last_error = exc
                messages = messages + self._corrective(text, exc)
                continue
            self.programs.append(text)
            vec = flatten_params(class_params, self.classes)
            return bounds.clamp_to_grid(vec)
        raise OptimizerStepError(f"no parseable program after retries: {last_error}")

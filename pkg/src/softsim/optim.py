"""System identification and open-loop control by first-order optimization.

One episode is one gradient evaluation (a full forward run plus the reverse
sweep) followed by one parameter update. Line-search trials are extra forward
runs and are counted separately in ``OptimResult.evaluations``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diff import ParamSet, LossSpec, evaluate_loss, gradient
from .sim import MUSCLE_RANGE, PNEUMATIC_RANGE, Scene

log = logging.getLogger(__name__)

GD = "gd"
ADAM = "adam"


@dataclass(frozen=True)
class OptimConfig:
    algorithm: str = GD
    lr: float = 0.5
    max_episodes: int = 50
    tol: float = 0.0
    seed: int = 0
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    max_step: float = 1.0
    precise: bool = True

    def __post_init__(self):
        if self.algorithm not in (GD, ADAM):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.max_episodes < 1:
            raise ValueError("need at least one episode")


@dataclass
class Problem:
    """A loss over a flat vector ``x`` with a projection onto the feasible box."""

    x0: np.ndarray
    loss: Callable[[np.ndarray], float]
    value_and_grad: Callable[[np.ndarray], tuple]
    lower: np.ndarray
    upper: np.ndarray
    to_params: Callable[[np.ndarray], ParamSet]

    def project(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


@dataclass
class OptimResult:
    params: ParamSet
    x: np.ndarray
    history: list = field(default_factory=list)
    evaluations: int = 0
    converged: bool = False


def _safe(f, x):
    try:
        val = f(x)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        log.info("trial rejected: %s", exc)
        return float("nan")
    return val


def minimize(problem: Problem, config: OptimConfig) -> OptimResult:
    """Projected gradient descent with Armijo backtracking, or Adam.

    Gradient descent starts each line search at the Barzilai-Borwein step of
    the last two iterates; on the first episode the trial moves the largest
    component by ``config.lr``. No trial moves any component by more than
    ``config.max_step``. The step is halved until sufficient decrease, so the
    recorded history is non-increasing.
    Adam records the loss of every iterate and returns the best one.
    """
    x = problem.project(np.asarray(problem.x0, dtype=float))
    fx, g = problem.value_and_grad(x)
    if not np.isfinite(fx):
        raise FloatingPointError("initial parameters give a divergent simulation")
    history = [fx]
    best_x, best_f = x.copy(), fx
    evals = 1
    converged = fx <= config.tol
    m = np.zeros_like(x)
    s2 = np.zeros_like(x)
    prev = None
    for ep in range(1, config.max_episodes + 1):
        if converged:
            break
        if config.algorithm == GD:
            gmax = float(np.abs(g).max())
            if gmax == 0.0:
                converged = True
                break
            t = config.lr / gmax
            if prev is not None:
                dx, dg = x - prev[0], g - prev[1]
                curv = float(dx @ dg)
                if curv > 0:
                    t = float(dx @ dx) / curv
            t = min(t, config.max_step / gmax)
            accepted = False
            for _ in range(config.max_backtracks):
                xn = problem.project(x - t * g)
                if np.array_equal(xn, x):
                    break
                fn = _safe(problem.loss, xn)
                evals += 1
                if np.isfinite(fn) and fn <= fx + config.armijo_c * float(g @ (xn - x)):
                    accepted = True
                    break
                t *= config.shrink
            if not accepted:
                log.info("episode %d: line search found no decrease; stopping", ep)
                converged = True
                break
            prev = (x, g)
            x = xn
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            m = b1 * m + (1 - b1) * g
            s2 = b2 * s2 + (1 - b2) * g * g
            mh = m / (1 - b1**ep)
            sh = s2 / (1 - b2**ep)
            x = problem.project(x - config.lr * mh / (np.sqrt(sh) + eps))
        fx, g = problem.value_and_grad(x)
        evals += 1
        if not np.isfinite(fx):
            raise FloatingPointError(f"episode {ep}: simulation diverged")
        if fx < best_f:
            best_x, best_f = x.copy(), fx
        history.append(fx)
        converged = fx <= config.tol
    return OptimResult(problem.to_params(best_x), best_x, history, evals, converged)


# --- problem builders -------------------------------------------------------------------


def sysid_problem(scene: Scene, spec: LossSpec, init: ParamSet | None = None, elements=None,
                  fit_poisson: bool = False, precise: bool = True) -> Problem:
    """Unknowns are log Young's modulus of ``elements`` (all by default), plus raw
    Poisson ratios when ``fit_poisson``."""
    base = ParamSet.from_scene(scene) if init is None else init.copy()
    t = len(base.youngs)
    elems = np.arange(t) if elements is None else np.asarray(elements, dtype=np.int64)
    ne = len(elems)

    def to_params(x):
        p = base.copy()
        p.youngs[elems] = np.exp(x[:ne])
        if fit_poisson:
            p.poisson[elems] = x[ne:]
        return p

    def loss(x):
        return evaluate_loss(scene, to_params(x), spec, precise)

    def value_and_grad(x):
        p = to_params(x)
        res = gradient(scene, p, spec, wrt=("theta2",), precise=precise)
        gE, gnu = res.grads["theta2"][:t], res.grads["theta2"][t:]
        g = gE[elems] * p.youngs[elems]
        if fit_poisson:
            g = np.concatenate([g, gnu[elems]])
        return res.loss, g

    x0 = np.log(base.youngs[elems])
    lo = np.full(ne, -np.inf)
    hi = np.full(ne, np.inf)
    if fit_poisson:
        x0 = np.concatenate([x0, base.poisson[elems]])
        lo = np.concatenate([lo, np.full(ne, 0.0)])
        hi = np.concatenate([hi, np.full(ne, 0.49)])
    return Problem(x0, loss, value_and_grad, lo, hi, to_params)


def control_bounds(params: ParamSet, torque_limit: float = np.inf):
    """Box bounds of the flat control vector (torque, muscle, pneumatic order)."""
    lo, hi = [], []
    ranges = {"torque": (-torque_limit, torque_limit), "muscle": MUSCLE_RANGE, "pneumatic": PNEUMATIC_RANGE}
    for key in ("torque", "muscle", "pneumatic"):
        if key in params.controls:
            n = params.controls[key].size
            lo.append(np.full(n, ranges[key][0]))
            hi.append(np.full(n, ranges[key][1]))
    return np.concatenate(lo), np.concatenate(hi)


def control_problem(scene: Scene, spec: LossSpec, init: ParamSet | None = None, n_frames=None,
                    torque_limit: float = np.inf, precise: bool = True) -> Problem:
    base = ParamSet.from_scene(scene, n_frames) if init is None else init.copy()
    if base.vector("theta1").size == 0:
        raise ValueError("scene declares no actuators")

    def to_params(x):
        return base.with_vector("theta1", x)

    def loss(x):
        return evaluate_loss(scene, to_params(x), spec, precise)

    def value_and_grad(x):
        res = gradient(scene, to_params(x), spec, wrt=("theta1",), precise=precise)
        return res.loss, res.grads["theta1"]

    lo, hi = control_bounds(base, torque_limit)
    return Problem(base.vector("theta1"), loss, value_and_grad, lo, hi, to_params)


def run_sysid(scene: Scene, spec: LossSpec, config: OptimConfig = OptimConfig(), init: ParamSet | None = None,
              elements=None, fit_poisson: bool = False) -> OptimResult:
    """Fit material parameters so the simulated run matches ``spec.target``."""
    prob = sysid_problem(scene, spec, init, elements, fit_poisson, config.precise)
    return minimize(prob, config)


def run_control(scene: Scene, spec: LossSpec, config: OptimConfig = OptimConfig(), init: ParamSet | None = None,
                n_frames=None, torque_limit: float = np.inf) -> OptimResult:
    """Optimize per-frame actuation; activations are clamped to their ranges after every step."""
    prob = control_problem(scene, spec, init, n_frames, torque_limit, config.precise)
    return minimize(prob, config)


def run_gradient_free_baseline(problem: Problem, budget: int, radius=1.0, seed: int = 0) -> list:
    """Seeded uniform random search in ``x0 +- radius`` (projected); returns best-so-far losses.

    The first entry is the loss at ``x0`` and does not count against ``budget``.
    """
    rng = np.random.default_rng(seed)
    x0 = problem.project(np.asarray(problem.x0, dtype=float))
    best = _safe(problem.loss, x0)
    history = [best]
    for _ in range(budget):
        x = problem.project(x0 + radius * rng.uniform(-1.0, 1.0, size=x0.shape))
        f = _safe(problem.loss, x)
        if np.isfinite(f) and not f >= best:
            best = f
        history.append(best)
    return history


def write_history(path, history):
    """CSV with columns ``episode,loss`` (17 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "loss"])
        for i, f in enumerate(history):
            w.writerow([i, f"{f:.17g}"])

"""Differential multiplier methods for one scalar constraint.

The update rules are written against a plain :class:`DifferentiableProblem`
so they can be checked on closed-form benchmarks before they are used to
steer a network's reconstruction loss.

The augmented Lagrangian is ``F + lam * G + (c / 2) * G**2``.  Parameters
descend its gradient, the multiplier ascends it (``dL/dlam = G``).
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch, MultiplierDivergence, NonFiniteValue

LAMBDA_LIMIT = 1e6


class Method(str, enum.Enum):
    MDMM = "mdmm"
    BDMM = "bdmm"
    PENALTY = "penalty"


class Mode(str, enum.Enum):
    EQUALITY = "equality"
    INEQUALITY_UPPER = "inequality_upper"


class Termination(str, enum.Enum):
    CONVERGED = "converged"
    MAX_STEPS = "max_steps"
    DIVERGED = "diverged"


def _check_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise NonFiniteValue(f"{name} is not finite: {v!r}")


@dataclass
class DifferentiableProblem:
    """Objective ``F`` and constraint quantity over a flat parameter vector.

    The residual driven to zero is ``constraint(theta) - epsilon`` where
    ``epsilon`` lives on the :class:`ConstraintState`.
    """

    dim: int
    objective: Callable[[np.ndarray], float]
    objective_grad: Callable[[np.ndarray], np.ndarray]
    constraint: Callable[[np.ndarray], float]
    constraint_grad: Callable[[np.ndarray], np.ndarray]
    theta0: Optional[np.ndarray] = None
    name: str = "problem"

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionMismatch(f"dim must be positive, got {self.dim}")
        if self.theta0 is not None:
            self.theta0 = np.asarray(self.theta0, dtype=np.float64).copy()
            if self.theta0.shape != (self.dim,):
                raise DimensionMismatch(
                    f"theta0 has shape {self.theta0.shape}, expected ({self.dim},)"
                )

    def initial_point(self) -> np.ndarray:
        if self.theta0 is None:
            return np.zeros(self.dim)
        return self.theta0.copy()


@dataclass(frozen=True)
class ConstraintState:
    epsilon: float = 0.0
    lam: float = 0.0
    damping: float = 1.0
    lambda_step: float = 0.05
    mode: Mode = Mode.EQUALITY

    def __post_init__(self):
        _check_finite("constraint state", self.epsilon, self.lam, self.damping, self.lambda_step)
        if self.damping < 0:
            raise ValueError(f"damping must be >= 0, got {self.damping}")
        if self.lambda_step <= 0:
            raise ValueError(f"lambda_step must be > 0, got {self.lambda_step}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass(frozen=True)
class SolveConfig:
    theta_step: float = 0.05
    max_steps: int = 1_000_000
    residual_tol: float = 1e-8
    method: Method = Method.MDMM
    window: int = 100

    def __post_init__(self):
        if self.theta_step <= 0 or self.residual_tol <= 0:
            raise ValueError("theta_step and residual_tol must be > 0")
        if self.max_steps < 1 or self.window < 1:
            raise ValueError("max_steps and window must be positive")
        object.__setattr__(self, "method", Method(self.method))


@dataclass
class SolveTrace:
    theta: np.ndarray
    objective: np.ndarray
    residual: np.ndarray
    lam: np.ndarray
    lagrangian: np.ndarray
    termination: Termination
    message: str = ""

    def __len__(self) -> int:
        return len(self.residual)

    @property
    def theta_final(self) -> np.ndarray:
        return self.theta[-1]

    @property
    def lambda_final(self) -> float:
        return float(self.lam[-1])


def lagrangian_value(F: float, G: float, lam: float, c: float) -> float:
    """``F + lam*G + (c/2)*G**2``."""
    _check_finite("lagrangian input", F, G, lam, c)
    value = F + lam * G + 0.5 * c * G * G
    _check_finite("lagrangian value", value)
    return value


def lambda_update(state: ConstraintState, G: float, step: Optional[int] = None) -> ConstraintState:
    """One ascent step on the multiplier: ``lam + lambda_step * G``.

    Upper-inequality mode clamps the result at zero.
    """
    _check_finite("constraint residual", G)
    new = state.lam + state.lambda_step * G
    if state.mode is Mode.INEQUALITY_UPPER:
        new = max(new, 0.0)
    if not math.isfinite(new) or abs(new) > LAMBDA_LIMIT:
        raise MultiplierDivergence(new, step)
    return dataclasses.replace(state, lam=new)


def constraint_coefficient(lam: float, G: float, c: float, mode: Mode = Mode.EQUALITY) -> float:
    """Weight on ``dG`` in the parameter gradient.

    For an upper-bound constraint the weight is clipped at zero, so an inactive
    bound (``lam + c*G < 0``) exerts no pull at all.
    """
    coef = lam + c * G
    if Mode(mode) is Mode.INEQUALITY_UPPER:
        coef = max(coef, 0.0)
    return coef


def assemble_theta_gradient(dF, dG, lam: float, G: float, c: float,
                            mode: Mode = Mode.EQUALITY) -> np.ndarray:
    """``dF + (lam + c*G) * dG``, the parameter gradient of the augmented Lagrangian."""
    dF = np.asarray(dF, dtype=np.float64)
    dG = np.asarray(dG, dtype=np.float64)
    if dF.shape != dG.shape:
        raise DimensionMismatch(f"gradient shapes differ: {dF.shape} vs {dG.shape}")
    coef = constraint_coefficient(lam, G, c, mode)
    if coef == 0.0:
        # keeps the unconstrained gradient bitwise (0.0 * inf would not)
        return dF.copy()
    return dF + coef * dG


def effective_state(state: ConstraintState, method: Method) -> ConstraintState:
    """Specialise a constraint state to the chosen method."""
    method = Method(method)
    if method is Method.BDMM:
        return dataclasses.replace(state, damping=0.0)
    if method is Method.PENALTY:
        if state.damping <= 0:
            raise ValueError("penalty method needs damping > 0")
        return dataclasses.replace(state, lam=0.0)
    return state


def solve_constrained(
    problem: DifferentiableProblem,
    constraint: ConstraintState,
    config: SolveConfig,
    theta0=None,
    strict: bool = True,
) -> SolveTrace:
    """Run gradient descent on theta and ascent on lambda until the residual settles.

    Converged means ``|G| <= residual_tol`` for ``config.window`` consecutive
    steps.  With ``strict=False`` a divergence ends the trace with
    ``Termination.DIVERGED`` instead of raising.
    """
    state = effective_state(constraint, config.method)
    freeze_lambda = config.method is Method.PENALTY
    theta = problem.initial_point() if theta0 is None else np.array(theta0, dtype=np.float64)
    if theta.shape != (problem.dim,):
        raise DimensionMismatch(f"theta0 has shape {theta.shape}, expected ({problem.dim},)")

    thetas, fs, gs, lams, lags = [], [], [], [], []
    termination = Termination.MAX_STEPS
    message = ""
    streak = 0
    try:
        for step in range(config.max_steps):
            F = float(problem.objective(theta))
            G = float(problem.constraint(theta)) - state.epsilon
            _check_finite(f"objective/constraint at step {step}", F, G)
            thetas.append(theta.copy())
            fs.append(F)
            gs.append(G)
            lams.append(state.lam)
            lags.append(lagrangian_value(F, G, state.lam, state.damping))

            streak = streak + 1 if abs(G) <= config.residual_tol else 0
            if streak >= config.window:
                termination = Termination.CONVERGED
                break

            dF = np.asarray(problem.objective_grad(theta), dtype=np.float64)
            dG = np.asarray(problem.constraint_grad(theta), dtype=np.float64)
            if dF.shape != (problem.dim,) or dG.shape != (problem.dim,):
                raise DimensionMismatch("gradient length does not match problem.dim")
            grad = assemble_theta_gradient(dF, dG, state.lam, G, state.damping, state.mode)
            if not np.all(np.isfinite(grad)):
                raise NonFiniteValue(f"non-finite gradient at step {step}")
            theta = theta - config.theta_step * grad
            if not freeze_lambda:
                state = lambda_update(state, G, step)
    except (NonFiniteValue, MultiplierDivergence) as exc:
        if strict:
            raise
        termination = Termination.DIVERGED
        message = str(exc)
        if not thetas:
            raise

    return SolveTrace(
        theta=np.array(thetas),
        objective=np.array(fs),
        residual=np.array(gs),
        lam=np.array(lams),
        lagrangian=np.array(lags),
        termination=termination,
        message=message,
    )


# closed-form benchmark problems


def quadratic_problem(a=(1.0, 1.0), b=(1.0, 0.0), d=0.0, theta0=None) -> DifferentiableProblem:
    """``F = 0.5*|theta - a|^2`` subject to ``b . theta = d``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch("a and b must have the same length")
    return DifferentiableProblem(
        dim=len(a),
        objective=lambda t: 0.5 * float(np.dot(t - a, t - a)),
        objective_grad=lambda t: t - a,
        constraint=lambda t: float(np.dot(b, t)) - d,
        constraint_grad=lambda t: b.copy(),
        theta0=theta0,
        name="quadratic",
    )


def sphere_problem(theta0=(-0.5, 0.1)) -> DifferentiableProblem:
    """Minimise ``theta_1`` on the unit circle."""
    return DifferentiableProblem(
        dim=2,
        objective=lambda t: float(t[0]),
        objective_grad=lambda t: np.array([1.0, 0.0]),
        constraint=lambda t: float(np.dot(t, t)) - 1.0,
        constraint_grad=lambda t: 2.0 * t,
        theta0=theta0,
        name="sphere",
    )


def target_only_problem(dim: int = 2) -> DifferentiableProblem:
    """``F = 0`` with constraint quantity ``theta_1``; pair with ``epsilon`` on the state."""

    def unit(t):
        g = np.zeros(dim)
        g[0] = 1.0
        return g

    return DifferentiableProblem(
        dim=dim,
        objective=lambda t: 0.0,
        objective_grad=lambda t: np.zeros(dim),
        constraint=lambda t: float(t[0]),
        constraint_grad=unit,
        name="target-only",
    )


BENCHMARKS = {
    "quadratic": quadratic_problem,
    "sphere": sphere_problem,
    "target-only": target_only_problem,
}

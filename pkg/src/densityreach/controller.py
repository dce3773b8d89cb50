"""Rational feedback ``u = psi / rho`` and the closed-loop vector field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .poly import Polynomial, PolyVector
from .problem import ProblemSpec

FD_STEP = 1e-6


class DomainFault(ArithmeticError):
    """Raised when ``u`` is queried where ``rho <= rho_floor``."""

    def __init__(self, x, rho_value, floor):
        super().__init__(f"controller undefined at {np.round(np.asarray(x), 6).tolist()}: "
                         f"rho = {rho_value:.3e} <= {floor:g}")
        self.x = np.asarray(x)


@dataclass(frozen=True)
class RationalController:
    psi: PolyVector
    rho: Polynomial
    rho_floor: float = 1e-6
    box: np.ndarray | None = None

    def __post_init__(self):
        if self.rho_floor <= 0:
            raise ValueError("rho_floor must be positive")
        if self.psi.num_vars != self.rho.num_vars:
            raise ValueError("psi and rho must share the state dimension")

    @classmethod
    def from_certificate(cls, cert, rho_floor: float = 1e-6, box=None) -> "RationalController":
        return cls(cert.psi, cert.polys["rho"], rho_floor, box)

    @property
    def m(self) -> int:
        return len(self.psi)

    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Batched ``u``; returns ``(u, in_domain)`` with ``u = nan`` off the domain."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.asarray(self.rho(x), dtype=float) * np.ones(len(x))
        ok = r > self.rho_floor
        num = self.psi(x).reshape(len(x), self.m)
        u = np.where(ok[:, None], num / np.where(ok, r, 1.0)[:, None], np.nan)
        return u, ok


def eval_u(c: RationalController, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    u, ok = c.evaluate(x[None])
    if not ok[0]:
        raise DomainFault(x, float(c.rho(x)), c.rho_floor)
    return u[0]


class ClosedLoopField:
    """``x -> f(x) + G(x) u(x)`` (``u = 0`` without a controller)."""

    def __init__(self, problem: ProblemSpec, controller: RationalController | None):
        if controller is not None:
            if problem.control is None:
                raise ValueError("problem has no control structure")
            if controller.m != problem.control.m or controller.psi.num_vars != problem.n:
                raise ValueError("controller dimensions do not match the problem")
        self.problem = problem
        self.controller = controller
        self.n = problem.n

    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        fx = self.problem.f(x).reshape(len(x), self.n)
        if self.controller is None:
            return fx, np.ones(len(x), dtype=bool)
        u, ok = self.controller.evaluate(x)
        Gx = self.problem.control(x).reshape(len(x), self.n, self.controller.m)
        return fx + np.einsum("bij,bj->bi", Gx, np.where(ok[:, None], u, 0.0)), ok

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        val, ok = self.evaluate(x.reshape(-1, self.n))
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            xb = x.reshape(-1, self.n)[bad]
            raise DomainFault(xb, float(self.controller.rho(xb)), self.controller.rho_floor)
        return val.reshape(x.shape)

    def divergence(self, x, step: float = FD_STEP) -> np.ndarray:
        """Forward-difference divergence; ``nan`` where any stencil point is off the domain."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        base, ok = self.evaluate(x)
        total = np.zeros(len(x))
        for i in range(self.n):
            xp = x.copy()
            xp[:, i] += step
            vp, okp = self.evaluate(xp)
            total += (vp[:, i] - base[:, i]) / step
            ok &= okp
        return np.where(ok, total, np.nan)


def closed_loop_field(problem: ProblemSpec, c: RationalController | None) -> ClosedLoopField:
    return ClosedLoopField(problem, c)

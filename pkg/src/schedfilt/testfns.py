"""Bounded smooth test functions with coded derivatives.

The filtering identities are checked against a battery of C_b^2 functions.
Each `TestFunction` carries hand-coded gradient and Hessian so that the
diffusion generator

    L phi(x) = a(x) . grad phi(x) + 0.5 tr(b b^T (x) hess phi(x))

and the jump part of the generator

    A phi(x) = E[phi(x + c(x) xi)] - phi(x),   xi ~ xi-marginal of the mark law,

can be evaluated without symbolic machinery.  States are passed as (N, m)
arrays; values come back as (N,) arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import DiscreteDistribution, GaussianDistribution, PointMass, ValidatedScenario
from .quad import gaussian_quad_points

__all__ = [
    "TestFunction",
    "tanh_affine",
    "gauss_bump",
    "clipped_identity",
    "clipped_square",
    "default_battery",
    "battery_function",
    "diffusion_generator",
    "jump_generator",
]


@dataclass(frozen=True)
class TestFunction:
    name: str
    value: Callable[[np.ndarray], np.ndarray]  # (N, m) -> (N,)
    grad: Callable[[np.ndarray], np.ndarray]  # (N, m) -> (N, m)
    hess: Callable[[np.ndarray], np.ndarray]  # (N, m) -> (N, m, m)
    bound: float  # sup |phi|

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.value(np.atleast_2d(np.asarray(x, dtype=float)))


def tanh_affine(w, b: float = 0.0, name: str | None = None) -> TestFunction:
    """phi(x) = tanh(w . x + b)."""
    w = np.atleast_1d(np.asarray(w, dtype=float))

    def value(x):
        return np.tanh(x @ w + b)

    def grad(x):
        t = np.tanh(x @ w + b)
        return (1.0 - t**2)[:, None] * w

    def hess(x):
        t = np.tanh(x @ w + b)
        outer = w[:, None] * w[None, :]
        return (-2.0 * t * (1.0 - t**2))[:, None, None] * outer

    return TestFunction(name or "tanh_affine", value, grad, hess, bound=1.0)


def gauss_bump(center, scale: float, name: str | None = None) -> TestFunction:
    """phi(x) = exp(-|x - center|^2 / scale)."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if scale <= 0:
        raise ValueError("scale must be positive")

    def value(x):
        d = x - center
        return np.exp(-np.sum(d**2, axis=1) / scale)

    def grad(x):
        d = x - center
        return value(x)[:, None] * (-2.0 / scale) * d

    def hess(x):
        d = x - center
        v = value(x)
        eye = np.eye(center.size)
        outer = d[:, :, None] * d[:, None, :]
        return v[:, None, None] * ((4.0 / scale**2) * outer - (2.0 / scale) * eye)

    return TestFunction(name or "gauss_bump", value, grad, hess, bound=1.0)


def clipped_identity(cap: float = 10.0, component: int = 0, name: str | None = None) -> TestFunction:
    """phi(x) = cap * tanh(x_k / cap): the identity on |x_k| << cap, bounded by cap."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    k = component

    def value(x):
        return cap * np.tanh(x[:, k] / cap)

    def grad(x):
        t = np.tanh(x[:, k] / cap)
        out = np.zeros_like(x)
        out[:, k] = 1.0 - t**2
        return out

    def hess(x):
        t = np.tanh(x[:, k] / cap)
        out = np.zeros(x.shape + (x.shape[1],))
        out[:, k, k] = -2.0 * t * (1.0 - t**2) / cap
        return out

    return TestFunction(name or "clipped_identity", value, grad, hess, bound=cap)


def clipped_square(cap: float = 10.0, component: int = 0, name: str | None = None) -> TestFunction:
    """phi(x) = cap^2 * tanh(x_k / cap)^2: matches x_k^2 on |x_k| << cap."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    k = component

    def value(x):
        return cap**2 * np.tanh(x[:, k] / cap) ** 2

    def grad(x):
        u = x[:, k] / cap
        t = np.tanh(u)
        out = np.zeros_like(x)
        out[:, k] = 2.0 * cap * t * (1.0 - t**2)
        return out

    def hess(x):
        u = x[:, k] / cap
        t = np.tanh(u)
        s2 = 1.0 - t**2
        out = np.zeros(x.shape + (x.shape[1],))
        out[:, k, k] = 2.0 * s2 * (s2 - 2.0 * t**2)
        return out

    return TestFunction(name or "clipped_square", value, grad, hess, bound=cap**2)


def default_battery(m: int = 1) -> list[TestFunction]:
    """Standard battery used by the structure checks."""
    w = np.zeros(m)
    w[0] = 1.0
    center = np.zeros(m)
    center[0] = 0.5
    return [
        tanh_affine(w, 0.0, name="tanh"),
        gauss_bump(center, 0.5, name="bump"),
        clipped_identity(10.0, name="clipped_identity"),
        clipped_square(10.0, name="clipped_square"),
    ]


def battery_function(name: str, m: int = 1) -> TestFunction:
    for fn in default_battery(m):
        if fn.name == name:
            return fn
    raise KeyError(f"unknown test function {name!r}")


def diffusion_generator(phi: TestFunction, scenario: ValidatedScenario) -> Callable[[np.ndarray], np.ndarray]:
    """Return x -> L phi(x) for the scenario's drift and diffusion."""

    def lphi(x: np.ndarray) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        a = scenario.drift(x2)
        b = scenario.diffusion(x2)
        sigma = b @ np.swapaxes(b, -1, -2)
        first = np.sum(a * phi.grad(x2), axis=1)
        second = 0.5 * np.einsum("nij,nij->n", sigma, phi.hess(x2))
        return first + second

    return lphi


def jump_generator(
    phi: TestFunction, scenario: ValidatedScenario, order: int | None = None
) -> Callable[[np.ndarray], np.ndarray]:
    """Return x -> A phi(x), integrating xi over the mark law's xi-marginal.

    Gaussian marginals use Gauss-Hermite quadrature (tensorized through an
    eigenfactor for m > 1), discrete marginals sum atoms exactly, and the
    degenerate law gives A phi = 0 identically.
    """
    law = scenario.jump_law
    marginal = law.xi_marginal()
    order = order or scenario.filters.quad_order_jump

    if isinstance(marginal, PointMass):
        def zero(x: np.ndarray) -> np.ndarray:
            x2 = np.atleast_2d(np.asarray(x, dtype=float))
            return np.zeros(x2.shape[0])

        return zero

    if isinstance(marginal, DiscreteDistribution):
        atoms, probs = marginal.points, marginal.probs

        def aphi_discrete(x: np.ndarray) -> np.ndarray:
            x2 = np.atleast_2d(np.asarray(x, dtype=float))
            c = scenario.jump_coeff(x2)
            base = phi.value(x2)
            out = -base.copy()
            for atom, p in zip(atoms, probs):
                shifted = x2 + c @ atom
                out += p * phi.value(shifted)
            return out

        return aphi_discrete

    assert isinstance(marginal, GaussianDistribution)
    # xi = F u with u ~ N(0, I_m); tensorize the 1-d rule over u.
    factor = _psd_factor(marginal.cov)
    m = scenario.m
    pts_1d, wts_1d = gaussian_quad_points(0.0, 1.0, order)
    grids = np.meshgrid(*([pts_1d] * m), indexing="ij")
    u_nodes = np.stack([g.ravel() for g in grids], axis=1)  # (order^m, m)
    w_grids = np.meshgrid(*([wts_1d] * m), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in w_grids], axis=1), axis=1)
    xi_nodes = u_nodes @ factor.T

    def aphi_gaussian(x: np.ndarray) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        c = scenario.jump_coeff(x2)  # (N, m, m)
        base = phi.value(x2)
        out = -base.copy()
        for xi, wq in zip(xi_nodes, weights):
            shifted = x2 + c @ xi
            out += wq * phi.value(shifted)
        return out

    return aphi_gaussian


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))

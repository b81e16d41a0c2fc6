"""Small, seedable CMA-ES for box-constrained low-dimensional minimization.

Standard (mu/mu_w, lambda) covariance matrix adaptation with rank-one and
rank-mu updates; box constraints are enforced by resampling (falling back to
clipping after repeated misses).
"""

from __future__ import annotations

import math

import numpy as np


class CmaEs:
    """Ask/tell interface: call ask(), evaluate, then tell() each generation."""

    def __init__(self, x0, sigma0, bounds, seed=None, popsize=None):
        self.x = np.asarray(x0, dtype=float).copy()
        self.n = self.x.size
        self.lo = np.asarray([b[0] for b in bounds], dtype=float)
        self.hi = np.asarray([b[1] for b in bounds], dtype=float)
        if np.any(self.lo >= self.hi):
            raise ValueError("each bound must satisfy lo < hi")
        if np.any(self.x < self.lo) or np.any(self.x > self.hi):
            raise ValueError("x0 outside the box")
        self.sigma = float(sigma0)
        if self.sigma <= 0:
            raise ValueError("sigma0 must be positive")
        self.rng = np.random.default_rng(seed)

        n = self.n
        self.lam = popsize or 4 + int(3 * math.log(n))
        self.mu = self.lam // 2
        w = np.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / float(self.weights @ self.weights)

        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(
            1 - self.c1,
            2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff),
        )
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.generation = 0
        self.best_x = self.x.copy()
        self.best_f = math.inf
        self._pending = None

    def _sample_one(self, A):
        for _ in range(50):
            z = self.rng.standard_normal(self.n)
            x = self.x + self.sigma * (A @ z)
            if np.all(x >= self.lo) and np.all(x <= self.hi):
                return x, z
        x = np.clip(x, self.lo, self.hi)
        # recover the step that actually produced the clipped point
        z = np.linalg.solve(A, (x - self.x) / self.sigma)
        return x, z

    def ask(self) -> list[np.ndarray]:
        vals, vecs = np.linalg.eigh(self.C)
        A = vecs @ np.diag(np.sqrt(np.maximum(vals, 1e-20)))
        xs, zs = [], []
        for _ in range(self.lam):
            x, z = self._sample_one(A)
            xs.append(x)
            zs.append(z)
        self._pending = (A, vecs, np.sqrt(np.maximum(vals, 1e-20)), xs, zs)
        return [x.copy() for x in xs]

    def tell(self, xs, fs) -> None:
        if self._pending is None:
            raise RuntimeError("tell() without a matching ask()")
        A, vecs, sqrt_vals, asked, zs = self._pending
        self._pending = None
        if len(xs) != self.lam or len(fs) != self.lam:
            raise ValueError("tell() needs one fitness per asked candidate")
        order = np.argsort(fs)
        if fs[order[0]] < self.best_f:
            self.best_f = float(fs[order[0]])
            self.best_x = np.asarray(xs[order[0]], dtype=float).copy()

        sel_z = np.array([zs[i] for i in order[: self.mu]])
        sel_x = np.array([asked[i] for i in order[: self.mu]])
        z_mean = self.weights @ sel_z
        x_old = self.x
        self.x = self.weights @ sel_x

        # evolution paths in the isotropic and anisotropic coordinates
        self.ps = (1 - self.cs) * self.ps + math.sqrt(
            self.cs * (2 - self.cs) * self.mueff
        ) * (vecs @ z_mean)
        hsig = float(
            np.linalg.norm(self.ps)
            / math.sqrt(1 - (1 - self.cs) ** (2 * (self.generation + 1)))
            < (1.4 + 2 / (self.n + 1)) * self.chi_n
        )
        y_mean = (self.x - x_old) / self.sigma
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(
            self.cc * (2 - self.cc) * self.mueff
        ) * y_mean

        ys = (sel_x - x_old) / self.sigma
        rank_mu = sum(w * np.outer(y, y) for w, y in zip(self.weights, ys))
        self.C = (
            (1 - self.c1 - self.cmu) * self.C
            + self.c1
            * (np.outer(self.pc, self.pc) + (1 - hsig) * self.cc * (2 - self.cc) * self.C)
            + self.cmu * rank_mu
        )
        self.C = (self.C + self.C.T) / 2.0
        self.sigma *= math.exp(
            (self.cs / self.damps) * (np.linalg.norm(self.ps) / self.chi_n - 1)
        )
        self.generation += 1

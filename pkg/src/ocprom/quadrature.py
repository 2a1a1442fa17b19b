"""Product parameter distributions and quadrature rules over the parameter box."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import mpmath
import numpy as np
from scipy import special
from scipy.stats import qmc

MC = "MC"
GAUSS = "GAUSS"
PSEUDO_RANDOM = "PSEUDO_RANDOM"
CLENSHAW_CURTIS = "CLENSHAW_CURTIS"

RULE_ALIASES = {"mc": MC, "gauss": GAUSS, "pseudo": PSEUDO_RANDOM, "cc": CLENSHAW_CURTIS}


class InverseCDFError(RuntimeError):
    pass


@dataclass(frozen=True)
class Distribution1D:
    """Uniform, Beta(a, b) or Loguniform law on ``[lo, hi]``."""

    kind: str
    lo: float
    hi: float
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "beta", "loguniform"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if self.kind == "beta" and not (self.a > 0 and self.b > 0):
            raise ValueError("beta shape parameters must be positive")
        if self.kind == "loguniform" and self.lo <= 0:
            raise ValueError("loguniform requires lo > 0")

    @classmethod
    def parse(cls, text: str, lo: float, hi: float) -> "Distribution1D":
        """Parse ``uniform``, ``loguniform`` or ``beta:a:b``."""
        parts = text.strip().lower().split(":")
        if parts[0] == "beta":
            if len(parts) != 3:
                raise ValueError("beta distribution is written beta:a:b")
            return cls("beta", lo, hi, float(parts[1]), float(parts[2]))
        if len(parts) != 1:
            raise ValueError(f"cannot parse distribution {text!r}")
        return cls(parts[0], lo, hi)

    def describe(self) -> str:
        if self.kind == "beta":
            return f"beta:{self.a:g}:{self.b:g}"
        return self.kind

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        if self.kind == "uniform":
            val = np.full_like(x, 1.0 / self.width)
        elif self.kind == "loguniform":
            val = 1.0 / (np.where(inside, x, 1.0) * math.log(self.hi / self.lo))
        else:
            t = np.clip((x - self.lo) / self.width, 0.0, 1.0)
            logb = special.betaln(self.a, self.b)
            with np.errstate(divide="ignore"):
                val = np.exp(
                    special.xlog1py(self.b - 1.0, -t) + special.xlogy(self.a - 1.0, t) - logb
                ) / self.width
        return np.where(inside, val, 0.0)

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), self.lo, self.hi)
        if self.kind == "uniform":
            return (x - self.lo) / self.width
        if self.kind == "loguniform":
            return np.log(x / self.lo) / math.log(self.hi / self.lo)
        return special.betainc(self.a, self.b, (x - self.lo) / self.width)

    def ppf(self, q, tol: float = 1e-12, max_iter: int = 200):
        """Inverse CDF. Uniform is mapped affinely; other laws use bisection."""
        q = np.asarray(q, dtype=float)
        if np.any((q < 0) | (q > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.kind == "uniform":
            return self.lo + self.width * q
        lo = np.full_like(q, self.lo)
        hi = np.full_like(q, self.hi)
        x = 0.5 * (lo + hi)
        for _ in range(max_iter):
            x = 0.5 * (lo + hi)
            F = self.cdf(x)
            if np.all((np.abs(F - q) <= tol) | (hi - lo <= 4 * np.finfo(float).eps * np.abs(x))):
                return x
            below = F < q
            lo = np.where(below, x, lo)
            hi = np.where(below, hi, x)
        raise InverseCDFError(f"bisection did not reach tolerance {tol} in {max_iter} steps")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size)
        if self.kind == "loguniform":
            return np.exp(rng.uniform(math.log(self.lo), math.log(self.hi), size))
        return self.lo + self.width * rng.beta(self.a, self.b, size)

    def moment(self, k: int) -> float:
        """Analytic raw moment ``E[X^k]``."""
        lo, hi = self.lo, self.hi
        if k == 0:
            return 1.0
        if self.kind == "uniform":
            return (hi ** (k + 1) - lo ** (k + 1)) / ((k + 1) * self.width)
        if self.kind == "loguniform":
            return (hi**k - lo**k) / (k * math.log(hi / lo))
        total = 0.0
        for r in range(k + 1):
            beta_r = math.prod((self.a + s) / (self.a + self.b + s) for s in range(r))
            total += math.comb(k, r) * lo ** (k - r) * self.width**r * beta_r
        return total

    def _mp_moments(self, count: int):
        """Raw moments ``E[X^k]``, ``k < count``, in the current mpmath precision."""
        lo, hi = mpmath.mpf(self.lo), mpmath.mpf(self.hi)
        width = hi - lo
        out = []
        for k in range(count):
            if k == 0:
                out.append(mpmath.mpf(1))
            elif self.kind == "uniform":
                out.append((hi ** (k + 1) - lo ** (k + 1)) / ((k + 1) * width))
            elif self.kind == "loguniform":
                out.append((hi**k - lo**k) / (k * mpmath.log(hi / lo)))
            else:
                a, b = mpmath.mpf(self.a), mpmath.mpf(self.b)
                total = mpmath.mpf(0)
                beta_r = mpmath.mpf(1)
                for r in range(k + 1):
                    total += mpmath.binomial(k, r) * lo ** (k - r) * width**r * beta_r
                    beta_r *= (a + r) / (a + b + r)
                out.append(total)
        return out

    def recurrence(self, n: int):
        """Jacobi-matrix coefficients ``(alpha, sqrt_beta)`` of the orthonormal polynomials.

        Built from the Cholesky factor of the moment Hankel matrix (Golub and
        Welsch), carried out in extended precision because the Hankel matrix
        is severely ill-conditioned. ``sqrt_beta`` is the off-diagonal.
        """
        with mpmath.workdps(40 + 6 * n):
            m = self._mp_moments(2 * n + 1)
            if not all(mpmath.isfinite(v) for v in m):
                raise FloatingPointError("non-finite moment in recurrence construction")
            H = mpmath.matrix(n + 1, n + 1)
            for i in range(n + 1):
                for j in range(n + 1):
                    H[i, j] = m[i + j]
            R = mpmath.cholesky(H).T
            alpha, off = [], []
            for k in range(n):
                a_k = R[k, k + 1] / R[k, k]
                if k:
                    a_k -= R[k - 1, k] / R[k - 1, k - 1]
                alpha.append(float(a_k))
                if k + 1 < n:
                    off.append(float(R[k + 1, k + 1] / R[k, k]))
        return np.array(alpha), np.array(off)

    def gauss(self, n: int):
        """Gauss nodes and probability weights by Golub-Welsch."""
        if n < 1:
            raise ValueError("need at least one node")
        alpha, off = self.recurrence(n)
        J = np.diag(alpha) + np.diag(off, 1) + np.diag(off, -1)
        nodes, vecs = np.linalg.eigh(J)
        return nodes, vecs[0] ** 2


@dataclass
class QuadratureRule:
    """Nodes ``(M, n)`` in the parameter box and nonzero weights ``(M,)``."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.nodes) != len(self.weights):
            raise ValueError("node and weight counts differ")
        if np.any(self.weights == 0.0):
            raise ValueError("quadrature weights must be nonzero")

    def __len__(self):
        return len(self.weights)

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, np.asarray(values, dtype=float)))

    def to_csv(self, path) -> None:
        n = self.nodes.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"mu{i + 1}" for i in range(n)] + ["weight"])
            for x, w in zip(self.nodes.tolist(), self.weights.tolist()):
                writer.writerow([f"{v:.17g}" for v in x] + [f"{w:.17g}"])

    @classmethod
    def from_csv(cls, path, kind: str = "CSV") -> "QuadratureRule":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :-1], data[:, -1], kind)


def _tensorize(per_dim, kind, notes=None) -> QuadratureRule:
    nodes = np.array([list(c) for c in itertools.product(*(x for x, _ in per_dim))])
    weights = np.array([math.prod(c) for c in itertools.product(*(w for _, w in per_dim))])
    return QuadratureRule(nodes, weights, kind, notes or {})


def monte_carlo_rule(dists, M: int, seed: int) -> QuadratureRule:
    """``M`` i.i.d. draws from the product law, weights ``1/M``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(seed)
    nodes = np.column_stack([d.sample(rng, M) for d in dists])
    return QuadratureRule(nodes, np.full(M, 1.0 / M), MC, {"seed": seed})


def gauss_tensor_rule(dists, nodes_per_dim) -> QuadratureRule:
    """Tensor product of density-adapted Gauss rules."""
    if isinstance(nodes_per_dim, int):
        nodes_per_dim = [nodes_per_dim] * len(dists)
    return _tensorize([d.gauss(n) for d, n in zip(dists, nodes_per_dim)], GAUSS)


def halton_points(M: int, dim: int, seed: int = 0) -> np.ndarray:
    """First ``M`` points of a scrambled Halton sequence in ``[0, 1)^dim``.

    The plain sequence is biased low for short prefixes (its first 100
    base-2 points average 0.49); the seeded digit scrambling keeps the
    stratification of the radical inverses while removing that bias.
    """
    return qmc.Halton(d=dim, scramble=True, seed=seed).random(M)


def pseudo_random_rule(dists, M: int, seed: int = 0) -> QuadratureRule:
    """Halton points mapped through each component's inverse CDF, weights ``1/M``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    raw = halton_points(M, len(dists), seed)
    nodes = np.column_stack([d.ppf(raw[:, i]) for i, d in enumerate(dists)])
    return QuadratureRule(nodes, np.full(M, 1.0 / M), PSEUDO_RANDOM)


def clenshaw_curtis_1d(n: int):
    """Clenshaw-Curtis nodes (Chebyshev extrema, ascending) and weights for dx on [-1, 1]."""
    if n < 2:
        raise ValueError("Clenshaw-Curtis needs at least two nodes")
    N = n - 1
    theta = np.pi * np.arange(n) / N
    x = -np.cos(theta)
    w = np.zeros(n)
    for k in range(n):
        s = 0.0
        for j in range(1, N // 2 + 1):
            b = 1.0 if 2 * j == N else 2.0
            s += b / (4 * j * j - 1) * math.cos(2 * j * theta[k])
        c = 1.0 if k in (0, N) else 2.0
        w[k] = c / N * (1.0 - s)
    return x, w


def clenshaw_curtis_tensor_rule(dists, nodes_per_dim, density: str = "pdf") -> QuadratureRule:
    """Tensor Clenshaw-Curtis rule for the product law.

    ``density="pdf"`` maps nodes affinely to ``[lo, hi]`` and multiplies each
    weight by ``pdf(node) * (hi - lo) / 2`` without renormalizing.
    ``density="transform"`` instead pushes the uniform rule on ``[0, 1]``
    through the inverse CDF, which is the log-space rule for Loguniform laws.
    Nodes whose weight vanishes (pdf zero at an endpoint) are dropped.
    """
    if isinstance(nodes_per_dim, int):
        nodes_per_dim = [nodes_per_dim] * len(dists)
    if density not in ("pdf", "transform"):
        raise ValueError("density must be 'pdf' or 'transform'")
    per_dim = []
    dropped = 0
    for d, n in zip(dists, nodes_per_dim):
        t, w = clenshaw_curtis_1d(n)
        if density == "pdf":
            x = d.lo + 0.5 * d.width * (t + 1.0)
            wx = w * d.pdf(x) * 0.5 * d.width
        else:
            x = d.ppf(0.5 * (t + 1.0))
            wx = 0.5 * w
        keep = wx != 0.0
        dropped += int((~keep).sum())
        per_dim.append((x[keep], wx[keep]))
    rule = _tensorize(per_dim, CLENSHAW_CURTIS, {"density": density, "renormalized": False})
    rule.notes["dropped_zero_weight_nodes_per_dim"] = dropped
    rule.notes["weight_sum"] = float(rule.weights.sum())
    return rule


def make_rule(kind: str, dists, size: int, seed: int = 0, density: str = "pdf") -> QuadratureRule:
    """Dispatch on a rule name (``mc``, ``gauss``, ``pseudo``, ``cc``).

    ``size`` is the node count for sampling rules and the per-dimension node
    count for tensor rules.
    """
    kind = RULE_ALIASES.get(kind, kind)
    if kind == MC:
        return monte_carlo_rule(dists, size, seed)
    if kind == PSEUDO_RANDOM:
        return pseudo_random_rule(dists, size, seed)
    if kind == GAUSS:
        return gauss_tensor_rule(dists, size)
    if kind == CLENSHAW_CURTIS:
        return clenshaw_curtis_tensor_rule(dists, size, density)
    raise ValueError(f"unknown quadrature rule {kind!r}")

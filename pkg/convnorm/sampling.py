"""
Plain Monte Carlo vs importance-sampled mean estimation

The importance estimator is a weighted mean with weights ``p_i = rho(x_i) / xi(x_i)``;
with all weights equal to 1 it reduces to the plain sample mean.
"""

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Dict, Optional, Tuple

import numpy as np
from scipy import integrate, stats

from ._util import get_logger as _get_logger
from .tensor import Rng, make_rng

if TYPE_CHECKING:  # pragma: no cover
    import pandas

logger = _get_logger(__name__)

_N_PARAMS = {
    "normal": ("loc", "scale"),
    "exponential": ("rate",),
    "mixture": ("weight", "loc1", "scale1", "loc2", "scale2"),
}


@dataclass(frozen=True)
class Density:
    """A built-in probability density, identified by kind and parameters.

    normal
        (loc, scale)
    exponential
        (rate,)
    mixture
        (weight, loc1, scale1, loc2, scale2), i.e.
        ``weight * N(loc1, scale1) + (1 - weight) * N(loc2, scale2)``
    """

    kind: str
    params: Tuple[float, ...]

    def __post_init__(self):
        if self.kind not in _N_PARAMS:
            raise ValueError(
                f"invalid density kind {self.kind!r}. Valid options are: {', '.join(_N_PARAMS)}."
            )
        names = _N_PARAMS[self.kind]
        if len(self.params) != len(names):
            raise ValueError(f"{self.kind} density takes parameters {names}, got {self.params}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

        p = dict(zip(names, self.params))
        for k, v in p.items():
            if (k.startswith("scale") or k == "rate") and not v > 0:
                raise ValueError(f"{self.kind} density parameter {k} must be > 0, got {v}")
        if self.kind == "mixture" and not 0 < p["weight"] < 1:
            raise ValueError(f"mixture weight must be in (0, 1), got {p['weight']}")

    @classmethod
    def normal(cls, loc: float = 0, scale: float = 1) -> "Density":
        return cls("normal", (loc, scale))

    @classmethod
    def exponential(cls, rate: float = 1) -> "Density":
        return cls("exponential", (rate,))

    @classmethod
    def mixture(
        cls, weight: float, loc1: float, scale1: float, loc2: float, scale2: float
    ) -> "Density":
        return cls("mixture", (weight, loc1, scale1, loc2, scale2))

    def _components(self):
        if self.kind == "normal":
            loc, scale = self.params
            return [(1.0, stats.norm(loc, scale))]
        elif self.kind == "exponential":
            (rate,) = self.params
            return [(1.0, stats.expon(scale=1 / rate))]
        elif self.kind == "mixture":
            w, loc1, scale1, loc2, scale2 = self.params
            return [(w, stats.norm(loc1, scale1)), (1 - w, stats.norm(loc2, scale2))]
        else:
            raise AssertionError("shouldn't reach here")

    @property
    def support(self) -> Tuple[float, float]:
        return (0.0, np.inf) if self.kind == "exponential" else (-np.inf, np.inf)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return sum(w * d.pdf(x) for w, d in self._components())

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        comps = self._components()
        if len(comps) == 1:
            return comps[0][1].rvs(size=n, random_state=rng)

        (w, d1), (_, d2) = comps
        first = rng.random(n) < w
        x1 = d1.rvs(size=n, random_state=rng)
        x2 = d2.rvs(size=n, random_state=rng)
        return np.where(first, x1, x2)

    def mean(self) -> float:
        return float(sum(w * d.mean() for w, d in self._components()))

    def __str__(self):
        args = ", ".join(f"{k}={v:g}" for k, v in zip(_N_PARAMS[self.kind], self.params))
        return f"{self.kind}({args})"


@dataclass(frozen=True)
class SamplerSpec:
    target: Density
    """rho, the density whose (functional) mean is estimated."""

    proposal: Density
    """xi, the density importance samples are drawn from."""

    n: int = 10_000
    seed: int = 0

    threshold: Optional[float] = None
    """If set, estimate ``E[x * 1(x > threshold)]`` instead of ``E[x]``."""

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"sample count must be >= 1, got {self.n}")
        t_lo, _ = self.target.support
        p_lo, _ = self.proposal.support
        if p_lo > t_lo:
            raise ValueError(
                f"proposal {self.proposal} has support starting at {p_lo} but target "
                f"{self.target} is positive below it"
            )

    def functional(self, x: np.ndarray) -> np.ndarray:
        if self.threshold is None:
            return x
        return x * (x > self.threshold)


def mc_mean(spec: SamplerSpec) -> float:
    """``(1/N) sum f(x_i)`` with ``x_i ~ target``."""
    rng = make_rng(spec.seed)
    x = spec.target.sample(spec.n, rng)
    return float(np.mean(spec.functional(x)))


def importance_weights(spec: SamplerSpec, x: np.ndarray) -> np.ndarray:
    """``rho(x) / xi(x)``, rejecting samples where the proposal density vanishes."""
    q = spec.proposal.pdf(x)
    zero = np.flatnonzero(q <= 0)
    if zero.size:
        i = int(zero[0])
        raise ValueError(
            f"proposal density {spec.proposal} is 0 at sample {i} (x={x[i]!r}); "
            "the proposal must be positive wherever the target is"
        )
    return spec.target.pdf(x) / q


def importance_mean(spec: SamplerSpec) -> float:
    """``(1/N) sum f(x_i) p_i`` with ``x_i ~ proposal``, ``p_i = rho(x_i) / xi(x_i)``."""
    rng = make_rng(spec.seed)
    x = spec.proposal.sample(spec.n, rng)
    return float(np.mean(spec.functional(x) * importance_weights(spec, x)))


def shifted_normal_weight(x: np.ndarray, theta: float) -> np.ndarray:
    """Density ratio of N(0, 1) to N(theta, 1), ``exp(-x theta + theta^2 / 2)``."""
    return np.exp(-np.asarray(x) * theta + theta**2 / 2)


def true_mean(spec: SamplerSpec) -> float:
    """The estimated quantity, by numerical integration."""
    lo, hi = spec.target.support
    if spec.threshold is not None:
        lo = max(lo, spec.threshold)

    val, _ = integrate.quad(lambda x: x * spec.target.pdf(x), lo, hi)
    return float(val)


BUILTIN_SPECS: Dict[str, SamplerSpec] = {
    "normal-shift": SamplerSpec(Density.normal(0, 1), Density.normal(1, 1)),
    "exponential": SamplerSpec(Density.exponential(1), Density.exponential(0.5)),
    "mixture": SamplerSpec(Density.mixture(0.5, -2, 0.5, 3, 1), Density.normal(0, 3)),
    "gaussian-tail": SamplerSpec(Density.normal(0, 1), Density.normal(4.5, 1), threshold=4),
}


def estimator_report(spec: SamplerSpec, replicates: int) -> "pandas.DataFrame":
    """
    Run both estimators on `replicates` seeds (``spec.seed + r``).

    Returns
    -------
    DataFrame
        Columns ``method, mean, variance, n, seed``, one row per estimator.
        `mean` and `variance` are over the replicate estimates (``ddof=1``, or 0 for a single
        replicate); `seed` is the first seed.
    """
    import pandas as pd

    if replicates < 1:
        raise ValueError(f"replicates must be >= 1, got {replicates}")

    ests: Dict[str, list] = {"mc": [], "importance": []}
    for r in range(replicates):
        s = replace(spec, seed=spec.seed + r)
        ests["mc"].append(mc_mean(s))
        ests["importance"].append(importance_mean(s))

    ddof = 1 if replicates > 1 else 0
    rows = [
        {
            "method": method,
            "mean": float(np.mean(vals)),
            "variance": float(np.var(vals, ddof=ddof)),
            "n": spec.n,
            "seed": spec.seed,
        }
        for method, vals in ests.items()
    ]
    df = pd.DataFrame(rows, columns=["method", "mean", "variance", "n", "seed"])
    logger.debug(f"{spec.target} via {spec.proposal}:\n{df}")

    return df

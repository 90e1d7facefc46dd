"""
The Cauchy location mixture test bed.

Data come from p0 * Cauchy(a, 1) + (1 - p0) * Cauchy(-a, 1) and are fit with a
single Cauchy(mu, 1) model under a flat prior. For a > 2 the posterior becomes
bimodal in the large-n limit unless p0 reaches xi(a), which makes the model a
controlled source of non-mixing chains with closed-form answers:

    h(mu)    limiting average log likelihood (up to constants), h'(mu) closed form
    modes    roots of a cubic g(mu) sharing the sign of h'(mu)
    xi(a)    root of a quartic where the cubic's discriminant changes sign
    elpd     limits for the Bayes posterior and for stacked mixtures, by quadrature

A random-walk Metropolis sampler and an exact grid posterior complete the bed.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, stats
from scipy.special import logsumexp

from utils.config import DEFAULT_STEP, parallel_map
from utils.draws import ChainDraws, DrawSet, assemble, write_chain_csv
from utils.errors import DomainError, NumericalFailure
from utils.psis import LooMatrix
from utils.stacking import ChainWeights, StackingConfig, optimize_weights

logger = logging.getLogger(__name__)

MODULE = "cauchy-theory"
REAL_TOL = 1e-9
QUAD_EPSABS = 1e-6
LIMIT_LAMBDA = 1.0 + 1e-6
NODES_PER_PANEL = 256
LOG_PI = float(np.log(np.pi))
LOG_POST_COLUMN = "lp__"


@dataclass(frozen=True)
class CauchyScenario:
    """
    Attributes:
        a: half-distance between the two components, > 0
        p0: probability of the right component, in [0.5, 1]
        n: number of observations
        seed: seed of the data stream
    """

    a: float
    p0: float = 0.5
    n: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.a > 0:
            raise DomainError(f"a must be positive, got {self.a}", module=MODULE)
        if not 0.5 <= self.p0 <= 1.0:
            raise DomainError(f"p0 must lie in [0.5, 1], got {self.p0}", module=MODULE)
        if self.n < 0:
            raise DomainError(f"n must be nonnegative, got {self.n}", module=MODULE)


@dataclass(frozen=True)
class ModeReport:
    """Local maxima of h, ascending; bimodal exactly when there are two."""

    modes: Tuple[float, ...]

    @property
    def bimodal(self) -> bool:
        return len(self.modes) == 2

    def to_dict(self) -> Dict:
        return {"modes": list(self.modes), "bimodal": self.bimodal}


def _check_ap(a: float, p0: float) -> None:
    if not a > 0:
        raise DomainError(f"a must be positive, got {a}", module=MODULE)
    if not 0.5 <= p0 <= 1.0:
        raise DomainError(f"p0 must lie in [0.5, 1], got {p0}", module=MODULE)


def generate_data(sc: CauchyScenario) -> np.ndarray:
    """n iid draws of y_i ~ Cauchy((2 z_i - 1) a, 1), z_i ~ Bernoulli(p0)."""
    rng = np.random.Generator(np.random.Philox(sc.seed))
    right = rng.random(sc.n) < sc.p0
    return np.where(right, sc.a, -sc.a) + rng.standard_cauchy(sc.n)


def true_density(y, a: float, p0: float) -> np.ndarray:
    return p0 * stats.cauchy.pdf(y, loc=a) + (1.0 - p0) * stats.cauchy.pdf(y, loc=-a)


# --------------------------------------------------------------------------
# The limiting log likelihood h(mu)
# --------------------------------------------------------------------------

def h_prime(mu, a: float, p0: float):
    """dh/dmu = -pi p0 (mu - a) / ((a - mu)^2 + 4) - pi (1 - p0) (a + mu) / ((a + mu)^2 + 4)."""
    mu = np.asarray(mu, dtype=np.float64)
    out = (-np.pi * p0 * (mu - a) / ((a - mu) ** 2 + 4.0)
           - np.pi * (1.0 - p0) * (a + mu) / ((a + mu) ** 2 + 4.0))
    return float(out) if out.ndim == 0 else out


def h_double_prime(mu, a: float, p0: float):
    mu = np.asarray(mu, dtype=np.float64)
    right = (mu - a) ** 2
    left = (mu + a) ** 2
    out = (-np.pi * p0 * (4.0 - right) / (right + 4.0) ** 2
           - np.pi * (1.0 - p0) * (4.0 - left) / (left + 4.0) ** 2)
    return float(out) if out.ndim == 0 else out


def _quad_theta(integrand: Callable[[float], float], points: Sequence[float], epsabs: float) -> float:
    """Integrate f(y) dy over the real line through y = tan(theta)."""
    breaks = sorted({float(np.arctan(p)) for p in points})

    def transformed(theta):
        y = np.tan(theta)
        return integrand(y) * (1.0 + y * y)

    value, abserr, info, *message = integrate.quad(
        transformed, -np.pi / 2, np.pi / 2, points=breaks or None, limit=200,
        epsabs=epsabs, epsrel=epsabs, full_output=1,
    )
    if message and abserr > QUAD_EPSABS:
        raise NumericalFailure(
            f"quadrature did not converge: {message[0]} (error estimate {abserr:.3g})",
            module=MODULE, abserr=abserr,
        )
    return float(value)


def h_value(mu: float, a: float, p0: float) -> float:
    """
    h(mu) = -(pi / 2) E_true[log(1 + (y - mu)^2)], by quadrature.

    Scaled so that h_prime is exactly its derivative.
    """
    _check_ap(a, p0)
    return -0.5 * np.pi * _quad_theta(
        lambda y: true_density(y, a, p0) * np.log1p((y - mu) ** 2), (-a, a, mu), epsabs=1e-12,
    )


def cubic_coefficients(a: float, p0: float) -> np.ndarray:
    """g(mu), highest power first; h'(mu) = pi g(mu) / (((a - mu)^2 + 4) ((a + mu)^2 + 4))."""
    return np.array([
        -1.0,
        a - 2.0 * a * p0,
        a * a - 4.0,
        -4.0 * a - a ** 3 + 8.0 * a * p0 + 2.0 * a ** 3 * p0,
    ])


def cubic_discriminant(a: float, p0: float) -> float:
    """Discriminant of g computed from its coefficients; > 0 means three distinct real roots."""
    c3, c2, c1, c0 = cubic_coefficients(a, p0)
    return float(c2 * c2 * c1 * c1 - 4.0 * c3 * c1 ** 3 - 4.0 * c2 ** 3 * c0
                 - 27.0 * c3 * c3 * c0 * c0 + 18.0 * c3 * c2 * c1 * c0)


def discriminant(a: float, p0: float) -> float:
    """The discriminant of g written as a polynomial in p0 (equal to 64 u_a(p0))."""
    a2, a4, a6 = a ** 2, a ** 4, a ** 6
    p = p0
    return ((64 * a6 + 256 * a4) * p ** 4 + (-128 * a6 - 512 * a4) * p ** 3
            + (64 * a6 - 512 * a4 - 2816 * a2) * p ** 2 + (768 * a4 + 2816 * a2) * p
            - 256 * a4 - 512 * a2 - 256)


def _polish(coeffs: np.ndarray, root: float, steps: int = 3) -> float:
    deriv = np.polyder(coeffs)
    for _ in range(steps):
        slope = np.polyval(deriv, root)
        if slope == 0.0:
            break
        candidate = root - np.polyval(coeffs, root) / slope
        if abs(np.polyval(coeffs, candidate)) >= abs(np.polyval(coeffs, root)):
            break
        root = candidate
    return float(root)


def _real_roots(coeffs: np.ndarray) -> np.ndarray:
    roots = np.roots(coeffs)
    scale = np.maximum(1.0, np.abs(roots))
    return np.sort(roots[np.abs(roots.imag) <= REAL_TOL * scale].real)


def xi(a: float) -> float:
    """
    Bimodality boundary: for p0 < xi(a) the limiting posterior has two modes.

    The root in [0.5, 1) of the quartic
        u_a(x) = x^4 (a^6 + 4a^4) + x^3 (-2a^6 - 8a^4) + x^2 (a^6 - 8a^4 - 44a^2)
                 + x (12a^4 + 44a^2) - 4a^4 - 8a^2 - 4,
    found among the companion-matrix eigenvalues. The four roots approach
    -2/a, 2/a, 1 - 2/a and 1 + 2/a as a grows; xi is the third in ascending order.

    Raises:
        DomainError: a <= 2
    """
    if not a > 2.0:
        raise DomainError(f"xi is defined for a > 2, got {a}", module=MODULE)
    if a - 2.0 <= 1e-6:
        return 0.5
    a2, a4, a6 = a ** 2, a ** 4, a ** 6
    coeffs = np.array([a6 + 4 * a4, -2 * a6 - 8 * a4, a6 - 8 * a4 - 44 * a2, 12 * a4 + 44 * a2, -4 * a4 - 8 * a2 - 4])
    coeffs = coeffs / coeffs[0]
    roots = _real_roots(coeffs)
    inside = roots[(roots >= 0.5 - REAL_TOL) & (roots < 1.0)]
    if inside.size == 0 and a - 2.0 <= 1e-3:
        # the two middle roots coalesce at 0.5 as a approaches 2
        return 0.5
    if inside.size == 0:
        raise NumericalFailure(f"no quartic root in [0.5, 1) for a = {a}", module=MODULE, a=a)
    # u_a falls through zero here; a lower root within rounding of 0.5 is its partner
    root = _polish(coeffs, inside[-1])
    return float(min(max(root, 0.5), np.nextafter(1.0, 0.0)))


def limiting_modes(a: float, p0: float) -> ModeReport:
    """
    Local maxima of h(mu), i.e. where the posterior concentrates as n grows.

    The stationary points are the real roots of the cubic g; the simple ones
    where h'' < 0 are maxima. A double root is an inflection point.
    """
    _check_ap(a, p0)
    if p0 == 0.5:
        if a > 2.0:
            gamma = float(np.sqrt(a * a - 4.0))
            return ModeReport((-gamma, gamma))
        return ModeReport((0.0,))
    coeffs = cubic_coefficients(a, p0)
    roots = [_polish(coeffs, r) for r in _real_roots(coeffs)]
    distinct: List[List[float]] = []
    for r in sorted(roots):
        if distinct and abs(r - distinct[-1][-1]) <= 1e-7 * max(1.0, abs(r)):
            distinct[-1].append(r)
        else:
            distinct.append([r])
    modes = [group[0] for group in distinct if len(group) == 1 and h_double_prime(group[0], a, p0) < 0.0]
    if not modes:
        modes = [min((group[0] for group in distinct), key=lambda r: h_double_prime(r, a, p0))]
    logger.debug("modes for a=%g p0=%g: %s", a, p0, modes)
    return ModeReport(tuple(float(m) for m in modes))


def kl_cauchy(mu1: float, mu2: float, sigma: float = 1.0) -> float:
    """KL(Cauchy(mu1, sigma) || Cauchy(mu2, sigma)) = log(1 + (mu1 - mu2)^2 / (4 sigma^2))."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}", module=MODULE)
    return float(np.log1p((mu1 - mu2) ** 2 / (4.0 * sigma * sigma)))


# --------------------------------------------------------------------------
# Predictive performance in the large-n limit
# --------------------------------------------------------------------------

def elpd_bayes_limit(a: float, p0: float) -> float:
    """
    elpd of the Bayes posterior once it has collapsed onto the right mode gamma.

    -(p0 log(pi (4 + (gamma - a)^2)) + (1 - p0) log(pi (4 + (gamma + a)^2)))
    At p0 = 0.5 both modes give the same value; the right one is used.
    """
    gamma = max(limiting_modes(a, p0).modes)
    return float(-(p0 * np.log(np.pi * (4.0 + (gamma - a) ** 2))
                   + (1.0 - p0) * np.log(np.pi * (4.0 + (gamma + a) ** 2))))


def _log_mixture(y, w: np.ndarray, locs: np.ndarray):
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    return logsumexp(log_w + stats.cauchy.logpdf(np.asarray(y)[..., None], loc=locs), axis=-1)


def _mixture_args(w, locs) -> Tuple[np.ndarray, np.ndarray]:
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    locs = np.asarray(locs, dtype=np.float64).ravel()
    if w.shape != locs.shape:
        raise DomainError(f"{w.size} weights for {locs.size} locations", module=MODULE)
    if not np.all(np.isfinite(locs)):
        raise DomainError("locations must be finite", module=MODULE)
    return ChainWeights(w).w, locs


def elpd_mixture(a: float, p0: float, w, locs) -> float:
    """
    Integral of p_true(y) log sum_k w_k Cauchy(y | loc_k, 1) over y.

    Adaptive Gauss-Kronrod on y = tan(theta), absolute tolerance 1e-6.

    Raises:
        NumericalFailure: quadrature fails to reach the tolerance
    """
    _check_ap(a, p0)
    w, locs = _mixture_args(w, locs)
    return _quad_theta(
        lambda y: true_density(y, a, p0) * float(_log_mixture(y, w, locs)),
        (-a, a, *locs), epsabs=1e-9,
    )


def elpd_true(a: float, p0: float) -> float:
    """elpd of the data-generating process itself, the ceiling for any predictive."""
    if p0 == 1.0:
        return elpd_mixture(a, p0, [1.0], [a])
    return elpd_mixture(a, p0, [p0, 1.0 - p0], [a, -a])


def _theta_rule(points: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on (-pi/2, pi/2), split at atan(points)."""
    edges = np.unique(np.concatenate([[-np.pi / 2, np.pi / 2], np.arctan(np.asarray(points, dtype=np.float64))]))
    x, wx = np.polynomial.legendre.leggauss(NODES_PER_PANEL)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes.append(lo + half * (x + 1.0))
        weights.append(half * wx)
    return np.concatenate(nodes), np.concatenate(weights)


def limit_stacking_weights(a: float, p0: float, locs, lambda_: float = LIMIT_LAMBDA) -> ChainWeights:
    """
    Stacking weights for components Cauchy(loc_k, 1) scored on the true data distribution.

    The population objective integral of p_true(y) log sum_k w_k Cauchy(y | loc_k, 1)
    is discretized with a fixed quadrature rule in theta = atan(y) and handed to
    the stacking optimizer as observation weights.
    """
    _check_ap(a, p0)
    locs = np.asarray(locs, dtype=np.float64).ravel()
    theta, rule = _theta_rule((-a, a, *locs))
    y = np.tan(theta)
    point_weights = rule * true_density(y, a, p0) * (1.0 + y * y)
    log_density = stats.cauchy.logpdf(y[:, None], loc=locs)
    loo = LooMatrix(log_density, chain_ids=tuple(f"loc={loc:g}" for loc in locs))
    return optimize_weights(loo, StackingConfig(lambda_=lambda_, tol=1e-12), point_weights=point_weights)


def theory_report(a: float, p0: float) -> Dict:
    """Everything the analysis says about (a, p0), as plain values."""
    _check_ap(a, p0)
    report = limiting_modes(a, p0)
    weights = limit_stacking_weights(a, p0, report.modes)
    return {
        "a": a,
        "p0": p0,
        "xi": xi(a) if a > 2.0 else None,
        "modes": list(report.modes),
        "bimodal": report.bimodal,
        "elpd_bayes_limit": elpd_bayes_limit(a, p0),
        "elpd_true": elpd_true(a, p0),
        "elpd_stacking_opt": elpd_mixture(a, p0, weights, report.modes),
        "stacking_weights": weights.w.tolist(),
    }


# --------------------------------------------------------------------------
# Sampling and the exact posterior
# --------------------------------------------------------------------------

def log_posterior(mu: float, data: np.ndarray) -> float:
    """Flat-prior log posterior of the Cauchy(mu, 1) model, up to a constant."""
    return float(-np.sum(np.log1p((data - mu) ** 2)))


def pointwise_log_lik(mu, data: np.ndarray) -> np.ndarray:
    """[S x n] matrix of log Cauchy(y_i | mu_s, 1)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    return -LOG_PI - np.log1p((data[None, :] - mu[:, None]) ** 2)


def metropolis_walk(log_target: Callable[[float], float], init: float, n_steps: int, step: float,
                    rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """
    Random-walk Metropolis with Gaussian proposals.

    Returns:
        (states, acceptance rate); states[s] is the state after step s
    """
    if n_steps < 1 or not step > 0:
        raise DomainError("need at least one step and a positive step size", module=MODULE)
    proposals = rng.standard_normal(n_steps) * step
    log_u = np.log(rng.random(n_steps))
    states = np.empty(n_steps)
    current, current_lp = float(init), log_target(float(init))
    accepted = 0
    for s in range(n_steps):
        candidate = current + proposals[s]
        candidate_lp = log_target(candidate)
        if log_u[s] < candidate_lp - current_lp:
            current, current_lp = candidate, candidate_lp
            accepted += 1
        states[s] = current
    return states, accepted / n_steps


def _chain_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def _sample_chain(data: np.ndarray, init: float, S: int, step: float, rng: np.random.Generator,
                  chain_id: str) -> Tuple[ChainDraws, float]:
    if S < 2:
        raise DomainError(f"S must be at least 2, got {S}", module=MODULE)
    mu, acceptance = metropolis_walk(lambda m: log_posterior(m, data), init, S, step, rng)
    log_lik = pointwise_log_lik(mu, data)
    lp = log_lik.sum(axis=1) + data.size * LOG_PI
    chain = ChainDraws(log_lik, chain_id, np.column_stack([mu, lp]), ("mu", LOG_POST_COLUMN))
    logger.info("%s: acceptance %.3f, mean mu %.4g", chain_id, acceptance, float(mu.mean()))
    return chain, acceptance


def rw_metropolis(sc: CauchyScenario, data, init: Optional[float] = None, S: int = 1000,
                  step: float = DEFAULT_STEP, seed: int = 0) -> ChainDraws:
    """
    One random-walk Metropolis chain on the flat-prior posterior of mu.

    The chain carries the mu draws and their log posterior (column lp__) as
    params and log Cauchy(y_i | mu_s, 1) as log_lik. init defaults to +a.
    The acceptance rate is logged; metropolis_walk returns it directly.
    """
    data = np.asarray(data, dtype=np.float64).ravel()
    init = sc.a if init is None else init
    chain, _ = _sample_chain(data, init, S, step, _chain_rng(seed, 0), "chain_1")
    return chain


@dataclass(frozen=True)
class Simulation:
    """Simulated data, the chains run on it and their acceptance rates."""

    scenario: CauchyScenario
    data: np.ndarray
    draws: DrawSet
    acceptance: Tuple[float, ...]
    iters: int
    step: float
    inits: Tuple[float, ...] = ()

    def scenario_record(self) -> Dict:
        return {
            **asdict(self.scenario),
            "chains": self.draws.n_chains,
            "iters": self.iters,
            "step": self.step,
            "acceptance": list(self.acceptance),
            "inits": list(self.inits),
        }


def simulate_chains(sc: CauchyScenario, n_chains: int = 8, S: int = 1000, step: float = DEFAULT_STEP,
                    threads: int = 1) -> Simulation:
    """
    Generate data and run n_chains Metropolis chains started alternately at +a and -a.

    Chain k draws from a Philox stream derived from (sc.seed, k + 1), so results
    do not depend on the thread count.
    """
    if n_chains < 1:
        raise DomainError("at least one chain is required", module=MODULE)
    data = generate_data(sc)

    inits = tuple(sc.a if k % 2 == 0 else -sc.a for k in range(n_chains))

    def run(k):
        return _sample_chain(data, inits[k], S, step, _chain_rng(sc.seed, k + 1), f"chain_{k + 1}")

    results = parallel_map(run, range(n_chains), threads)
    ds = assemble([chain for chain, _ in results], provenance={"scenario": json.dumps(asdict(sc))})
    return Simulation(sc, data, ds, tuple(acc for _, acc in results), S, step, inits)


def write_simulation(sim: Simulation, out_dir) -> List[Path]:
    """Write per-chain CSVs and scenario.json in the layout load_chain_dir reads."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for chain in sim.draws.chains:
        written.extend(p for p in write_chain_csv(chain, out_dir) if p is not None)
    scenario = out_dir / "scenario.json"
    scenario.write_text(json.dumps(sim.scenario_record(), indent=2) + "\n", encoding="utf-8")
    written.append(scenario)
    return written


def _cell_widths(grid: np.ndarray) -> np.ndarray:
    if grid.size == 1:
        return np.ones(1)
    mid = 0.5 * (grid[:-1] + grid[1:])
    edges = np.concatenate(([grid[0] - (mid[0] - grid[0])], mid, [grid[-1] + (grid[-1] - mid[-1])]))
    return np.diff(edges)


def grid_posterior(data, mu_grid) -> np.ndarray:
    """
    Exact flat-prior posterior masses of mu on a grid, normalized in the log domain.

    Each point carries the cell between the midpoints to its neighbours (the end
    cells extend half a spacing outwards), so uneven grids give masses, not
    density values.

    Raises:
        DomainError: grid empty or not sorted
        NumericalFailure: no grid point has a finite log posterior
    """
    data = np.asarray(data, dtype=np.float64).ravel()
    mu_grid = np.asarray(mu_grid, dtype=np.float64).ravel()
    if mu_grid.size == 0 or np.any(np.diff(mu_grid) <= 0):
        raise DomainError("mu_grid must be non-empty and strictly increasing", module=MODULE)
    log_post = np.empty(mu_grid.size)
    chunk = max(1, 2_000_000 // max(1, data.size))
    for start in range(0, mu_grid.size, chunk):
        block = mu_grid[start:start + chunk]
        log_post[start:start + chunk] = -np.sum(np.log1p((data[None, :] - block[:, None]) ** 2), axis=1)
    if not np.any(np.isfinite(log_post)):
        raise NumericalFailure("log posterior is non-finite on the whole grid", module=MODULE)
    log_mass = log_post + np.log(_cell_widths(mu_grid))
    return np.exp(log_mass - logsumexp(log_mass))

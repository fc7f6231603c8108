"""
Two-component Rice mixture on per-image log reconstruction errors.

Each hypothesis H (normal / anomalous) has the density

    p(e|H) = 2(e - mu)/alpha * exp(-((e - mu)**2 + nu**2)/alpha) * I0(2(e - mu) nu/alpha)

for e > mu and 0 otherwise (a Rice law with 2 sigma**2 = alpha, shifted by
mu; nu = 0 gives a shifted Rayleigh). The mixture weight w is the prior of
the normal class. Parameters are fitted by box-constrained L-BFGS from many
random starts, followed by rounds of perturbed restarts around the best
solutions.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import optimize, special

from .errors import DataError, DomainError, FitError, ThresholdError

W_MIN, W_MAX = 1e-3, 1.0 - 1e-3
ALPHA_MIN = 1e-6
PENALTY = 1e10
FD_STEP = 1e-6
RICE, GAMMA = "rice", "gamma"


@dataclass(frozen=True)
class RiceParams:
    """Bias ``mu``, shape ``nu`` and scale ``alpha`` of one component."""
    mu: float
    nu: float
    alpha: float


@dataclass
class RiceMixtureParams:
    w: float
    normal: RiceParams
    anomal: RiceParams
    nll: float = float("nan")
    n_restarts_used: int = 0
    converged: bool = False
    family: str = RICE
    e_range: tuple[float, float] | None = None
    seed: int | None = None
    diagnostics: dict = field(default_factory=dict, repr=False, compare=False)

    def vector(self) -> np.ndarray:
        n, a = self.normal, self.anomal
        return np.array([self.w, n.mu, n.nu, n.alpha, a.mu, a.nu, a.alpha])

    @classmethod
    def from_vector(cls, x, **kw):
        x = [float(v) for v in x]
        return cls(w=x[0], normal=RiceParams(*x[1:4]), anomal=RiceParams(*x[4:7]), **kw)

    def to_dict(self, e_t: float | None = None) -> dict:
        n, a = self.normal, self.anomal
        return {"w": self.w, "mu_N": n.mu, "nu_N": n.nu, "alpha_N": n.alpha,
                "mu_A": a.mu, "nu_A": a.nu, "alpha_A": a.alpha, "nll": self.nll,
                "e_t": e_t, "seed": self.seed}


def save_params(params: RiceMixtureParams, path, e_t: float | None = None):
    """Write the flat key-value JSON document."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params.to_dict(e_t), fh, indent=2, sort_keys=False)
        fh.write("\n")


def load_params(path) -> tuple[RiceMixtureParams, float | None]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    try:
        params = RiceMixtureParams(
            w=d["w"], normal=RiceParams(d["mu_N"], d["nu_N"], d["alpha_N"]),
            anomal=RiceParams(d["mu_A"], d["nu_A"], d["alpha_A"]),
            nll=d.get("nll", float("nan")), seed=d.get("seed"))
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc}") from exc
    return params, d.get("e_t")


def log_i0(x):
    """log of the modified Bessel function I0, overflow-free for large x."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    return np.log(special.i0e(x)) + x


def _rice_logpdf(e, mu, nu, alpha):
    e = np.asarray(e, dtype=np.float64)
    z = e - mu
    pos = z > 0
    zs = np.where(pos, z, 1.0)
    out = (np.log(2.0 * zs / alpha) - (zs * zs + nu * nu) / alpha + log_i0(2.0 * zs * nu / alpha))
    return np.where(pos, out, -np.inf)


def _gamma_logpdf(e, mu, k, theta):
    e = np.asarray(e, dtype=np.float64)
    z = e - mu
    pos = z > 0
    zs = np.where(pos, z, 1.0)
    out = (k - 1.0) * np.log(zs) - zs / theta - special.gammaln(k) - k * np.log(theta)
    return np.where(pos, out, -np.inf)


def rice_logpdf(e, p: RiceParams):
    """Log density of one component; ``-inf`` where ``e <= mu``."""
    if not p.alpha > 0:
        raise DomainError(f"scale alpha must be positive, got {p.alpha}")
    out = _rice_logpdf(e, p.mu, p.nu, p.alpha)
    return float(out) if np.ndim(out) == 0 else out


def rice_pdf(e, p: RiceParams):
    return np.exp(rice_logpdf(e, p))


def gamma_logpdf(e, mu, shape, scale):
    """Shifted gamma alternative: density of (e - mu) with shape k and scale theta."""
    if not (shape > 0 and scale > 0):
        raise DomainError("gamma shape and scale must be positive")
    return _gamma_logpdf(e, mu, shape, scale)


def component_logpdf(e, p: RiceParams, family: str = RICE):
    if family == GAMMA:
        return gamma_logpdf(e, p.mu, p.nu, p.alpha)
    return rice_logpdf(e, p)


def component_mean(p: RiceParams, family: str = RICE) -> float:
    if family == GAMMA:
        return p.mu + p.nu * p.alpha
    t = p.nu ** 2 / p.alpha
    # mean of a Rice law: sigma sqrt(pi/2) L_{1/2}(-nu^2 / 2 sigma^2), 2 sigma^2 = alpha
    laguerre = (1.0 + t) * special.i0e(t / 2.0) + t * special.i1e(t / 2.0)
    return p.mu + math.sqrt(p.alpha / 2.0) * math.sqrt(math.pi / 2.0) * float(laguerre)


def _nll_batch(X, e, family=RICE):
    """NLL of every parameter row of ``X`` (k, 7) at once."""
    X = np.atleast_2d(X)
    logpdf = _gamma_logpdf if family == GAMMA else _rice_logpdf
    col = lambda j: X[:, j:j + 1]
    with np.errstate(divide="ignore"):
        lN = np.log(col(0)) + logpdf(e[None, :], col(1), col(2), col(3))
        lA = np.log1p(-col(0)) + logpdf(e[None, :], col(4), col(5), col(6))
    both_zero = np.isneginf(lN) & np.isneginf(lA)
    with np.errstate(invalid="ignore"):
        ll = np.logaddexp(lN, lA)
    ll = np.where(both_zero, -PENALTY, ll)
    total = -np.sum(ll, axis=1)
    return np.where(np.isfinite(total), total, PENALTY * len(e))


def _nll_vector(x, e, family=RICE):
    return float(_nll_batch(np.asarray(x, dtype=np.float64), e, family)[0])


def mixture_nll(scores, params: RiceMixtureParams) -> float:
    """Negative log likelihood of the scores under the mixture.

    A score outside both supports adds a finite penalty of 1e10 instead of
    infinity so that an optimizer can move away from it.
    """
    e = np.asarray(scores, dtype=np.float64).ravel()
    if e.size == 0:
        raise DataError("mixture_nll needs at least one score")
    if not np.all(np.isfinite(e)):
        raise DataError("scores must be finite")
    if params.normal.alpha <= 0 or params.anomal.alpha <= 0:
        raise DomainError("scale alpha must be positive")
    x = params.vector()
    x[0] = min(max(x[0], W_MIN), W_MAX)
    return _nll_vector(x, e, params.family)


def default_bounds(scores, mu_floor: float | None = None, family: str = RICE):
    """Parameter boxes in the order (w, mu_N, nu_N, alpha_N, mu_A, nu_A, alpha_A).

    With non-negative scores and the default floor, mu and nu lie in
    [0, max e] and alpha in [1e-6, (max e - min e)**2]. Scores that dip below
    zero move the floor down by the score range so both supports can reach
    the data.
    """
    e = np.asarray(scores, dtype=np.float64)
    lo, hi = float(e.min()), float(e.max())
    span = hi - lo
    if mu_floor is None:
        mu_floor = 0.0 if lo >= 0 else lo - span
    width = hi - mu_floor
    alpha_hi = max(span * span, 10 * ALPHA_MIN)
    if family == GAMMA:
        shape = (1e-2, max(width, 1.0) * 100.0)
        comp = [(mu_floor, hi), shape, (ALPHA_MIN, max(width, 1e-3))]
    else:
        comp = [(mu_floor, hi), (0.0, width), (ALPHA_MIN, alpha_hi)]
    return [(W_MIN, W_MAX)] + comp + comp


def _fd_grad(fb, x, lo, hi, h=FD_STEP):
    """Central differences, one-sided at a box edge; returns ``(f(x), grad)``.

    ``fb`` evaluates a stack of parameter vectors in one call.
    """
    n = len(x)
    up_ok = x + h <= hi
    down_ok = x - h >= lo
    eye = np.eye(n) * h
    pts = np.vstack([x[None, :], x + eye * up_ok[:, None], x - eye * down_ok[:, None]])
    vals = fb(pts)
    f0, fu, fd = vals[0], vals[1:n + 1], vals[n + 1:]
    step = h * (up_ok.astype(float) + down_ok.astype(float))
    return f0, (fu - fd) / step


@dataclass
class _LocalResult:
    x: np.ndarray
    nll: float
    converged: bool
    start: np.ndarray


def _local_fit(args):
    x0, e, bounds, family, max_iter = args
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    x0 = np.clip(x0, lo, hi)

    def f(x):
        return _nll_vector(x, e, family)

    def fun(x):
        return _fd_grad(lambda pts: _nll_batch(pts, e, family), np.clip(x, lo, hi), lo, hi)

    f_start = f(x0)
    # absolute NLL change of 1e-9, expressed as scipy's relative ftol
    ftol = 1e-9 / max(abs(f_start), 1.0)
    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": max_iter, "ftol": ftol, "gtol": 1e-10})
    x = np.clip(res.x, lo, hi)
    return _LocalResult(x=x, nll=f(x), converged=bool(res.success), start=x0)


def _run_all(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_local_fit, jobs))
    return [_local_fit(job) for job in jobs]


def _rank(results):
    # stable sort keeps restart-index order on ties
    return sorted(results, key=lambda r: r.nll)


def fit(scores, n_restarts: int = 100, n_keep: int = 10, seed: int = 0, *, n_perturb: int = 1,
        max_rounds: int = 50, tol: float = 1e-8, max_iter: int = 500, perturb_scale: float = 0.1,
        mu_floor: float | None = None, family: str = RICE, workers: int = 1) -> RiceMixtureParams:
    """Fit the two-component mixture by multi-start L-BFGS-B with annealed restarts.

    Parameters
    ----------
    scores : array_like
        At least 20 finite log-MSE values.
    n_restarts : int
        Uniform random starts inside the boxes for the first stage.
    n_keep : int
        Number of best solutions carried between rounds.
    seed : int
        Every start draws from its own stream, keyed by (seed, round, index),
        so results do not depend on ``workers``.
    n_perturb : int
        Perturbed restarts drawn around each kept solution per round.
    mu_floor : float, optional
        Lower bound of both biases; see :func:`default_bounds`.

    Returns
    -------
    RiceMixtureParams
        The component with the smaller mean is labelled normal.
    """
    e = np.asarray(scores, dtype=np.float64).ravel()
    if e.size < 20:
        raise DataError(f"fit needs at least 20 scores, got {e.size}")
    if not np.all(np.isfinite(e)):
        raise DataError("scores must be finite")
    if family not in (RICE, GAMMA):
        raise DataError(f"unknown mixture family {family!r}")
    bounds = default_bounds(e, mu_floor, family)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    width = hi - lo

    starts = [np.random.default_rng([seed, 0, i]).uniform(lo, hi) for i in range(n_restarts)]
    stage1 = _run_all([(x0, e, bounds, family, max_iter) for x0 in starts], workers)
    finite = [r for r in stage1 if np.isfinite(r.nll) and r.nll < PENALTY]
    if not finite:
        raise FitError(f"all {n_restarts} restarts diverged; score range [{e.min()}, {e.max()}]")
    survivors = _rank(finite)[:n_keep]
    best = survivors[0].nll
    history = [best]
    converged = False
    used = n_restarts
    for rnd in range(1, max_rounds + 1):
        jobs = []
        for j, s in enumerate(survivors):
            for q in range(n_perturb):
                rng = np.random.default_rng([seed, rnd, j, q])
                x0 = np.clip(s.x + rng.normal(0.0, perturb_scale * width), lo, hi)
                jobs.append((x0, e, bounds, family, max_iter))
        used += len(jobs)
        survivors = _rank(survivors + _run_all(jobs, workers))[:n_keep]
        history.append(survivors[0].nll)
        if best - survivors[0].nll < tol:
            converged = True
            break
        best = survivors[0].nll
    top = survivors[0]
    params = RiceMixtureParams.from_vector(
        top.x, nll=top.nll, n_restarts_used=used, converged=converged,
        family=family, e_range=(float(e.min()), float(e.max())), seed=seed)
    params = _identify(params)
    params.diagnostics = {"stage1_nll": [r.nll for r in stage1], "round_best": history,
                          "bounds": bounds}
    return params


def _identify(params: RiceMixtureParams) -> RiceMixtureParams:
    """Swap components so the one with the smaller mean is the normal class."""
    if component_mean(params.anomal, params.family) < component_mean(params.normal, params.family):
        return replace(params, w=1.0 - params.w, normal=params.anomal, anomal=params.normal)
    return params


def sample(params: RiceMixtureParams, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw scores and their component labels (True = normal)."""
    is_normal = rng.random(n) < params.w
    out = np.empty(n)
    for flag, comp in ((True, params.normal), (False, params.anomal)):
        k = int(np.sum(is_normal == flag))
        sigma = math.sqrt(comp.alpha / 2.0)
        xy = rng.normal(0.0, sigma, size=(k, 2))
        xy[:, 0] += comp.nu
        out[is_normal == flag] = comp.mu + np.hypot(xy[:, 0], xy[:, 1])
    return out, is_normal


def _log_joint(e, params):
    e = np.asarray(e, dtype=np.float64)
    lN = math.log(params.w) + component_logpdf(e, params.normal, params.family)
    lA = math.log1p(-params.w) + component_logpdf(e, params.anomal, params.family)
    return lN, lA


def posterior_normal(e, params: RiceMixtureParams, return_flag: bool = False):
    """p(N | e) by Bayes' rule, evaluated in log space.

    Where both likelihoods vanish the posterior is 0.5 and the returned flag
    (with ``return_flag=True``) marks the point as degenerate.
    """
    lN, lA = _log_joint(e, params)
    degenerate = np.isneginf(lN) & np.isneginf(lA)
    with np.errstate(invalid="ignore"):
        p = special.expit(lN - lA)
    p = np.where(degenerate, 0.5, p)
    if np.ndim(p) == 0:
        p, degenerate = float(p), bool(degenerate)
    return (p, degenerate) if return_flag else p


def posterior_anomalous(e, params: RiceMixtureParams, return_flag: bool = False):
    lN, lA = _log_joint(e, params)
    degenerate = np.isneginf(lN) & np.isneginf(lA)
    with np.errstate(invalid="ignore"):
        p = special.expit(lA - lN)
    p = np.where(degenerate, 0.5, p)
    if np.ndim(p) == 0:
        p, degenerate = float(p), bool(degenerate)
    return (p, degenerate) if return_flag else p


def _upper_extent(params):
    if params.e_range is not None:
        return params.e_range[1]
    tops = []
    for c in (params.normal, params.anomal):
        if params.family == GAMMA:
            tops.append(c.mu + c.nu * c.alpha + 10 * math.sqrt(c.nu) * c.alpha)
        else:
            tops.append(c.mu + c.nu + 10 * math.sqrt(c.alpha / 2.0))
    return max(tops)


def solve_threshold(params: RiceMixtureParams, target: float = 0.5, *, e_max: float | None = None,
                    n_grid: int = 4096, tol: float = 1e-9, return_crossings: bool = False):
    """Score e_t where the normal posterior crosses ``target``.

    The posterior is scanned on a grid from the lower support edge to
    ``e_max`` (default: the largest fitted score), each sign change is
    refined by bisection, and the crossing between the two component means
    is returned.
    """
    lo = min(params.normal.mu, params.anomal.mu)
    hi = _upper_extent(params) if e_max is None else float(e_max)
    if not hi > lo:
        raise ThresholdError(f"empty search range [{lo}, {hi}]")
    grid = np.linspace(lo, hi, n_grid)
    post, degenerate = posterior_normal(grid, params, return_flag=True)
    g = np.where(degenerate, np.nan, post - target)

    def h(x):
        p, flag = posterior_normal(x, params, return_flag=True)
        return np.nan if flag else p - target

    crossings = []
    for i in range(n_grid - 1):
        a, b = g[i], g[i + 1]
        if np.isnan(a) or np.isnan(b):
            continue
        if a == 0.0:
            crossings.append(float(grid[i]))
            continue
        if a * b < 0:
            xa, xb, fa = grid[i], grid[i + 1], a
            while xb - xa > tol:
                xm = 0.5 * (xa + xb)
                fm = h(xm)
                if fm == 0.0:
                    xa = xb = xm
                    break
                if (fm > 0) == (fa > 0):
                    xa, fa = xm, fm
                else:
                    xb = xm
            crossings.append(float(0.5 * (xa + xb)))
    if not crossings:
        raise ThresholdError(f"posterior never crosses {target} on [{lo:.6g}, {hi:.6g}]")
    m_n = component_mean(params.normal, params.family)
    m_a = component_mean(params.anomal, params.family)
    inside = [c for c in crossings if min(m_n, m_a) <= c <= max(m_n, m_a)]
    if inside:
        e_t = inside[0]
    else:
        mid = 0.5 * (m_n + m_a)
        e_t = min(crossings, key=lambda c: abs(c - mid))
    return (e_t, crossings) if return_crossings else e_t

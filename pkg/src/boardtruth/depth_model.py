"""Parametric scene-depth distribution: Gaussian and gamma mixtures fitted by EM.

Models for both families and 1..8 components are compared by BIC with
``3k - 1`` free parameters.  Initialization is a seeded k-means++ pass so
every fit is deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, logsumexp, polygamma

from .errors import CollapsedComponent, InsufficientSamples
from .scene_data import read_json, write_json

log = logging.getLogger(__name__)

FAMILIES = ("gaussian", "gamma")
MAX_COMPONENTS = 8
MIN_SAMPLES_PER_COMPONENT = 10
LL_TOL = 1e-8            # per-sample average log-likelihood change
MAX_ITER = 500
COLLAPSE_FACTOR = 1e-9
BOUND_FLOOR = 1e-3       # m
BOUND_SIGMAS = 4.0
INIT_SEED = 0
MAX_BACKTRACK = 4


@dataclass
class DepthMixture:
    family: str
    weights: np.ndarray
    params: np.ndarray          # (k, 2): (mean, std) or (shape, scale)
    log_likelihood: float = float("nan")
    bic: float = float("nan")
    sample_count: int = 0
    iterations: int = 0
    converged: bool = True
    collapsed: bool = False
    ll_history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.params = np.asarray(self.params, dtype=float).reshape(-1, 2)
        if len(self.weights) != len(self.params) or not 1 <= len(self.weights) <= MAX_COMPONENTS:
            raise ValueError("a mixture needs 1..8 components with one weight each")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.params[:, 1] <= 0) or (self.family == "gamma" and np.any(self.params[:, 0] <= 0)):
            raise ValueError("component scale parameters must be positive")

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def components(self) -> list:
        return [(float(w), (float(a), float(b))) for w, (a, b) in zip(self.weights, self.params)]

    @property
    def means(self) -> np.ndarray:
        return self.params[:, 0] if self.family == "gaussian" else self.params[:, 0] * self.params[:, 1]

    @property
    def stds(self) -> np.ndarray:
        return self.params[:, 1] if self.family == "gaussian" else np.sqrt(self.params[:, 0]) * self.params[:, 1]

    def to_dict(self) -> dict:
        names = ("mean", "std") if self.family == "gaussian" else ("shape", "scale")
        return {"family": self.family,
                "components": [{"weight": float(w), names[0]: float(a), names[1]: float(b)}
                               for w, (a, b) in zip(self.weights, self.params)],
                "log_likelihood": float(self.log_likelihood), "bic": float(self.bic),
                "sample_count": int(self.sample_count), "iterations": int(self.iterations),
                "converged": bool(self.converged), "collapsed": bool(self.collapsed)}

    @classmethod
    def from_dict(cls, d: dict) -> DepthMixture:
        fam = d["family"]
        names = ("mean", "std") if fam == "gaussian" else ("shape", "scale")
        comps = d["components"]
        return cls(fam, [c["weight"] for c in comps], [[c[names[0]], c[names[1]]] for c in comps],
                   d.get("log_likelihood", float("nan")), d.get("bic", float("nan")),
                   d.get("sample_count", 0), d.get("iterations", 0), d.get("converged", True),
                   d.get("collapsed", False))


def save_mixture(path, m: DepthMixture, bic_table=None) -> None:
    d = m.to_dict()
    if bic_table is not None:
        d["bic_table"] = bic_table
    write_json(path, d)


def load_mixture(path) -> DepthMixture:
    return DepthMixture.from_dict(read_json(path))


# --------------------------------------------------------------------------
# densities
# --------------------------------------------------------------------------

def _component_logpdf(family, x, params):
    """(n, k) log densities."""
    a, b = params[:, 0], params[:, 1]
    x = x[:, None]
    if family == "gaussian":
        return -0.5 * ((x - a) / b) ** 2 - np.log(b) - 0.5 * math.log(2 * math.pi)
    with np.errstate(divide="ignore"):
        lx = np.log(x)
    return (a - 1) * lx - x / b - gammaln(a) - a * np.log(b)


def log_pdf(m: DepthMixture, d) -> np.ndarray:
    d = np.atleast_1d(np.asarray(d, dtype=float))
    return logsumexp(_component_logpdf(m.family, d, m.params) + np.log(m.weights), axis=1)


def pdf(m: DepthMixture, d):
    """Mixture density at depth(s) ``d`` in 1/m (zero for d <= 0 in the gamma family)."""
    scalar = np.ndim(d) == 0
    d = np.atleast_1d(np.asarray(d, dtype=float))
    out = np.zeros(d.shape)
    ok = d > 0 if m.family == "gamma" else np.ones(d.shape, dtype=bool)
    if ok.any():
        out[ok] = np.exp(log_pdf(m, d[ok]))
    return float(out[0]) if scalar else out


def sample(m: DepthMixture, n: int, rng) -> np.ndarray:
    comp = rng.choice(m.k, size=n, p=m.weights)
    a, b = m.params[comp, 0], m.params[comp, 1]
    if m.family == "gaussian":
        return rng.normal(a, b)
    return rng.gamma(a, b)


def integration_bounds(m: DepthMixture) -> tuple[float, float]:
    """(d_min, d_max): 4 standard deviations around each component mean, floored at 1 mm."""
    mu, sd = m.means, m.stds
    lo = max(BOUND_FLOOR, float(np.min(mu - BOUND_SIGMAS * sd)))
    hi = float(np.max(mu + BOUND_SIGMAS * sd))
    return lo, max(hi, lo)


# --------------------------------------------------------------------------
# EM
# --------------------------------------------------------------------------

def _kmeanspp(x, k, rng):
    """k-means++ seeding on 1-D data followed by a few Lloyd steps; returns labels."""
    centers = [x[rng.integers(len(x))]]
    d2 = (x - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
        d2 = np.minimum(d2, (x - centers[-1]) ** 2)
    c = np.sort(np.array(centers))
    for _ in range(10):
        labels = np.argmin(np.abs(x[:, None] - c[None]), axis=1)
        new = np.array([x[labels == j].mean() if np.any(labels == j) else c[j] for j in range(k)])
        if np.array_equal(new, c):
            break
        c = new
    return np.argmin(np.abs(x[:, None] - c[None]), axis=1)


def _gamma_shape(s, tol=1e-10, max_iter=100):
    """Solve ``log a - digamma(a) = s`` for a > 0 (vectorized Newton in log a)."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    a = np.empty_like(s)
    tiny = s < 1e-8
    # log a - digamma(a) ~ 1/(2a) + 1/(12 a^2) for large a
    a[tiny] = np.where(s[tiny] <= 1e-30, 1e30,
                       (1.0 + np.sqrt(1.0 + 2.0 * s[tiny] / 3.0)) / (4.0 * np.maximum(s[tiny], 1e-300)))
    idx = np.nonzero(~tiny)[0]
    if len(idx):
        ss = s[idx]
        aa = (3.0 - ss + np.sqrt((ss - 3.0) ** 2 + 24.0 * ss)) / (12.0 * ss)
        for _ in range(max_iter):
            f = np.log(aa) - digamma(aa) - ss
            fp = 1.0 / aa - polygamma(1, aa)
            step = np.clip(f / (fp * aa), -5.0, 5.0)
            new = aa * np.exp(-step)
            done = np.abs(new - aa) <= tol * aa
            aa = new
            if done.all():
                break
        a[idx] = aa
    return a


class _EMState:
    """Parameters ``(w, p0, p1)`` of a k-component mixture."""

    __slots__ = ("w", "params")

    def __init__(self, w, params):
        self.w, self.params = w, params

    def to_vector(self, family):
        # unconstrained coordinates used by the extrapolation step
        p0 = self.params[:, 0] if family == "gaussian" else np.log(self.params[:, 0])
        return np.concatenate([np.log(self.w), p0, np.log(self.params[:, 1])])

    @classmethod
    def from_vector(cls, v, family):
        k = len(v) // 3
        lw = v[:k] - v[:k].max()
        w = np.exp(lw)
        w /= w.sum()
        p0 = v[k:2 * k] if family == "gaussian" else np.exp(v[k:2 * k])
        return cls(w, np.column_stack([p0, np.exp(v[2 * k:])]))


class _EM:
    def __init__(self, family, x, floor):
        self.family = family
        self.x = x
        self.lx = np.log(x) if family == "gamma" else None
        self.floor = floor

    def e_step(self, st: _EMState):
        """Returns (log-likelihood, responsibilities of shape (k, n))."""
        a, b = st.params[:, 0, None], st.params[:, 1, None]
        if self.family == "gaussian":
            logp = np.subtract(self.x, a)
            np.square(logp, out=logp)
            logp *= -0.5 / (b * b)
            logp += np.log(st.w[:, None]) - np.log(b) - 0.5 * math.log(2 * math.pi)
        else:
            logp = np.multiply(self.lx, a - 1)
            logp -= self.x * (1.0 / b)
            logp += np.log(st.w[:, None]) - gammaln(a) - a * np.log(b)
        mx = np.maximum.reduce(logp, axis=0)
        logp -= mx
        np.exp(logp, out=logp)
        tot = logp.sum(axis=0)
        logp /= tot
        ll = float(np.sum(mx) + np.sum(np.log(tot)))
        return ll, logp

    def m_step(self, resp):
        """Returns (state, collapsed mask)."""
        x = self.x
        nk = resp.sum(axis=1)
        w = nk / nk.sum()
        safe = np.maximum(nk, 1e-300)
        mean = (resp @ x) / safe
        if self.family == "gaussian":
            var = (resp @ (x * x)) / safe - mean * mean
            # guard cancellation with the centred form when the spread is tiny
            small = var < 1e-6 * mean * mean
            if small.any():
                var[small] = (resp[small] * (x - mean[small, None]) ** 2).sum(axis=1) / safe[small]
            sd = np.sqrt(np.maximum(var, 0.0))
            return _EMState(w, np.column_stack([mean, np.maximum(sd, self.floor)])), sd < self.floor
        mlog = (resp @ self.lx) / safe
        shapes = _gamma_shape(np.log(mean) - mlog)
        scales = mean / shapes
        sd = np.sqrt(shapes) * scales
        return _EMState(w, np.column_stack([shapes, scales])), sd < self.floor

    def valid(self, st: _EMState):
        p = st.params
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(st.w)) and np.all(st.w > 0)):
            return False
        sd = p[:, 1] if self.family == "gaussian" else np.sqrt(p[:, 0]) * p[:, 1]
        return bool(np.all(sd >= self.floor))


def _initial_state(em: _EM, k, rng):
    labels = _kmeanspp(em.x, k, rng)
    resp = np.zeros((k, len(em.x)))
    resp[labels, np.arange(len(em.x))] = 1.0
    keep = resp.sum(axis=1) > 0
    return em.m_step(resp[keep])


def _em(family, x, k, floor, max_iter, tol, accelerate=True):
    """EM with optional SQUAREM extrapolation.

    Each cycle takes two plain EM steps, extrapolates along them and keeps
    the extrapolated point only if its likelihood is no worse than the
    second EM step, so the recorded log-likelihood never decreases.
    """
    rng = np.random.default_rng(INIT_SEED)
    em = _EM(family, x, floor)
    n = len(x)
    st, collapsed = _initial_state(em, k, rng)
    ll, resp = em.e_step(st)
    history = [ll]
    it, converged = 0, False

    def done():
        return len(history) > 1 and abs(history[-1] - history[-2]) / n < tol

    while True:
        if collapsed.any() and len(st.w) > 1:
            return st.w, st.params, ll, it, False, collapsed, history
        if done():
            converged = True
            break
        if it >= max_iter:
            break
        u0 = st.to_vector(family)
        st, collapsed = em.m_step(resp)
        it += 1
        ll, resp = em.e_step(st)
        history.append(ll)
        if not accelerate or collapsed.any() or done() or it >= max_iter:
            continue
        u1 = st.to_vector(family)
        st, collapsed = em.m_step(resp)
        it += 1
        ll, resp = em.e_step(st)
        history.append(ll)
        if collapsed.any() or done() or it >= max_iter:
            continue
        u2 = st.to_vector(family)
        r = u1 - u0
        v = u2 - u1 - r
        nv = float(np.linalg.norm(v))
        if nv == 0.0:
            continue
        alpha = min(-float(np.linalg.norm(r)) / nv, -1.0)
        if alpha == -1.0:
            continue
        for _ in range(MAX_BACKTRACK):
            cand = _EMState.from_vector(u0 - 2.0 * alpha * r + alpha * alpha * v, family)
            if em.valid(cand):
                ll_c, resp_c = em.e_step(cand)
                if np.isfinite(ll_c) and ll_c >= ll:
                    st, ll, resp = cand, ll_c, resp_c
                    history.append(ll)
                    break
            alpha = 0.5 * (alpha - 1.0)      # halve the distance to the plain EM point
            if alpha > -1.0 + 1e-3:
                break
    return st.w, st.params, ll, it, converged, collapsed, history


def _validate(samples, family, k):
    x = np.asarray(samples, dtype=float).reshape(-1)
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if not 1 <= k <= MAX_COMPONENTS:
        raise ValueError(f"component count must be 1..{MAX_COMPONENTS}")
    if not np.all(np.isfinite(x)):
        raise ValueError("depth samples must be finite")
    if len(x) < MIN_SAMPLES_PER_COMPONENT * k:
        raise InsufficientSamples(f"{len(x)} samples cannot support {k} components "
                                  f"(need {MIN_SAMPLES_PER_COMPONENT * k})")
    if family == "gamma" and np.any(x <= 0):
        raise ValueError("gamma mixtures need strictly positive depths")
    return x


def bic_value(log_likelihood: float, k: int, n: int) -> float:
    return (3 * k - 1) * math.log(n) - 2.0 * log_likelihood


def fit_mixture(samples, family: str = "gaussian", k: int = 1, max_iter: int = MAX_ITER,
                tol: float = LL_TOL, on_collapse: str = "refit") -> DepthMixture:
    """EM fit of a ``k``-component mixture.

    A component whose standard deviation falls below 1e-9 of the data scale
    is removed and the fit restarted with one component fewer (the result is
    flagged ``collapsed``); a single Gaussian is floored instead.  With
    ``on_collapse="raise"`` CollapsedComponent is raised.
    """
    x = _validate(samples, family, k)
    n = len(x)
    scale = max(float(np.std(x)), float(np.mean(np.abs(x))), 1e-300)
    floor = COLLAPSE_FACTOR * scale
    flagged = False
    kk = k
    while True:
        w, params, ll, it, conv, collapsed, hist = _em(family, x, kk, floor, max_iter, tol)
        if not collapsed.any() or (len(w) == 1 and family == "gaussian"):
            break
        if on_collapse == "raise":
            raise CollapsedComponent(f"{family} mixture with {kk} components collapsed")
        flagged = True
        if kk == 1:
            # single gamma component on constant data: pin the spread at the floor
            mean = float(np.mean(x))
            shape = (mean / floor) ** 2
            params = np.array([[shape, mean / shape]])
            w = np.array([1.0])
            ll = float(_component_logpdf(family, x, params).sum())
            break
        kk -= 1
        log.debug("%s k=%d: component collapsed, refitting with %d", family, kk + 1, kk)
    flagged = flagged or bool(collapsed.any())
    order = np.argsort(params[:, 0] if family == "gaussian" else params[:, 0] * params[:, 1], kind="stable")
    w, params = w[order], params[order]
    w = w / w.sum()
    return DepthMixture(family, w, params, ll, bic_value(ll, len(w), n), n, it, conv, flagged, hist)


def select_model(samples, families=FAMILIES, max_components: int = MAX_COMPONENTS, executor=None):
    """Fit every (family, k) and return ``(best by BIC, table)``.

    Pairs with too few samples are skipped.  Ties go to the earlier family
    and the smaller k.
    """
    x = np.asarray(samples, dtype=float).reshape(-1)
    fams = [f for f in families if not (f == "gamma" and np.any(x <= 0))]
    jobs = [(f, k) for f in fams for k in range(1, max_components + 1)
            if len(x) >= MIN_SAMPLES_PER_COMPONENT * k]
    if not jobs:
        raise InsufficientSamples(f"{len(x)} samples are too few for any mixture")
    mapper = executor.map if executor is not None else map
    fits = list(mapper(lambda job: fit_mixture(x, job[0], job[1]), jobs))
    table = [{"family": f, "k": k, "components": m.k, "bic": m.bic, "log_likelihood": m.log_likelihood,
              "iterations": m.iterations, "collapsed": m.collapsed} for (f, k), m in zip(jobs, fits)]
    best = min(range(len(fits)), key=lambda i: (fits[i].bic, i))
    return fits[best], table

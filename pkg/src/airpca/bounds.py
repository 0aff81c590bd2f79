"""Evaluators for the binomial-sum lemma and the three descent bounds, plus
Monte Carlo validators that check their direction against the simulator.

The constants that enter the bounds are never known exactly for a given
dataset. ``estimate_constants`` produces empirical values (maxima over random
probes), which are lower bounds on the true suprema; validators therefore
test orderings and lower-bound validity, not tightness.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import binom

from . import channel as ch
from .dataset import DeviceShard, merge_shards
from .pca import (
    StationaryPointSpec,
    gradient_from_covariance,
    hessian_vector_product,
    make_stationary_point,
    min_hessian_eigenvalue,
    objective,
)

LEMMA1_MAX_K = 10_000


class PreconditionError(ValueError):
    """Raised when a bound is evaluated outside the regime it was derived for."""


@dataclass(frozen=True)
class SaddleConstants:
    alpha: float
    gamma: float
    epsilon: float
    delta: float
    beta: float
    chi: float
    B: float
    C: float
    kappa2: float

    def __post_init__(self):
        for name in ("alpha", "gamma", "epsilon", "delta", "beta", "chi", "B", "C"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        # zero data noise is a legitimate value (a single device, or iid shards)
        if not self.kappa2 >= 0:
            raise ValueError("kappa2 must be >= 0")


@dataclass(frozen=True)
class NoiseRegime:
    v_max: float
    v_min: float
    n_max: int
    rho: float

    def __post_init__(self):
        if not self.v_min > 0:
            raise ValueError("v_min must be > 0")
        if not self.v_max >= self.v_min:
            raise ValueError("need v_max >= v_min")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")

    @classmethod
    def build(
        cls,
        consts: SaddleConstants,
        mu: float,
        c: int,
        K: int,
        zeta: float,
        nu: float,
        sigma2: float,
        p_rx_min: float,
        p_rx_max: float,
        vmin_with_data_noise: bool = False,
    ) -> "NoiseRegime":
        """Derive the saddle-region noise extremes, escape horizon and rho.

        ``vmin_with_data_noise`` adds the data-noise term kappa^2/K to v_min, the
        variant used inside the escape proof rather than the headline statement.
        """
        if not 0 < p_rx_min <= p_rx_max:
            raise ValueError("need 0 < p_rx_min <= p_rx_max")
        if not sigma2 > 0:
            raise ValueError("sigma2 must be > 0 for a finite noise ratio")
        chan = nu**2 * sigma2
        v_max = consts.kappa2 / (K * zeta) + 3.0 * chan / (K**2 * zeta**2 * p_rx_min)
        v_min = chan / (K**2 * p_rx_max)
        if vmin_with_data_noise:
            v_min += consts.kappa2 / K
        log_term = math.log(6.0 * c * v_max / v_min + 1.0)
        n_max = max(1, math.ceil(log_term / (2.0 * mu * consts.gamma)))
        rho = min(2.0 * consts.beta * c / consts.gamma * log_term, 1.0)
        return cls(v_max=v_max, v_min=v_min, n_max=n_max, rho=rho)


def lemma1_exact(K: int, zeta: float) -> tuple[float, float]:
    """f = E[1/k; k >= 1] and h = E[1/k^2; k >= 1] for k ~ Binomial(K, zeta).

    Probabilities come from the log-space binomial pmf, so large K does not
    overflow the binomial coefficients.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > LEMMA1_MAX_K:
        raise ValueError(f"exact binomial sums are limited to K <= {LEMMA1_MAX_K}")
    if not 0 < zeta <= 1:
        raise ValueError("zeta must lie in (0, 1]")
    k = np.arange(1, K + 1)
    pmf = binom.pmf(k, K, zeta)
    return math.fsum(pmf / k), math.fsum(pmf / k.astype(float) ** 2)


def harmonic_mean(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0 or np.any(v <= 0):
        raise ValueError("harmonic mean needs a non-empty positive sequence")
    return float(v.size / np.sum(1.0 / v))


def theorem1_bound(n, mu, consts: SaddleConstants, c, K, zeta, nu, sigma2, p_rx_seq) -> float:
    """Lower bound on the expected n-round objective reduction in a non-stationary region."""
    if mu > 1.0 / consts.beta:
        raise PreconditionError(f"step size {mu} exceeds 1/beta = {1.0 / consts.beta}")
    p_rx_seq = np.asarray(p_rx_seq, dtype=float)
    if p_rx_seq.shape != (n,):
        raise ValueError(f"need one receive power per round ({n}), got {p_rx_seq.shape}")
    p_hm = harmonic_mean(p_rx_seq)
    kz = K * zeta
    inner = (
        consts.epsilon**2 / 2.0
        - consts.beta * c * mu * consts.kappa2 / kz
        - 3.0 * consts.beta * c * mu * nu**2 * sigma2 / (kz**2 * p_hm)
    )
    return n * mu * inner


@dataclass(frozen=True)
class Theorem2Result:
    value: float
    series: float  # mu*gamma * sum of the geometric weights / P_rx_m
    closed_form: float | None = None  # same bound through phi(mu, n), constant power only


def phi(mu: float, gamma: float, n: int, n_max: int) -> float:
    """[(1+mu*gamma)^(2n) - (1+mu*gamma)^(2 n_max)] / (2 + mu*gamma)."""
    lg = math.log1p(mu * gamma)
    return math.exp(2 * n_max * lg) * math.expm1(2 * (n - n_max) * lg) / (2.0 + mu * gamma)


def theorem2_bound(n, mu, regime: NoiseRegime, consts: SaddleConstants, c, K, zeta, nu, sigma2, p_rx_seq):
    """Lower bound on the expected objective reduction after n rounds in a saddle region.

    ``p_rx_seq`` holds at least n - N_max receive powers; entry m weights the
    noise injected in round m. The smallest entry plays the role of P_rx_min.
    """
    if mu > 0.01 / (c * regime.v_max):
        raise PreconditionError(f"step size {mu} is not small against 1/(c V_max) = {1.0 / (c * regime.v_max)}")
    if n <= regime.n_max:
        raise PreconditionError(f"n = {n} must exceed N_max = {regime.n_max}")
    span = n - regime.n_max
    p = np.asarray(p_rx_seq, dtype=float)
    if p.ndim != 1 or p.size < span:
        raise ValueError(f"need at least {span} receive powers")
    p = p[:span]
    if np.any(p <= 0):
        raise ValueError("receive powers must be positive")

    g = consts.gamma
    lg = math.log1p(mu * g)
    m = np.arange(span)
    weights = np.exp(2.0 * (n - m - 1) * lg)
    chan = nu**2 * sigma2
    series = mu * g * math.fsum(weights * chan / (K**2 * p))
    p_min = float(p.min())
    rest = consts.kappa2 / (K * zeta) + 3.0 * chan / (K**2 * zeta**2 * p_min)
    value = mu / 4.0 * (rest + series)

    closed = None
    if np.all(p == p[0]):
        closed = mu / 4.0 * (rest + phi(mu, g, n, regime.n_max) * chan / (K**2 * p_min))
        if abs(closed - value) > 1e-10 * max(abs(value), np.finfo(float).tiny):
            raise ArithmeticError(f"series {value!r} and closed form {closed!r} disagree")
    return Theorem2Result(value=value, series=series, closed_form=closed)


def theorem3_bound(N: int, mu: float, regime: NoiseRegime, B: float) -> float:
    """Probability lower bound that the path reaches the optimum region within N rounds."""
    if N < 1 or N % regime.n_max:
        raise ValueError(f"N = {N} must be a positive multiple of N_max = {regime.n_max}")
    m = N // regime.n_max
    raw = 1.0 - 12.0 * B / ((m + 1) * mu * regime.rho * regime.v_max)
    return min(max(raw, 0.0), 1.0)


def estimate_constants(
    shards: list[DeviceShard],
    d: int,
    probe_count: int,
    seed,
    radius: float | None = None,
    epsilon: float | None = None,
    delta: float | None = None,
) -> SaddleConstants:
    """Empirical lower estimates of the smoothness and noise constants.

    Probes are random points in a Frobenius ball of ``radius`` (default
    2*sqrt(d), twice the norm of any orthonormal W). Probe i is drawn from the
    i-th child of ``seed``, so more probes only ever add candidates to each
    maximum. gamma and alpha come from the Hessian at the skip-top saddle and
    at the optimum, with the rotation-invariant directions quotiented out.

    epsilon defaults to 5% of the gradient norm at W = [I_d, 0]^T and delta to
    10% of sqrt(d); both describe regions rather than the data, so callers
    usually pass their own.
    """
    if probe_count < 10:
        raise ValueError("probe_count must be >= 10")
    data = merge_shards(shards)
    D = data.D
    if not 1 <= d < D:
        raise ValueError(f"need 1 <= d < D={D}")
    radius = 2.0 * math.sqrt(d) if radius is None else radius
    covs = np.stack([s.covariance for s in shards])
    sizes = np.array([s.size for s in shards], dtype=float)
    gcov = data.covariance()

    def grad(w):
        return gradient_from_covariance(w, gcov, data.L)

    def ball_point(rng):
        w = rng.standard_normal((D, d))
        return w * (radius * rng.random() ** (1.0 / w.size) / np.linalg.norm(w))

    beta = chi = B = C = kappa2 = 0.0
    for child in np.random.SeedSequence(seed).spawn(probe_count):
        rng = np.random.default_rng(child)
        w1, w2 = ball_point(rng), ball_point(rng)
        v = rng.standard_normal((D, d))
        v /= np.linalg.norm(v)
        g1, g2 = grad(w1), grad(w2)
        gap = np.linalg.norm(w1 - w2)
        beta = max(beta, np.linalg.norm(g1 - g2) / gap)
        hv1 = hessian_vector_product(w1, v, data)
        hv2 = hessian_vector_product(w2, v, data)
        chi = max(chi, np.linalg.norm(hv1 - hv2) / gap)
        B = max(B, objective(w1, data), objective(w2, data))
        C = max(C, np.linalg.norm(g1), np.linalg.norm(g2))
        for w, g in ((w1, g1), (w2, g2)):
            local = gradient_from_covariance(w, covs, sizes)
            dev = np.sum((local - g) ** 2, axis=(1, 2)) / (D * d)
            kappa2 = max(kappa2, float(dev.max()))

    saddle = make_stationary_point(data, StationaryPointSpec(tuple(range(1, d + 1))))
    optimum = make_stationary_point(data, StationaryPointSpec(tuple(range(d))))
    gamma = -min_hessian_eigenvalue(saddle, data, quotient_rotations=True)
    alpha = min_hessian_eigenvalue(optimum, data, quotient_rotations=True)
    if epsilon is None:
        epsilon = 0.05 * float(np.linalg.norm(grad(np.eye(D, d))))
    if delta is None:
        delta = 0.1 * math.sqrt(d)
    return SaddleConstants(
        alpha=alpha,
        gamma=gamma,
        epsilon=epsilon,
        delta=delta,
        beta=float(beta),
        chi=float(chi),
        B=float(B),
        C=float(C),
        kappa2=kappa2,
    )


# ---------------------------------------------------------------------------
# Monte Carlo validators


@dataclass
class ValidationRecord:
    check: str
    params: dict
    bound: float | None
    empirical_mean: float
    standard_error: float
    verdict: str  # "pass", "fail" or "skipped"
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DescentTrace:
    objective: np.ndarray
    grad_norm_min: float
    nu_max: float
    kappa2_max: float


def simulate_descent(problem, chan_cfg: ch.ChannelConfig, w0, mu: float, p_rx_seq, rng):
    """Fixed-power over-the-air descent from w0.

    Returns a ``DescentTrace``: the objective at each of the n+1 points, and
    over the n points where gradients were taken the smallest true gradient
    norm, the largest normalization std and the largest per-entry data noise.
    """
    from .harness import fast_objective

    K = problem.covs.shape[0]
    w = np.array(w0, dtype=float)
    D, d = w.shape
    c = (D * d + 1) // 2
    trace = [fast_objective(w, problem)]
    g_min, nu_max, kappa2 = math.inf, 0.0, 0.0
    for p_rx in p_rx_seq:
        grads = gradient_from_covariance(w, problem.covs, problem.sizes)
        g = grads.mean(axis=0)
        g_min = min(g_min, float(np.linalg.norm(g)))
        kappa2 = max(kappa2, float(np.max(np.sum((grads - g) ** 2, axis=(1, 2)))) / (D * d))
        stats = ch.compute_normalization(grads)
        nu_max = max(nu_max, stats.nu)
        real = ch.sample_channel(chan_cfg, K, c, rng)
        out = ch.transmit_and_aggregate(grads, stats, real, p_rx)
        w = w - mu * out.noisy_gradient
        trace.append(fast_objective(w, problem))
    return DescentTrace(np.array(trace), g_min, nu_max, kappa2)


def _seed_rngs(seeds):
    return [np.random.default_rng(np.random.SeedSequence(int(s))) for s in seeds]


def validate_theorem1(cfg, points, seeds, consts: SaddleConstants | None = None, problem=None):
    """Check the non-stationary bound at each (mu, n, p_rx fraction of the maximum).

    Runs start at W = [I_d, 0]^T. epsilon is the smallest true gradient norm
    met by any run, while nu and kappa^2 are the largest normalization std and
    data noise met, so every run stays inside the regime the bound describes.
    """
    from .harness import build_problem

    problem = problem or build_problem(cfg)
    chan_cfg = cfg.channel.build()
    p_max = ch.max_avg_receive_power(chan_cfg)
    if consts is None:
        consts = estimate_constants(problem.shards, problem.d, 20, seed=cfg.seed)
    D, d, K = problem.data.D, problem.d, cfg.K
    c = (D * d + 1) // 2
    records = []
    for mu, n, frac in points:
        p_seq = np.full(int(n), frac * p_max)
        runs = [simulate_descent(problem, chan_cfg, np.eye(D, d), mu, p_seq, rng) for rng in _seed_rngs(seeds)]
        drops = np.array([r.objective[0] - r.objective[-1] for r in runs])
        g_min = min(r.grad_norm_min for r in runs)
        nu_max = max(r.nu_max for r in runs)
        kappa2 = max(r.kappa2_max for r in runs)
        mean = float(drops.mean())
        se = float(drops.std(ddof=1) / math.sqrt(drops.size)) if drops.size > 1 else 0.0
        local = SaddleConstants(**{**asdict(consts), "epsilon": g_min, "kappa2": kappa2})
        params = {"mu": mu, "n": int(n), "p_rx": float(p_seq[0]), "epsilon": g_min, "nu": nu_max, "kappa2": kappa2}
        try:
            bound = theorem1_bound(int(n), mu, local, c, K, chan_cfg.zeta_act, nu_max, chan_cfg.sigma2, p_seq)
        except PreconditionError as err:
            records.append(ValidationRecord("theorem1", params, None, mean, se, "skipped", str(err)))
            continue
        if bound <= 0:
            verdict, note = "skipped", "bound is not positive at this point"
        else:
            verdict, note = ("pass" if mean >= bound - 3.0 * se else "fail"), ""
        records.append(ValidationRecord("theorem1", params, bound, mean, se, verdict, note))
    return records


def validate_theorem2(cfg, seeds, consts: SaddleConstants | None = None, problem=None, mu=None):
    """Compare N_max-round objective reductions from the skip-top saddle at P_rx_min and P_rx_max.

    Passes when the low-power mean reduction is larger at one-sided 95%
    confidence (Welch z > 1.645).
    """
    from .harness import build_problem

    problem = problem or build_problem(cfg)
    chan_cfg = cfg.channel.build()
    mu = cfg.mu if mu is None else mu
    p_max = ch.max_avg_receive_power(chan_cfg)
    p_min = cfg.power.p_rx_min_frac * p_max
    if consts is None:
        consts = estimate_constants(problem.shards, problem.d, 20, seed=cfg.seed)
    D, d, K = problem.data.D, problem.d, cfg.K
    c = (D * d + 1) // 2
    w0 = make_stationary_point(problem.data, StationaryPointSpec(tuple(range(1, d + 1))))
    nu0 = ch.compute_normalization(gradient_from_covariance(w0, problem.covs, problem.sizes)).nu
    regime = NoiseRegime.build(consts, mu, c, K, chan_cfg.zeta_act, nu0, chan_cfg.sigma2, p_min, p_max)
    n = regime.n_max

    drops = {}
    for label, p in (("p_rx_min", p_min), ("p_rx_max", p_max)):
        seq = np.full(n, p)
        runs = [simulate_descent(problem, chan_cfg, w0, mu, seq, rng) for rng in _seed_rngs(seeds)]
        drops[label] = np.array([r.objective[0] - r.objective[-1] for r in runs])
    lo, hi = drops["p_rx_min"], drops["p_rx_max"]
    diff = float(lo.mean() - hi.mean())
    se = float(math.sqrt(lo.var(ddof=1) / lo.size + hi.var(ddof=1) / hi.size))
    z = diff / se if se > 0 else math.inf * np.sign(diff)
    params = {
        "mu": mu,
        "n_max": n,
        "p_rx_min": p_min,
        "p_rx_max": p_max,
        "seeds": len(seeds),
        "mean_drop_p_rx_min": float(lo.mean()),
        "mean_drop_p_rx_max": float(hi.mean()),
        "z": z,
    }
    note = ""
    bound = None
    try:
        # the bound needs n > N_max; evaluate one round past the horizon
        bound = theorem2_bound(
            n + 1, mu, regime, consts, c, K, chan_cfg.zeta_act, nu0, chan_cfg.sigma2, np.full(n + 1, p_min)
        ).value
    except PreconditionError as err:
        note = str(err)
    verdict = "pass" if z > 1.645 else "fail"
    return ValidationRecord("theorem2", params, bound, diff, se, verdict, note), regime


def bounds_report(cfg, theorem1_points=None, theorem1_seeds=range(30), theorem2_seeds=range(200)) -> dict:
    """Run both validators on ``cfg`` and collect JSON-ready records."""
    from .harness import build_problem

    problem = build_problem(cfg)
    consts = estimate_constants(problem.shards, problem.d, 20, seed=cfg.seed)
    if theorem1_points is None:
        theorem1_points = [(cfg.mu, n, frac) for n in (50, 100) for frac in (1.0, 0.5, 0.1)]
    t1 = validate_theorem1(cfg, theorem1_points, list(theorem1_seeds), consts, problem)
    t2, regime = validate_theorem2(cfg, list(theorem2_seeds), consts, problem)
    return {
        "constants": asdict(consts),
        "regime": asdict(regime),
        "records": [r.to_dict() for r in t1] + [t2.to_dict()],
    }

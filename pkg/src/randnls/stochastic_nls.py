"""Stochastic Gauss-Newton for least squares with many linear experiments.

The misfit φ(m) = ||F(m) − D||_F² over ``s`` experiments is estimated with
``n`` Gaussian probe vectors w_j:

    φ̂(m, n) = (1/n) Σ_j ||F(m) w_j − D w_j||²,

and because the forward map is linear in the source, F(m) w = f(m, Q w)
costs one forward solve per probe instead of one per experiment.

:func:`solve` runs the adaptive algorithm. Each outer iteration fits with
``n_k`` probes. The new iterate must then pass a cross-validation test on
fresh probes; if it fails, ``n_k`` grows. If it passes, a cheap uncertainty
check and then a stopping test (each on fresh probes) decide whether the
misfit is below the tolerance ρ. Each of the three gates comes in a "hard"
(conservative) and "soft" (permissive) form, and the eight combinations are
the variants ``"i"`` to ``"viii"``. ``"vanilla"`` is plain Gauss-Newton
on all experiments with the exact misfit.
"""

from dataclasses import dataclass, field, replace, asdict
from typing import Callable, Protocol
import csv
import io
import logging

import numpy as np

from .errors import ConfigurationError, DomainError, InterfaceError
from .sample_size_bounds import ToleranceBudget, sufficient_lower, sufficient_upper

__all__ = [
    "ForwardModel",
    "Dataset",
    "SolverConfig",
    "VARIANTS",
    "IterationRecord",
    "SolveReport",
    "ProbeStream",
    "StepResult",
    "LineSearchResult",
    "exact_probes",
    "full_misfit",
    "sampled_misfit",
    "cv_threshold",
    "uc_threshold",
    "stop_threshold",
    "cross_validation_gate",
    "uncertainty_gate",
    "stopping_gate",
    "gate_sample_sizes",
    "gauss_newton_step",
    "line_search",
    "solve",
    "doubling",
]

log = logging.getLogger(__name__)

# (cv, uc, stop) rules per variant
VARIANTS = {
    "i": ("hard", "hard", "hard"),
    "ii": ("hard", "hard", "soft"),
    "iii": ("hard", "soft", "hard"),
    "iv": ("hard", "soft", "soft"),
    "v": ("soft", "hard", "hard"),
    "vi": ("soft", "hard", "soft"),
    "vii": ("soft", "soft", "hard"),
    "viii": ("soft", "soft", "soft"),
}

ARMIJO_C = 1e-4
ARMIJO_MAX_BACKTRACKS = 10
PCG_ITERS = 20
PCG_TOL = 1e-3
MAX_STEP = 3.0


class ForwardModel(Protocol):
    """What :func:`solve` needs from a forward problem.

    Sources come in blocks: ``Q`` is an ``(l_q, k)`` array holding ``k``
    (possibly combined) sources, and the data-space results are ``(l, k)``.
    ``solve_count`` must grow by the number of PDE-solve equivalents spent.
    """

    solve_count: int

    def predict(self, m, Q) -> np.ndarray: ...

    def jacobian_apply(self, m, Q, v) -> np.ndarray: ...

    def jacobian_adjoint_apply(self, m, Q, Y) -> np.ndarray: ...


@dataclass
class Dataset:
    """Sources, measurements and the noise weighting.

    Attributes
    ----------
    sources : ndarray, shape (l_q, s)
    data : ndarray, shape (l, s)
    cov_factor : ndarray, shape (l, l), optional
        Invertible C with Σ = C Cᵀ for noise shared by every experiment; the
        residual is whitened as C⁻¹ (F − D).
    sigmas : ndarray, shape (s,), optional
        Per-experiment standard deviations; the residual becomes
        (F − D) diag(σ)⁻¹, which amounts to dividing each probe by σ.
    """

    sources: np.ndarray
    data: np.ndarray
    cov_factor: np.ndarray | None = None
    sigmas: np.ndarray | None = None

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.float64)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.sources.ndim != 2 or self.data.ndim != 2:
            raise DomainError("sources and data must be 2-D arrays")
        if self.sources.shape[1] != self.data.shape[1]:
            raise DomainError(
                f"{self.sources.shape[1]} sources but {self.data.shape[1]} data columns"
            )
        if self.cov_factor is not None and self.sigmas is not None:
            raise ConfigurationError("choose either cov_factor or sigmas, not both")
        if self.sigmas is not None:
            self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
            if self.sigmas.shape != (self.s,) or np.any(self.sigmas <= 0):
                raise DomainError("sigmas must be s positive numbers")
        if self.cov_factor is not None:
            self.cov_factor = np.asarray(self.cov_factor, dtype=np.float64)
            if self.cov_factor.shape != (self.l, self.l):
                raise DomainError("cov_factor must be l x l")

    @property
    def s(self):
        return self.data.shape[1]

    @property
    def l(self):
        return self.data.shape[0]

    @property
    def weighting(self):
        if self.cov_factor is not None:
            return "iid_covariance_factor"
        if self.sigmas is not None:
            return "per_experiment_sigmas"
        return "plain"

    def source_weights(self, W):
        """Probe matrix (s, n) -> weights applied to the experiments."""
        return W if self.sigmas is None else W / self.sigmas[:, None]

    def whiten(self, R):
        """Apply C⁻¹ on the left when a covariance factor is set."""
        if self.cov_factor is None:
            return R
        return np.linalg.solve(self.cov_factor, R)

    def whiten_adjoint(self, R):
        """Apply C⁻ᵀ on the left; the adjoint of :meth:`whiten`."""
        if self.cov_factor is None:
            return R
        return np.linalg.solve(self.cov_factor.T, R)


def doubling(n, s):
    """The default fitting-size growth rule, min(2n, s)."""
    return min(2 * n, s)


@dataclass(frozen=True)
class SolverConfig:
    """Settings of :func:`solve`.

    Attributes
    ----------
    rho : float
        Misfit tolerance.
    kappa : float
        Sufficient-decrease factor for cross validation, 0 < κ <= 1.
    cv_budget, uc_budget, stop_budget : ToleranceBudget
        (ε, δ) of the cross-validation, uncertainty and stopping gates.
    cv_rule, uc_rule, stop_rule : {"hard", "soft"}
    n0 : int
        Initial fitting sample size.
    growth : callable, optional
        ``(n, s) -> n_next`` after a failed cross validation; defaults to
        :func:`doubling`.
    budget_schedule : callable, optional
        ``(k, cfg) -> (cv, uc, stop)`` budgets for iteration ``k``. The gate
        sample sizes are then recomputed whenever the budgets change.
    max_outer_iters : int
    seed : int
        Root of the probe stream.
    pcg_iters, pcg_tol : int, float
        Inner CG truncation for the Gauss-Newton step.
    vanilla : bool
        Plain Gauss-Newton with every experiment, the exact misfit and no
        gates; stops when the misfit is at most ρ.
    exact_at_s : bool
        When a fitting or gate sample size reaches ``s``, evaluate the exact
        misfit (cost ``s``) instead of drawing ``n >= s`` random probes,
        which would cost at least as much and still carry sampling error.
    max_step : float or None
        Cap on the largest entry of the trial step ``|δm|``; a longer
        Gauss-Newton direction is scaled down before the line search.
        ``None`` disables the cap. Few-probe steps with a saturating
        transfer function can otherwise push parameters far into the flat
        tails, where the sensitivities vanish and the iteration stalls.
    gate_when_saturated : bool
        When cross validation fails with ``n_k`` already equal to ``s``
        there is no sample size left to grow into. With this set the
        uncertainty and stopping checks then run as after a passed cross
        validation, instead of looping at ``n_k = s`` until
        ``max_outer_iters``.
    """

    rho: float
    kappa: float = 1.0
    cv_budget: ToleranceBudget = ToleranceBudget(0.05, 0.3)
    uc_budget: ToleranceBudget = ToleranceBudget(0.1, 0.3)
    stop_budget: ToleranceBudget = ToleranceBudget(0.1, 0.1)
    cv_rule: str = "hard"
    uc_rule: str = "hard"
    stop_rule: str = "hard"
    n0: int = 1
    growth: Callable[[int, int], int] | None = None
    budget_schedule: Callable | None = None
    max_outer_iters: int = 200
    seed: int = 0
    pcg_iters: int = PCG_ITERS
    pcg_tol: float = PCG_TOL
    vanilla: bool = False
    exact_at_s: bool = True
    max_step: float | None = MAX_STEP
    gate_when_saturated: bool = True

    def __post_init__(self):
        if not (0 < self.kappa <= 1):
            raise ConfigurationError(f"kappa must lie in (0, 1], got {self.kappa}")
        if not (self.rho > 0):
            raise ConfigurationError(f"rho must be positive, got {self.rho}")
        for rule in (self.cv_rule, self.uc_rule, self.stop_rule):
            if rule not in ("hard", "soft"):
                raise ConfigurationError(f"gate rule must be hard or soft, got {rule!r}")
        if self.n0 < 1 or self.max_outer_iters < 1 or self.pcg_iters < 1:
            raise ConfigurationError("n0, max_outer_iters and pcg_iters must be positive")
        if self.max_step is not None and not (self.max_step > 0):
            raise ConfigurationError(f"max_step must be positive or None, got {self.max_step}")

    @classmethod
    def for_variant(cls, variant, rho, **kw):
        """Config for ``"i"``..``"viii"`` or ``"vanilla"``."""
        if variant == "vanilla":
            return cls(rho=rho, vanilla=True, **kw)
        try:
            cv, uc, st = VARIANTS[variant]
        except KeyError:
            raise ConfigurationError(f"unknown variant {variant!r}")
        return cls(rho=rho, cv_rule=cv, uc_rule=uc, stop_rule=st, **kw)

    @property
    def variant(self):
        if self.vanilla:
            return "vanilla"
        rules = (self.cv_rule, self.uc_rule, self.stop_rule)
        return next(k for k, v in VARIANTS.items() if v == rules)


@dataclass
class ProbeDraw:
    purpose: str
    iteration: int
    index: int
    n: int
    exact: bool = False


class ProbeStream:
    """Independent probe blocks from one root seed.

    Draw number ``i`` uses ``SeedSequence(seed).spawn``'s ``i``-th child,
    i.e. spawn key ``(i,)``, feeding a PCG64 generator whose
    ``standard_normal((s, n))`` gives the probes as columns. No two draws
    share a child, so every gate and fitting step sees fresh probes.
    """

    def __init__(self, seed, s, exact_at_s=False):
        self.root = np.random.SeedSequence(seed)
        self.s = s
        self.exact_at_s = exact_at_s
        self.draws: list[ProbeDraw] = []

    def draw(self, purpose, iteration, n):
        """Probe block (s, n), or ``exact_probes(s)`` when ``exact_at_s`` is
        set and ``n >= s``. A stream child is consumed either way, so later
        draws do not depend on that switch."""
        child = self.root.spawn(1)[0]
        idx = child.spawn_key[-1]
        if self.exact_at_s and n >= self.s:
            self.draws.append(ProbeDraw(purpose, iteration, idx, self.s, True))
            return exact_probes(self.s)
        self.draws.append(ProbeDraw(purpose, iteration, idx, int(n)))
        return np.random.default_rng(child).standard_normal((self.s, n))

    def disjoint(self):
        idx = [d.index for d in self.draws]
        return len(idx) == len(set(idx))


def _check_block(out, shape, what):
    out = np.asarray(out, dtype=np.float64)
    if out.shape != shape:
        raise InterfaceError(f"{what} returned shape {out.shape}, expected {shape}")
    return out


def _residual(fm, ds, m, W):
    """Whitened residual block B(m) W (l x n) for probe matrix W (s x n)."""
    omega = ds.source_weights(W)
    pred = _check_block(fm.predict(m, ds.sources @ omega), (ds.l, W.shape[1]), "predict")
    return ds.whiten(pred - ds.data @ omega), omega


def exact_probes(s):
    """sqrt(s) I: the deterministic probe set for which φ̂(m, s) = φ(m)."""
    return np.sqrt(s) * np.eye(s)


def full_misfit(fm, ds: Dataset, m):
    """φ(m) over all ``s`` experiments (costs ``s`` solves)."""
    R, _ = _residual(fm, ds, m, np.eye(ds.s))
    return float(np.sum(R * R))


def sampled_misfit(fm, ds: Dataset, m, n=None, seed=None, probes=None):
    """φ̂(m, n), one forward solve per probe.

    Parameters
    ----------
    n, seed : int
        Number of probes and the seed for ``default_rng``.
    probes : ndarray (s, n), optional
        Explicit probe matrix; overrides ``n`` and ``seed``. Passing
        :func:`exact_probes` (sqrt(s) times the identity, so that the
        probes still average to E[w wᵀ] = I) reproduces :func:`full_misfit`.
    """
    if probes is None:
        if n is None or n < 1:
            raise DomainError("sampled_misfit needs n >= 1 or explicit probes")
        probes = np.random.default_rng(seed).standard_normal((ds.s, n))
    probes = np.asarray(probes, dtype=np.float64)
    if probes.shape[0] != ds.s:
        raise DomainError(f"probes must have {ds.s} rows")
    R, _ = _residual(fm, ds, m, probes)
    return float(np.sum(R * R)) / probes.shape[1]


def cv_threshold(cfg, rule=None):
    eps = cfg.cv_budget.eps
    rule = rule or cfg.cv_rule
    factor = (1 - eps) / (1 + eps) if rule == "hard" else (1 + eps) / (1 - eps)
    return cfg.kappa * factor


def uc_threshold(cfg, rule=None):
    eps = cfg.uc_budget.eps
    return ((1 - eps) if (rule or cfg.uc_rule) == "hard" else (1 + eps)) * cfg.rho


def stop_threshold(cfg, rule=None):
    eps = cfg.stop_budget.eps
    return ((1 - eps) if (rule or cfg.stop_rule) == "hard" else (1 + eps)) * cfg.rho


def cross_validation_gate(cfg, phi_new, phi_old):
    """Sufficient decrease of the misfit, judged on one shared probe set.

    hard: φ̂_new <= κ (1−ε)/(1+ε) φ̂_old;  soft: φ̂_new <= κ (1+ε)/(1−ε) φ̂_old.
    """
    return bool(phi_new <= cv_threshold(cfg) * phi_old)


def uncertainty_gate(cfg, phi_est):
    """hard: φ̂ <= (1−ε_u) ρ;  soft: φ̂ <= (1+ε_u) ρ."""
    return bool(phi_est <= uc_threshold(cfg))


def stopping_gate(cfg, phi_est):
    """hard: φ̂ <= (1−ε_t) ρ;  soft: φ̂ <= (1+ε_t) ρ."""
    return bool(phi_est <= stop_threshold(cfg))


def _gate_size(budget, side, what):
    res = (sufficient_lower if side == "lower" else sufficient_upper)(budget)
    if res.n is None:
        raise ConfigurationError(f"no {what} sample size for {budget} within the scan limit")
    return res.n


def gate_sample_sizes(cfg, budgets=None):
    """``(n_c, n_u, n_t)`` for the configured rules.

    Cross validation compares the old and new misfit on the same probes and
    needs both one-sided guarantees, so ``n_c`` is the larger of the two
    sufficient sizes for its budget, whichever rule is used. A hard
    uncertainty or stopping test needs the lower-side size and a soft one
    the upper-side size.
    """
    cv, uc, st = budgets or (cfg.cv_budget, cfg.uc_budget, cfg.stop_budget)
    n_c = max(_gate_size(cv, "lower", "cross-validation"),
              _gate_size(cv, "upper", "cross-validation"))
    n_u = _gate_size(uc, "lower" if cfg.uc_rule == "hard" else "upper", "uncertainty")
    n_t = _gate_size(st, "lower" if cfg.stop_rule == "hard" else "upper", "stopping")
    return n_c, n_u, n_t


@dataclass
class StepResult:
    """Gauss-Newton direction plus what was learned computing it."""

    dm: np.ndarray
    phi: float
    gradient: np.ndarray
    cg_iterations: int
    rel_residual: float
    breakdown: bool


def _as_probes(ds, n_k, probe_seed, probes):
    if probes is not None:
        return np.asarray(probes, dtype=np.float64)
    return np.random.default_rng(probe_seed).standard_normal((ds.s, n_k))


def gauss_newton_step(fm, ds: Dataset, m, n_k=None, probe_seed=None,
                      pcg_iters=PCG_ITERS, pcg_tol=PCG_TOL, probes=None,
                      preconditioner=None):
    """Truncated-CG Gauss-Newton direction for the sampled misfit.

    Solves (Σ_j Ĵ_jᵀ Ĵ_j) δm = −Σ_j Ĵ_jᵀ r_j, where Ĵ_j is the (whitened)
    Jacobian for the combined source of probe j. CG starts from zero and
    stops after ``pcg_iters`` iterations or at relative residual
    ``pcg_tol``. The truncation is the only regularization. Each CG
    iteration applies J and Jᵀ once per probe (2 n_k solves).

    ``preconditioner`` is an optional callable ``r -> M⁻¹ r``.

    Non-positive curvature stops CG early with the current iterate, and
    ``breakdown`` is set; a warning is logged.
    """
    W = _as_probes(ds, n_k, probe_seed, probes)
    n = W.shape[1]
    R, omega = _residual(fm, ds, m, W)
    Q = ds.sources @ omega
    phi = float(np.sum(R * R)) / n
    nm = np.size(m)

    def jt(Y):
        G = fm.jacobian_adjoint_apply(m, Q, ds.whiten_adjoint(Y))
        return _check_block(G, (nm, n), "jacobian_adjoint_apply").sum(axis=1)

    def normal(v):
        Jv = ds.whiten(_check_block(fm.jacobian_apply(m, Q, v), (ds.l, n), "jacobian_apply"))
        return jt(Jv)

    g = jt(R)  # half the gradient of n * phi
    b = -g
    x = np.zeros(nm)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    apply_m = preconditioner or (lambda v: v)
    if bnorm == 0:
        return StepResult(x, phi, 2 * g / n, 0, 0.0, False)
    z = apply_m(r)
    p = z.copy()
    rz = r @ z
    it, breakdown, rel = 0, False, 1.0
    while it < pcg_iters:
        Hp = normal(p)
        curv = p @ Hp
        it += 1
        if curv <= 0:
            breakdown = True
            log.warning("non-positive curvature %.3e in GN-CG at iteration %d", curv, it)
            break
        a = rz / curv
        x += a * p
        r -= a * Hp
        rel = np.linalg.norm(r) / bnorm
        if rel <= pcg_tol:
            break
        z = apply_m(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return StepResult(x, phi, 2 * g / n, it, float(rel), breakdown)


@dataclass
class LineSearchResult:
    alpha: float
    decreased: bool
    phi: float
    evaluations: int


def line_search(fm, ds: Dataset, m, dm, n_k=None, probe_seed=None, probes=None,
                phi0=None, gradient=None, c=ARMIJO_C, max_backtracks=ARMIJO_MAX_BACKTRACKS):
    """Armijo backtracking on φ̂ with the probes used for the step.

    Tries α = 1, 1/2, 1/4, ... and accepts the first α with
    φ̂(m + α δm) <= φ̂(m) + c α ∇φ̂ᵀ δm. After ``max_backtracks`` halvings
    the last α is returned with ``decreased=False``. The same happens at
    once for δm = 0 (α = 1). ``phi0`` and ``gradient`` can be passed to
    avoid recomputing them. Otherwise the gradient is formed with one
    adjoint solve per probe.
    """
    W = _as_probes(ds, n_k, probe_seed, probes)
    n = W.shape[1]
    dm = np.asarray(dm, dtype=np.float64)
    if not np.any(dm):
        return LineSearchResult(1.0, False, phi0 if phi0 is not None else float("nan"), 0)
    if phi0 is None or gradient is None:
        R, omega = _residual(fm, ds, m, W)
        phi0 = float(np.sum(R * R)) / n
        G = fm.jacobian_adjoint_apply(m, ds.sources @ omega, ds.whiten_adjoint(R))
        gradient = 2 * G.sum(axis=1) / n
    slope = float(gradient @ dm)
    alpha, phi, evals = 1.0, phi0, 0
    for attempt in range(max_backtracks + 1):
        phi = sampled_misfit(fm, ds, m + alpha * dm, probes=W)
        evals += 1
        if phi <= phi0 + c * alpha * slope:
            return LineSearchResult(alpha, True, phi, evals)
        if attempt < max_backtracks:
            alpha *= 0.5
    return LineSearchResult(alpha, False, phi, evals)


@dataclass
class IterationRecord:
    """What happened in one outer iteration.

    Gate fields are ``None`` when the gate was not reached. ``solves_*``
    split the PDE-solve cost by phase.
    """

    k: int
    n_k: int
    phi_fit: float
    cg_iterations: int
    alpha: float
    step_decreased: bool
    step_kept: bool
    cv_passed: bool | None = None
    phi_cv_old: float | None = None
    phi_cv_new: float | None = None
    uc_passed: bool | None = None
    phi_uc: float | None = None
    stop_passed: bool | None = None
    phi_stop: float | None = None
    solves_fit: int = 0
    solves_cv: int = 0
    solves_uc: int = 0
    solves_stop: int = 0

    @property
    def solves(self):
        return self.solves_fit + self.solves_cv + self.solves_uc + self.solves_stop


TERMINATIONS = ("stopped_by_criterion", "max_iters", "sample_size_saturated")


@dataclass
class SolveReport:
    final_model: np.ndarray
    variant: str
    termination: str
    iterations: list = field(default_factory=list)
    pde_solve_count: int = 0
    sample_sizes: tuple = ()
    rho: float = 0.0
    breakdowns: list = field(default_factory=list)
    probe_draws: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    @property
    def outer_iterations(self):
        return len(self.iterations)

    @property
    def n_sequence(self):
        return [r.n_k for r in self.iterations]

    @property
    def final_phi_estimate(self):
        """Last misfit estimate the algorithm looked at."""
        for r in reversed(self.iterations):
            for v in (r.phi_stop, r.phi_uc, r.phi_cv_new):
                if v is not None:
                    return v
        return self.iterations[-1].phi_fit if self.iterations else float("nan")

    CSV_FIELDS = (
        "k", "n_k", "phi_fit", "cg_iterations", "alpha", "step_decreased", "step_kept",
        "cv_passed", "phi_cv_old", "phi_cv_new", "uc_passed", "phi_uc",
        "stop_passed", "phi_stop", "solves_fit", "solves_cv", "solves_uc",
        "solves_stop", "solves",
    )

    def to_csv(self):
        """One RFC-4180 row per iteration, with a header row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.iterations:
            d = asdict(r)
            d["solves"] = r.solves
            w.writerow([_fmt(d[f]) for f in self.CSV_FIELDS])
        return buf.getvalue()

    def to_text(self):
        """Structured plain-text report: header block, then one block per iteration."""
        lines = [
            "# solve report",
            f"variant {self.variant}",
            f"termination {self.termination}",
            f"outer_iterations {self.outer_iterations}",
            f"pde_solves {self.pde_solve_count}",
            f"rho {_fmt(self.rho)}",
            "sample_sizes " + " ".join(str(v) for v in self.sample_sizes),
        ]
        for k in sorted(self.settings):
            lines.append(f"setting {k} {_fmt(self.settings[k])}")
        for b in self.breakdowns:
            lines.append(f"breakdown {b}")
        lines.append(f"probe_draws {len(self.probe_draws)}")
        for r in self.iterations:
            d = asdict(r)
            d["solves"] = r.solves
            lines.append(f"[iteration {r.k}]")
            lines.extend(f"{f} {_fmt(d[f])}" for f in self.CSV_FIELDS if f != "k")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _settings(cfg):
    return {
        "kappa": cfg.kappa,
        "cv_eps": cfg.cv_budget.eps, "cv_delta": cfg.cv_budget.delta,
        "uc_eps": cfg.uc_budget.eps, "uc_delta": cfg.uc_budget.delta,
        "stop_eps": cfg.stop_budget.eps, "stop_delta": cfg.stop_budget.delta,
        "n0": cfg.n0, "exact_at_s": cfg.exact_at_s, "max_step": cfg.max_step,
        "gate_when_saturated": cfg.gate_when_saturated, "max_outer_iters": cfg.max_outer_iters, "seed": cfg.seed,
        "pcg_iters": cfg.pcg_iters, "pcg_tol": cfg.pcg_tol,
        "armijo_c": ARMIJO_C, "armijo_max_backtracks": ARMIJO_MAX_BACKTRACKS,
    }


def _fit(fm, ds, m, W, cfg, report, k):
    step = gauss_newton_step(fm, ds, m, probes=W, pcg_iters=cfg.pcg_iters,
                             pcg_tol=cfg.pcg_tol)
    longest = float(np.max(np.abs(step.dm))) if step.dm.size else 0.0
    if cfg.max_step is not None and longest > cfg.max_step:
        step.dm *= cfg.max_step / longest
    if step.breakdown:
        report.breakdowns.append(f"iteration {k}: non-positive curvature in CG")
    ls = line_search(fm, ds, m, step.dm, probes=W, phi0=step.phi, gradient=step.gradient)
    if not ls.decreased:
        report.breakdowns.append(f"iteration {k}: line search found no decrease")
    # a step without decrease is discarded; otherwise the new iterate stands
    m_new = m + ls.alpha * step.dm if ls.decreased else m.copy()
    return step, ls, m_new


def _solve_vanilla(fm, ds, cfg, m, report):
    W = exact_probes(ds.s)
    for k in range(cfg.max_outer_iters):
        c0 = fm.solve_count
        phi = sampled_misfit(fm, ds, m, probes=W)
        if phi <= cfg.rho:
            report.termination = "stopped_by_criterion"
            report.iterations.append(IterationRecord(
                k, ds.s, phi, 0, 0.0, False, False, stop_passed=True, phi_stop=phi,
                solves_fit=fm.solve_count - c0))
            return m
        step, ls, m = _fit(fm, ds, m, W, cfg, report, k)
        report.iterations.append(IterationRecord(
            k, ds.s, step.phi, step.cg_iterations, ls.alpha, ls.decreased, ls.decreased,
            stop_passed=False, phi_stop=phi, solves_fit=fm.solve_count - c0))
        if not ls.decreased:
            report.termination = "sample_size_saturated"
            return m
    report.termination = "max_iters"
    return m


def solve(fm, ds: Dataset, cfg: SolverConfig, m0) -> SolveReport:
    """Adaptive stochastic Gauss-Newton (or the vanilla baseline).

    Outer iteration ``k``:

    1. fit: draw ``n_k`` probes, take a Gauss-Newton step with Armijo line
       search on the sampled misfit;
    2. cross validation: draw ``n_c`` probes and compare φ̂ at the old and
       new iterate on them;
    3. if it passes, draw ``n_u`` probes for the uncertainty check, and if
       that passes, ``n_t`` probes for the stopping test; terminate when
       the stopping test passes. ``n_k`` is kept;
    4. if cross validation fails, ``n_{k+1} = growth(n_k, s)``.

    The new iterate is kept even when cross validation fails; only the
    sample size reacts. A step whose line search found no decrease is
    discarded. Once ``n_k = s``, a failed cross validation leads to the
    uncertainty and stopping checks (see ``gate_when_saturated``); if the
    step also found no decrease and the run did not stop, it ends as
    ``sample_size_saturated``.

    Every probe block is a fresh child of ``SeedSequence(cfg.seed)``, drawn
    in the order fit, cv, uc, stop within each iteration.
    """
    m = np.array(m0, dtype=np.float64)
    c_start = fm.solve_count
    report = SolveReport(m, cfg.variant, "max_iters", rho=cfg.rho, settings=_settings(cfg))
    if cfg.vanilla:
        m = _solve_vanilla(fm, ds, cfg, m, report)
        report.final_model = m
        report.sample_sizes = (ds.s, ds.s, ds.s)
        report.pde_solve_count = fm.solve_count - c_start
        return report

    growth = cfg.growth or doubling
    budgets = (cfg.cv_budget, cfg.uc_budget, cfg.stop_budget)
    n_c, n_u, n_t = gate_sample_sizes(cfg, budgets)
    report.sample_sizes = (n_c, n_u, n_t)
    stream = ProbeStream(cfg.seed, ds.s, cfg.exact_at_s)
    n = min(cfg.n0, ds.s)
    for k in range(cfg.max_outer_iters):
        if cfg.budget_schedule is not None:
            new_budgets = tuple(cfg.budget_schedule(k, cfg))
            if new_budgets != budgets:
                budgets = new_budgets
                n_c, n_u, n_t = gate_sample_sizes(cfg, budgets)
        gcfg = replace(cfg, cv_budget=budgets[0], uc_budget=budgets[1], stop_budget=budgets[2])

        c0 = fm.solve_count
        W = stream.draw("fit", k, n)
        step, ls, m_new = _fit(fm, ds, m, W, cfg, report, k)
        rec = IterationRecord(k, n, step.phi, step.cg_iterations, ls.alpha,
                              ls.decreased, ls.decreased)
        rec.solves_fit = fm.solve_count - c0

        c0 = fm.solve_count
        Wc = stream.draw("cv", k, n_c)
        rec.phi_cv_old = sampled_misfit(fm, ds, m, probes=Wc)
        rec.phi_cv_new = sampled_misfit(fm, ds, m_new, probes=Wc)
        rec.cv_passed = cross_validation_gate(gcfg, rec.phi_cv_new, rec.phi_cv_old)
        rec.solves_cv = fm.solve_count - c0
        m = m_new
        report.iterations.append(rec)

        saturated = not rec.cv_passed and n == ds.s
        if rec.cv_passed or (saturated and cfg.gate_when_saturated):
            c0 = fm.solve_count
            Wu = stream.draw("uc", k, n_u)
            rec.phi_uc = sampled_misfit(fm, ds, m, probes=Wu)
            rec.uc_passed = uncertainty_gate(gcfg, rec.phi_uc)
            rec.solves_uc = fm.solve_count - c0
            if rec.uc_passed:
                c0 = fm.solve_count
                Wt = stream.draw("stop", k, n_t)
                rec.phi_stop = sampled_misfit(fm, ds, m, probes=Wt)
                rec.stop_passed = stopping_gate(gcfg, rec.phi_stop)
                rec.solves_stop = fm.solve_count - c0
                if rec.stop_passed:
                    report.termination = "stopped_by_criterion"
                    break
        if saturated and not ls.decreased:
            report.termination = "sample_size_saturated"
            break
        if not rec.cv_passed:
            n = growth(n, ds.s)
    report.final_model = m
    report.pde_solve_count = fm.solve_count - c_start
    report.probe_draws = list(stream.draws)
    return report

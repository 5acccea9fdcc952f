"""2D DC-resistivity forward problem on the unit square.

The PDE  -div(μ ∇u) = q  with homogeneous Neumann conditions is discretized
by cell-centred finite volumes. Face conductivities are harmonic means of the
two neighbouring cells, and boundary faces carry zero flux. This gives

    L(m) = Dᵀ diag(μ_f) D,    μ_f = 1 / (Av (1/μ)),    μ = ψ(m),

where D is the face gradient and Av averages cells onto interior faces. L
annihilates constants. It is made definite by adding (γ/N) 1 1ᵀ, which fixes
the mean of the field to zero for compatible (zero-sum) sources and leaves
the operator symmetric.

Sensitivities use the adjoint-state form

    J v  = -P A⁻¹ G(u) v,     Jᵀ y = -G(u)ᵀ A⁻¹ Pᵀ y,
    G(u) = Dᵀ diag(D u) H diag(ψ'(m)),   H = dμ_f/dμ = diag(μ_f²) Av diag(μ⁻²).

Every right-hand side pushed through A⁻¹ counts as one PDE solve.
"""

from dataclasses import dataclass, field
import hashlib
import io
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, DomainError, NumericalError

__all__ = [
    "Grid2D",
    "LogisticTransfer",
    "LogLogisticTransfer",
    "TRANSFERS",
    "ConductivityModel",
    "SolveCounter",
    "face_operators",
    "assemble_operator",
    "PinnedOperator",
    "solve_pde",
    "SourceReceiverLayout",
    "DcResistivityModel",
    "SyntheticExperiment",
    "true_conductivity",
    "synthesize",
    "write_grid",
    "read_grid",
    "TAU",
    "NOISE_PCT",
    "MU_MAX_FACTOR",
    "MU_MIN_FACTOR",
]

TAU = 1.2
NOISE_PCT = 0.02
MU_MAX_FACTOR = 1.2
MU_MIN_FACTOR = 0.83
SYNTH_CG_TOL = 1e-10


@dataclass(frozen=True)
class Grid2D:
    """Uniform ``nx`` by ``ny`` cell grid on the unit square.

    Cell ``(i, j)`` (column ``i`` along x, row ``j`` along y) has flat
    index ``j * nx + i``, so flat vectors are row-major in y.
    """

    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise DomainError("grid needs at least 4 cells per side")

    @property
    def hx(self):
        return 1.0 / self.nx

    @property
    def hy(self):
        return 1.0 / self.ny

    @property
    def n_cells(self):
        return self.nx * self.ny

    @property
    def shape(self):
        return (self.ny, self.nx)

    def index(self, i, j):
        return j * self.nx + i

    def cell_centers(self):
        """``(x, y)`` arrays of length ``n_cells``."""
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(x, y)
        return X.ravel(), Y.ravel()

    def refine(self, factor=2):
        return Grid2D(self.nx * factor, self.ny * factor)

    def restriction(self, fine: "Grid2D"):
        """Averaging matrix (coarse cells x fine cells) onto this grid."""
        fx, fy = fine.nx // self.nx, fine.ny // self.ny
        if fx * self.nx != fine.nx or fy * self.ny != fine.ny:
            raise DomainError("fine grid must refine this grid by an integer factor")
        ic = np.arange(fine.nx) // fx
        jc = np.arange(fine.ny) // fy
        rows = (jc[:, None] * self.nx + ic[None, :]).ravel()
        cols = np.arange(fine.n_cells)
        vals = np.full(fine.n_cells, 1.0 / (fx * fy))
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_cells, fine.n_cells))


def _diff_1d(n, h):
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h


def _avg_1d(n):
    return sp.diags([0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [0, 1], shape=(n - 1, n))


def face_operators(grid: Grid2D):
    """Interior-face gradient ``D`` and cell-to-face average ``Av``.

    Rows list the x-faces first, then the y-faces.
    """
    ix, iy = sp.identity(grid.nx), sp.identity(grid.ny)
    Dx = sp.kron(iy, _diff_1d(grid.nx, grid.hx))
    Dy = sp.kron(_diff_1d(grid.ny, grid.hy), ix)
    Ax = sp.kron(iy, _avg_1d(grid.nx))
    Ay = sp.kron(_avg_1d(grid.ny), ix)
    return sp.vstack([Dx, Dy]).tocsr(), sp.vstack([Ax, Ay]).tocsr()


@dataclass(frozen=True)
class LogisticTransfer:
    """μ = ψ(m) = μ_min + (μ_max − μ_min) / (1 + e^{−m})."""

    mu_min: float
    mu_max: float

    def __post_init__(self):
        if not (0 < self.mu_min < self.mu_max and math.isfinite(self.mu_max)):
            raise DomainError("need 0 < mu_min < mu_max")

    @classmethod
    def from_true(cls, mu_true):
        mu_true = np.asarray(mu_true)
        return cls(MU_MIN_FACTOR * float(mu_true.min()), MU_MAX_FACTOR * float(mu_true.max()))

    def _sigmoid(self, m):
        return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(m, dtype=np.float64)))

    def __call__(self, m):
        return self.mu_min + (self.mu_max - self.mu_min) * self._sigmoid(m)

    def derivative(self, m):
        s = self._sigmoid(m)
        return (self.mu_max - self.mu_min) * s * (1.0 - s)

    def inverse(self, mu):
        t = (np.asarray(mu, dtype=np.float64) - self.mu_min) / (self.mu_max - self.mu_min)
        if np.any(t <= 0) or np.any(t >= 1):
            raise DomainError("conductivity outside the open transfer range")
        return np.log(t) - np.log1p(-t)


@dataclass(frozen=True)
class LogLogisticTransfer(LogisticTransfer):
    """μ = exp(ln μ_min + (ln μ_max − ln μ_min) / (1 + e^{−m})).

    The logistic acts on log-conductivity, so m = 0 maps to the geometric
    mean of the bounds and equal steps in m give equal conductivity ratios.
    Same bounds and interface as :class:`LogisticTransfer`.
    """

    def _span(self):
        a = math.log(self.mu_min)
        return a, math.log(self.mu_max) - a

    def __call__(self, m):
        a, w = self._span()
        return np.exp(a + w * self._sigmoid(m))

    def derivative(self, m):
        a, w = self._span()
        s = self._sigmoid(m)
        return np.exp(a + w * s) * w * s * (1.0 - s)

    def inverse(self, mu):
        a, w = self._span()
        t = (np.log(np.asarray(mu, dtype=np.float64)) - a) / w
        if np.any(t <= 0) or np.any(t >= 1):
            raise DomainError("conductivity outside the open transfer range")
        return np.log(t) - np.log1p(-t)


TRANSFERS = {"logistic": LogisticTransfer, "loglogistic": LogLogisticTransfer}


@dataclass
class ConductivityModel:
    """Model vector ``m`` over cells together with its transfer function."""

    m: np.ndarray
    transfer: LogisticTransfer

    @property
    def mu(self):
        return self.transfer(self.m)


@dataclass
class SolveCounter:
    """Monotone count of PDE solves (one per right-hand side)."""

    count: int = 0

    def add(self, k):
        self.count += int(k)


def assemble_operator(grid: Grid2D, mu, ops=None):
    """L = Dᵀ diag(μ_f) D with harmonic face averages of the cell values ``mu``.

    ``ops`` may pass a precomputed ``face_operators(grid)`` pair.

    Raises
    ------
    DomainError
        If ``mu`` is not finite and strictly positive.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (grid.n_cells,):
        raise DomainError(f"conductivity has shape {mu.shape}, expected ({grid.n_cells},)")
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        raise DomainError("conductivity must be finite and positive")
    D, Av = ops if ops is not None else face_operators(grid)
    mu_f = 1.0 / (Av @ (1.0 / mu))
    return (D.T @ sp.diags(mu_f) @ D).tocsr()


class PinnedOperator:
    """A = L + (γ/N) 1 1ᵀ, solved directly or by Jacobi-preconditioned CG.

    For a zero-sum right-hand side the solution is the mean-free solution of
    L u = b. A constant component of b maps to (mean(b)/γ) 1, which keeps A⁻¹
    symmetric for the adjoint.

    Parameters
    ----------
    L : sparse matrix
        Singular Neumann operator with constant null space.
    method : {"direct", "cg"}
        ``direct`` factors L with its first row and column removed (sparse
        LU); ``cg`` uses PCG with the diagonal of A as preconditioner.
    gamma : float, optional
        Weight of the rank-one term; defaults to the mean diagonal of L.
    """

    def __init__(self, L, method="direct", gamma=None, cg_tol=SYNTH_CG_TOL,
                 cg_max_iters=None, counter=None):
        if method not in ("direct", "cg"):
            raise ConfigurationError(f"unknown solve method {method!r}")
        self.L = sp.csr_matrix(L)
        self.N = self.L.shape[0]
        self.gamma = float(self.L.diagonal().mean()) if gamma is None else float(gamma)
        self.method = method
        self.cg_tol = cg_tol
        self.cg_max_iters = cg_max_iters if cg_max_iters is not None else 10 * self.N
        self.counter = counter
        self._lu = None

    def matvec(self, x):
        return self.L @ x + (self.gamma / self.N) * x.sum(axis=0)

    def _factor(self):
        if self._lu is None:
            self._lu = spla.splu(sp.csc_matrix(self.L[1:, 1:]))
        return self._lu

    def _solve_direct(self, B):
        mean_b = B.mean(axis=0)
        Bc = B - mean_b
        U = np.zeros_like(Bc)
        U[1:] = self._factor().solve(np.ascontiguousarray(Bc[1:]))
        U -= U.mean(axis=0)
        return U + mean_b / self.gamma

    def _solve_cg(self, B):
        A = spla.LinearOperator((self.N, self.N), matvec=self.matvec, dtype=np.float64)
        dinv = 1.0 / (self.L.diagonal() + self.gamma / self.N)
        M = spla.LinearOperator((self.N, self.N), matvec=lambda r: dinv * r, dtype=np.float64)
        U = np.zeros_like(B)
        for j in range(B.shape[1]):
            b = B[:, j]
            nb = np.linalg.norm(b)
            if nb == 0:
                continue
            u, info = spla.cg(A, b, rtol=self.cg_tol, atol=0.0,
                              maxiter=self.cg_max_iters, M=M)
            if info != 0:
                res = np.linalg.norm(b - self.matvec(u)) / nb
                raise NumericalError("PDE solve did not converge", residual=res,
                                     iterations=info)
            U[:, j] = u
        return U

    def solve(self, B):
        """A⁻¹ B for a vector or an (N, k) block; counts k solves."""
        B = np.asarray(B, dtype=np.float64)
        vec = B.ndim == 1
        B2 = B[:, None] if vec else B
        if B2.shape[0] != self.N:
            raise DomainError(f"right-hand side has {B2.shape[0]} rows, expected {self.N}")
        U = self._solve_direct(B2) if self.method == "direct" else self._solve_cg(B2)
        if self.counter is not None:
            self.counter.add(B2.shape[1])
        return U[:, 0] if vec else U


def solve_pde(L, q, cg_tol=SYNTH_CG_TOL, cg_max_iters=None, method="cg", counter=None):
    """Solve the mean-pinned system for one or several sources.

    Each column of ``q`` adds one to ``counter``.

    Raises
    ------
    NumericalError
        When CG misses ``cg_tol`` within ``cg_max_iters``; carries the
        relative residual.
    """
    return PinnedOperator(L, method=method, cg_tol=cg_tol, cg_max_iters=cg_max_iters,
                          counter=counter).solve(q)


def _positions(n, p):
    """``p`` cell indices spread evenly over 1..n-2 (corners excluded)."""
    if p < 1 or p > n - 2:
        raise ConfigurationError(f"p must lie in [1, {n - 2}] for {n} cells per side")
    pos = np.floor((np.arange(p) + 1) * n / (p + 1)).astype(int)
    return np.clip(pos, 1, n - 2)


@dataclass
class SourceReceiverLayout:
    """Left/right boundary dipoles and top/bottom receivers.

    Source ``a * p + b`` injects ``+1/(hx hy)`` in the left boundary cell of
    row ``rows[a]`` and the same amount with opposite sign in the right
    boundary cell of row ``rows[b]``, giving s = p² experiments. Receivers
    sit in every top and bottom boundary cell except the corners,
    l = 2 (nx − 2).
    """

    grid: Grid2D
    p: int
    sources: np.ndarray = field(repr=False)
    projection: sp.csr_matrix = field(repr=False)
    source_rows: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, grid: Grid2D, p: int):
        rows = _positions(grid.ny, p)
        s = p * p
        Q = np.zeros((grid.n_cells, s))
        amp = 1.0 / (grid.hx * grid.hy)
        for a in range(p):
            for b in range(p):
                k = a * p + b
                Q[grid.index(0, rows[a]), k] += amp
                Q[grid.index(grid.nx - 1, rows[b]), k] -= amp
        cols = np.arange(1, grid.nx - 1)
        idx = np.concatenate([grid.index(cols, 0), grid.index(cols, grid.ny - 1)])
        P = sp.csr_matrix(
            (np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, grid.n_cells)
        )
        return cls(grid, p, Q, P, rows)

    @property
    def s(self):
        return self.sources.shape[1]

    @property
    def l(self):
        return self.projection.shape[0]

    def on_finer(self, fine: Grid2D):
        """The same physical layout on a refinement of the grid.

        Sources are spread evenly over the fine cells of each coarse cell and
        receivers average them, so both grids see identical source strengths
        and measurement footprints.
        """
        R = self.grid.restriction(fine)
        factor = (fine.nx // self.grid.nx) * (fine.ny // self.grid.ny)
        # R.T spreads value/factor per fine cell; rescale to keep the density
        Q = np.asarray(R.T @ self.sources) * factor
        return SourceReceiverLayout(fine, self.p, Q, (self.projection @ R).tocsr(),
                                    self.source_rows)


class DcResistivityModel:
    """Forward model ``q -> P A(m)⁻¹ q`` with adjoint sensitivities.

    All methods take a block of sources ``Q`` (N x k) and handle the k
    experiments together. The factorization for the most recent ``m`` and
    the fields for recent ``(m, Q)`` pairs are cached, so the cost counted
    in ``solve_count`` is one solve per new right-hand side.

    Parameters
    ----------
    grid : Grid2D
    projection : sparse matrix
        Receiver matrix P (l x N).
    transfer : LogisticTransfer
    method : {"direct", "cg"}
        Linear solver used for every PDE solve.
    field_cache : int
        Number of ``(m, Q)`` field blocks kept.
    """

    concurrent_safe = False

    def __init__(self, grid: Grid2D, projection, transfer: LogisticTransfer,
                 method="direct", cg_tol=SYNTH_CG_TOL, field_cache=4):
        self.grid = grid
        self.P = sp.csr_matrix(projection)
        self.transfer = transfer
        self.method = method
        self.cg_tol = cg_tol
        self.counter = SolveCounter()
        self._ops = face_operators(grid)
        self._op_key = None
        self._op = None
        self._fields = {}
        self._field_cache = field_cache

    @property
    def solve_count(self):
        return self.counter.count

    @property
    def model_size(self):
        return self.grid.n_cells

    @property
    def data_size(self):
        return self.P.shape[0]

    @staticmethod
    def _key(arr):
        a = np.ascontiguousarray(arr)
        return hashlib.blake2b(a.view(np.uint8), digest_size=16).hexdigest() + str(a.shape)

    def operator(self, m):
        key = self._key(m)
        if key != self._op_key:
            mu = self.transfer(m)
            L = assemble_operator(self.grid, mu, self._ops)
            self._op = PinnedOperator(L, self.method, cg_tol=self.cg_tol, counter=self.counter)
            self._op_key = key
            self._fields.clear()
        return self._op

    def fields(self, m, Q):
        """U = A(m)⁻¹ Q, reused when the same (m, Q) was solved recently."""
        op = self.operator(m)
        key = self._key(Q)
        U = self._fields.get(key)
        if U is None:
            U = op.solve(np.asarray(Q, dtype=np.float64))
            if len(self._fields) >= self._field_cache:
                self._fields.pop(next(iter(self._fields)))
            self._fields[key] = U
        return U

    def predict(self, m, Q):
        """Predicted data P A(m)⁻¹ Q, an l x k array."""
        return self.P @ self.fields(m, Q)

    def _face_sensitivity(self, m):
        D, Av = self._ops
        mu = self.transfer(m)
        mu_f = 1.0 / (Av @ (1.0 / mu))
        H = sp.diags(mu_f**2) @ Av @ sp.diags(mu**-2)
        return D, H.tocsr(), self.transfer.derivative(m)

    def jacobian_apply(self, m, Q, v):
        """J(m, Q) v for every source column: an l x k array."""
        U = self.fields(m, Q)
        D, H, dpsi = self._face_sensitivity(m)
        dmu_f = H @ (dpsi * np.asarray(v, dtype=np.float64))
        rhs = D.T @ ((D @ U) * dmu_f[:, None])
        return -(self.P @ self.operator(m).solve(rhs))

    def jacobian_adjoint_apply(self, m, Q, Y):
        """Jᵀ(m, Q) Y column by column: a model-size x k array."""
        U = self.fields(m, Q)
        D, H, dpsi = self._face_sensitivity(m)
        Y = np.asarray(Y, dtype=np.float64)
        Z = self.operator(m).solve(np.asarray(self.P.T @ Y))
        return -dpsi[:, None] * (H.T @ ((D @ U) * (D @ Z)))


@dataclass
class SyntheticExperiment:
    """Noisy data generated on a finer grid, plus the stopping tolerance.

    ``rho = TAU * sigma**2 * s * l`` with ``sigma = noise_pct ||D*|| / sqrt(s l)``.
    """

    grid: Grid2D
    fine_grid: Grid2D
    layout: SourceReceiverLayout
    transfer: LogisticTransfer
    true_mu_fine: np.ndarray
    clean_data: np.ndarray
    data: np.ndarray
    sigma: float
    rho: float
    seed: int
    example: str
    noise_pct: float
    fine_solves: int

    @property
    def s(self):
        return self.layout.s

    @property
    def l(self):
        return self.layout.l

    def forward_model(self, method="direct"):
        return DcResistivityModel(self.grid, self.layout.projection, self.transfer, method)

    def true_mu_coarse(self):
        """True conductivity averaged onto the reconstruction grid."""
        return self.grid.restriction(self.fine_grid) @ self.true_mu_fine

    def to_text(self):
        """Plain-text bundle of the layout, data and all parameters."""
        buf = io.StringIO()
        w = buf.write
        w("# dc-resistivity experiment\n")
        w(f"example {self.example}\nseed {self.seed}\n")
        w(f"grid {self.grid.nx} {self.grid.ny}\nfine_grid {self.fine_grid.nx} {self.fine_grid.ny}\n")
        w(f"p {self.layout.p}\ns {self.s}\nl {self.l}\n")
        w(f"noise_pct {self.noise_pct!r}\nsigma {self.sigma!r}\nrho {self.rho!r}\n")
        w(f"transfer {type(self.transfer).__name__}\n")
        w(f"mu_min {self.transfer.mu_min!r}\nmu_max {self.transfer.mu_max!r}\n")
        w("source_rows " + " ".join(str(int(r)) for r in self.layout.source_rows) + "\n")
        rec = self.layout.projection.indices
        w("receiver_cells " + " ".join(str(int(c)) for c in rec) + "\n")
        w(f"data {self.l} {self.s}\n")
        for row in self.data:
            w(" ".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def true_conductivity(example, grid: Grid2D):
    """Piecewise-constant true conductivity on ``grid``.

    ``E1``: a block of conductivity 1 in a background of 0.1.
    ``E2``: a block of 0.01 and a block of 1 in a background of 0.1.
    A callable ``f(x, y) -> mu`` is evaluated at cell centres.
    """
    x, y = grid.cell_centers()
    if callable(example):
        return np.asarray(example(x, y), dtype=np.float64)
    if example == "E1":
        mu = np.full(grid.n_cells, 0.1)
        mu[(x > 0.375) & (x < 0.625) & (y > 0.5) & (y < 0.75)] = 1.0
        return mu
    if example == "E2":
        mu = np.full(grid.n_cells, 0.1)
        mu[(x > 0.25) & (x < 0.5) & (y > 0.25) & (y < 0.5)] = 0.01
        mu[(x > 0.5) & (x < 0.75) & (y > 0.5) & (y < 0.75)] = 1.0
        return mu
    raise ConfigurationError(f"unknown example {example!r}")


def synthesize(example="E1", n=32, p=15, fine_factor=2, noise_pct=NOISE_PCT, seed=0,
               method="direct", transfer="loglogistic"):
    """Build the data for an inversion on an ``n`` x ``n`` grid.

    The true model lives on a grid ``fine_factor`` times finer, where all s
    experiments are solved (exactly s solves), projected on the receivers
    and perturbed with Gaussian noise of standard deviation
    ``noise_pct ||D*|| / sqrt(s l)``. ``transfer`` names the entry of
    :data:`TRANSFERS` used for the inversion; its bounds come from the true
    model.
    """
    if transfer not in TRANSFERS:
        raise ConfigurationError(f"unknown transfer {transfer!r}")
    grid = Grid2D(n, n)
    fine = grid.refine(fine_factor)
    layout = SourceReceiverLayout.build(grid, p)
    fine_layout = layout.on_finer(fine)
    mu_true = true_conductivity(example, fine)
    transfer = TRANSFERS[transfer].from_true(mu_true)
    counter = SolveCounter()
    op = PinnedOperator(assemble_operator(fine, mu_true), method, cg_tol=SYNTH_CG_TOL,
                        counter=counter)
    clean = np.asarray(fine_layout.projection @ op.solve(fine_layout.sources))
    s, l = layout.s, layout.l
    sigma = noise_pct * np.linalg.norm(clean) / math.sqrt(s * l)
    rng = np.random.default_rng(seed)
    data = clean + sigma * rng.standard_normal((l, s))
    rho = TAU * sigma**2 * s * l
    name = example if isinstance(example, str) else "custom"
    return SyntheticExperiment(grid, fine, layout, transfer, mu_true, clean, data,
                               float(sigma), float(rho), seed, name, noise_pct,
                               counter.count)


def write_grid(values, grid: Grid2D, fh):
    """Write cell values as ``"nx ny"`` followed by ny rows of nx numbers."""
    vals = np.asarray(values, dtype=np.float64).reshape(grid.ny, grid.nx)
    fh.write(f"{grid.nx} {grid.ny}\n")
    for row in vals:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_grid(fh):
    """Inverse of :func:`write_grid`; returns ``(values, grid)``."""
    nx, ny = (int(t) for t in fh.readline().split())
    vals = np.loadtxt(fh, ndmin=2)
    if vals.shape != (ny, nx):
        raise DomainError(f"grid body has shape {vals.shape}, header says {(ny, nx)}")
    return vals.ravel(), Grid2D(nx, ny)

"""Lifted semidefinite relaxations of the ILD-enhancement beamformer.

The nonconvex per-bin problem asks for a stacked binaural filter w that
minimizes the output noise power w^H P-tilde w subject to the two target
distortionless equalities and, per interferer, a quadratic equality forcing
the output ILD to c times the input ILD. Lifting W = w w^H turns each
quadratic into the linear trace constraint Tr(W M_i) = 0; dropping the
rank-1 coupling in favour of the Schur block [[W, w], [w^H, 1]] >= 0 gives
a convex program (the plain relaxation). A tightened variant adds two
redundant reformulation-linearization constraints derived from the target
equalities: the matrix identity W Lambda_a = w f_a^H and the scalar
expansion of |w^H Lambda_a - f_a^H|^2 = 0.

Optima satisfy  plain <= tightened <= true nonconvex optimum;  a brute-force
multistart oracle certifies the upper end on small instances.

Everything is solved over the standard real-symmetric embedding of the
Hermitian data, [[Re H, -Im H], [Im H, Re H]], through a conic solver.
Trace products pick up a factor 2 under the embedding; the convention here
divides embedded traces by 2 so reported objectives match the
complex-domain values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

RANK1_RATIO_TOL = 1e-6
RANK1_FROBENIUS_TOL = 1e-5


class DegenerateInterfererError(ValueError):
    """Both reference entries of an interferer steering vector vanish."""


@dataclass(frozen=True)
class LiftedProblem:
    """Data of one per-bin relaxation.

    ``f_row`` holds the required values of w^H Lambda_a (the unconjugated
    reference-microphone entries of the target steering vector).
    """

    p_tilde: np.ndarray          # (2M, 2M) Hermitian PSD
    lam_a: np.ndarray            # (2M, 2)
    f_row: np.ndarray            # (2,)
    m_mats: tuple                # r Hermitian (2M, 2M) matrices
    rlt_enabled: bool

    @property
    def dim(self) -> int:
        return self.p_tilde.shape[0]


@dataclass
class LiftedSolution:
    w: np.ndarray | None
    W: np.ndarray | None
    objective: float
    rank1_gap: float
    status: str                  # solved | infeasible | numeric-failure
    iterations: int


def stack_blockdiag(block: np.ndarray) -> np.ndarray:
    """2x2 block-diagonal replication, e.g. P -> diag(P, P)."""
    m = block.shape[0]
    out = np.zeros((2 * m, 2 * m), dtype=complex)
    out[:m, :m] = block
    out[m:, m:] = block
    return out


def build_mi(b: np.ndarray, c: float, left_ref: int, right_ref: int) -> np.ndarray:
    """Quadratic-constraint matrix of one interferer.

    ``w^H M_i w = |w_L^H b|^2 |b_R|^2 - c |w_R^H b|^2 |b_L|^2``, which is
    zero exactly when the output ILD equals c times the input ILD.
    """
    b = np.asarray(b, dtype=complex)
    if c <= 0:
        raise ValueError("ILD scaling factor must be positive")
    b_l, b_r = b[left_ref], b[right_ref]
    if abs(b_l) < 1e-300 and abs(b_r) < 1e-300:
        raise DegenerateInterfererError(
            "interferer vanishes at both reference microphones")
    outer = np.outer(b, b.conj())
    m = len(b)
    mat = np.zeros((2 * m, 2 * m), dtype=complex)
    mat[:m, :m] = outer * abs(b_r) ** 2
    mat[m:, m:] = -c * outer * abs(b_l) ** 2
    return mat


def build_problem(p_noise: np.ndarray, a: np.ndarray, a_l: complex, a_r: complex,
                  interferers, cs, left_ref: int, right_ref: int,
                  variant: str = "problem3") -> LiftedProblem:
    """Assemble the relaxation for one frequency bin.

    ``variant`` selects the plain relaxation (``problem2``) or the variant
    tightened with the redundant target constraints (``problem3``).
    """
    if variant not in ("problem2", "problem3"):
        raise ValueError(f"unknown variant {variant!r}")
    a = np.asarray(a, dtype=complex)
    m = len(a)
    if p_noise.shape != (m, m):
        raise ValueError("noise CPSD does not match the steering vector")
    interferers = [np.asarray(b, dtype=complex) for b in interferers]
    cs = list(np.atleast_1d(np.asarray(cs, dtype=float))) if len(interferers) else []
    if len(cs) != len(interferers):
        raise ValueError("need one scaling factor per interferer")
    lam_a = np.zeros((2 * m, 2), dtype=complex)
    lam_a[:m, 0] = a
    lam_a[m:, 1] = a
    f_row = np.array([a_l, a_r], dtype=complex)
    m_mats = tuple(build_mi(b, c, left_ref, right_ref)
                   for b, c in zip(interferers, cs))
    return LiftedProblem(stack_blockdiag(np.asarray(p_noise, dtype=complex)),
                         lam_a, f_row, m_mats, variant == "problem3")


# ---------------------------------------------------------------------------
# Hermitian -> real-symmetric embedding
# ---------------------------------------------------------------------------

def embed_hermitian(h: np.ndarray) -> np.ndarray:
    """Map a complex matrix to its real representation [[Re,-Im],[Im,Re]]."""
    return np.block([[h.real, -h.imag], [h.imag, h.real]])


@dataclass(frozen=True)
class RealEmbeddedProblem:
    """Real-symmetric conic form of a :class:`LiftedProblem`.

    The conic variable is the embedding S of the lifted Hermitian block
    Z = [[W, w], [w^H, 1]]. Constraint and objective matrices are padded to
    the lifted frame before embedding so that every trace constraint reads
    (1/2) Tr(S X_emb) = value.
    """

    problem: LiftedProblem
    n: int                        # complex filter length 2M
    dim: int                      # real PSD block size 2(2M+1)
    obj_emb: np.ndarray
    m_embs: tuple
    rlt_trace_emb: np.ndarray | None
    lin_g: np.ndarray             # (4, 2n) real linear map on [Re w; Im w]
    lin_h: np.ndarray             # (4,)


def _pad_lifted(top_left: np.ndarray, col=None, corner: float = 0.0) -> np.ndarray:
    n = top_left.shape[0]
    z = np.zeros((n + 1, n + 1), dtype=complex)
    z[:n, :n] = top_left
    if col is not None:
        z[:n, n] = col
        z[n, :n] = np.conj(col)
    z[n, n] = corner
    return z


def complex_to_real_embedding(problem: LiftedProblem) -> RealEmbeddedProblem:
    n = problem.dim
    obj_emb = embed_hermitian(_pad_lifted(problem.p_tilde))
    m_embs = tuple(embed_hermitian(_pad_lifted(mi)) for mi in problem.m_mats)

    rlt_trace_emb = None
    if problem.rlt_enabled:
        lam, f_row = problem.lam_a, problem.f_row
        f_col = f_row.conj()          # f_a as a column, so that f_a^H = f_row
        q = _pad_lifted(lam @ lam.conj().T, col=-lam @ f_col,
                        corner=float(np.real(f_col.conj() @ f_col)))
        rlt_trace_emb = embed_hermitian(q)

    # Lambda_a^H w = conj(f_row) split into real and imaginary parts
    lam_h = problem.lam_a.conj().T
    g = problem.f_row.conj()
    lin_g = np.block([[lam_h.real, -lam_h.imag], [lam_h.imag, lam_h.real]])
    lin_h = np.concatenate([g.real, g.imag])
    return RealEmbeddedProblem(problem, n, 2 * (n + 1), obj_emb, m_embs,
                               rlt_trace_emb, lin_g, lin_h)


# ---------------------------------------------------------------------------
# Interior-point solve
# ---------------------------------------------------------------------------

def rank1_gap(solution: LiftedSolution) -> float:
    """Ratio of the second to the largest eigenvalue of the lifted matrix."""
    if solution.W is None:
        return np.inf
    return _rank1_gap_of(solution.W)


def _rank1_gap_of(w_mat: np.ndarray) -> float:
    eigs = np.linalg.eigvalsh(w_mat)
    top = eigs[-1]
    if top <= 0:
        return np.inf
    return max(float(eigs[-2] / top), 0.0)


def is_certified(solution: LiftedSolution, ratio_tol: float = RANK1_RATIO_TOL,
                 frobenius_tol: float = RANK1_FROBENIUS_TOL) -> bool:
    """True when the relaxation returned a numerically rank-1 lifted matrix."""
    if solution.status != "solved" or solution.w is None:
        return False
    if solution.rank1_gap > ratio_tol:
        return False
    resid = np.linalg.norm(solution.W - np.outer(solution.w, solution.w.conj()))
    return resid <= frobenius_tol * np.linalg.norm(solution.W)


def _whiten(problem: LiftedProblem):
    """Change of variables w' = L^H w with P-tilde = L L^H.

    Turns the objective into Tr(W') while mapping the constraint data
    through L^{-1}; quadratic-constraint matrices are additionally
    normalized to unit spectral norm (their zero-trace constraints are
    scale invariant). Noise covariances in this pipeline span five to six
    orders of magnitude across eigenvalues, which first-order conic
    solvers cannot handle raw.
    """
    p_tilde = problem.p_tilde
    try:
        chol = np.linalg.cholesky(p_tilde)
    except np.linalg.LinAlgError:
        floor = 1e-12 * np.real(np.trace(p_tilde)) / problem.dim
        chol = np.linalg.cholesky(p_tilde + floor * np.eye(problem.dim))
    lam_w = np.linalg.solve(chol, problem.lam_a)
    # per-column normalization keeps the linear block well scaled
    col_scale = np.linalg.norm(lam_w, axis=0)
    col_scale[col_scale == 0] = 1.0
    lam_w = lam_w / col_scale
    f_row = problem.f_row / col_scale
    m_whitened = []
    for mi in problem.m_mats:
        half = np.linalg.solve(chol, mi)
        white = np.linalg.solve(chol, half.conj().T).conj().T
        white = 0.5 * (white + white.conj().T)
        norm = max(np.abs(np.linalg.eigvalsh(white)))
        m_whitened.append(white / norm if norm > 0 else white)
    eye = np.eye(problem.dim, dtype=complex)
    return chol, LiftedProblem(eye, lam_w, f_row, tuple(m_whitened),
                               problem.rlt_enabled)


def solve(problem: LiftedProblem, tol: float = 1e-9,
          max_iter: int = 100000) -> LiftedSolution:
    """Solve the embedded relaxation with a conic solver.

    The lifted Hermitian block Z = [[W, w], [w^H, 1]] is parameterized by
    its symmetric real part and skew-symmetric imaginary part; the PSD
    constraint acts on their real embedding. The noise matrix is normalized
    to unit average eigenvalue and the problem whitened before the solve
    (objective rescaled afterwards), which keeps tolerances meaningful
    across bins and makes the optimum scale exactly linearly with the
    covariance.

    The primary backend is SCS run to ``tol`` residuals, which certifies
    these small degenerate blocks far more tightly than the interior-point
    alternatives tried (see decisions ledger); CLARABEL serves as a
    deterministic fallback. Identical inputs give identical outputs.
    """
    import cvxpy as cp

    scale = float(np.real(np.trace(problem.p_tilde))) / problem.dim
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    scaled = LiftedProblem(problem.p_tilde / scale, problem.lam_a,
                           problem.f_row, problem.m_mats, problem.rlt_enabled)
    chol, scaled = _whiten(scaled)
    emb = complex_to_real_embedding(scaled)
    n = emb.n

    re_z = cp.Variable((n + 1, n + 1), symmetric=True)
    im_z = cp.Variable((n + 1, n + 1))
    s_expr = cp.bmat([[re_z, -im_z], [im_z, re_z]])
    constraints = [im_z == -im_z.T, s_expr >> 0, re_z[n, n] == 1]

    re_w = re_z[:n, n]
    im_w = im_z[:n, n]
    w_vec = cp.hstack([re_w, im_w])
    constraints.append(emb.lin_g @ w_vec == emb.lin_h)
    for m_emb in emb.m_embs:
        constraints.append(0.5 * cp.trace(m_emb @ s_expr) == 0)

    if scaled.rlt_enabled:
        constraints.append(0.5 * cp.trace(emb.rlt_trace_emb @ s_expr) == 0)
        re_big_w = re_z[:n, :n]
        im_big_w = im_z[:n, :n]
        lam, f_row = scaled.lam_a, scaled.f_row
        re_wc = cp.reshape(re_w, (n, 1), order="C")
        im_wc = cp.reshape(im_w, (n, 1), order="C")
        rhs_re = re_wc @ f_row.real[None, :] - im_wc @ f_row.imag[None, :]
        rhs_im = re_wc @ f_row.imag[None, :] + im_wc @ f_row.real[None, :]
        constraints.append(re_big_w @ lam.real - im_big_w @ lam.imag == rhs_re)
        constraints.append(im_big_w @ lam.real + re_big_w @ lam.imag == rhs_im)

    objective = cp.Minimize(0.5 * cp.trace(emb.obj_emb @ s_expr))
    prob = cp.Problem(objective, constraints)

    status = "numeric-failure"
    iters = 0
    attempts = (
        dict(solver=cp.SCS, eps_abs=tol, eps_rel=tol, max_iters=max_iter),
        dict(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol),
    )
    for opts in attempts:
        try:
            prob.solve(**opts)
        except cp.error.SolverError:
            continue
        iters = int(getattr(prob.solver_stats, "num_iters", 0) or 0)
        if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return LiftedSolution(None, None, np.nan, np.inf, "infeasible", iters)
        if prob.status == cp.OPTIMAL and re_z.value is not None:
            status = "solved"
            break
    if status != "solved":
        return LiftedSolution(None, None, np.nan, np.inf, "numeric-failure", iters)

    z = re_z.value + 1j * im_z.value
    z = 0.5 * (z + z.conj().T)
    # undo the whitening: w = L^{-H} w', W = L^{-H} W' L^{-1}
    chol_h = chol.conj().T
    w = np.linalg.solve(chol_h, z[:n, n])
    half = np.linalg.solve(chol_h, z[:n, :n])
    big_w = np.linalg.solve(chol_h, half.conj().T).conj().T
    big_w = 0.5 * (big_w + big_w.conj().T)
    objective_value = float(np.real(np.trace(big_w @ problem.p_tilde)))
    return LiftedSolution(w, big_w, objective_value, _rank1_gap_of(big_w),
                          "solved", iters)


# ---------------------------------------------------------------------------
# Brute-force QCQP oracle for small instances
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    w: np.ndarray | None
    objective: float
    residual: float              # best normalized quadratic residual seen
    status: str                  # ok | no-feasible-point
    n_feasible: int


def _lcmv_point(p_tilde: np.ndarray, lam: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Minimizer of w^H P w subject to w^H lam = values (row of targets)."""
    x = np.linalg.solve(p_tilde, lam)
    gram = lam.conj().T @ x
    return x @ np.linalg.solve(gram, values.conj())


def qcqp_oracle(p_noise: np.ndarray, a: np.ndarray, a_l: complex, a_r: complex,
                interferers, cs, left_ref: int, right_ref: int,
                n_starts: int = 64, seed: int = 0,
                extra_starts=()) -> OracleResult:
    """Certified upper bound on the nonconvex optimum by multistart descent.

    The two target equalities are eliminated through a particular solution
    plus an orthonormal null-space basis; what remains is a smooth problem
    over 2M-2 complex coordinates with one quadratic equality per
    interferer, attacked with SLSQP from ``n_starts`` random starts plus
    closed-form anchor points (noise-optimal and cue-preserving filters).
    Only points meeting every constraint to 1e-6 normalized residual count;
    the best such objective upper-bounds the true optimum.
    """
    from scipy.linalg import null_space
    from scipy.optimize import minimize

    a = np.asarray(a, dtype=complex)
    m = len(a)
    if m > 3 or len(interferers) > 2:
        raise ValueError("oracle is restricted to M <= 3 and r <= 2")
    problem = build_problem(p_noise, a, a_l, a_r, interferers, cs,
                            left_ref, right_ref, variant="problem2")
    p_tilde, lam_a, f_row = problem.p_tilde, problem.lam_a, problem.f_row
    m_mats = [np.asarray(mi) for mi in problem.m_mats]
    m_norms = [max(np.abs(np.linalg.eigvalsh(mi))) for mi in m_mats]

    g = f_row.conj()
    w_part = lam_a @ np.linalg.solve(lam_a.conj().T @ lam_a, g)
    basis = null_space(lam_a.conj().T)       # (2M, 2M-2), orthonormal
    d = basis.shape[1]

    def to_w(z):
        u = z[:d] + 1j * z[d:]
        return w_part + basis @ u

    def objective(z):
        w = to_w(z)
        return float(np.real(w.conj() @ p_tilde @ w))

    def objective_grad(z):
        w = to_w(z)
        grad_c = basis.conj().T @ (p_tilde @ w)
        return 2.0 * np.concatenate([grad_c.real, grad_c.imag])

    def make_constraint(mi):
        def fun(z):
            w = to_w(z)
            return float(np.real(w.conj() @ mi @ w))

        def jac(z):
            w = to_w(z)
            grad_c = basis.conj().T @ (mi @ w)
            return 2.0 * np.concatenate([grad_c.real, grad_c.imag])

        return {"type": "eq", "fun": fun, "jac": jac}

    def residual(w):
        if not m_mats:
            return 0.0
        scale = max(float(np.real(w.conj() @ w)), 1e-300)
        return max(abs(float(np.real(w.conj() @ mi @ w))) / (scale * nm)
                   for mi, nm in zip(m_mats, m_norms))

    # anchor points: unconstrained optimum, plus the cue-preserving filter
    anchors = [_lcmv_point(p_tilde, lam_a, f_row)]
    if interferers:
        cols = [lam_a]
        for b in interferers:
            b = np.asarray(b, dtype=complex)
            col = np.zeros(2 * m, dtype=complex)
            col[:m] = b * b[right_ref]
            col[m:] = -b * b[left_ref]
            cols.append(col[:, None])
        lam_full = np.hstack(cols)
        values = np.concatenate([f_row, np.zeros(len(interferers))])
        try:
            anchors.append(_lcmv_point(p_tilde, lam_full, values))
        except np.linalg.LinAlgError:
            pass
    anchors.extend(np.asarray(w0, dtype=complex) for w0 in extra_starts)

    rng = np.random.default_rng(seed)
    scale0 = max(np.linalg.norm(w_part), 1.0)
    starts = [np.zeros(2 * d)]
    for w0 in anchors:
        u = basis.conj().T @ (w0 - w_part)
        starts.append(np.concatenate([u.real, u.imag]))
    while len(starts) < n_starts + 1 + len(anchors):
        starts.append(rng.normal(scale=scale0, size=2 * d))

    cons = [make_constraint(mi) for mi in m_mats]
    best_w, best_obj, best_resid = None, np.inf, np.inf
    n_feasible = 0

    def consider(w):
        nonlocal best_w, best_obj, best_resid, n_feasible
        res = residual(w)
        best_resid = min(best_resid, res)
        if res < 1e-6:
            n_feasible += 1
            obj = float(np.real(w.conj() @ p_tilde @ w))
            if obj < best_obj:
                best_obj, best_w = obj, w

    for w0 in anchors:
        consider(w0)
    for z0 in starts:
        if cons:
            result = minimize(objective, z0, jac=objective_grad, method="SLSQP",
                              constraints=cons,
                              options={"maxiter": 200, "ftol": 1e-14})
            candidate = to_w(result.x)
        else:
            # pure equality-constrained quadratic: closed form
            rhs = -(basis.conj().T @ (p_tilde @ w_part))
            gram = basis.conj().T @ p_tilde @ basis
            candidate = w_part + basis @ np.linalg.solve(gram, rhs)
        consider(candidate)
        if not cons:
            break

    if best_w is None:
        return OracleResult(None, np.nan, best_resid, "no-feasible-point", 0)
    return OracleResult(best_w, best_obj, best_resid, "ok", n_feasible)


# ---------------------------------------------------------------------------
# Diagnostics export
# ---------------------------------------------------------------------------

def diagnostics_to_csv(path, rows) -> None:
    """Write per-bin solver diagnostics.

    ``rows`` holds dicts with keys bin, f_hz, objective_p2, objective_p3,
    oracle_upper, rank1_gap, status, iterations; missing numbers render
    as empty fields.
    """
    fields = ["bin", "f_hz", "objective_p2", "objective_p3", "oracle_upper",
              "rank1_gap", "status", "iterations"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            out = []
            for key in fields:
                val = row.get(key)
                if val is None or (isinstance(val, float) and not np.isfinite(val)):
                    out.append("")
                elif isinstance(val, float):
                    out.append(f"{val:.12e}")
                else:
                    out.append(val)
            writer.writerow(out)

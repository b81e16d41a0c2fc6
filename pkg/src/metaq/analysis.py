"""Quantitative and qualitative analyses on compiled CTMC models.

Transient distributions use uniformization with controlled truncation error;
hitting times, escape probabilities, and metastability indices come from
sparse linear solves; eigenvalue clusters from shift-invert iteration.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import poisson

from metaq.ctmc import CtmcModel, embedded_dtmc, local_transitions

PROB_TOL = 1e-10  # dropped probability mass per transient time point
HITTING_RTOL = 1e-8
DIRECT_SOLVE_MAX = 400_000  # above this, fall back to iterative solves
DENSE_EIG_MAX = 600
CONDITION_WARN = 1e12


class AnalysisError(RuntimeError):
    """Solver failure or violated analysis precondition."""


@dataclass(frozen=True)
class HittingStats:
    """Expected hitting times (and optionally their standard deviations)."""

    target: frozenset
    expectation: np.ndarray  # per start state, 0 on the target
    std: np.ndarray | None = None


@dataclass(frozen=True)
class MetastabilityIndex:
    value: float
    sup_term: float
    inf_term: float
    metastable: bool
    threshold: float


@dataclass(frozen=True)
class VectorField:
    server: int
    u: np.ndarray
    v: np.ndarray
    f_q: np.ndarray
    f_o: np.ndarray
    magnitude: np.ndarray
    angle: np.ndarray


@dataclass(frozen=True)
class MetastabilityReport:
    candidate_set: tuple
    hitting_index: MetastabilityIndex | None
    escape_index: MetastabilityIndex | None
    nested_order: tuple  # x_k, ..., x_2
    eigenvalues: np.ndarray
    mixing_time_bound: float | None
    epsilon: float


def metastability_report(
    m: CtmcModel,
    D,
    threshold: float = 0.1,
    epsilon: float = 0.01,
    max_starts: int | None = None,
) -> MetastabilityReport:
    """Bundle both indices, the peel order, eigenvalues, and the mixing bound."""
    D = tuple(sorted(int(x) for x in D))
    ht = metastability_index_ht(m, D, threshold=threshold)
    esc = metastability_index_escape(m, D, threshold=threshold, max_starts=max_starts)
    nested = nested_metastable_sets(m, D)
    eigs = dominant_eigenvalues(m, len(D))
    lam2 = float(eigs[1].real) if len(eigs) > 1 else 0.0
    bound = mixing_time_lower_bound(lam2, epsilon) if lam2 > 0 else None
    return MetastabilityReport(
        candidate_set=D,
        hitting_index=ht,
        escape_index=esc,
        nested_order=tuple(x for x, _ in nested),
        eigenvalues=eigs,
        mixing_time_bound=bound,
        epsilon=epsilon,
    )


def point_mass(m: CtmcModel, state: int) -> np.ndarray:
    pi0 = np.zeros(m.num_states)
    pi0[state] = 1.0
    return pi0


def _check_distribution(pi: np.ndarray, n: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (n,):
        raise AnalysisError(f"distribution has shape {pi.shape}, expected ({n},)")
    if pi.min() < -1e-12 or abs(pi.sum() - 1.0) > PROB_TOL:
        raise AnalysisError("initial distribution is not normalized")
    return pi


def _uniformized(m: CtmcModel) -> tuple[sp.csr_matrix, float]:
    """Discrete kernel P = I + Q/rate with the chain's uniformization rate."""
    rate = float(m.exit_rates().max())
    if rate <= 0.0:
        return sp.identity(m.num_states, format="csr"), 0.0
    P = sp.identity(m.num_states, format="csr") + m.Q * (1.0 / rate)
    return P.tocsr(), rate


def _poisson_window(mean: float, tol: float) -> tuple[int, int]:
    if mean <= 0.0:
        return 0, 0
    lo = int(poisson.ppf(tol / 2.0, mean))
    hi = int(poisson.isf(tol / 2.0, mean))
    return max(lo, 0), hi


def transient_distribution(
    m: CtmcModel, pi0: np.ndarray, times, tol: float = PROB_TOL
) -> list[np.ndarray]:
    """Solve the Kolmogorov forward equation at the given times.

    Uniformization: pi(t) = sum_k Poisson(rate*t; k) * pi0 P^k, truncated so
    the dropped mass per time point stays below ``tol``.  Cost grows with
    rate * max(times) and with the number of requested times.
    """
    times = list(times)
    if any(t < 0 for t in times):
        raise AnalysisError("times must be nonnegative")
    if sorted(times) != times:
        raise AnalysisError("times must be sorted")
    pi0 = _check_distribution(pi0, m.num_states)
    P, rate = _uniformized(m)
    if rate == 0.0 or not times:
        return [pi0.copy() for _ in times]

    windows = [_poisson_window(rate * t, tol) for t in times]
    k_max = max(hi for _, hi in windows)
    weights = []
    for t, (lo, hi) in zip(times, windows):
        if t == 0.0:
            weights.append(None)
            continue
        ks = np.arange(lo, hi + 1)
        weights.append((lo, poisson.pmf(ks, rate * t)))

    out = [np.zeros(m.num_states) for _ in times]
    vk = pi0.copy()
    for k in range(k_max + 1):
        for j, w in enumerate(weights):
            if w is None:
                continue
            lo, pmf = w
            if lo <= k < lo + len(pmf):
                out[j] += pmf[k - lo] * vk
        if k < k_max:
            vk = vk @ P
    for j, t in enumerate(times):
        if t == 0.0:
            out[j] = pi0.copy()
        else:
            out[j] /= out[j].sum()  # redistribute the truncated mass
    return out


def expected_observable(
    m: CtmcModel,
    pi0: np.ndarray,
    times,
    weights: np.ndarray,
    tol: float = PROB_TOL,
) -> np.ndarray:
    """Time series of E[w(X(t))] for a per-state weight vector.

    Single uniformization sweep: project each Poisson term onto the weights
    before mixing, so dense time grids (calibration) stay cheap.
    """
    times = np.asarray(list(times), dtype=float)
    if times.size and (times.min() < 0 or np.any(np.diff(times) < 0)):
        raise AnalysisError("times must be nonnegative and sorted")
    pi0 = _check_distribution(pi0, m.num_states)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (m.num_states,):
        raise AnalysisError("weights must be defined on all states")
    P, rate = _uniformized(m)
    if rate == 0.0 or times.size == 0:
        return np.full(times.shape, float(pi0 @ weights))

    k_max = _poisson_window(rate * float(times.max()), tol)[1]
    proj = np.empty(k_max + 1)
    vk = pi0.copy()
    for k in range(k_max + 1):
        proj[k] = vk @ weights
        if k < k_max:
            vk = vk @ P
    out = np.empty(times.shape)
    for j, t in enumerate(times):
        if t == 0.0:
            out[j] = proj[0]
            continue
        lo, hi = _poisson_window(rate * t, tol)
        ks = np.arange(lo, min(hi, k_max) + 1)
        pmf = poisson.pmf(ks, rate * t)
        out[j] = float(pmf @ proj[ks]) / float(pmf.sum())
    return out


def observable_jobs(m: CtmcModel, server: int | None = None) -> np.ndarray:
    """Per-state weight vector of jobs in system (one server or summed)."""
    w = np.zeros(m.num_states)
    for idx in range(m.num_states):
        coords = m.coords_of(idx)
        if server is None:
            w[idx] = sum(c[0] for c in coords)
        else:
            w[idx] = coords[server][0]
    return w


def observable_orbit(m: CtmcModel, server: int | None = None) -> np.ndarray:
    w = np.zeros(m.num_states)
    for idx in range(m.num_states):
        coords = m.coords_of(idx)
        if server is None:
            w[idx] = sum(c[1] for c in coords)
        else:
            w[idx] = coords[server][1]
    return w


def _solve_sparse(A: sp.spmatrix, b: np.ndarray, rtol: float = HITTING_RTOL) -> np.ndarray:
    """Solve A x = b with a relative-residual guarantee.

    Sparse LU for systems that fit comfortably; above DIRECT_SOLVE_MAX a
    restarted GMRES with diagonal preconditioning (the generator is never
    densified).  Raises AnalysisError if the residual target is missed.
    """
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    A = A.tocsc()
    b_norm = float(np.linalg.norm(b)) or 1.0
    a_norm = float(np.max(np.abs(A).sum(axis=1)))  # infinity norm
    x = None
    if n <= DIRECT_SOLVE_MAX:
        try:
            lu = spla.splu(A)
            x = lu.solve(b)
            # one step of iterative refinement helps stiff hitting systems
            x = x + lu.solve(b - A @ x)
        except RuntimeError:
            x = None
    if x is None or not np.all(np.isfinite(x)):
        diag = A.diagonal()
        diag = np.where(np.abs(diag) > 0, diag, 1.0)
        M = spla.LinearOperator(A.shape, matvec=lambda v: v / diag)
        x, info = spla.gmres(A, b, rtol=rtol / 10, restart=200, maxiter=2000, M=M)
        if info != 0:
            raise AnalysisError(f"iterative solve did not converge (info={info})")
    # normwise backward error: huge hitting times are legitimate solutions,
    # so the residual is judged against ||A||·||x|| + ||b||
    denom = a_norm * float(np.linalg.norm(x)) + b_norm
    residual = float(np.linalg.norm(A @ x - b)) / denom
    if residual > rtol:
        raise AnalysisError(f"linear solve backward error {residual:.3e} above {rtol:.1e}")
    return x


def _condition_estimate(A: sp.spmatrix) -> float:
    try:
        lu = spla.splu(A.tocsc())
        inv_norm = spla.onenormest(
            spla.LinearOperator(A.shape, matvec=lu.solve, rmatvec=lambda v: lu.solve(v, "T"))
        )
        return float(spla.onenormest(A) * inv_norm)
    except Exception:
        return math.nan


def expected_hitting_time(
    m: CtmcModel, D, check_condition: bool = False
) -> HittingStats:
    """Expected first-hitting times of D from every state (0 on D).

    Solves Q h = -1 restricted to the complement of D.  Near-metastable
    systems are ill conditioned; pass check_condition=True to estimate and
    warn.
    """
    D = frozenset(int(x) for x in D)
    if not D:
        raise AnalysisError("target set must be nonempty")
    n = m.num_states
    rest = np.array(sorted(set(range(n)) - D), dtype=int)
    h = np.zeros(n)
    if rest.size:
        A = m.Q[rest][:, rest]
        if check_condition:
            cond = _condition_estimate(A)
            if cond > CONDITION_WARN:
                warnings.warn(
                    f"hitting-time system condition estimate {cond:.2e}; "
                    "results may lose precision near metastability",
                    RuntimeWarning,
                )
        h[rest] = _solve_sparse(A, -np.ones(rest.size))
    if h.min() < -1e-9 * max(h.max(), 1.0):
        raise AnalysisError("negative expected hitting time; solve unreliable")
    return HittingStats(target=D, expectation=np.maximum(h, 0.0))


def hitting_time_std(m: CtmcModel, D) -> HittingStats:
    """Standard deviations of hitting times via the second-moment system."""
    stats = expected_hitting_time(m, D)
    h = stats.expectation
    n = m.num_states
    rest = np.array(sorted(set(range(n)) - stats.target), dtype=int)
    m2 = np.zeros(n)
    if rest.size:
        A = m.Q[rest][:, rest]
        m2[rest] = _solve_sparse(A, -2.0 * h[rest])
    var = np.maximum(m2 - h * h, 0.0)
    return HittingStats(target=stats.target, expectation=h, std=np.sqrt(var))


def stationary_distribution(m: CtmcModel) -> np.ndarray:
    """Solve pi Q = 0 with sum(pi) = 1; residual-checked."""
    n = m.num_states
    A = m.Q.T.tolil()
    A[0, :] = 1.0
    b = np.zeros(n)
    b[0] = 1.0
    pi = _solve_sparse(A.tocsc(), b, rtol=1e-6)
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    max_rate = float(np.abs(m.Q.data).max()) if m.Q.nnz else 1.0
    residual = float(np.abs(pi @ m.Q).max())
    if residual > 1e-10 * max_rate:
        raise AnalysisError(
            f"stationary solve residual {residual:.3e} above {1e-10 * max_rate:.3e}"
        )
    return pi


def _reachable(m: CtmcModel, x: int, targets: frozenset) -> bool:
    order = sp.csgraph.breadth_first_order(m.Q, x, directed=True, return_predecessors=False)
    return bool(targets.intersection(int(i) for i in order))


def escape_probability(
    m: CtmcModel, x: int, D, method: str = "ctmc"
) -> float:
    """P(hit D before returning to x), computed by first-step analysis.

    With x in D the target is D \\ {x}.  ``method`` selects whether the
    linear system is assembled from the generator (rows of Q) or from the
    embedded jump chain; the two agree exactly.
    """
    x = int(x)
    D = frozenset(int(s) for s in D)
    T = D - {x} if x in D else D
    if not T:
        raise AnalysisError("target set is empty after removing the start state")
    if not _reachable(m, x, T):
        warnings.warn(f"target unreachable from state {x}; escape probability 0")
        return 0.0
    n = m.num_states
    interior = np.array(sorted(set(range(n)) - T - {x}), dtype=int)
    t_list = np.array(sorted(T), dtype=int)

    if method == "ctmc":
        M = m.Q
        row_x = np.asarray(M[x].todense()).ravel()
        exit_x = -m.Q.diagonal()[x]
        if exit_x <= 0:
            raise AnalysisError(f"state {x} is absorbing")
    elif method == "dtmc":
        M = embedded_dtmc(m)
        row_x = np.asarray(M[x].todense()).ravel()
        exit_x = 1.0
    else:
        raise ValueError(f"unknown method {method!r}")

    g = np.zeros(n)
    g[t_list] = 1.0
    if interior.size:
        A = M[interior][:, interior]
        if method == "dtmc":
            A = sp.identity(interior.size, format="csr") - A
        else:
            A = -A
        b = np.asarray(M[interior][:, t_list].sum(axis=1)).ravel()
        g[interior] = _solve_sparse(A, b)
    mass = float(row_x[t_list].sum())
    if interior.size:
        mass += float(row_x[interior] @ g[interior])
    if method == "ctmc":
        # exclude the diagonal; off-diagonal row mass over non-{x} states
        return min(max(mass / exit_x, 0.0), 1.0)
    return min(max(mass, 0.0), 1.0)


def metastability_index_ht(
    m: CtmcModel, D, threshold: float = 0.1
) -> MetastabilityIndex:
    """Hitting-time metastability ratio: |S| * sup / inf.

    sup is the largest expected hitting time of D from outside; inf the
    smallest expected travel time between distinct states of D.
    """
    D = sorted(int(x) for x in D)
    if len(D) < 2:
        raise AnalysisError("candidate set needs at least two states")
    h_to_D = expected_hitting_time(m, D).expectation
    outside = [i for i in range(m.num_states) if i not in set(D)]
    sup_term = float(h_to_D[outside].max()) if outside else 0.0
    inf_term = math.inf
    for x in D:
        h = expected_hitting_time(m, set(D) - {x}).expectation
        inf_term = min(inf_term, float(h[x]))
    value = m.num_states * sup_term / inf_term if inf_term > 0 else math.inf
    return MetastabilityIndex(
        value=value,
        sup_term=sup_term,
        inf_term=inf_term,
        metastable=bool(value < threshold),
        threshold=threshold,
    )


def metastability_index_escape(
    m: CtmcModel,
    D,
    threshold: float = 0.1,
    max_starts: int | None = None,
    seed: int = 0,
) -> MetastabilityIndex:
    """Escape-probability metastability ratio (rho).

    sup over x in D of P(hit D\\{x} before x); inf over y outside D of
    P(hit D before y).  On large models the outside states may be sampled
    (max_starts) since each start needs its own solve.
    """
    D = sorted(int(x) for x in D)
    Dset = frozenset(D)
    if len(D) < 2:
        raise AnalysisError("candidate set needs at least two states")
    outside = [i for i in range(m.num_states) if i not in Dset]
    if not outside:
        raise AnalysisError("candidate set covers the whole state space")
    sup_term = max(escape_probability(m, x, Dset) for x in D)
    if max_starts is not None and len(outside) > max_starts:
        rng = np.random.default_rng(seed)
        outside = sorted(rng.choice(outside, size=max_starts, replace=False))
    inf_term = min(escape_probability(m, y, Dset) for y in outside)
    if inf_term <= 0.0:
        raise AnalysisError(
            "some outside state never reaches the candidate set before returning; "
            "the set is missing an attractor"
        )
    value = float(m.num_states * sup_term / inf_term)
    return MetastabilityIndex(
        value=value,
        sup_term=sup_term,
        inf_term=inf_term,
        metastable=bool(value < threshold),
        threshold=threshold,
    )


def nested_metastable_sets(m: CtmcModel, D) -> list[tuple[int, frozenset]]:
    """Inductive peeling of the candidate set.

    Returns [(x_k, D_k), ..., (x_2, D_2)] where x_l maximizes the escape
    probability within D_l (ties broken by lowest state index) and
    D_{l-1} = D_l minus x_l.
    """
    D_l = frozenset(int(x) for x in D)
    if len(D_l) < 2:
        raise AnalysisError("candidate set needs at least two states")
    out = []
    while len(D_l) >= 2:
        best_x, best_p = None, -1.0
        for x in sorted(D_l):
            p = escape_probability(m, x, D_l)
            if p > best_p:
                best_x, best_p = x, p
        out.append((best_x, D_l))
        D_l = D_l - {best_x}
    return out


def dominant_eigenvalues(m: CtmcModel, k: int) -> np.ndarray:
    """The k eigenvalues of -Q with smallest real parts, sorted ascending.

    Dense solve on small models; shift-invert Arnoldi around 0 otherwise.
    """
    n = m.num_states
    if k < 1:
        raise AnalysisError("k must be >= 1")
    if k >= n:
        raise AnalysisError(f"k={k} too large for {n} states")
    if n <= DENSE_EIG_MAX:
        vals = np.linalg.eigvals(-m.Q.toarray())
    else:
        max_rate = float(m.exit_rates().max())
        sigma = -1e-8 * max_rate  # just left of the spectrum of -Q
        try:
            vals = spla.eigs(
                -m.Q.tocsc(),
                k=max(k + 2, 4),
                sigma=sigma,
                which="LM",
                return_eigenvectors=False,
                maxiter=5000,
            )
        except spla.ArpackNoConvergence as e:
            raise AnalysisError(f"eigensolver did not converge: {e}") from e
    order = np.lexsort((np.abs(vals.imag), vals.real))
    return vals[order][:k]


def spectral_hitting_estimate(m: CtmcModel, D) -> list[dict]:
    """Pair each clustered eigenvalue with the matching inverse hitting time.

    For each peel level l the relative gap |lambda_l * E[tau] - 1| is
    reported; it shrinks as the chain becomes more sharply metastable.
    """
    D = frozenset(int(x) for x in D)
    if len(D) < 2:
        raise AnalysisError("spectral estimate needs |D| >= 2")
    peel = nested_metastable_sets(m, D)
    eigs = dominant_eigenvalues(m, len(D))
    out = []
    # peel[0] corresponds to level k, ..., peel[-1] to level 2
    for level_offset, (x_l, D_l) in enumerate(peel):
        ell = len(D) - level_offset
        D_prev = D_l - {x_l}
        h = expected_hitting_time(m, D_prev).expectation
        expected = float(h[x_l])
        lam = float(eigs[ell - 1].real)
        inv = 1.0 / expected if expected > 0 else math.inf
        out.append(
            {
                "level": ell,
                "state": x_l,
                "eigenvalue": lam,
                "inverse_expected_hitting": inv,
                "relative_gap": abs(lam * expected - 1.0),
            }
        )
    return out


def mixing_time_lower_bound(lambda_min_real: float, epsilon: float = 0.01) -> float:
    """Lower bound log(1/2eps) / Re(lambda) on the mixing time."""
    if lambda_min_real <= 0:
        raise AnalysisError("eigenvalue real part must be positive")
    if not (0 < epsilon < 0.5):
        raise AnalysisError("epsilon must lie in (0, 1/2)")
    return math.log(1.0 / (2.0 * epsilon)) / lambda_min_real


def vector_field(
    m: CtmcModel,
    server: int = 0,
    stride: int = 1,
    fixed: dict[int, tuple[int, int]] | None = None,
) -> VectorField:
    """Aggregate drift field over one server's (queue, orbit) plane.

    Each grid point costs one local transition evaluation, independent of
    the total state count.  ``fixed`` pins the coordinates of the other
    servers (required when K > 1).
    """
    if stride < 1:
        raise AnalysisError("stride must be >= 1")
    K = m.program.num_servers
    fixed = dict(fixed or {})
    for j in range(K):
        if j == server:
            continue
        if j not in fixed:
            raise AnalysisError(f"missing fixed coordinates for server {j}")
        fu, fv = fixed[j]
        Nj, Vj = m.bounds[j]
        if not (0 <= fu <= Nj and 0 <= fv <= Vj):
            raise AnalysisError(f"fixed coordinates for server {j} out of bounds")
    N, V = m.bounds[server]
    us, vs, fqs, fos = [], [], [], []
    for v in range(0, V + 1, stride):
        for u in range(0, N + 1, stride):
            fq, fo = field_at(m, server, u, v, fixed)
            us.append(u)
            vs.append(v)
            fqs.append(fq)
            fos.append(fo)
    fq = np.asarray(fqs)
    fo = np.asarray(fos)
    return VectorField(
        server=server,
        u=np.asarray(us),
        v=np.asarray(vs),
        f_q=fq,
        f_o=fo,
        magnitude=np.sqrt(fq * fq + fo * fo),
        angle=np.arctan2(fo, fq),
    )


def field_at(
    m: CtmcModel,
    server: int,
    u: int,
    v: int,
    fixed: dict[int, tuple[int, int]] | None = None,
) -> tuple[float, float]:
    """Drift components at a single grid point, from raw local rates."""
    fixed = dict(fixed or {})
    coords = []
    for j in range(m.program.num_servers):
        coords.append((u, v) if j == server else tuple(fixed[j]))
    coords = tuple(coords)
    fq = 0.0
    fo = 0.0
    for target, rate in local_transitions(m.program, coords, m.bounds):
        du = target[server][0] - u
        dv = target[server][1] - v
        fq += rate * du
        fo += rate * dv
    return fq, fo


@dataclass(frozen=True)
class RecoveryReport:
    expected_time: float
    std: float
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    expected_jobs: np.ndarray = field(default_factory=lambda: np.zeros(0))


def recovery_analysis(
    m_policy: CtmcModel,
    start,
    target,
    times=None,
) -> RecoveryReport:
    """Expected recovery time (with std) plus the transient E[jobs] curve.

    ``start`` is a state index or a distribution; ``target`` a set of state
    indices (typically small-queue states) under the recovery policy's
    rates.
    """
    target = frozenset(int(x) for x in target)
    n = m_policy.num_states
    if np.isscalar(start):
        pi0 = point_mass(m_policy, int(start))
    else:
        pi0 = _check_distribution(np.asarray(start, dtype=float), n)
    support = np.where(pi0 > 0)[0]
    if target.issuperset(int(i) for i in support):
        expected = std = 0.0
    else:
        stats = hitting_time_std(m_policy, target)
        expected = float(pi0 @ stats.expectation)
        std = float(pi0 @ stats.std)
    if times is None:
        return RecoveryReport(expected_time=expected, std=std)
    times = np.asarray(list(times), dtype=float)
    series = expected_observable(m_policy, pi0, times, observable_jobs(m_policy))
    return RecoveryReport(
        expected_time=expected, std=std, times=times, expected_jobs=series
    )

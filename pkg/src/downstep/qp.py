"""Dense convex QP solver (primal active-set).

Solves::

    minimize    0.5 u'Hu + f'u
    subject to  A_eq u  = b_eq
                A_in u <= b_in
                lb <= u <= ub          (optional, appended to the inequalities)

Used by the reduced-order BBF-QP and the task-space controller.  Problems are
small (tens of variables), so everything is dense.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max-iterations"


class QpError(ValueError):
    pass


def _as2d(A, n):
    if A is None:
        return np.zeros((0, n))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros((0, n))
    return A


def _as1d(b, m):
    if b is None:
        return np.zeros(m)
    return np.asarray(b, dtype=float).reshape(-1)


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise QpError("H must be square")
        f = np.asarray(self.f, dtype=float).reshape(-1)
        if f.shape != (n,):
            raise QpError("f has wrong length")
        A_eq, A_in = _as2d(self.A_eq, n), _as2d(self.A_in, n)
        b_eq, b_in = _as1d(self.b_eq, A_eq.shape[0]), _as1d(self.b_in, A_in.shape[0])
        if A_eq.shape[1] != n or A_in.shape[1] != n:
            raise QpError("constraint matrix column count must equal n")
        if b_eq.shape[0] != A_eq.shape[0] or b_in.shape[0] != A_in.shape[0]:
            raise QpError("constraint vector length mismatch")
        for name in ("lb", "ub"):
            v = getattr(self, name)
            if v is not None:
                v = np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
                object.__setattr__(self, name, v)
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-10:
            raise QpError("H is not symmetric")
        H = 0.5 * (H + H.T)
        if n and np.linalg.eigvalsh(H)[0] < -1e-8:
            raise QpError("H is indefinite")
        for name, v in (("H", H), ("f", f), ("A_eq", A_eq), ("b_eq", b_eq), ("A_in", A_in), ("b_in", b_in)):
            object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def inequalities(self) -> tuple[np.ndarray, np.ndarray]:
        """General inequalities followed by finite upper then lower bounds."""
        rows, rhs = [self.A_in], [self.b_in]
        eye = np.eye(self.n)
        if self.ub is not None:
            idx = np.flatnonzero(np.isfinite(self.ub))
            rows.append(eye[idx])
            rhs.append(self.ub[idx])
        if self.lb is not None:
            idx = np.flatnonzero(np.isfinite(self.lb))
            rows.append(-eye[idx])
            rhs.append(-self.lb[idx])
        return np.vstack(rows), np.concatenate(rhs)

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.f @ u)


@dataclass
class QpSolution:
    u: np.ndarray
    status: str
    active_set: tuple[int, ...] = ()
    objective: float = float("nan")
    stationarity: float = float("nan")
    primal_residual: float = float("nan")
    complementarity: float = float("nan")
    multipliers_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    multipliers_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    certificate: dict | None = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _kkt_solve(H, g, A, b):
    """min 0.5 x'Hx + g'x s.t. A x = b; returns (x, lambda) with Hx + g + A'lambda = 0."""
    n, m = H.shape[0], A.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([-g, b])
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


class ActiveSetQP:
    """Primal active-set solver with warm starts.

    The cost Hessian is regularized by ``reg * I`` before every KKT solve so
    that semidefinite costs are handled uniformly.  One instance keeps the
    last working set; it is not meant to be shared between threads.
    """

    def __init__(self, max_iter: int = 200, tol: float = 1e-9, reg: float = 1e-9):
        self.max_iter = max_iter
        self.tol = tol
        self.reg = reg
        self.last_active_set: tuple[int, ...] = ()

    def solve(self, problem: QpProblem, warm_start=None) -> QpSolution:
        A_in, b_in = problem.inequalities()
        H = problem.H + self.reg * np.eye(problem.n)
        f, A_eq, b_eq = problem.f, problem.A_eq, problem.b_eq

        start = None
        if warm_start is not None:
            start = self._warm_point(H, f, A_eq, b_eq, A_in, b_in, list(warm_start))
        if start is None:
            start = self._cold_point(H, f, A_eq, b_eq, A_in, b_in)
            if isinstance(start, QpSolution):
                return start
        x, W, it0 = start
        x, W, status, iters = self._iterate(H, f, A_eq, A_in, b_in, x, W)
        sol = self._finish(problem, A_in, b_in, x, W, status, it0 + iters)
        self.last_active_set = sol.active_set
        return sol

    # starting points ----------------------------------------------------

    def _feasible(self, A_in, b_in, x):
        if A_in.shape[0] == 0:
            return True
        scale = 1.0 + np.abs(b_in)
        return bool(np.all(A_in @ x - b_in <= 1e-9 * scale))

    def _warm_point(self, H, f, A_eq, b_eq, A_in, b_in, W):
        W = [i for i in dict.fromkeys(W) if 0 <= i < A_in.shape[0]]
        W = self._independent(A_eq, A_in, W)
        A = np.vstack([A_eq, A_in[W]])
        b = np.concatenate([b_eq, b_in[W]])
        x, _ = _kkt_solve(H, f, A, b)
        if _inf(A @ x - b) > 1e-9 * (1 + _inf(b)):
            return None
        if not self._feasible(A_in, b_in, x):
            return None
        return x, W, 0

    def _cold_point(self, H, f, A_eq, b_eq, A_in, b_in):
        n = H.shape[0]
        x, _ = _kkt_solve(H, f, A_eq, b_eq)
        if _inf(A_eq @ x - b_eq) > 1e-8 * (1 + _inf(b_eq)):
            return QpSolution(x, INFEASIBLE, certificate={"reason": "inconsistent equalities"})
        if self._feasible(A_in, b_in, x):
            return x, [], 0
        # phase 1 on (x, t): min t + eps/2 |(x, t)|^2, A_in x - t <= b_in, t >= 0,
        # rows normalized; eps shrinks until the regularization no longer
        # masks a feasible point far from the origin
        m = A_in.shape[0]
        norms = np.maximum(np.linalg.norm(A_in, axis=1), 1e-300)
        An, bn = A_in / norms[:, None], b_in / norms
        f1 = np.zeros(n + 1)
        f1[-1] = 1.0
        A1_eq = np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))])
        A1_in = np.vstack([np.hstack([An, -np.ones((m, 1))]), np.eye(1, n + 1, n) * -1.0])
        b1_in = np.concatenate([bn, [0.0]])
        x0 = np.linalg.lstsq(A_eq, b_eq, rcond=None)[0] if A_eq.shape[0] else np.zeros(n)
        t0 = max(0.0, float(np.max(An @ x0 - bn))) + 1.0
        z, W1, it = np.append(x0, t0), [], 0
        eps = 1e-8
        tol_t = 1e-9 * (1.0 + _inf(bn))
        for _ in range(6):
            H1 = eps * np.eye(n + 1)
            z, W1, status, k = self._iterate(H1, f1, A1_eq, A1_in, b1_in, z, W1)
            it += k
            if status != OPTIMAL:
                return QpSolution(z[:n], MAX_ITERATIONS, iterations=it)
            if z[-1] <= tol_t:
                break
            eps = min(1e-3 * eps, 1e-3 * max(z[-1], tol_t) / (1.0 + float(z @ z)))
        t = z[-1]
        if t > tol_t:
            A = np.vstack([A1_eq, A1_in[W1]])
            _, lam = _kkt_solve(H1, H1 @ z + f1, A, np.zeros(A.shape[0]))
            y = np.zeros(m + 1)
            y[W1] = lam[A_eq.shape[0]:]
            cert = {
                "inequality_weights": y[:m] / norms,
                "equality_weights": lam[: A_eq.shape[0]],
                "min_max_violation": float(t),
            }
            return QpSolution(z[:n], INFEASIBLE, iterations=it, certificate=cert)
        x = z[:n]
        W = [i for i in W1 if i < m]
        W = self._independent(A_eq, A_in, W)
        return x, W, it

    @staticmethod
    def _independent(A_eq, A_in, W):
        keep = []
        base = A_eq
        rank = np.linalg.matrix_rank(base) if base.shape[0] else 0
        for i in W:
            cand = np.vstack([base, A_in[i]])
            r = np.linalg.matrix_rank(cand)
            if r > rank:
                keep.append(i)
                base, rank = cand, r
        return keep

    # main loop ----------------------------------------------------------

    def _iterate(self, H, f, A_eq, A_in, b_in, x, W):
        n_eq = A_eq.shape[0]
        W = list(W)
        x = x.copy()
        for it in range(1, self.max_iter + 1):
            g = H @ x + f
            A = np.vstack([A_eq, A_in[W]])
            p, lam = _kkt_solve(H, g, A, np.zeros(A.shape[0]))
            if _inf(p) <= self.tol * (1.0 + _inf(x)):
                lam_in = lam[n_eq:]
                if not W or lam_in.min() >= -self.tol * (1.0 + np.abs(lam_in).max()):
                    return x, W, OPTIMAL, it
                W.pop(int(np.argmin(lam_in)))
                continue
            Ap = A_in @ p
            slack = b_in - A_in @ x
            alpha, block = 1.0, None
            inW = set(W)
            for i in np.flatnonzero(Ap > 1e-14 * (1.0 + np.linalg.norm(p))):
                if i in inW:
                    continue
                r = max(slack[i], 0.0) / Ap[i]
                if r < alpha:
                    alpha, block = r, int(i)
            x = x + alpha * p
            if block is not None:
                W.append(block)
        return x, W, MAX_ITERATIONS, self.max_iter

    def _finish(self, problem, A_in, b_in, x, W, status, iters):
        n_eq = problem.A_eq.shape[0]
        A = np.vstack([problem.A_eq, A_in[W]])
        Hr = problem.H + self.reg * np.eye(problem.n)
        if A.shape[0]:
            # multipliers from the stationarity condition at x
            lam = np.linalg.lstsq(A.T, -(Hr @ x + problem.f), rcond=None)[0]
        else:
            lam = np.zeros(0)
        lam_in = np.zeros(A_in.shape[0])
        lam_in[W] = lam[n_eq:]
        lam_eq = lam[:n_eq]
        stat = problem.H @ x + problem.f + problem.A_eq.T @ lam_eq + A_in.T @ lam_in
        prim = 0.0
        if n_eq:
            prim = float(np.max(np.abs(problem.A_eq @ x - problem.b_eq)))
        if A_in.shape[0]:
            viol = A_in @ x - b_in
            prim = max(prim, float(np.max(viol, initial=0.0)))
            comp = _inf(lam_in * viol)
        else:
            comp = 0.0
        return QpSolution(
            u=x,
            status=status,
            active_set=tuple(sorted(int(i) for i in W)),
            objective=problem.objective(x),
            stationarity=float(np.max(np.abs(stat), initial=0.0)),
            primal_residual=prim,
            complementarity=comp,
            multipliers_eq=lam_eq,
            multipliers_in=lam_in,
            iterations=iters,
        )


def solve(problem: QpProblem, warm_start=None, **kwargs) -> QpSolution:
    return ActiveSetQP(**kwargs).solve(problem, warm_start)

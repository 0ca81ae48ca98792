"""Slow, independent reference implementations used only by the tests."""

import itertools

import numpy as np


def jacobi_eigh(S, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations; returns eigenvalues (descending) and eigenvectors."""
    A = np.array(S, dtype=float, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(A, 1) ** 2))
        if off < tol * max(1.0, np.abs(A).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
                V = V @ J
    w = np.diag(A)
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def gram_schmidt_projector(Phi, tol=1e-10):
    """Projector onto span(Phi) from modified Gram-Schmidt; dependent columns are skipped."""
    Phi = np.asarray(Phi, dtype=float)
    basis = []
    for col in Phi.T:
        v = col.copy()
        for q in basis:
            v -= (q @ v) * q
        for q in basis:  # second pass for stability
            v -= (q @ v) * q
        nrm = np.linalg.norm(v)
        if nrm > tol * max(1.0, np.linalg.norm(col)):
            basis.append(v / nrm)
    if not basis:
        return np.zeros((Phi.shape[0], Phi.shape[0]))
    Q = np.column_stack(basis)
    return Q @ Q.T


def normal_equations_residual(X, F):
    """Residual of regressing every row of X on the columns of F via normal equations."""
    coef = np.linalg.solve(F.T @ F, F.T @ X.T)
    return X - (F @ coef).T


def cox_de_boor(x, knots, degree):
    """Values of every B-spline basis function at x by the textbook recursion."""
    t = np.asarray(knots, dtype=float)
    nb = len(t) - degree - 1

    def N(i, k):
        if k == 0:
            if t[i] <= x < t[i + 1]:
                return 1.0
            # right endpoint belongs to the last non-empty interval
            if x == t[-1] and t[i] < t[i + 1] == t[-1]:
                return 1.0
            return 0.0
        out = 0.0
        if t[i + k] != t[i]:
            out += (x - t[i]) / (t[i + k] - t[i]) * N(i, k - 1)
        if t[i + k + 1] != t[i + 1]:
            out += (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * N(i + 1, k - 1)
        return out

    return np.array([N(i, degree) for i in range(nb)])


def bh_bruteforce(p_values, q):
    """Benjamini-Hochberg by checking every cut-off explicitly."""
    p = list(p_values)
    m = len(p)
    best = 0
    srt = sorted(p)
    for k in range(1, m + 1):
        if srt[k - 1] <= q * k / m:
            best = k
    if best == 0:
        return set()
    cutoff = srt[best - 1]
    # ties at the cut-off are all rejected, matching the step-up rule on sorted order
    return {i for i, v in enumerate(p) if v <= cutoff}


def clime_column_vertices(Sigma, j, lam, feas_tol=1e-9):
    """Minimum-L1 solution of ``|Sigma w - e_j|_inf <= lam`` by vertex enumeration.

    The optimum of the LP in (w+, w-) space is attained where ``p``
    linearly independent constraints are active.  In ``w`` space every
    such point is determined by choosing, per row, the lower face, the upper
    face or neither, and per coordinate whether it is zero.  All choices
    with exactly ``p`` active equations are solved and the feasible point
    of smallest L1 norm is returned.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    p = Sigma.shape[0]
    e = np.zeros(p)
    e[j] = 1.0
    rows = []
    for i in range(p):
        rows.append((Sigma[i], e[i] + lam))
        rows.append((Sigma[i], e[i] - lam))
    for k in range(p):
        unit = np.zeros(p)
        unit[k] = 1.0
        rows.append((unit, 0.0))
    best, best_val = None, np.inf
    for combo in itertools.combinations(range(len(rows)), p):
        # a row cannot sit on both faces at once
        faces = [c // 2 for c in combo if c < 2 * p]
        if len(set(faces)) != len(faces):
            continue
        A = np.array([rows[c][0] for c in combo])
        b = np.array([rows[c][1] for c in combo])
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        w = np.linalg.solve(A, b)
        if np.max(np.abs(Sigma @ w - e)) <= lam + feas_tol:
            val = np.abs(w).sum()
            if val < best_val - 1e-12:
                best, best_val = w, val
    return best, best_val

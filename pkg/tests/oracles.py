"""Independent reference implementations used to check the package.

These are deliberately naive: loops instead of vectorization, textbook
formulas instead of the package's algebraic shortcuts.
"""

import itertools

import numpy as np


def ridge_by_gradient_descent(h, y, lam, tol=1e-13, max_steps=500_000):
    """Minimize ||y - H w||^2 + lam ||w||^2 by plain gradient descent from zero."""
    h = np.asarray(h, dtype=float)
    lipschitz = 2.0 * (np.linalg.norm(h, 2) ** 2 + lam)
    lr = 1.0 / lipschitz
    w = np.zeros(h.shape[1])
    for _ in range(max_steps):
        grad = 2.0 * (h.T @ (h @ w - y) + lam * w)
        w = w - lr * grad
        if np.linalg.norm(grad) < tol:
            break
    return w


def hsic_double_loop(residuals, widths):
    """Mean biased HSIC over unordered column pairs, O(N^2) loops per pair."""
    r = np.asarray(residuals, dtype=float)
    n, d = r.shape
    kernels = []
    for i in range(d):
        k = np.empty((n, n))
        for a in range(n):
            for b in range(n):
                k[a, b] = np.exp(-((r[a, i] - r[b, i]) ** 2) / (2.0 * widths[i] ** 2))
        kernels.append(k)
    values = []
    for i in range(d):
        for j in range(i + 1, d):
            k, l = kernels[i], kernels[j]
            kc = k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()
            lc = l - l.mean(axis=0, keepdims=True) - l.mean(axis=1, keepdims=True) + l.mean()
            total = 0.0
            for a in range(n):
                for b in range(n):
                    total += kc[a, b] * lc[b, a]
            values.append(total / n**2)
    return float(np.mean(values))


def auroc_pairwise(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), by comparing every pair."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def auprc_step(scores, labels):
    """Average precision: mean over positives of precision at that positive's threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    total = 0.0
    for k in np.flatnonzero(labels):
        at_or_above = scores >= scores[k]
        total += labels[at_or_above].sum() / at_or_above.sum()
    return total / labels.sum()


def random_dag(d, rng, p=0.5):
    order = rng.permutation(d)
    adj = np.zeros((d, d), dtype=int)
    for a in range(d):
        for b in range(a + 1, d):
            if rng.random() < p:
                adj[order[a], order[b]] = 1
    return adj


def _linear_gaussian(adj, rng):
    d = adj.shape[0]
    signs = rng.choice([-1.0, 1.0], size=(d, d))
    weights = adj * signs * rng.uniform(0.5, 2.0, size=(d, d))
    noise = rng.uniform(0.5, 1.5, size=d)
    return weights, noise


def _covariance(weights, noise):
    # x = B^T x + e  with B[j, i] the weight of j -> i
    inv = np.linalg.inv(np.eye(len(noise)) - weights.T)
    return inv @ np.diag(noise) @ inv.T


def _do_moments(weights, noise, i, j):
    """Slope and variance of x_j under do(x_i = v)."""
    cut = weights.copy()
    cut[:, i] = 0.0
    d = len(noise)
    inv = np.linalg.inv(np.eye(d) - cut.T)
    slope = inv[j, i]
    noise_do = noise.copy()
    noise_do[i] = 0.0
    var = (inv @ np.diag(noise_do) @ inv.T)[j, j]
    return slope, var


def _adjusted_moments(cov, i, j, z):
    """Slope and variance of x_j after adjusting for z: integral of p(x_j | x_i, z) p(z) dz."""
    cols = [i] + sorted(z)
    sxx = cov[np.ix_(cols, cols)]
    sxy = cov[cols, j]
    beta = np.linalg.solve(sxx, sxy)
    resid = cov[j, j] - sxy @ beta
    if z:
        bz = beta[1:]
        zz = cov[np.ix_(sorted(z), sorted(z))]
        var = resid + bz @ zz @ bz
    else:
        var = resid
    return beta[0], var


def sid_linear_gaussian(estimated, truth, rng, tol=1e-8):
    """SID by comparing interventional moments on a random linear-Gaussian SCM over ``truth``.

    For each ordered pair the estimated parents of ``i`` are used as an
    adjustment set (or, if ``j`` is an estimated parent of ``i``, the
    estimate predicts no effect). A pair counts as an error when the implied
    interventional slope or variance differs from the true one.
    """
    est = np.asarray(estimated) != 0
    weights, noise = _linear_gaussian(np.asarray(truth), rng)
    cov = _covariance(weights, noise)
    d = est.shape[0]
    errors = 0
    for i in range(d):
        parents = set(np.flatnonzero(est[:, i]).tolist())
        for j in range(d):
            if j == i:
                continue
            true_slope, true_var = _do_moments(weights, noise, i, j)
            if j in parents:
                est_slope, est_var = 0.0, cov[j, j]
            else:
                est_slope, est_var = _adjusted_moments(cov, i, j, parents)
            if abs(est_slope - true_slope) > tol or abs(est_var - true_var) > tol:
                errors += 1
    return errors


def plackett_luce_edge_marginals(phi, psi):
    """Exact P(A_ij = 1) for the permuted upper-triangular sampler, by enumerating orders."""
    d = len(psi)
    w = np.exp(psi)
    probs = np.zeros((d, d))
    for order in itertools.permutations(range(d)):
        p_order = 1.0
        remaining = list(order)
        for node in order:
            p_order *= w[node] / sum(w[k] for k in remaining)
            remaining.remove(node)
        rank = {node: r for r, node in enumerate(order)}
        for i in range(d):
            for j in range(d):
                if rank[i] < rank[j]:
                    probs[i, j] += p_order / (1.0 + np.exp(-phi[rank[i], rank[j]]))
    return probs

"""Numba-compiled batch kernels, loop-per-example.

Same function names, signatures, and flat gradient layout as
``_kernels_numpy``; see that module for the contract. Accumulation order is
the batch order, so results are deterministic run to run.
"""

import numpy as np
from numba import njit

ACT_RELU = 0
ACT_TANH = 1


@njit(cache=True)
def _softmax_row(u):
    k = u.shape[0]
    mx = u[0]
    for j in range(1, k):
        if u[j] > mx:
            mx = u[j]
    p = np.empty(k, dtype=u.dtype)
    s = 0.0
    for j in range(k):
        p[j] = np.exp(u[j] - mx)
        s += p[j]
    for j in range(k):
        p[j] /= s
    return p


@njit(cache=True)
def _loss_row(u, label):
    k = u.shape[0]
    mx = u[0]
    for j in range(1, k):
        if u[j] > mx:
            mx = u[j]
    s = 0.0
    for j in range(k):
        s += np.exp(u[j] - mx)
    return np.log(s) - (u[label] - mx)


# ----------------------------------------------------------------- logreg

@njit(cache=True)
def logreg_logits(W, b, X):
    n = X.shape[0]
    K, D = W.shape
    U = np.empty((n, K), dtype=X.dtype)
    for i in range(n):
        for k in range(K):
            acc = b[k]
            for d in range(D):
                acc += W[k, d] * X[i, d]
            U[i, k] = acc
    return U


@njit(cache=True)
def logreg_loss(W, b, X, y):
    U = logreg_logits(W, b, X)
    n = X.shape[0]
    out = np.empty(n, dtype=X.dtype)
    for i in range(n):
        out[i] = _loss_row(U[i], y[i])
    return out


@njit(cache=True)
def logreg_grads(W, b, X, y):
    n = X.shape[0]
    K, D = W.shape
    G = np.empty((n, K * D + K), dtype=X.dtype)
    for i in range(n):
        u = np.empty(K, dtype=X.dtype)
        for k in range(K):
            acc = b[k]
            for d in range(D):
                acc += W[k, d] * X[i, d]
            u[k] = acc
        p = _softmax_row(u)
        p[y[i]] -= 1.0
        for k in range(K):
            for d in range(D):
                G[i, k * D + d] = p[k] * X[i, d]
            G[i, K * D + k] = p[k]
    return G


@njit(cache=True)
def logreg_grad_input(W, b, X, y):
    n = X.shape[0]
    K, D = W.shape
    out = np.zeros((n, D), dtype=X.dtype)
    for i in range(n):
        u = np.empty(K, dtype=X.dtype)
        for k in range(K):
            acc = b[k]
            for d in range(D):
                acc += W[k, d] * X[i, d]
            u[k] = acc
        p = _softmax_row(u)
        p[y[i]] -= 1.0
        for k in range(K):
            for d in range(D):
                out[i, d] += p[k] * W[k, d]
    return out


@njit(cache=True)
def logreg_clipped_grad_sum(W, b, X, y, c):
    n = X.shape[0]
    K, D = W.shape
    out = np.zeros(K * D + K, dtype=X.dtype)
    clipped = np.isfinite(c)
    for i in range(n):
        u = np.empty(K, dtype=X.dtype)
        x2 = 0.0
        for d in range(D):
            x2 += X[i, d] * X[i, d]
        for k in range(K):
            acc = b[k]
            for d in range(D):
                acc += W[k, d] * X[i, d]
            u[k] = acc
        p = _softmax_row(u)
        p[y[i]] -= 1.0
        gu2 = 0.0
        for k in range(K):
            gu2 += p[k] * p[k]
        scale = 1.0
        if clipped:
            norm = np.sqrt(gu2 * (x2 + 1.0))
            if norm > c:
                scale = c / norm
        for k in range(K):
            g = scale * p[k]
            for d in range(D):
                out[k * D + d] += g * X[i, d]
            out[K * D + k] += g
    return out


@njit(cache=True)
def logreg_reverse_step(W, b, X, y, aW, ab, c):
    n = X.shape[0]
    K, D = W.shape
    h = np.zeros(K * D + K, dtype=X.dtype)
    cross = np.zeros((n, D), dtype=X.dtype)
    clipped = np.isfinite(c)
    for i in range(n):
        u = np.empty(K, dtype=X.dtype)
        au = np.empty(K, dtype=X.dtype)  # aW x_i + ab
        x2 = 0.0
        for d in range(D):
            x2 += X[i, d] * X[i, d]
        for k in range(K):
            acc = b[k]
            aacc = ab[k]
            for d in range(D):
                acc += W[k, d] * X[i, d]
                aacc += aW[k, d] * X[i, d]
            u[k] = acc
            au[k] = aacc
        p = _softmax_row(u)
        gu = np.empty(K, dtype=X.dtype)
        for k in range(K):
            gu[k] = p[k]
        gu[y[i]] -= 1.0
        gu2 = 0.0
        g_dot_a = 0.0
        for k in range(K):
            gu2 += gu[k] * gu[k]
            g_dot_a += gu[k] * au[k]
        alpha = 1.0
        beta = 0.0
        if clipped:
            norm2 = gu2 * (x2 + 1.0)
            norm = np.sqrt(norm2)
            if norm > c:
                alpha = c / norm
                beta = -alpha * g_dot_a / norm2
        # logit-space tangent along u_i = alpha a + beta g_i
        udot = np.empty(K, dtype=X.dtype)
        pu = 0.0
        for k in range(K):
            udot[k] = alpha * au[k] + beta * (x2 + 1.0) * gu[k]
            pu += p[k] * udot[k]
        gudot = np.empty(K, dtype=X.dtype)
        for k in range(K):
            gudot[k] = p[k] * (udot[k] - pu)
        for k in range(K):
            for d in range(D):
                h[k * D + d] += gudot[k] * X[i, d]
            h[K * D + k] += gudot[k]
        for d in range(D):
            acc = beta * gu2 * X[i, d]
            for k in range(K):
                acc += alpha * gu[k] * aW[k, d] + gudot[k] * W[k, d]
            cross[i, d] = acc
    return h, cross


# -------------------------------------------------------------------- mlp

@njit(cache=True)
def _mlp_example_forward(W1, b1, W2, b2, x, act):
    Hn, D = W1.shape
    K = W2.shape[0]
    a = np.empty(Hn, dtype=x.dtype)
    hv = np.empty(Hn, dtype=x.dtype)
    da = np.empty(Hn, dtype=x.dtype)
    dda = np.empty(Hn, dtype=x.dtype)
    for j in range(Hn):
        acc = b1[j]
        for d in range(D):
            acc += W1[j, d] * x[d]
        a[j] = acc
        if act == ACT_TANH:
            t = np.tanh(acc)
            hv[j] = t
            da[j] = 1.0 - t * t
            dda[j] = -2.0 * t * (1.0 - t * t)
        else:
            if acc > 0.0:
                hv[j] = acc
                da[j] = 1.0
            else:
                hv[j] = 0.0
                da[j] = 0.0
            dda[j] = 0.0
    u = np.empty(K, dtype=x.dtype)
    for k in range(K):
        acc = b2[k]
        for j in range(Hn):
            acc += W2[k, j] * hv[j]
        u[k] = acc
    return a, hv, da, dda, u


@njit(cache=True)
def mlp_logits(W1, b1, W2, b2, X, act):
    n = X.shape[0]
    K = W2.shape[0]
    U = np.empty((n, K), dtype=X.dtype)
    for i in range(n):
        _, _, _, _, u = _mlp_example_forward(W1, b1, W2, b2, X[i], act)
        U[i] = u
    return U


@njit(cache=True)
def mlp_loss(W1, b1, W2, b2, X, y, act):
    n = X.shape[0]
    out = np.empty(n, dtype=X.dtype)
    for i in range(n):
        _, _, _, _, u = _mlp_example_forward(W1, b1, W2, b2, X[i], act)
        out[i] = _loss_row(u, y[i])
    return out


@njit(cache=True)
def _mlp_example_backward(W2, p, da, y_i):
    Hn = da.shape[0]
    K = W2.shape[0]
    gu = np.empty(K, dtype=p.dtype)
    for k in range(K):
        gu[k] = p[k]
    gu[y_i] -= 1.0
    gh = np.zeros(Hn, dtype=p.dtype)
    for k in range(K):
        for j in range(Hn):
            gh[j] += W2[k, j] * gu[k]
    ga = np.empty(Hn, dtype=p.dtype)
    for j in range(Hn):
        ga[j] = da[j] * gh[j]
    return gu, gh, ga


@njit(cache=True)
def mlp_grads(W1, b1, W2, b2, X, y, act):
    n, D = X.shape
    Hn = W1.shape[0]
    K = W2.shape[0]
    o1 = Hn * D
    o2 = o1 + Hn
    o3 = o2 + K * Hn
    G = np.empty((n, o3 + K), dtype=X.dtype)
    for i in range(n):
        _, hv, da, _, u = _mlp_example_forward(W1, b1, W2, b2, X[i], act)
        p = _softmax_row(u)
        gu, _, ga = _mlp_example_backward(W2, p, da, y[i])
        for j in range(Hn):
            for d in range(D):
                G[i, j * D + d] = ga[j] * X[i, d]
            G[i, o1 + j] = ga[j]
        for k in range(K):
            for j in range(Hn):
                G[i, o2 + k * Hn + j] = gu[k] * hv[j]
            G[i, o3 + k] = gu[k]
    return G


@njit(cache=True)
def mlp_grad_input(W1, b1, W2, b2, X, y, act):
    n, D = X.shape
    Hn = W1.shape[0]
    out = np.zeros((n, D), dtype=X.dtype)
    for i in range(n):
        _, hv, da, _, u = _mlp_example_forward(W1, b1, W2, b2, X[i], act)
        p = _softmax_row(u)
        _, _, ga = _mlp_example_backward(W2, p, da, y[i])
        for j in range(Hn):
            for d in range(D):
                out[i, d] += ga[j] * W1[j, d]
    return out


@njit(cache=True)
def mlp_clipped_grad_sum(W1, b1, W2, b2, X, y, c, act):
    n, D = X.shape
    Hn = W1.shape[0]
    K = W2.shape[0]
    o1 = Hn * D
    o2 = o1 + Hn
    o3 = o2 + K * Hn
    out = np.zeros(o3 + K, dtype=X.dtype)
    clipped = np.isfinite(c)
    for i in range(n):
        _, hv, da, _, u = _mlp_example_forward(W1, b1, W2, b2, X[i], act)
        p = _softmax_row(u)
        gu, _, ga = _mlp_example_backward(W2, p, da, y[i])
        scale = 1.0
        if clipped:
            x2 = 0.0
            for d in range(D):
                x2 += X[i, d] * X[i, d]
            h2 = 0.0
            for j in range(Hn):
                h2 += hv[j] * hv[j]
            ga2 = 0.0
            for j in range(Hn):
                ga2 += ga[j] * ga[j]
            gu2 = 0.0
            for k in range(K):
                gu2 += gu[k] * gu[k]
            norm = np.sqrt(ga2 * (x2 + 1.0) + gu2 * (h2 + 1.0))
            if norm > c:
                scale = c / norm
        for j in range(Hn):
            g = scale * ga[j]
            for d in range(D):
                out[j * D + d] += g * X[i, d]
            out[o1 + j] += g
        for k in range(K):
            g = scale * gu[k]
            for j in range(Hn):
                out[o2 + k * Hn + j] += g * hv[j]
            out[o3 + k] += g
    return out


@njit(cache=True)
def mlp_reverse_step(W1, b1, W2, b2, X, y, aW1, ab1, aW2, ab2, c, act):
    n, D = X.shape
    Hn = W1.shape[0]
    K = W2.shape[0]
    o1 = Hn * D
    o2 = o1 + Hn
    o3 = o2 + K * Hn
    h = np.zeros(o3 + K, dtype=X.dtype)
    cross = np.zeros((n, D), dtype=X.dtype)
    clipped = np.isfinite(c)
    for i in range(n):
        a, hv, da, dda, u = _mlp_example_forward(W1, b1, W2, b2, X[i], act)
        p = _softmax_row(u)
        gu, gh, ga = _mlp_example_backward(W2, p, da, y[i])
        x2 = 0.0
        for d in range(D):
            x2 += X[i, d] * X[i, d]
        h2 = 0.0
        for j in range(Hn):
            h2 += hv[j] * hv[j]
        ga2 = 0.0
        for j in range(Hn):
            ga2 += ga[j] * ga[j]
        gu2 = 0.0
        for k in range(K):
            gu2 += gu[k] * gu[k]
        # adjoint pushed through the first and second layers
        aa = np.empty(Hn, dtype=X.dtype)  # aW1 x + ab1
        for j in range(Hn):
            acc = ab1[j]
            for d in range(D):
                acc += aW1[j, d] * X[i, d]
            aa[j] = acc
        au = np.empty(K, dtype=X.dtype)  # aW2 h + ab2
        for k in range(K):
            acc = ab2[k]
            for j in range(Hn):
                acc += aW2[k, j] * hv[j]
            au[k] = acc
        g_dot_a = 0.0
        for j in range(Hn):
            g_dot_a += ga[j] * aa[j]
        for k in range(K):
            g_dot_a += gu[k] * au[k]
        alpha = 1.0
        beta = 0.0
        if clipped:
            norm2 = ga2 * (x2 + 1.0) + gu2 * (h2 + 1.0)
            norm = np.sqrt(norm2)
            if norm > c:
                alpha = c / norm
                beta = -alpha * g_dot_a / norm2
        adot = np.empty(Hn, dtype=X.dtype)
        hdot = np.empty(Hn, dtype=X.dtype)
        for j in range(Hn):
            adot[j] = alpha * aa[j] + beta * (x2 + 1.0) * ga[j]
            hdot[j] = da[j] * adot[j]
        udot = np.empty(K, dtype=X.dtype)
        pu = 0.0
        for k in range(K):
            acc = alpha * au[k] + beta * (h2 + 1.0) * gu[k]
            for j in range(Hn):
                acc += W2[k, j] * hdot[j]
            udot[k] = acc
            pu += p[k] * acc
        gudot = np.empty(K, dtype=X.dtype)
        for k in range(K):
            gudot[k] = p[k] * (udot[k] - pu)
        ghdot = np.empty(Hn, dtype=X.dtype)
        for j in range(Hn):
            acc = beta * gu2 * hv[j]
            for k in range(K):
                acc += W2[k, j] * gudot[k] + alpha * aW2[k, j] * gu[k]
            ghdot[j] = acc
        gadot = np.empty(Hn, dtype=X.dtype)
        for j in range(Hn):
            gadot[j] = dda[j] * adot[j] * gh[j] + da[j] * ghdot[j]
        for j in range(Hn):
            for d in range(D):
                h[j * D + d] += gadot[j] * X[i, d]
            h[o1 + j] += gadot[j]
        for k in range(K):
            for j in range(Hn):
                h[o2 + k * Hn + j] += gudot[k] * hv[j] + gu[k] * hdot[j]
            h[o3 + k] += gudot[k]
        for d in range(D):
            acc = beta * ga2 * X[i, d]
            for j in range(Hn):
                acc += alpha * ga[j] * aW1[j, d] + gadot[j] * W1[j, d]
            cross[i, d] = acc
    return h, cross

"""Pure-numpy batch kernels for the two model families.

Every kernel takes unpacked parameter blocks (C-contiguous views into the
flat parameter vector) plus a feature batch X (n, D) and labels y (n,).
Per-example gradients are laid out flat in parameter order, logistic
regression as [W, b] and the one-hidden-layer network as [W1, b1, W2, b2].

``*_reverse_step`` is the transpose of one gradient-descent update: given an
adjoint vector ``a`` it forms, per example i with gradient g_i,

    u_i = J_clip(g_i) a          (Jacobian of the clip at g_i, symmetric)
    h  += H_i u_i                (Hessian of the loss at the same point)
    cross_i = u_i^T d2L_i/(dw dx)

and returns (h, cross). With c = inf the clip Jacobian is the identity.

ACT_RELU / ACT_TANH select the hidden activation.
"""

import numpy as np

ACT_RELU = 0
ACT_TANH = 1


def _softmax(U):
    Z = U - U.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _losses_from_logits(U, y):
    Z = U - U.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Z).sum(axis=1))
    return lse - Z[np.arange(len(y)), y]


def _grad_logits(U, y):
    # d loss / d logits = softmax(U) - onehot(y)
    G = _softmax(U)
    G[np.arange(len(y)), y] -= 1.0
    return G


def _act(A, act):
    if act == ACT_TANH:
        T = np.tanh(A)
        return T, 1.0 - T * T, -2.0 * T * (1.0 - T * T)
    H = np.maximum(A, 0.0)
    return H, (A > 0.0).astype(A.dtype), np.zeros_like(A)


def _clip_coeffs(norm, norm2, g_dot_a, c):
    """Coefficients (alpha, beta) such that J_clip(g)^T a = alpha*a + beta*g."""
    n = norm.shape[0]
    alpha = np.ones(n, dtype=norm.dtype)
    beta = np.zeros(n, dtype=norm.dtype)
    if np.isfinite(c):
        outer = norm > c
        if np.any(outer):
            s = c / norm[outer]
            alpha[outer] = s
            beta[outer] = -s * g_dot_a[outer] / norm2[outer]
    return alpha, beta


def _clip_scales(norm, c):
    n = norm.shape[0]
    scale = np.ones(n, dtype=norm.dtype)
    if np.isfinite(c):
        outer = norm > c
        scale[outer] = c / norm[outer]
    return scale


# ----------------------------------------------------------------- logreg

def logreg_logits(W, b, X):
    return X @ W.T + b


def logreg_loss(W, b, X, y):
    return _losses_from_logits(X @ W.T + b, y)


def logreg_grads(W, b, X, y):
    n = X.shape[0]
    GU = _grad_logits(X @ W.T + b, y)
    GW = GU[:, :, None] * X[:, None, :]
    return np.concatenate([GW.reshape(n, -1), GU], axis=1)


def logreg_grad_input(W, b, X, y):
    GU = _grad_logits(X @ W.T + b, y)
    return GU @ W


def logreg_clipped_grad_sum(W, b, X, y, c):
    GU = _grad_logits(X @ W.T + b, y)
    gu2 = (GU * GU).sum(axis=1)
    x2 = (X * X).sum(axis=1)
    norm = np.sqrt(gu2 * (x2 + 1.0))
    scale = _clip_scales(norm, c)
    GUs = GU * scale[:, None]
    hW = GUs.T @ X
    hb = GUs.sum(axis=0)
    return np.concatenate([hW.ravel(), hb])


def logreg_reverse_step(W, b, X, y, aW, ab, c):
    n = X.shape[0]
    P = _softmax(X @ W.T + b)
    GU = P.copy()
    GU[np.arange(n), y] -= 1.0
    gu2 = (GU * GU).sum(axis=1)
    x2 = (X * X).sum(axis=1)
    norm2 = gu2 * (x2 + 1.0)
    norm = np.sqrt(norm2)
    # g_i . a without materializing per-example gradient matrices
    g_dot_a = (GU * (X @ aW.T)).sum(axis=1) + GU @ ab
    alpha, beta = _clip_coeffs(norm, np.maximum(norm2, 1e-300), g_dot_a, c)
    # logit-space tangent of u_i = alpha_i a + beta_i g_i
    Udot = alpha[:, None] * (X @ aW.T + ab) + (beta * (x2 + 1.0))[:, None] * GU
    GUdot = P * Udot - P * (P * Udot).sum(axis=1, keepdims=True)
    hW = GUdot.T @ X
    hb = GUdot.sum(axis=0)
    cross = alpha[:, None] * (GU @ aW) + (beta * gu2)[:, None] * X + GUdot @ W
    return np.concatenate([hW.ravel(), hb]), cross


# -------------------------------------------------------------------- mlp

def mlp_logits(W1, b1, W2, b2, X, act):
    H, _, _ = _act(X @ W1.T + b1, act)
    return H @ W2.T + b2


def mlp_loss(W1, b1, W2, b2, X, y, act):
    return _losses_from_logits(mlp_logits(W1, b1, W2, b2, X, act), y)


def _mlp_backward(W1, b1, W2, b2, X, y, act):
    A = X @ W1.T + b1
    H, dact, ddact = _act(A, act)
    U = H @ W2.T + b2
    P = _softmax(U)
    GU = P.copy()
    GU[np.arange(len(y)), y] -= 1.0
    GH = GU @ W2
    GA = dact * GH
    return P, GU, GH, GA, H, dact, ddact


def mlp_grads(W1, b1, W2, b2, X, y, act):
    n = X.shape[0]
    _, GU, _, GA, H, _, _ = _mlp_backward(W1, b1, W2, b2, X, y, act)
    GW1 = GA[:, :, None] * X[:, None, :]
    GW2 = GU[:, :, None] * H[:, None, :]
    return np.concatenate([GW1.reshape(n, -1), GA, GW2.reshape(n, -1), GU], axis=1)


def mlp_grad_input(W1, b1, W2, b2, X, y, act):
    _, _, _, GA, _, _, _ = _mlp_backward(W1, b1, W2, b2, X, y, act)
    return GA @ W1


def mlp_clipped_grad_sum(W1, b1, W2, b2, X, y, c, act):
    _, GU, _, GA, H, _, _ = _mlp_backward(W1, b1, W2, b2, X, y, act)
    ga2 = (GA * GA).sum(axis=1)
    gu2 = (GU * GU).sum(axis=1)
    x2 = (X * X).sum(axis=1)
    h2 = (H * H).sum(axis=1)
    norm = np.sqrt(ga2 * (x2 + 1.0) + gu2 * (h2 + 1.0))
    scale = _clip_scales(norm, c)
    GAs = GA * scale[:, None]
    GUs = GU * scale[:, None]
    hW1 = GAs.T @ X
    hb1 = GAs.sum(axis=0)
    hW2 = GUs.T @ H
    hb2 = GUs.sum(axis=0)
    return np.concatenate([hW1.ravel(), hb1, hW2.ravel(), hb2])


def mlp_reverse_step(W1, b1, W2, b2, X, y, aW1, ab1, aW2, ab2, c, act):
    P, GU, GH, GA, H, dact, ddact = _mlp_backward(W1, b1, W2, b2, X, y, act)
    ga2 = (GA * GA).sum(axis=1)
    gu2 = (GU * GU).sum(axis=1)
    x2 = (X * X).sum(axis=1)
    h2 = (H * H).sum(axis=1)
    norm2 = ga2 * (x2 + 1.0) + gu2 * (h2 + 1.0)
    norm = np.sqrt(norm2)
    g_dot_a = (
        (GA * (X @ aW1.T)).sum(axis=1)
        + GA @ ab1
        + (GU * (H @ aW2.T)).sum(axis=1)
        + GU @ ab2
    )
    alpha, beta = _clip_coeffs(norm, np.maximum(norm2, 1e-300), g_dot_a, c)
    # forward-over-reverse tangent along u_i = alpha_i a + beta_i g_i:
    # parameter-direction blocks are V1_i = alpha aW1 + beta GA_i x_i^T, etc.
    Adot = alpha[:, None] * (X @ aW1.T + ab1) + (beta * (x2 + 1.0))[:, None] * GA
    Hdot = dact * Adot
    Udot = (
        alpha[:, None] * (H @ aW2.T + ab2)
        + (beta * (h2 + 1.0))[:, None] * GU
        + Hdot @ W2.T
    )
    GUdot = P * Udot - P * (P * Udot).sum(axis=1, keepdims=True)
    GHdot = GUdot @ W2 + alpha[:, None] * (GU @ aW2) + (beta * gu2)[:, None] * H
    GAdot = ddact * Adot * GH + dact * GHdot
    hW1 = GAdot.T @ X
    hb1 = GAdot.sum(axis=0)
    hW2 = GUdot.T @ H + GU.T @ Hdot
    hb2 = GUdot.sum(axis=0)
    cross = alpha[:, None] * (GA @ aW1) + (beta * ga2)[:, None] * X + GAdot @ W1
    return np.concatenate([hW1.ravel(), hb1, hW2.ravel(), hb2]), cross

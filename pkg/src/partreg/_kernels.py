"""Compiled inner loops of the correspondence optimizer.

Each kernel makes one pass over the n x 2n keypoint pairs and fuses the
distance, loss and gradient work that would otherwise take a dozen numpy
temporaries per optimizer step.
"""

import math

import numpy as np
from numba import njit

# Reassociation lets LLVM vectorise the sqrt/div reductions (about 2x);
# nnan/ninf stay off so the zero-distance guard below is honoured.
FAST = {"reassoc", "contract", "nsz", "arcp"}


@njit(cache=True)
def _accumulate(P, j, g0, g1, g2, gR, gt):
    gt[0] += g0
    gt[1] += g1
    gt[2] += g2
    for c in range(3):
        gR[0, c] += g0 * P[j, c]
        gR[1, c] += g1 * P[j, c]
        gR[2, c] += g2 * P[j, c]


@njit(cache=True, fastmath=FAST, nogil=True)
def wpd_pose(P, QT, W, R, t, gR, gt):
    """Loss ``sum W_jk |R p_j + t - q_k|``; accumulates dL/dR and dL/dt
    into ``gR`` and ``gt``."""
    n, m = W.shape
    q0, q1, q2 = QT[0], QT[1], QT[2]
    loss = 0.0
    for j in range(n):
        y0 = R[0, 0] * P[j, 0] + R[0, 1] * P[j, 1] + R[0, 2] * P[j, 2] + t[0]
        y1 = R[1, 0] * P[j, 0] + R[1, 1] * P[j, 1] + R[1, 2] * P[j, 2] + t[1]
        y2 = R[2, 0] * P[j, 0] + R[2, 1] * P[j, 1] + R[2, 2] * P[j, 2] + t[2]
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        for k in range(m):
            d0 = y0 - q0[k]
            d1 = y1 - q1[k]
            d2 = y2 - q2[k]
            d = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            w = W[j, k]
            loss += w * d
            s = w / d if d > 0.0 else 0.0
            g0 += s * d0
            g1 += s * d1
            g2 += s * d2
        _accumulate(P, j, g0, g1, g2, gR, gt)
    return loss


@njit(cache=True, fastmath=FAST, nogil=True)
def wpd_joint(P, QT, R, t, C, gR, gt, gC):
    """Loss for row-stochastic weights ``C``, plus the softmax logit gradient.

    Accumulates pose gradients like :func:`wpd_pose` and writes
    ``C * (D - rowsum(C * D))`` into ``gC``.
    ``C`` arrives holding ``exp(logits - rowmax)`` and is normalised in
    place; the exp itself is left to numpy, whose vectorised version is far
    faster than a scalar loop here.
    """
    n, m = C.shape
    q0, q1, q2 = QT[0], QT[1], QT[2]
    loss = 0.0
    for j in range(n):
        total = 0.0
        for k in range(m):
            total += C[j, k]
        for k in range(m):
            C[j, k] /= total
        y0 = R[0, 0] * P[j, 0] + R[0, 1] * P[j, 1] + R[0, 2] * P[j, 2] + t[0]
        y1 = R[1, 0] * P[j, 0] + R[1, 1] * P[j, 1] + R[1, 2] * P[j, 2] + t[1]
        y2 = R[2, 0] * P[j, 0] + R[2, 1] * P[j, 1] + R[2, 2] * P[j, 2] + t[2]
        row = 0.0
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        for k in range(m):
            d0 = y0 - q0[k]
            d1 = y1 - q1[k]
            d2 = y2 - q2[k]
            d = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            gC[j, k] = d
            c = C[j, k]
            row += c * d
            s = c / d if d > 0.0 else 0.0
            g0 += s * d0
            g1 += s * d1
            g2 += s * d2
        loss += row
        for k in range(m):
            gC[j, k] = C[j, k] * (gC[j, k] - row)
        _accumulate(P, j, g0, g1, g2, gR, gt)
    return loss


@njit(cache=True, fastmath=FAST, nogil=True)
def adam_update(param, grad, m1, m2, lr, beta1, beta2, eps, c1, c2):
    """In-place bias-corrected Adam step over flat arrays."""
    p = param.ravel()
    g = grad.ravel()
    a = m1.ravel()
    b = m2.ravel()
    for i in range(p.size):
        a[i] = beta1 * a[i] + (1.0 - beta1) * g[i]
        b[i] = beta2 * b[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (a[i] / c1) / (math.sqrt(b[i] / c2) + eps)


@njit(cache=True)
def shift_rows(L, out):
    """``out = L - rowmax(L)``."""
    n, m = L.shape
    for j in range(n):
        top = L[j, 0]
        for k in range(1, m):
            if L[j, k] > top:
                top = L[j, k]
        for k in range(m):
            out[j, k] = L[j, k] - top


@njit(cache=True)
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True)
def rot6d(x, R, eps):
    """Gram-Schmidt rotation from ``x[:6]`` into ``R``; False if degenerate."""
    n1 = math.sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2])
    if not n1 > eps:
        return False
    b1 = np.empty(3)
    b2 = np.empty(3)
    b3 = np.empty(3)
    for i in range(3):
        b1[i] = x[i] / n1
    proj = b1[0] * x[3] + b1[1] * x[4] + b1[2] * x[5]
    for i in range(3):
        b2[i] = x[3 + i] - proj * b1[i]
    n2 = math.sqrt(b2[0] * b2[0] + b2[1] * b2[1] + b2[2] * b2[2])
    if not n2 > eps:
        return False
    # second pass: a2 nearly parallel to a1 leaves a b1 component behind
    proj = b1[0] * b2[0] + b1[1] * b2[1] + b1[2] * b2[2]
    for i in range(3):
        b2[i] -= proj * b1[i]
    n2 = math.sqrt(b2[0] * b2[0] + b2[1] * b2[1] + b2[2] * b2[2])
    for i in range(3):
        b2[i] /= n2
    _cross(b1, b2, b3)
    for i in range(3):
        R[i, 0] = b1[i]
        R[i, 1] = b2[i]
        R[i, 2] = b3[i]
    return True


@njit(cache=True)
def rot6d_backward(x, gR, gt, out):
    """Gradient w.r.t. ``(a1, a2, t)`` from dL/dR and dL/dt (see
    ``geometry.rotation_6d_backward`` for the step-by-step version)."""
    a1 = x[0:3]
    a2 = x[3:6]
    n1 = math.sqrt(a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2])
    b1 = a1 / n1
    proj = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2]
    u2 = a2 - proj * b1
    n2 = math.sqrt(u2[0] * u2[0] + u2[1] * u2[1] + u2[2] * u2[2])
    b2 = u2 / n2
    g1 = gR[:, 0].copy()
    g2 = gR[:, 1].copy()
    g3 = gR[:, 2].copy()
    tmp = np.empty(3)
    _cross(b2, g3, tmp)
    g1 += tmp
    _cross(g3, b1, tmp)
    g2 += tmp
    gu2 = (g2 - b2 * (b2[0] * g2[0] + b2[1] * g2[1] + b2[2] * g2[2])) / n2
    s = b1[0] * gu2[0] + b1[1] * gu2[1] + b1[2] * gu2[2]
    ga2 = gu2 - b1 * s
    g1 -= proj * gu2 + a2 * s
    ga1 = (g1 - b1 * (b1[0] * g1[0] + b1[1] * g1[1] + b1[2] * g1[2])) / n1
    for i in range(3):
        out[i] = ga1[i]
        out[3 + i] = ga2[i]
        out[6 + i] = gt[i]

"""Pure numpy/Python versions of the compiled kernels in ``_kernels.pyx``.

Signatures and semantics match the compiled module one for one.
"""
import numpy as np


def rank2_apply(a, b, alpha, beta, gamma, c1, c2, X):
    u = X @ a
    v = X @ b
    ca = c1 * v + c2 * (gamma * v - beta * u)
    cb = -c1 * u + c2 * (gamma * u - alpha * v)
    return X + ca[:, None] * a[None, :] + cb[:, None] * b[None, :]


def plane_rotate(p, q, thetas, positions, X):
    ang = positions[:, None] * thetas[None, :]
    c = np.cos(ang)
    s = np.sin(ang)
    xp = X[:, p]
    xq = X[:, q]
    Y = X.copy()
    Y[:, p] = c * xp - s * xq
    Y[:, q] = s * xp + c * xq
    return Y


def _log_sigmoid(z):
    return np.where(z >= 0.0, -np.log1p(np.exp(-np.abs(z))), z - np.log1p(np.exp(-np.abs(z))))


def exclusive_cumsum(x):
    out = np.empty(len(x) + 1, dtype=np.float64)
    out[0] = 0.0
    acc = 0.0
    comp = 0.0
    for k, xk in enumerate(x.tolist()):
        t = acc + xk
        if abs(acc) >= abs(xk):
            comp += (acc - t) + xk
        else:
            comp += (xk - t) + acc
        acc = t
        out[k + 1] = acc + comp
    return out


def suffix_bias(psi):
    t = len(psi)
    out = np.empty(t + 1, dtype=np.float64)
    out[t] = 0.0
    acc = 0.0
    comp = 0.0
    vals = psi.tolist()
    for j in range(t - 1, -1, -1):
        x = vals[j]
        s = acc + x
        if abs(acc) >= abs(x):
            comp += (acc - s) + x
        else:
            comp += (x - s) + acc
        acc = s
        out[j] = acc + comp
    return out


def logsigmoid_path_row(probe, rotated, alpha, inv_d):
    if rotated.shape[0] <= 1:
        psi = np.empty(0, dtype=np.float64)
    else:
        psi = alpha * _log_sigmoid((rotated[1:] @ probe) * inv_d)
    return psi, suffix_bias(psi)

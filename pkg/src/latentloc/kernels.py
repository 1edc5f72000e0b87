"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``LATENTLOC_NUMBA`` is not set
to ``0``/``false``/``off``.  Both paths compute the same quantities; results
agree to a few ULP (transcendentals come from different libms), and each path
on its own is bit-deterministic.

Quaternions are stored as ``(qx, qy, qz, qw)`` rows throughout.
"""

from __future__ import annotations

import contextlib
import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    numba = None
    HAVE_NUMBA = False


def _env_enabled() -> bool:
    flag = os.environ.get("LATENTLOC_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


_USE_NUMBA = HAVE_NUMBA and _env_enabled()


def numba_enabled() -> bool:
    return _USE_NUMBA


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` for subsequent kernel calls."""
    global _USE_NUMBA
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _USE_NUMBA = True
    elif name == "numpy":
        _USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")


@contextlib.contextmanager
def backend(name: str):
    prev = _USE_NUMBA
    set_backend(name)
    try:
        yield
    finally:
        set_backend("numba" if prev else "numpy")


def _njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# --------------------------------------------------------------------------
# Fourier features
# --------------------------------------------------------------------------


def _fourier_np(x, freqs):
    n, c = x.shape
    m = freqs.shape[0]
    arg = x[:, :, None] * freqs[None, None, :]
    out = np.empty((n, c, 1 + 2 * m))
    out[:, :, 0] = x
    out[:, :, 1::2] = np.sin(arg)
    out[:, :, 2::2] = np.cos(arg)
    return out.reshape(n, c * (1 + 2 * m))


@_njit
def _fourier_nb(x, freqs):
    n, c = x.shape
    m = freqs.shape[0]
    width = 1 + 2 * m
    out = np.empty((n, c * width))
    for i in range(n):
        for j in range(c):
            base = j * width
            v = x[i, j]
            out[i, base] = v
            for k in range(m):
                a = v * freqs[k]
                out[i, base + 1 + 2 * k] = math.sin(a)
                out[i, base + 2 + 2 * k] = math.cos(a)
    return out


def fourier_features(x: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Per column ``x_j`` emit ``(x_j, sin(f_0 x_j), cos(f_0 x_j), ...)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    freqs = np.ascontiguousarray(freqs, dtype=np.float64)
    if _USE_NUMBA:
        return _fourier_nb(x, freqs)
    return _fourier_np(x, freqs)


# --------------------------------------------------------------------------
# Quaternion algebra
# --------------------------------------------------------------------------


def _quat_mul_np(a, b):
    ax, ay, az, aw = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bx, by, bz, bw = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=1,
    )


@_njit
def _quat_mul_nb(a, b):
    n = a.shape[0]
    out = np.empty((n, 4))
    for i in range(n):
        ax, ay, az, aw = a[i, 0], a[i, 1], a[i, 2], a[i, 3]
        bx, by, bz, bw = b[i, 0], b[i, 1], b[i, 2], b[i, 3]
        out[i, 0] = aw * bx + ax * bw + ay * bz - az * by
        out[i, 1] = aw * by - ax * bz + ay * bw + az * bx
        out[i, 2] = aw * bz + ax * by - ay * bx + az * bw
        out[i, 3] = aw * bw - ax * bx - ay * by - az * bz
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` row by row (rotation ``b`` applied first)."""
    a, b = np.broadcast_arrays(np.atleast_2d(a), np.atleast_2d(b))
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if _USE_NUMBA:
        return _quat_mul_nb(a, b)
    return _quat_mul_np(a, b)


def _geodesic_np(q1, q2):
    w = np.sum(q1 * q2, axis=1)
    # vector part of conj(q1) * q2
    v = np.cross(q1[:, :3], q2[:, :3])
    v = q1[:, 3:4] * q2[:, :3] - q2[:, 3:4] * q1[:, :3] - v
    return 2.0 * np.arctan2(np.sqrt(np.sum(v * v, axis=1)), np.abs(w))


@_njit
def _geodesic_nb(q1, q2):
    n = q1.shape[0]
    out = np.empty(n)
    for i in range(n):
        ax, ay, az, aw = q1[i, 0], q1[i, 1], q1[i, 2], q1[i, 3]
        bx, by, bz, bw = q2[i, 0], q2[i, 1], q2[i, 2], q2[i, 3]
        w = ax * bx + ay * by + az * bz + aw * bw
        vx = aw * bx - bw * ax - (ay * bz - az * by)
        vy = aw * by - bw * ay - (az * bx - ax * bz)
        vz = aw * bz - bw * az - (ax * by - ay * bx)
        out[i] = 2.0 * math.atan2(math.sqrt(vx * vx + vy * vy + vz * vz), abs(w))
    return out


def quat_geodesic(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Minimal rotation angle between paired unit quaternions, in [0, pi].

    Evaluated as ``2 atan2(|vec(q1* q2)|, |q1 . q2|)``, which equals
    ``arccos((tr(R1 R2^T) - 1) / 2)`` but keeps full precision near 0 and pi.
    """
    q1, q2 = np.broadcast_arrays(np.atleast_2d(q1), np.atleast_2d(q2))
    q1 = np.ascontiguousarray(q1, dtype=np.float64)
    q2 = np.ascontiguousarray(q2, dtype=np.float64)
    if _USE_NUMBA:
        return _geodesic_nb(q1, q2)
    return _geodesic_np(q1, q2)


def _euler_np(e):
    h = 0.5 * e
    c = np.cos(h)
    s = np.sin(h)
    cx, cy, cz = c[:, 0], c[:, 1], c[:, 2]
    sx, sy, sz = s[:, 0], s[:, 1], s[:, 2]
    # qz * qy * qx
    return np.stack(
        [
            cz * cy * sx - sz * sy * cx,
            cz * sy * cx + sz * cy * sx,
            sz * cy * cx - cz * sy * sx,
            cz * cy * cx + sz * sy * sx,
        ],
        axis=1,
    )


@_njit
def _euler_nb(e):
    n = e.shape[0]
    out = np.empty((n, 4))
    for i in range(n):
        cx = math.cos(0.5 * e[i, 0])
        sx = math.sin(0.5 * e[i, 0])
        cy = math.cos(0.5 * e[i, 1])
        sy = math.sin(0.5 * e[i, 1])
        cz = math.cos(0.5 * e[i, 2])
        sz = math.sin(0.5 * e[i, 2])
        out[i, 0] = cz * cy * sx - sz * sy * cx
        out[i, 1] = cz * sy * cx + sz * cy * sx
        out[i, 2] = sz * cy * cx - cz * sy * sx
        out[i, 3] = cz * cy * cx + sz * sy * sx
    return out


def euler_xyz_to_quat(euler: np.ndarray) -> np.ndarray:
    """Extrinsic X-then-Y-then-Z Euler angles (radians) to quaternions, ``R = Rz Ry Rx``."""
    e = np.ascontiguousarray(np.atleast_2d(euler), dtype=np.float64)
    if _USE_NUMBA:
        return _euler_nb(e)
    return _euler_np(e)


def _perturb_np(t, q, dt, euler):
    qn = _quat_mul_np(_euler_np(euler), q)
    qn /= np.linalg.norm(qn, axis=1, keepdims=True)
    return t + dt, qn


@_njit
def _perturb_nb(t, q, dt, euler):
    n = t.shape[0]
    qe = _euler_nb(euler)
    qn = _quat_mul_nb(qe, q)
    tn = np.empty((n, 3))
    for i in range(n):
        for j in range(3):
            tn[i, j] = t[i, j] + dt[i, j]
        norm = math.sqrt(qn[i, 0] ** 2 + qn[i, 1] ** 2 + qn[i, 2] ** 2 + qn[i, 3] ** 2)
        for j in range(4):
            qn[i, j] /= norm
    return tn, qn


def perturb(t, q, dt, euler):
    """Batched ``(t + dt, normalize(R(euler) * q))``."""
    t = np.ascontiguousarray(t, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    dt = np.ascontiguousarray(dt, dtype=np.float64)
    euler = np.ascontiguousarray(euler, dtype=np.float64)
    if _USE_NUMBA:
        return _perturb_nb(t, q, dt, euler)
    return _perturb_np(t, q, dt, euler)


# --------------------------------------------------------------------------
# Target scores
# --------------------------------------------------------------------------


def _target_np(tq, qq, t, q, lam_t, lam_r):
    dist = np.sqrt(np.sum((t - tq[None, :]) ** 2, axis=1))
    ang = _geodesic_np(np.broadcast_to(qq, q.shape), q)
    return np.maximum(0.0, 1.0 - lam_t * dist - lam_r * ang)


@_njit
def _target_nb(tq, qq, t, q, lam_t, lam_r):
    n = t.shape[0]
    qb = np.empty((n, 4))
    for i in range(n):
        for j in range(4):
            qb[i, j] = qq[j]
    ang = _geodesic_nb(qb, q)
    out = np.empty(n)
    for i in range(n):
        dx = t[i, 0] - tq[0]
        dy = t[i, 1] - tq[1]
        dz = t[i, 2] - tq[2]
        s = 1.0 - lam_t * math.sqrt(dx * dx + dy * dy + dz * dz) - lam_r * ang[i]
        out[i] = s if s > 0.0 else 0.0
    return out


def target_scores(tq, qq, t, q, lam_t: float, lam_r: float) -> np.ndarray:
    """``max(0, 1 - lam_t |tq - t| - lam_r G(qq, q))`` for each candidate row."""
    tq = np.ascontiguousarray(tq, dtype=np.float64)
    qq = np.ascontiguousarray(qq, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    if _USE_NUMBA:
        return _target_nb(tq, qq, t, q, float(lam_t), float(lam_r))
    return _target_np(tq, qq, t, q, float(lam_t), float(lam_r))


# --------------------------------------------------------------------------
# Symmetric eigensolver (cyclic Jacobi)
# --------------------------------------------------------------------------


def _jacobi_py(a, tol, max_sweeps):
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale = max(scale, abs(a[i, j]))
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        if math.sqrt(off) <= tol * scale:
            break
        for p in range(n):
            for r in range(p + 1, n):
                apr = a[p, r]
                if apr == 0.0:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                tt = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(tt * tt + 1.0)
                s = tt * c
                for k in range(n):
                    akp = a[k, p]
                    akr = a[k, r]
                    a[k, p] = c * akp - s * akr
                    a[k, r] = s * akp + c * akr
                for k in range(n):
                    apk = a[p, k]
                    ark = a[r, k]
                    a[p, k] = c * apk - s * ark
                    a[r, k] = s * apk + c * ark
                for k in range(n):
                    vkp = v[k, p]
                    vkr = v[k, r]
                    v[k, p] = c * vkp - s * vkr
                    v[k, r] = s * vkp + c * vkr
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, v


_jacobi_nb = _njit(_jacobi_py)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Iterates until the off-diagonal Frobenius norm is below ``tol`` times the
    largest absolute entry.  Returns unsorted ``(eigenvalues, eigenvectors)``
    with eigenvectors in columns.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if _USE_NUMBA:
        return _jacobi_nb(a, float(tol), int(max_sweeps))
    return _jacobi_py(a, float(tol), int(max_sweeps))


# --------------------------------------------------------------------------
# Brute-force nearest neighbours
# --------------------------------------------------------------------------


def _nn_np(p, chunk=512):
    n = p.shape[0]
    out = np.empty(n)
    for s in range(0, n, chunk):
        blk = p[s : s + chunk]
        diff = blk[:, None, :] - p[None, :, :]
        d2 = np.sum(diff * diff, axis=2)
        idx = np.arange(blk.shape[0])
        d2[idx, s + idx] = np.inf
        out[s : s + chunk] = np.sqrt(d2.min(axis=1))
    return out


@_njit
def _nn_nb(p):
    n = p.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(n):
            if j == i:
                continue
            dx = p[i, 0] - p[j, 0]
            dy = p[i, 1] - p[j, 1]
            dz = p[i, 2] - p[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
        out[i] = math.sqrt(best)
    return out


def nearest_neighbor_distances(points: np.ndarray) -> np.ndarray:
    """Exact distance from each point to its nearest other point (brute force)."""
    p = np.ascontiguousarray(points, dtype=np.float64)
    if p.shape[0] < 2:
        return np.full(p.shape[0], np.nan)
    if _USE_NUMBA:
        return _nn_nb(p)
    return _nn_np(p)

"""Pure-numpy twin of ``_ckernels``; used when the extension is not built."""
import numpy as np

SUPPORT = np.sqrt(5.0)
K0 = 3.0 / (4.0 * np.sqrt(5.0))
_CHUNK = 256


def _epan(u):
    return np.where(np.abs(u) < SUPPORT, K0 * (1.0 - u * u / 5.0), 0.0)


def local_moments(zs, ys, ze, hs):
    zs = np.asarray(zs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    ze = np.asarray(ze, dtype=float)
    hs = np.asarray(hs, dtype=float)
    E, k = ze.shape[0], ys.shape[1]
    s = np.zeros((E, 3))
    t = np.zeros((E, 2, k))
    for start in range(0, E, _CHUNK):
        sl = slice(start, start + _CHUNK)
        d = zs[None, :] - ze[sl, None]
        h = hs[sl, None]
        w = _epan(d / h) / h
        wd = w * d
        s[sl, 0] = w.sum(1)
        s[sl, 1] = wd.sum(1)
        s[sl, 2] = (wd * d).sum(1)
        t[sl, 0] = w @ ys
        t[sl, 1] = wd @ ys
    return s, t


def kernel_sums(zs, vals, ze, h):
    zs = np.asarray(zs, dtype=float)
    vals = np.asarray(vals, dtype=float)
    ze = np.asarray(ze, dtype=float)
    out = np.zeros((ze.shape[0], vals.shape[1]))
    for start in range(0, ze.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        w = _epan((zs[None, :] - ze[sl, None]) / h) / h
        out[sl] = w @ vals
    return out

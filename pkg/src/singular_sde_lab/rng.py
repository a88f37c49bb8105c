"""Counter-based normal variates (Philox4x32-10).

Every Gaussian used by the Monte Carlo engine is a pure function of
``(seed, path, step, slot)``, so an ensemble can be regenerated block by
block, in any order and by any number of workers, and reproduce the same
bits.
"""

import numpy as np
from numba import njit

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)
_INV_2_32 = 1.0 / 4294967296.0


@njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on a 4x32-bit counter with a 2x32-bit key.

    All arguments are ``np.uint64`` holding 32-bit values; returns four such values.
    """
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _SHIFT
        lo0 = p0 & _MASK32
        hi1 = p1 >> _SHIFT
        lo1 = p1 & _MASK32
        c0 = (hi1 ^ c1 ^ k0) & _MASK32
        c1 = lo1
        c2 = (hi0 ^ c3 ^ k1) & _MASK32
        c3 = lo0
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return c0, c1, c2, c3


@njit(cache=True)
def philox_block(counter, key):
    """Array wrapper around :func:`philox4x32` used for known-answer tests."""
    out = np.empty(4, dtype=np.uint64)
    r0, r1, r2, r3 = philox4x32(
        np.uint64(counter[0]), np.uint64(counter[1]), np.uint64(counter[2]),
        np.uint64(counter[3]), np.uint64(key[0]), np.uint64(key[1]))
    out[0] = r0
    out[1] = r1
    out[2] = r2
    out[3] = r3
    return out


@njit(cache=True, inline="always")
def _to_unit(x):
    # open interval (0, 1): never 0, so log() below is safe
    return (np.float64(x) + 0.5) * _INV_2_32


def _ziggurat_tables(layers=128, r=3.442619855899, v=9.91256303526217e-3):
    """Marsaglia-Tsang tables for a 24-bit magnitude and ``layers`` strips."""
    m = float(1 << 24)
    k = np.zeros(layers)
    w = np.zeros(layers)
    f = np.zeros(layers)
    dn = tn = r
    q = v / np.exp(-0.5 * dn * dn)
    k[0] = dn / q * m
    w[0] = q / m
    w[-1] = dn / m
    f[0] = 1.0
    f[-1] = np.exp(-0.5 * dn * dn)
    for i in range(layers - 2, 0, -1):
        dn = np.sqrt(-2.0 * np.log(v / dn + np.exp(-0.5 * dn * dn)))
        k[i + 1] = dn / tn * m
        tn = dn
        f[i] = np.exp(-0.5 * dn * dn)
        w[i] = dn / m
    return k, w, f


_ZK, _ZW, _ZF = _ziggurat_tables()
_ZR = 3.442619855899
_FIX_BIT = np.uint64(0x80000000)


@njit(cache=True)
def _zig_fix(word, k0, k1, c0, c1, c2, slot):
    """Slow path of the ziggurat; extra words come from a disjoint counter family."""
    t = 0
    buf0 = buf1 = buf2 = buf3 = np.uint64(0)
    used = 4
    while True:
        iz = np.int64(word & np.uint64(127))
        neg = (word >> np.uint64(7)) & np.uint64(1)
        u = np.float64(word >> np.uint64(8))
        x = u * _ZW[iz]
        if iz == 0:
            while True:
                if used >= 4:
                    buf0, buf1, buf2, buf3 = philox4x32(
                        c0, c1, c2, _FIX_BIT | (np.uint64(slot) << np.uint64(16)) | np.uint64(t), k0, k1)
                    t += 1
                    used = 0
                a = buf0 if used == 0 else buf2
                b = buf1 if used == 0 else buf3
                used += 2
                x = -np.log(_to_unit(a)) / _ZR
                y = -np.log(_to_unit(b))
                if y + y >= x * x:
                    break
            x += _ZR
            return -x if neg else x
        if used >= 4:
            buf0, buf1, buf2, buf3 = philox4x32(
                c0, c1, c2, _FIX_BIT | (np.uint64(slot) << np.uint64(16)) | np.uint64(t), k0, k1)
            t += 1
            used = 0
        a = buf0 if used == 0 else (buf1 if used == 1 else (buf2 if used == 2 else buf3))
        used += 1
        if _ZF[iz] + _to_unit(a) * (_ZF[iz - 1] - _ZF[iz]) < np.exp(-0.5 * x * x):
            return -x if neg else x
        if used >= 4:
            buf0, buf1, buf2, buf3 = philox4x32(
                c0, c1, c2, _FIX_BIT | (np.uint64(slot) << np.uint64(16)) | np.uint64(t), k0, k1)
            t += 1
            used = 0
        word = buf0 if used == 0 else (buf1 if used == 1 else (buf2 if used == 2 else buf3))
        used += 1
        if np.float64(word >> np.uint64(8)) < _ZK[np.int64(word & np.uint64(127))]:
            iz = np.int64(word & np.uint64(127))
            x = np.float64(word >> np.uint64(8)) * _ZW[iz]
            return -x if (word >> np.uint64(7)) & np.uint64(1) else x


@njit(cache=True, inline="always")
def _zig(word, k0, k1, c0, c1, c2, slot):
    # low 7 bits pick the strip, bit 7 the sign, the top 24 bits the magnitude
    iz = np.int64(word & np.uint64(127))
    u = np.float64(word >> np.uint64(8))
    if u < _ZK[iz]:
        x = u * _ZW[iz]
        return -x if (word >> np.uint64(7)) & np.uint64(1) else x
    return _zig_fix(word, k0, k1, c0, c1, c2, slot)


@njit(cache=True, inline="always")
def fill_normals_row(seed, path, step, out, row):
    """Write ``out.shape[1]`` standard normals for ``(seed, path, step)`` into ``out[row]``.

    Each normal consumes one 32-bit Philox word through a ziggurat; the
    fourth counter word indexes further blocks when more than four normals
    are needed, and rejected draws take extra words from counters with the
    top bit set, so the result never depends on evaluation order.
    """
    k0 = np.uint64(seed) & _MASK32
    k1 = (np.uint64(seed) >> _SHIFT) & _MASK32
    c0 = np.uint64(step) & _MASK32
    c1 = np.uint64(path) & _MASK32
    c2 = (np.uint64(path) >> _SHIFT) & _MASK32
    n = out.shape[1]
    j = 0
    blk = 0
    while j < n:
        r0, r1, r2, r3 = philox4x32(c0, c1, c2, np.uint64(blk), k0, k1)
        out[row, j] = _zig(r0, k0, k1, c0, c1, c2, j)
        if j + 1 < n:
            out[row, j + 1] = _zig(r1, k0, k1, c0, c1, c2, j + 1)
        if j + 2 < n:
            out[row, j + 2] = _zig(r2, k0, k1, c0, c1, c2, j + 2)
        if j + 3 < n:
            out[row, j + 3] = _zig(r3, k0, k1, c0, c1, c2, j + 3)
        j += 4
        blk += 1


@njit(cache=True, inline="always")
def fill_normals(seed, path, step, out):
    """One-dimensional form of :func:`fill_normals_row`."""
    fill_normals_row(seed, path, step, out.reshape((1, out.shape[0])), 0)


def normals(seed, path, step, n):
    """Python-level convenience returning the normals used by the engine."""
    out = np.empty(n)
    fill_normals(np.uint64(seed), np.uint64(path), np.uint64(step), out)
    return out

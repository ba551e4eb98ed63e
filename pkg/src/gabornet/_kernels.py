"""Compiled loops for single-channel cross-correlation.

Every output element is accumulated over taps in row-major order, identically
for any number of filters, which keeps results bitwise independent of batching.
Reductions for the weight gradient run through a fixed-width row accumulator,
again independent of the number of filters.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def corr1_forward(xp, w, stride, Ho, Wo):
    # xp: N,Hp,Wp   w: F,kh,kw
    N = xp.shape[0]
    F, kh, kw = w.shape
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            o = out[n, f]
            for di in range(kh):
                for dj in range(kw):
                    wv = w[f, di, dj]
                    for i in range(Ho):
                        xr = xp[n, i * stride + di]
                        orow = o[i]
                        if stride == 1:
                            for j in range(Wo):
                                orow[j] += wv * xr[j + dj]
                        else:
                            for j in range(Wo):
                                orow[j] += wv * xr[j * stride + dj]
    return out


@njit(cache=True)
def corr1_grad_w(xp, g, stride, kh, kw):
    N, F, Ho, Wo = g.shape
    gw = np.zeros((F, kh, kw))
    acc = np.empty(Wo)
    for n in range(N):
        for f in range(F):
            gnf = g[n, f]
            for di in range(kh):
                for dj in range(kw):
                    acc[:] = 0.0
                    for i in range(Ho):
                        xr = xp[n, i * stride + di]
                        gr = gnf[i]
                        if stride == 1:
                            for j in range(Wo):
                                acc[j] += gr[j] * xr[j + dj]
                        else:
                            for j in range(Wo):
                                acc[j] += gr[j] * xr[j * stride + dj]
                    s = 0.0
                    for j in range(Wo):
                        s += acc[j]
                    gw[f, di, dj] += s
    return gw


@njit(cache=True)
def corr1_grad_x(w, g, stride, Hp, Wp):
    N, F, Ho, Wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    gx = np.zeros((N, Hp, Wp))
    for n in range(N):
        for f in range(F):
            gnf = g[n, f]
            for di in range(kh):
                for dj in range(kw):
                    wv = w[f, di, dj]
                    for i in range(Ho):
                        xr = gx[n, i * stride + di]
                        gr = gnf[i]
                        if stride == 1:
                            for j in range(Wo):
                                xr[j + dj] += wv * gr[j]
                        else:
                            for j in range(Wo):
                                xr[j * stride + dj] += wv * gr[j]
    return gx

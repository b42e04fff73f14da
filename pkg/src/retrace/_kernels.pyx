# Compiled batch kernels: same signatures as retrace._reference, with the
# batch reductions fused into single C loops. Elementwise math uses the same
# stable formulas as the reference; reduction order is the fixed row order
# of the batch.

import numpy as np

from libc.math cimport exp, log1p, tanh
from libc.stdint cimport int64_t

BACKEND_NAME = "compiled"

HEAD_SQUARED = 0
HEAD_BINARY_CE = 1


cdef inline double _softplus(double o) noexcept nogil:
    if o > 0.0:
        return o + log1p(exp(-o))
    return log1p(exp(o))


cdef inline double _sigmoid(double o) noexcept nogil:
    cdef double e
    if o >= 0.0:
        return 1.0 / (1.0 + exp(-o))
    e = exp(o)
    return e / (1.0 + e)


cdef inline double _head_value(double o, double y, int head) noexcept nogil:
    if head == 0:
        return 0.5 * (o - y) * (o - y)
    return _softplus(o) - y * o


cdef inline double _head_d1(double o, double y, int head) noexcept nogil:
    if head == 0:
        return o - y
    return _sigmoid(o) - y


cdef inline double _head_d2(double o, double y, int head) noexcept nogil:
    cdef double s
    if head == 0:
        return 1.0
    s = _sigmoid(o)
    return s * (1.0 - s)


# ----------------------------------------------------------------------
# generalized linear models
# ----------------------------------------------------------------------

def glm_losses(double[::1] theta, double[:, ::1] X, double[::1] y, int head):
    cdef Py_ssize_t B = X.shape[0], d = X.shape[1]
    out_arr = np.empty(B)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double o
    with nogil:
        for i in range(B):
            o = 0.0
            for k in range(d):
                o += X[i, k] * theta[k]
            out[i] = _head_value(o, y[i], head)
    return out_arr


def glm_weighted_grad(double[::1] theta, double[:, ::1] X, double[::1] y,
                      double[::1] w, int head):
    cdef Py_ssize_t B = X.shape[0], d = X.shape[1]
    out_arr = np.zeros(d)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double o, c
    with nogil:
        for i in range(B):
            o = 0.0
            for k in range(d):
                o += X[i, k] * theta[k]
            c = w[i] * _head_d1(o, y[i], head)
            for k in range(d):
                out[k] += c * X[i, k]
    return out_arr


def glm_grad_dots(double[::1] theta, double[:, ::1] X, double[::1] y,
                  double[::1] v, int head):
    cdef Py_ssize_t B = X.shape[0], d = X.shape[1]
    out_arr = np.empty(B)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double o, xv
    with nogil:
        for i in range(B):
            o = 0.0
            xv = 0.0
            for k in range(d):
                o += X[i, k] * theta[k]
                xv += X[i, k] * v[k]
            out[i] = _head_d1(o, y[i], head) * xv
    return out_arr


def glm_hvp_sum(double[::1] theta, double[:, ::1] X, double[::1] y,
                double[::1] v, double[::1] w, int head):
    cdef Py_ssize_t B = X.shape[0], d = X.shape[1]
    out_arr = np.zeros(d)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double o, xv, c
    with nogil:
        for i in range(B):
            o = 0.0
            xv = 0.0
            for k in range(d):
                o += X[i, k] * theta[k]
                xv += X[i, k] * v[k]
            c = w[i] * _head_d2(o, y[i], head) * xv
            for k in range(d):
                out[k] += c * X[i, k]
    return out_arr


# ----------------------------------------------------------------------
# multilayer perceptrons
# ----------------------------------------------------------------------

cdef void _offsets(int64_t[::1] widths, int64_t[::1] offw, int64_t[::1] offb) noexcept nogil:
    cdef Py_ssize_t L = widths.shape[0] - 1
    cdef int64_t off = 0
    cdef Py_ssize_t l
    for l in range(L):
        offw[l] = off
        off += widths[l + 1] * widths[l]
        offb[l] = off
        off += widths[l + 1]


cdef void _forward(double[::1] theta, int64_t[::1] widths,
                   int64_t[::1] offw, int64_t[::1] offb,
                   double[:, ::1] X, double[:, :, ::1] A) noexcept nogil:
    # A[l, i, :widths[l]] holds level-l activations; the last level is the
    # linear output (no tanh)
    cdef Py_ssize_t L = widths.shape[0] - 1
    cdef Py_ssize_t B = X.shape[0]
    cdef Py_ssize_t l, i, j, k, nin, nout
    cdef double z
    for i in range(B):
        for k in range(widths[0]):
            A[0, i, k] = X[i, k]
    for l in range(L):
        nin = widths[l]
        nout = widths[l + 1]
        for i in range(B):
            for j in range(nout):
                z = theta[offb[l] + j]
                for k in range(nin):
                    z += theta[offw[l] + j * nin + k] * A[l, i, k]
                if l < L - 1:
                    A[l + 1, i, j] = tanh(z)
                else:
                    A[l + 1, i, j] = z
    return


cdef void _forward_tangent(double[::1] theta, double[::1] v, int64_t[::1] widths,
                           int64_t[::1] offw, int64_t[::1] offb,
                           double[:, :, ::1] A, double[:, :, ::1] RZ,
                           double[:, :, ::1] RA) noexcept nogil:
    # RA[l] is the tangent of the level-l activation (zero at the input);
    # RZ[l] the tangent of layer l's pre-activation
    cdef Py_ssize_t L = widths.shape[0] - 1
    cdef Py_ssize_t B = A.shape[1]
    cdef Py_ssize_t l, i, j, k, nin, nout
    cdef double rz, a
    for i in range(B):
        for k in range(widths[0]):
            RA[0, i, k] = 0.0
    for l in range(L):
        nin = widths[l]
        nout = widths[l + 1]
        for i in range(B):
            for j in range(nout):
                rz = v[offb[l] + j]
                for k in range(nin):
                    rz += (v[offw[l] + j * nin + k] * A[l, i, k]
                           + theta[offw[l] + j * nin + k] * RA[l, i, k])
                RZ[l, i, j] = rz
                if l < L - 1:
                    a = A[l + 1, i, j]
                    RA[l + 1, i, j] = (1.0 - a * a) * rz
    return


def mlp_losses(double[::1] theta, int64_t[::1] widths, int head,
               double[:, ::1] X, double[::1] y):
    cdef Py_ssize_t L = widths.shape[0] - 1
    cdef Py_ssize_t B = X.shape[0]
    cdef Py_ssize_t maxw = int(max(widths))
    A_arr = np.empty((L + 1, B, maxw))
    offw_arr = np.empty(L, dtype=np.int64)
    offb_arr = np.empty(L, dtype=np.int64)
    out_arr = np.empty(B)
    cdef double[:, :, ::1] A = A_arr
    cdef int64_t[::1] offw = offw_arr, offb = offb_arr
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    with nogil:
        _offsets(widths, offw, offb)
        _forward(theta, widths, offw, offb, X, A)
        for i in range(B):
            out[i] = _head_value(A[L, i, 0], y[i], head)
    return out_arr


def mlp_weighted_grad(double[::1] theta, int64_t[::1] widths, int head,
                      double[:, ::1] X, double[::1] y, double[::1] w):
    cdef Py_ssize_t L = widths.shape[0] - 1
    cdef Py_ssize_t B = X.shape[0]
    cdef Py_ssize_t maxw = int(max(widths))
    A_arr = np.empty((L + 1, B, maxw))
    offw_arr = np.empty(L, dtype=np.int64)
    offb_arr = np.empty(L, dtype=np.int64)
    grad_arr = np.zeros(theta.shape[0])
    delta_arr = np.empty((B, maxw))
    next_arr = np.empty((B, maxw))
    cdef double[:, :, ::1] A = A_arr
    cdef int64_t[::1] offw = offw_arr, offb = offb_arr
    cdef double[::1] grad = grad_arr
    cdef double[:, ::1] delta = delta_arr, nxt = next_arr
    cdef Py_ssize_t l, i, j, k, nin, nout
    cdef double acc, s, a
    with nogil:
        _offsets(widths, offw, offb)
        _forward(theta, widths, offw, offb, X, A)
        for i in range(B):
            delta[i, 0] = w[i] * _head_d1(A[L, i, 0], y[i], head)
        for l in range(L - 1, -1, -1):
            nin = widths[l]
            nout = widths[l + 1]
            for j in range(nout):
                for k in range(nin):
                    acc = 0.0
                    for i in range(B):
                        acc += delta[i, j] * A[l, i, k]
                    grad[offw[l] + j * nin + k] = acc
                acc = 0.0
                for i in range(B):
                    acc += delta[i, j]
                grad[offb[l] + j] = acc
            if l > 0:
                for i in range(B):
                    for k in range(nin):
                        s = 0.0
                        for j in range(nout):
                            s += delta[i, j] * theta[offw[l] + j * nin + k]
                        a = A[l, i, k]
                        nxt[i, k] = s * (1.0 - a * a)
                for i in range(B):
                    for k in range(nin):
                        delta[i, k] = nxt[i, k]
    return grad_arr


def mlp_grad_dots(double[::1] theta, int64_t[::1] widths, int head,
                  double[:, ::1] X, double[::1] y, double[::1] v):
    cdef Py_ssize_t L = widths.shape[0] - 1
    cdef Py_ssize_t B = X.shape[0]
    cdef Py_ssize_t maxw = int(max(widths))
    A_arr = np.empty((L + 1, B, maxw))
    RZ_arr = np.empty((L, B, maxw))
    RA_arr = np.empty((L, B, maxw))
    offw_arr = np.empty(L, dtype=np.int64)
    offb_arr = np.empty(L, dtype=np.int64)
    out_arr = np.empty(B)
    cdef double[:, :, ::1] A = A_arr, RZ = RZ_arr, RA = RA_arr
    cdef int64_t[::1] offw = offw_arr, offb = offb_arr
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    with nogil:
        _offsets(widths, offw, offb)
        _forward(theta, widths, offw, offb, X, A)
        _forward_tangent(theta, v, widths, offw, offb, A, RZ, RA)
        for i in range(B):
            out[i] = _head_d1(A[L, i, 0], y[i], head) * RZ[L - 1, i, 0]
    return out_arr


def mlp_hvp_sum(double[::1] theta, int64_t[::1] widths, int head,
                double[:, ::1] X, double[::1] y, double[::1] v, double[::1] w):
    cdef Py_ssize_t L = widths.shape[0] - 1
    cdef Py_ssize_t B = X.shape[0]
    cdef Py_ssize_t maxw = int(max(widths))
    A_arr = np.empty((L + 1, B, maxw))
    RZ_arr = np.empty((L, B, maxw))
    RA_arr = np.empty((L, B, maxw))
    offw_arr = np.empty(L, dtype=np.int64)
    offb_arr = np.empty(L, dtype=np.int64)
    out_arr = np.zeros(theta.shape[0])
    delta_arr = np.empty((B, maxw))
    rdelta_arr = np.empty((B, maxw))
    dnxt_arr = np.empty((B, maxw))
    rnxt_arr = np.empty((B, maxw))
    cdef double[:, :, ::1] A = A_arr, RZ = RZ_arr, RA = RA_arr
    cdef int64_t[::1] offw = offw_arr, offb = offb_arr
    cdef double[::1] out = out_arr
    cdef double[:, ::1] delta = delta_arr, rdelta = rdelta_arr
    cdef double[:, ::1] dnxt = dnxt_arr, rnxt = rnxt_arr
    cdef Py_ssize_t l, i, j, k, nin, nout
    cdef double acc, racc, s, rs, a, sp, o
    with nogil:
        _offsets(widths, offw, offb)
        _forward(theta, widths, offw, offb, X, A)
        _forward_tangent(theta, v, widths, offw, offb, A, RZ, RA)
        for i in range(B):
            o = A[L, i, 0]
            delta[i, 0] = w[i] * _head_d1(o, y[i], head)
            rdelta[i, 0] = w[i] * _head_d2(o, y[i], head) * RZ[L - 1, i, 0]
        for l in range(L - 1, -1, -1):
            nin = widths[l]
            nout = widths[l + 1]
            for j in range(nout):
                for k in range(nin):
                    acc = 0.0
                    for i in range(B):
                        acc += rdelta[i, j] * A[l, i, k] + delta[i, j] * RA[l, i, k]
                    out[offw[l] + j * nin + k] = acc
                racc = 0.0
                for i in range(B):
                    racc += rdelta[i, j]
                out[offb[l] + j] = racc
            if l > 0:
                for i in range(B):
                    for k in range(nin):
                        s = 0.0
                        rs = 0.0
                        for j in range(nout):
                            s += delta[i, j] * theta[offw[l] + j * nin + k]
                            rs += (delta[i, j] * v[offw[l] + j * nin + k]
                                   + rdelta[i, j] * theta[offw[l] + j * nin + k])
                        a = A[l, i, k]
                        sp = 1.0 - a * a
                        dnxt[i, k] = s * sp
                        rnxt[i, k] = rs * sp + s * (-2.0 * a * sp * RZ[l - 1, i, k])
                for i in range(B):
                    for k in range(nin):
                        delta[i, k] = dnxt[i, k]
                        rdelta[i, k] = rnxt[i, k]
    return out_arr

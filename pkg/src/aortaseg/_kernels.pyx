# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled inner loops for the 3x3x3 convolution core.

The two entry points mirror the functions in kernels_numpy; aortaseg.backend
picks whichever implementation is importable. Results are written into
caller-allocated output arrays so both backends share the surrounding
allocation and padding logic.

Parallel scheduling assigns every output cell to exactly one thread with a
fixed accumulation order, so results are bit-identical for any thread count.
"""

from cython.parallel import prange


ctypedef fused real:
    float
    double


cdef void _forward_pair(real[:, :, :, :, ::1] xpad, real[:, :, :, :, ::1] kernel,
                        real[::1] bias, real[:, :, :, :, ::1] out,
                        Py_ssize_t n, Py_ssize_t co, bint pair) noexcept nogil:
    # Computes output channel co, and co+1 as well when pair is set; sharing
    # the input row loads between two accumulation chains roughly doubles
    # throughput on the dominant small-channel layers.
    cdef Py_ssize_t Ci = xpad.shape[1]
    cdef Py_ssize_t X = out.shape[2], Y = out.shape[3], Z = out.shape[4]
    cdef Py_ssize_t ci, dx, dy, x, y, z
    cdef real w0, w1, w2, v0, v1, v2, a, bq, c
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                out[n, co, x, y, z] = bias[co]
            if pair:
                for z in range(Z):
                    out[n, co + 1, x, y, z] = bias[co + 1]
            for ci in range(Ci):
                for dx in range(3):
                    for dy in range(3):
                        w0 = kernel[co, ci, dx, dy, 0]
                        w1 = kernel[co, ci, dx, dy, 1]
                        w2 = kernel[co, ci, dx, dy, 2]
                        if pair:
                            v0 = kernel[co + 1, ci, dx, dy, 0]
                            v1 = kernel[co + 1, ci, dx, dy, 1]
                            v2 = kernel[co + 1, ci, dx, dy, 2]
                            for z in range(Z):
                                a = xpad[n, ci, x + dx, y + dy, z]
                                bq = xpad[n, ci, x + dx, y + dy, z + 1]
                                c = xpad[n, ci, x + dx, y + dy, z + 2]
                                out[n, co, x, y, z] += w0 * a + w1 * bq + w2 * c
                                out[n, co + 1, x, y, z] += v0 * a + v1 * bq + v2 * c
                        else:
                            for z in range(Z):
                                out[n, co, x, y, z] += (
                                    w0 * xpad[n, ci, x + dx, y + dy, z]
                                    + w1 * xpad[n, ci, x + dx, y + dy, z + 1]
                                    + w2 * xpad[n, ci, x + dx, y + dy, z + 2])


cdef void _grad_kernel_one(real[:, :, :, :, ::1] xpad, real[:, :, :, :, ::1] gy,
                           real[:, :, :, :, ::1] gk,
                           Py_ssize_t co, Py_ssize_t ci) noexcept nogil:
    cdef Py_ssize_t N = gy.shape[0]
    cdef Py_ssize_t X = gy.shape[2], Y = gy.shape[3], Z = gy.shape[4]
    cdef Py_ssize_t n, x, y, z, dx, dy
    cdef real s0, s1, s2
    cdef real g
    for dx in range(3):
        for dy in range(3):
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for n in range(N):
                for x in range(X):
                    for y in range(Y):
                        for z in range(Z):
                            g = gy[n, co, x, y, z]
                            s0 += g * xpad[n, ci, x + dx, y + dy, z]
                            s1 += g * xpad[n, ci, x + dx, y + dy, z + 1]
                            s2 += g * xpad[n, ci, x + dx, y + dy, z + 2]
            gk[co, ci, dx, dy, 0] = s0
            gk[co, ci, dx, dy, 1] = s1
            gk[co, ci, dx, dy, 2] = s2


def conv3d_from_padded(real[:, :, :, :, ::1] xpad, real[:, :, :, :, ::1] kernel,
                       real[::1] bias, real[:, :, :, :, ::1] out, int num_threads):
    """out[n,co,x,y,z] = bias[co] + sum_{ci,dx,dy,dz} kernel[co,ci,d..] * xpad[n,ci,x+dx,y+dy,z+dz].

    xpad is the zero-padded input [N, Ci, X+2, Y+2, Z+2]; out is [N, Co, X, Y, Z].
    """
    cdef Py_ssize_t N = out.shape[0], Co = out.shape[1]
    cdef Py_ssize_t pairs = (Co + 1) // 2
    cdef Py_ssize_t job, n, co
    for job in prange(N * pairs, nogil=True, num_threads=num_threads, schedule='static'):
        n = job // pairs
        co = 2 * (job % pairs)
        _forward_pair(xpad, kernel, bias, out, n, co, co + 1 < Co)


def conv3d_grad_kernel(real[:, :, :, :, ::1] xpad, real[:, :, :, :, ::1] gy,
                       real[:, :, :, :, ::1] gk, int num_threads):
    """gk[co,ci,dx,dy,dz] = sum_{n,x,y,z} gy[n,co,x,y,z] * xpad[n,ci,x+dx,y+dy,z+dz].

    Accumulation order differs from the numpy backend's BLAS reductions, so
    cross-backend agreement is to float tolerance only.
    """
    cdef Py_ssize_t Co = gy.shape[1], Ci = xpad.shape[1]
    cdef Py_ssize_t job, co, ci
    for job in prange(Co * Ci, nogil=True, num_threads=num_threads, schedule='static'):
        co = job // Ci
        ci = job % Ci
        _grad_kernel_one(xpad, gy, gk, co, ci)

# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""3x3x3 same-padded convolution kernels (float32 and float64).

Arrays are single-sample ``(C, D, H, W)`` blocks; batching and padding are
handled by the caller.
"""

cdef extern from "conv3d_kernels.h" nogil:
    void conv3x3x3_forward_f32(const float*, const float*, const float*, float*,
                               Py_ssize_t, Py_ssize_t, Py_ssize_t, Py_ssize_t, Py_ssize_t)
    void conv3x3x3_forward_f64(const double*, const double*, const double*, double*,
                               Py_ssize_t, Py_ssize_t, Py_ssize_t, Py_ssize_t, Py_ssize_t)
    int conv3x3x3_grad_weight_f32(const float*, const float*, float*,
                                  Py_ssize_t, Py_ssize_t, Py_ssize_t, Py_ssize_t, Py_ssize_t)
    int conv3x3x3_grad_weight_f64(const double*, const double*, double*,
                                  Py_ssize_t, Py_ssize_t, Py_ssize_t, Py_ssize_t, Py_ssize_t)

ctypedef fused real:
    float
    double


def forward(real[:, :, :, ::1] xp, real[:, :, :, :, ::1] w, real[::1] b, real[:, :, :, ::1] out):
    """Write the convolution of padded ``xp`` with ``w`` plus ``b`` into ``out``."""
    cdef Py_ssize_t cin = w.shape[1], cout = w.shape[0]
    cdef Py_ssize_t D = out.shape[1], H = out.shape[2], W = out.shape[3]
    if xp.shape[0] != cin or out.shape[0] != cout or b.shape[0] != cout:
        raise ValueError("channel mismatch")
    if xp.shape[1] != D + 2 or xp.shape[2] != H + 2 or xp.shape[3] != W + 2:
        raise ValueError("padded input must be 2 voxels larger than output per axis")
    if w.shape[2] != 3 or w.shape[3] != 3 or w.shape[4] != 3:
        raise ValueError("kernel must be 3x3x3")
    if real is float:
        with nogil:
            conv3x3x3_forward_f32(&xp[0, 0, 0, 0], &w[0, 0, 0, 0, 0], &b[0], &out[0, 0, 0, 0],
                                  cin, cout, D, H, W)
    else:
        with nogil:
            conv3x3x3_forward_f64(&xp[0, 0, 0, 0], &w[0, 0, 0, 0, 0], &b[0], &out[0, 0, 0, 0],
                                  cin, cout, D, H, W)


def grad_weight(real[:, :, :, ::1] xp, real[:, :, :, ::1] g, real[:, :, :, :, ::1] dw):
    """Accumulate the kernel gradient for output gradient ``g`` into ``dw``."""
    cdef Py_ssize_t cin = dw.shape[1], cout = dw.shape[0]
    cdef Py_ssize_t D = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef int status
    if xp.shape[0] != cin or g.shape[0] != cout:
        raise ValueError("channel mismatch")
    if xp.shape[1] != D + 2 or xp.shape[2] != H + 2 or xp.shape[3] != W + 2:
        raise ValueError("padded input must be 2 voxels larger than gradient per axis")
    if real is float:
        with nogil:
            status = conv3x3x3_grad_weight_f32(&xp[0, 0, 0, 0], &g[0, 0, 0, 0], &dw[0, 0, 0, 0, 0],
                                               cin, cout, D, H, W)
    else:
        with nogil:
            status = conv3x3x3_grad_weight_f64(&xp[0, 0, 0, 0], &g[0, 0, 0, 0], &dw[0, 0, 0, 0, 0],
                                               cin, cout, D, H, W)
    if status != 0:
        raise MemoryError("conv3d scratch allocation failed")

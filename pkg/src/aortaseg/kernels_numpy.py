"""Pure numpy implementation of the convolution core.

Fallback used when the compiled extension is unavailable (or when
AORTASEG_BACKEND=numpy). Same signatures as the compiled module; the
num_threads argument is accepted for interface parity and ignored, since
numpy delegates threading to its BLAS.
"""

import numpy as np


def conv3d_from_padded(xpad, kernel, bias, out, num_threads=1):
    """Accumulate the 27-tap convolution via one tensordot per kernel tap."""
    x_ext, y_ext, z_ext = out.shape[2:]
    out[:] = bias.reshape(1, -1, 1, 1, 1)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                view = xpad[:, :, dx:dx + x_ext, dy:dy + y_ext, dz:dz + z_ext]
                tap = np.tensordot(kernel[:, :, dx, dy, dz], view, axes=(1, 1))
                out += tap.transpose(1, 0, 2, 3, 4)


def conv3d_grad_kernel(xpad, gy, gk, num_threads=1):
    """Kernel gradient: per-tap contraction of grad-output with the padded input."""
    x_ext, y_ext, z_ext = gy.shape[2:]
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                view = xpad[:, :, dx:dx + x_ext, dy:dy + y_ext, dz:dz + z_ext]
                gk[:, :, dx, dy, dz] = np.tensordot(
                    gy, view, axes=([0, 2, 3, 4], [0, 2, 3, 4]))

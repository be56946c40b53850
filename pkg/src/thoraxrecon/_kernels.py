"""Ray-marching kernels shared by the forward projector and its adjoint.

Both kernels visit exactly the same sample points with exactly the same
trilinear weights, so they are transposes of one another as linear maps.
Sample positions are ``start + k * step`` in continuous voxel-index
coordinates ``(z, y, x)``; corners outside the grid count as zero.
"""

import numpy as np
from numba import njit


@njit(nogil=True, cache=True, inline="always")
def _corner_weight(f, d):
    return f if d == 1 else 1.0 - f


@njit(nogil=True, cache=True)
def forward_rays(vol, starts, steps, k0, k1, out):
    D, H, W = vol.shape
    for r in range(starts.shape[0]):
        acc = 0.0
        for k in range(k0[r], k1[r]):
            z = starts[r, 0] + k * steps[r, 0]
            y = starts[r, 1] + k * steps[r, 1]
            x = starts[r, 2] + k * steps[r, 2]
            iz = int(np.floor(z))
            iy = int(np.floor(y))
            ix = int(np.floor(x))
            fz = z - iz
            fy = y - iy
            fx = x - ix
            for dz in range(2):
                zz = iz + dz
                if zz < 0 or zz >= D:
                    continue
                wz = _corner_weight(fz, dz)
                for dy in range(2):
                    yy = iy + dy
                    if yy < 0 or yy >= H:
                        continue
                    wzy = wz * _corner_weight(fy, dy)
                    for dx in range(2):
                        xx = ix + dx
                        if xx < 0 or xx >= W:
                            continue
                        acc += wzy * _corner_weight(fx, dx) * vol[zz, yy, xx]
        out[r] = acc


@njit(nogil=True, cache=True)
def adjoint_rays(vals, starts, steps, k0, k1, out):
    D, H, W = out.shape
    for r in range(starts.shape[0]):
        u = vals[r]
        if u == 0.0:
            continue
        for k in range(k0[r], k1[r]):
            z = starts[r, 0] + k * steps[r, 0]
            y = starts[r, 1] + k * steps[r, 1]
            x = starts[r, 2] + k * steps[r, 2]
            iz = int(np.floor(z))
            iy = int(np.floor(y))
            ix = int(np.floor(x))
            fz = z - iz
            fy = y - iy
            fx = x - ix
            for dz in range(2):
                zz = iz + dz
                if zz < 0 or zz >= D:
                    continue
                wz = _corner_weight(fz, dz)
                for dy in range(2):
                    yy = iy + dy
                    if yy < 0 or yy >= H:
                        continue
                    wzy = wz * _corner_weight(fy, dy)
                    for dx in range(2):
                        xx = ix + dx
                        if xx < 0 or xx >= W:
                            continue
                        out[zz, yy, xx] += u * (wzy * _corner_weight(fx, dx))

"""Numba-compiled tile compositing kernels.

Loops are written scalar-style; numba promotes the per-pixel accumulators to
float64 regardless of the splat dtype, while the output image keeps the splat
dtype. Tiles are processed in a fixed order, so results are bit-reproducible
run to run. Gradient buffers are always float64.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def composite_forward(
    height,
    width,
    tile_size,
    mean2d,
    conic,
    alpha_base,
    color,
    tile_ids,
    tile_offsets,
    background,
    alpha_min,
    stop_t,
    image,
    final_t,
    max_weight,
):
    n_tx = (width + tile_size - 1) // tile_size
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        r0 = (tile // n_tx) * tile_size
        c0 = (tile % n_tx) * tile_size
        r1 = min(r0 + tile_size, height)
        c1 = min(c0 + tile_size, width)
        for r in range(r0, r1):
            py = r + 0.5
            for c in range(c0, c1):
                px = c + 0.5
                t = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                for s in range(start, end):
                    j = tile_ids[s]
                    dx = px - mean2d[j, 0]
                    dy = py - mean2d[j, 1]
                    power = (
                        -0.5 * (conic[j, 0] * dx * dx + conic[j, 2] * dy * dy)
                        - conic[j, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    a = alpha_base[j] * np.exp(power)
                    if a < alpha_min:
                        continue
                    w = t * a
                    cr += w * color[j, 0]
                    cg += w * color[j, 1]
                    cb += w * color[j, 2]
                    if w > max_weight[j]:
                        max_weight[j] = w
                    t = t * (1.0 - a)
                    if t < stop_t:
                        break
                image[r, c, 0] = cr + t * background[0]
                image[r, c, 1] = cg + t * background[1]
                image[r, c, 2] = cb + t * background[2]
                final_t[r, c] = t


@njit(cache=True)
def composite_backward(
    height,
    width,
    tile_size,
    mean2d,
    conic,
    alpha_base,
    color,
    tile_ids,
    tile_offsets,
    background,
    alpha_min,
    stop_t,
    d_image,
    d_mean2d,
    d_conic,
    d_alpha,
    d_color,
):
    n_tx = (width + tile_size - 1) // tile_size
    n_tiles = tile_offsets.shape[0] - 1
    for tile in range(n_tiles):
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        n_local = end - start
        if n_local == 0:
            continue
        r0 = (tile // n_tx) * tile_size
        c0 = (tile % n_tx) * tile_size
        r1 = min(r0 + tile_size, height)
        c1 = min(c0 + tile_size, width)
        # per-tile partials, merged after the pixel loops (deterministic in
        # tile order regardless of how tiles might be scheduled)
        l_mean = np.zeros((n_local, 2), dtype=np.float64)
        l_conic = np.zeros((n_local, 3), dtype=np.float64)
        l_alpha = np.zeros(n_local, dtype=np.float64)
        l_color = np.zeros((n_local, 3), dtype=np.float64)
        pos_buf = np.empty(n_local, dtype=np.int64)
        g_buf = np.empty(n_local, dtype=np.float64)
        t_buf = np.empty(n_local, dtype=np.float64)
        for r in range(r0, r1):
            py = r + 0.5
            for c in range(c0, c1):
                px = c + 0.5
                # replay the forward pass with identical gating
                t = 1.0
                count = 0
                for s in range(start, end):
                    j = tile_ids[s]
                    dx = px - mean2d[j, 0]
                    dy = py - mean2d[j, 1]
                    power = (
                        -0.5 * (conic[j, 0] * dx * dx + conic[j, 2] * dy * dy)
                        - conic[j, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    g = np.exp(power)
                    a = alpha_base[j] * g
                    if a < alpha_min:
                        continue
                    pos_buf[count] = s - start
                    g_buf[count] = g
                    t_buf[count] = t
                    count += 1
                    t = t * (1.0 - a)
                    if t < stop_t:
                        break
                gr = d_image[r, c, 0]
                gg = d_image[r, c, 1]
                gb = d_image[r, c, 2]
                # suffix contribution behind the current splat, seeded with
                # the background term
                sr = t * background[0]
                sg = t * background[1]
                sb = t * background[2]
                for idx in range(count - 1, -1, -1):
                    lp = pos_buf[idx]
                    j = tile_ids[start + lp]
                    g = g_buf[idx]
                    tb = t_buf[idx]
                    a = alpha_base[j] * g
                    w = tb * a
                    l_color[lp, 0] += gr * w
                    l_color[lp, 1] += gg * w
                    l_color[lp, 2] += gb * w
                    # when a == 1 everything behind was extinguished exactly,
                    # so the suffix term (and its derivative) is zero
                    inv = 1.0 / (1.0 - a) if a < 1.0 else 0.0
                    da = (
                        gr * (tb * color[j, 0] - sr * inv)
                        + gg * (tb * color[j, 1] - sg * inv)
                        + gb * (tb * color[j, 2] - sb * inv)
                    )
                    l_alpha[lp] += da * g
                    d_power = da * a
                    dx = px - mean2d[j, 0]
                    dy = py - mean2d[j, 1]
                    l_mean[lp, 0] += d_power * (conic[j, 0] * dx + conic[j, 1] * dy)
                    l_mean[lp, 1] += d_power * (conic[j, 1] * dx + conic[j, 2] * dy)
                    l_conic[lp, 0] += d_power * (-0.5 * dx * dx)
                    l_conic[lp, 1] += d_power * (-dx * dy)
                    l_conic[lp, 2] += d_power * (-0.5 * dy * dy)
                    sr += w * color[j, 0]
                    sg += w * color[j, 1]
                    sb += w * color[j, 2]
        for lp in range(n_local):
            j = tile_ids[start + lp]
            d_mean2d[j, 0] += l_mean[lp, 0]
            d_mean2d[j, 1] += l_mean[lp, 1]
            d_conic[j, 0] += l_conic[lp, 0]
            d_conic[j, 1] += l_conic[lp, 1]
            d_conic[j, 2] += l_conic[lp, 2]
            d_alpha[j] += l_alpha[lp]
            d_color[j, 0] += l_color[lp, 0]
            d_color[j, 1] += l_color[lp, 1]
            d_color[j, 2] += l_color[lp, 2]

"""Pure-numpy twin of the numba compositing kernels.

Same tile traversal and gating rules, vectorized over the pixels of each
tile instead of looping. Used when numba is unavailable or explicitly
disabled; also handy under a debugger.
"""

import numpy as np


def _tile_pixels(r0, r1, c0, c1):
    rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    return rr.ravel(), cc.ravel()


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
    bg = background.astype(np.float64)
    for tile in range(n_tiles):
        start = int(tile_offsets[tile])
        end = int(tile_offsets[tile + 1])
        r0 = (tile // n_tx) * tile_size
        c0 = (tile % n_tx) * tile_size
        r1 = min(r0 + tile_size, height)
        c1 = min(c0 + tile_size, width)
        rr, cc = _tile_pixels(r0, r1, c0, c1)
        px = cc + 0.5
        py = rr + 0.5
        n_pix = px.shape[0]
        t = np.ones(n_pix)
        acc = np.zeros((n_pix, 3))
        alive = np.ones(n_pix, dtype=bool)
        for s in range(start, end):
            j = int(tile_ids[s])
            dx = px - mean2d[j, 0]
            dy = py - mean2d[j, 1]
            power = -0.5 * (conic[j, 0] * dx * dx + conic[j, 2] * dy * dy) - conic[j, 1] * dx * dy
            a = alpha_base[j] * np.exp(power)
            contrib = alive & (power <= 0.0) & (a >= alpha_min)
            if contrib.any():
                w = np.where(contrib, t * a, 0.0)
                acc += w[:, None] * color[j].astype(np.float64)
                w_top = w.max()
                if w_top > max_weight[j]:
                    max_weight[j] = w_top
                t = np.where(contrib, t * (1.0 - a), t)
                alive &= ~(contrib & (t < stop_t))
            if not alive.any():
                break
        acc += t[:, None] * bg
        image[rr, cc] = acc.astype(image.dtype)
        final_t[rr, cc] = t.astype(final_t.dtype)


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
    bg = background.astype(np.float64)
    for tile in range(n_tiles):
        start = int(tile_offsets[tile])
        end = int(tile_offsets[tile + 1])
        n_local = end - start
        if n_local == 0:
            continue
        r0 = (tile // n_tx) * tile_size
        c0 = (tile % n_tx) * tile_size
        r1 = min(r0 + tile_size, height)
        c1 = min(c0 + tile_size, width)
        rr, cc = _tile_pixels(r0, r1, c0, c1)
        px = cc + 0.5
        py = rr + 0.5
        n_pix = px.shape[0]

        # replay the forward pass, keeping per-splat history for this tile
        g_hist = np.zeros((n_local, n_pix))
        t_hist = np.zeros((n_local, n_pix))
        contrib = np.zeros((n_local, n_pix), dtype=bool)
        t = np.ones(n_pix)
        alive = np.ones(n_pix, dtype=bool)
        for li in range(n_local):
            j = int(tile_ids[start + li])
            dx = px - mean2d[j, 0]
            dy = py - mean2d[j, 1]
            power = -0.5 * (conic[j, 0] * dx * dx + conic[j, 2] * dy * dy) - conic[j, 1] * dx * dy
            g = np.exp(power)
            a = alpha_base[j] * g
            mask = alive & (power <= 0.0) & (a >= alpha_min)
            g_hist[li] = g
            t_hist[li] = t
            contrib[li] = mask
            t = np.where(mask, t * (1.0 - a), t)
            alive &= ~(mask & (t < stop_t))
            if not alive.any():
                break

        grad = d_image[rr, cc].astype(np.float64)
        suffix = t[:, None] * bg
        for li in range(n_local - 1, -1, -1):
            mask = contrib[li]
            if not mask.any():
                continue
            j = int(tile_ids[start + li])
            g = g_hist[li]
            tb = t_hist[li]
            a = alpha_base[j] * g
            w = np.where(mask, tb * a, 0.0)
            cj = color[j].astype(np.float64)
            d_color[j] += grad.T @ w
            # zero suffix derivative where a == 1 (fully extinguished)
            inv = np.where(mask & (a < 1.0), 1.0 / np.where(a < 1.0, 1.0 - a, 1.0), 0.0)
            da = np.where(
                mask,
                grad[:, 0] * (tb * cj[0] - suffix[:, 0] * inv)
                + grad[:, 1] * (tb * cj[1] - suffix[:, 1] * inv)
                + grad[:, 2] * (tb * cj[2] - suffix[:, 2] * inv),
                0.0,
            )
            d_alpha[j] += (da * g).sum()
            d_power = da * a
            dx = px - mean2d[j, 0]
            dy = py - mean2d[j, 1]
            d_mean2d[j, 0] += (d_power * (conic[j, 0] * dx + conic[j, 1] * dy)).sum()
            d_mean2d[j, 1] += (d_power * (conic[j, 1] * dx + conic[j, 2] * dy)).sum()
            d_conic[j, 0] += (d_power * (-0.5 * dx * dx)).sum()
            d_conic[j, 1] += (d_power * (-dx * dy)).sum()
            d_conic[j, 2] += (d_power * (-0.5 * dy * dy)).sum()
            suffix += w[:, None] * cj

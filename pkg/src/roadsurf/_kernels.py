"""Numba kernels for per-ray splatting, blending and the analytic backward pass.

All per-pixel loops write only to that pixel's slots, and the per-surfel
reduction runs sequentially in hit order, so results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

GRAZING_EPS = 1e-9
NEAR_DEPTH = 1e-2  # hits closer than this ray parameter are discarded


@njit(cache=True, inline="always")
def _intersect(ox, oy, oz, dx, dy, dz, s, centers, tu, tv, pn, scales, cutoff2):
    """Ray/plane hit in surfel ``s``'s chart; returns (hit, depth, u, v)."""
    mx, my, mz = pn[s, 0], pn[s, 1], pn[s, 2]
    dn = dx * mx + dy * my + dz * mz
    dlen = np.sqrt(dx * dx + dy * dy + dz * dz)
    if abs(dn) < GRAZING_EPS * dlen:
        return False, 0.0, 0.0, 0.0
    t = ((centers[s, 0] - ox) * mx + (centers[s, 1] - oy) * my + (centers[s, 2] - oz) * mz) / dn
    if not t > NEAR_DEPTH:
        return False, 0.0, 0.0, 0.0
    rx = ox + t * dx - centers[s, 0]
    ry = oy + t * dy - centers[s, 1]
    rz = oz + t * dz - centers[s, 2]
    u = (rx * tu[s, 0] + ry * tu[s, 1] + rz * tu[s, 2]) / scales[s, 0]
    v = (rx * tv[s, 0] + ry * tv[s, 1] + rz * tv[s, 2]) / scales[s, 1]
    if u * u + v * v > cutoff2:
        return False, 0.0, 0.0, 0.0
    return True, t, u, v


@njit(parallel=True, cache=True)
def count_hits(ray_o, ray_d, centers, tu, tv, pn, scales, cutoff2,
               pix_tile, tile_off, tile_list):
    npix = ray_o.shape[0]
    counts = np.zeros(npix, np.int64)
    for p in prange(npix):
        tile = pix_tile[p]
        c = 0
        for k in range(tile_off[tile], tile_off[tile + 1]):
            hit, _, _, _ = _intersect(ray_o[p, 0], ray_o[p, 1], ray_o[p, 2],
                                      ray_d[p, 0], ray_d[p, 1], ray_d[p, 2],
                                      tile_list[k], centers, tu, tv, pn, scales, cutoff2)
            if hit:
                c += 1
        counts[p] = c
    return counts


@njit(parallel=True, cache=True)
def render_rays(ray_o, ray_d, centers, tu, tv, pn, scales, opacity, colors, sem, normals,
                cutoff2, pix_tile, tile_off, tile_list, offsets,
                hit_surf, hit_u, hit_v, hit_z, hit_g, hit_w,
                out_color, out_sem, out_depth, out_nacc, out_alpha):
    npix = ray_o.shape[0]
    ncls = sem.shape[1]
    for p in prange(npix):
        base = offsets[p]
        n = 0
        tile = pix_tile[p]
        for k in range(tile_off[tile], tile_off[tile + 1]):
            s = tile_list[k]
            hit, t, u, v = _intersect(ray_o[p, 0], ray_o[p, 1], ray_o[p, 2],
                                      ray_d[p, 0], ray_d[p, 1], ray_d[p, 2],
                                      s, centers, tu, tv, pn, scales, cutoff2)
            if hit:
                # insertion by (depth, surfel index)
                j = base + n
                while j > base and (hit_z[j - 1] > t or (hit_z[j - 1] == t and hit_surf[j - 1] > s)):
                    hit_z[j] = hit_z[j - 1]
                    hit_surf[j] = hit_surf[j - 1]
                    hit_u[j] = hit_u[j - 1]
                    hit_v[j] = hit_v[j - 1]
                    j -= 1
                hit_z[j] = t
                hit_surf[j] = s
                hit_u[j] = u
                hit_v[j] = v
                n += 1
        trans = 1.0
        acc = 0.0
        dsum = 0.0
        for j in range(base, base + n):
            s = hit_surf[j]
            g = np.exp(-0.5 * (hit_u[j] * hit_u[j] + hit_v[j] * hit_v[j]))
            a = opacity[s] * g
            w = a * trans
            trans = trans * (1.0 - a)
            hit_g[j] = g
            hit_w[j] = w
            acc += w
            dsum += w * hit_z[j]
            for c in range(3):
                out_color[p, c] += w * colors[s, c]
                out_nacc[p, c] += w * normals[s, c]
            for c in range(ncls):
                out_sem[p, c] += w * sem[s, c]
        out_alpha[p] = acc
        out_depth[p] = dsum / acc if acc > 0.0 else 0.0


@njit(parallel=True, cache=True)
def depth_pair_sums(offsets, hit_z, hit_w):
    """Per-ray sum over unordered hit pairs of w_i * w_j * |z_i - z_j|."""
    npix = offsets.shape[0] - 1
    out = np.zeros(npix)
    for p in prange(npix):
        total = 0.0
        for i in range(offsets[p], offsets[p + 1]):
            for j in range(i + 1, offsets[p + 1]):
                total += hit_w[i] * hit_w[j] * abs(hit_z[i] - hit_z[j])
        out[p] = total
    return out


@njit(parallel=True, cache=True)
def backward_rays(ray_o, ray_d, centers, tu, tv, pn, scales, opacity, colors, sem, normals,
                  offsets, hit_surf, hit_u, hit_v, hit_z, hit_g, hit_w,
                  alpha, depth, g_color, g_sem, g_depth, dom_normal, normal_valid,
                  w_depth, w_normal,
                  h_alpha, h_center, h_scale, h_rot, h_color, h_sem):
    """Per-hit parameter gradients given per-pixel upstream gradients.

    ``g_color``, ``g_sem`` and ``g_depth`` are dL/d(buffer) per pixel;
    ``w_depth`` and ``w_normal`` scale the per-ray depth-pair and normal
    terms. Results go into the ``h_*`` arrays at each hit's slot.
    """
    npix = offsets.shape[0] - 1
    ncls = sem.shape[1]
    for p in prange(npix):
        b0 = offsets[p]
        b1 = offsets[p + 1]
        if b1 == b0:
            continue
        A = alpha[p]
        D = depth[p]
        gd = g_depth[p]
        nvalid = normal_valid[p]
        Nx, Ny, Nz = dom_normal[p, 0], dom_normal[p, 1], dom_normal[p, 2]
        wsum = 0.0
        zsum = 0.0
        for j in range(b0, b1):
            wsum += hit_w[j]
            zsum += hit_w[j] * hit_z[j]
        # pass 1: dL/domega per hit, stored temporarily in h_alpha
        w_lt = 0.0
        z_lt = 0.0
        j = b0
        while j < b1:
            e = j
            w_run = 0.0
            z_run = 0.0
            while e < b1 and hit_z[e] == hit_z[j]:
                w_run += hit_w[e]
                z_run += hit_w[e] * hit_z[e]
                e += 1
            w_gt = wsum - w_lt - w_run
            z_gt = zsum - z_lt - z_run
            for i in range(j, e):
                s = hit_surf[i]
                z = hit_z[i]
                w = hit_w[i]
                gw = 0.0
                for c in range(3):
                    gw += g_color[p, c] * colors[s, c]
                for c in range(ncls):
                    gw += g_sem[p, c] * sem[s, c]
                gz = 0.0
                if A > 0.0:
                    gw += gd * (z - D) / A
                    gz += gd * w / A
                gw += w_depth * (z * w_lt - z_lt + z_gt - z * w_gt)
                gz += w_depth * w * (w_lt - w_gt)
                if nvalid:
                    ndot = normals[s, 0] * Nx + normals[s, 1] * Ny + normals[s, 2] * Nz
                    gw += w_normal * (1.0 - ndot)
                h_alpha[i] = gw
                h_scale[i, 0] = gz  # stash dL/dz
            w_lt += w_run
            z_lt += z_run
            j = e
        # pass 2: back through the transmittance product, no division by (1 - a)
        trans = 1.0
        for i in range(b0, b1):
            h_color[i, 0] = trans  # stash T_i
            trans *= 1.0 - opacity[hit_surf[i]] * hit_g[i]
        r = 0.0
        for i in range(b1 - 1, b0 - 1, -1):
            s = hit_surf[i]
            g = hit_g[i]
            a = opacity[s] * g
            gw = h_alpha[i]
            ga = h_color[i, 0] * (gw - r)
            r = gw * a + (1.0 - a) * r
            w = hit_w[i]
            gz = h_scale[i, 0]
            h_alpha[i] = ga * g
            gG = ga * opacity[s]
            u = hit_u[i]
            v = hit_v[i]
            gu = -gG * u * g
            gv = -gG * v * g
            su = scales[s, 0]
            sv = scales[s, 1]
            dx, dy, dz = ray_d[p, 0], ray_d[p, 1], ray_d[p, 2]
            mx, my, mz = pn[s, 0], pn[s, 1], pn[s, 2]
            bn = dx * mx + dy * my + dz * mz
            t = hit_z[i]
            rx = ray_o[p, 0] + t * dx - centers[s, 0]
            ry = ray_o[p, 1] + t * dy - centers[s, 1]
            rz = ray_o[p, 2] + t * dz - centers[s, 2]
            dtu = dx * tu[s, 0] + dy * tu[s, 1] + dz * tu[s, 2]
            dtv = dx * tv[s, 0] + dy * tv[s, 1] + dz * tv[s, 2]
            coef_m = (gz + gu * dtu / su + gv * dtv / sv) / bn
            gcx = coef_m * mx - gu * tu[s, 0] / su - gv * tv[s, 0] / sv
            gcy = coef_m * my - gu * tu[s, 1] / su - gv * tv[s, 1] / sv
            gcz = coef_m * mz - gu * tu[s, 2] / su - gv * tv[s, 2] / sv
            h_center[i, 0] = gcx
            h_center[i, 1] = gcy
            h_center[i, 2] = gcz
            h_scale[i, 0] = -gu * u / su
            h_scale[i, 1] = -gv * v / sv
            # frame vector gradients
            gmx, gmy, gmz = -coef_m * rx, -coef_m * ry, -coef_m * rz
            gux, guy, guz = gu * rx / su, gu * ry / su, gu * rz / su
            gvx, gvy, gvz = gv * rx / sv, gv * ry / sv, gv * rz / sv
            # rotation increment: sum of vec x grad over every frame-attached vector
            rotx = (tu[s, 1] * guz - tu[s, 2] * guy) + (tv[s, 1] * gvz - tv[s, 2] * gvy) \
                + (my * gmz - mz * gmy)
            roty = (tu[s, 2] * gux - tu[s, 0] * guz) + (tv[s, 2] * gvx - tv[s, 0] * gvz) \
                + (mz * gmx - mx * gmz)
            rotz = (tu[s, 0] * guy - tu[s, 1] * gux) + (tv[s, 0] * gvy - tv[s, 1] * gvx) \
                + (mx * gmy - my * gmx)
            if nvalid:
                gnx, gny, gnz = -w_normal * w * Nx, -w_normal * w * Ny, -w_normal * w * Nz
                nx, ny, nz = normals[s, 0], normals[s, 1], normals[s, 2]
                rotx += ny * gnz - nz * gny
                roty += nz * gnx - nx * gnz
                rotz += nx * gny - ny * gnx
            h_rot[i, 0] = rotx
            h_rot[i, 1] = roty
            h_rot[i, 2] = rotz
            for c in range(3):
                h_color[i, c] = w * g_color[p, c]
            for c in range(ncls):
                h_sem[i, c] = w * g_sem[p, c]


@njit(cache=True)
def reduce_hits(hit_surf, h_alpha, h_center, h_scale, h_rot, h_color, h_sem,
                g_alpha, g_center, g_scale, g_rot, g_color, g_sem):
    """Sequential scatter-add of per-hit gradients into per-surfel buffers."""
    ncls = h_sem.shape[1]
    for i in range(hit_surf.shape[0]):
        s = hit_surf[i]
        g_alpha[s] += h_alpha[i]
        for c in range(3):
            g_center[s, c] += h_center[i, c]
            g_rot[s, c] += h_rot[i, c]
            g_color[s, c] += h_color[i, c]
        g_scale[s, 0] += h_scale[i, 0]
        g_scale[s, 1] += h_scale[i, 1]
        for c in range(ncls):
            g_sem[s, c] += h_sem[i, c]

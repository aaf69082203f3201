"""Quadratic-form evaluation of the half-space nonlocal energy.

The double integral over the truncated half-space splits into a far part
(node-product quadrature over the kernel table) and a near part (index
adjacent dual-cell pairs integrated by a Duffy-split Gauss-Jacobi rule in
relative coordinates).  Both parts are assembled once per (grid, kernel,
weight) as quadratic forms in the nodal regular factor, which gives exact
gradients and bilinear forms for the solver.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from collections import OrderedDict

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import (
    GridMismatch,
    InvalidParams,
    NonCompactSupport,
    PointTooCloseToEdge,
    TableExponentMismatch,
    ZeroField,
)
from .field import eval_u
from .kernel import (
    grid_signature,
    kernel_values,
    kernel_values_excluded,
    sphere_surface,
    t_index_map,
)

_FINE_ORDERS = (6, 3, 3)  # rho, v, per-axis inner Gauss
_COARSE_ORDERS = (4, 2, 2)


@dataclass
class EnergyBreakdown:
    """Energy split into far, near and truncation-tail contributions."""

    total: float
    far_part: float
    near_part: float
    tail_estimate: float
    quad_error_estimate: float

    def to_json(self):
        return {
            "total": self.total,
            "far_part": self.far_part,
            "near_part": self.near_part,
            "tail_estimate": self.tail_estimate,
            "quad_error_estimate": self.quad_error_estimate,
        }


def _weight_fn(weight):
    if weight == "none":
        return None
    if weight == "gamma0":
        return lambda xr, xz, yr, yz: (xz - yz) * (xr ** 2 - yr ** 2)
    if isinstance(weight, tuple) and weight[0] == "power":
        gamma = weight[1]
        return lambda xr, xz, yr, yz, g=gamma: (xr ** 2 + yr ** 2) ** (g / 2.0)
    raise InvalidParams(f"unknown weight spec {weight!r}")


def _weight_key(weight):
    if weight == "none" or weight == "gamma0":
        return weight
    return (weight[0], float(weight[1]))


def _dual_edges(nodes):
    return np.concatenate(
        [[nodes[0]], 0.5 * (nodes[:-1] + nodes[1:]), [nodes[-1]]]
    )


def _box_masses(nodes, k):
    e = _dual_edges(nodes)
    return (e[1:] ** (k + 1) - e[:-1] ** (k + 1)) / (k + 1)


def _near_pair_list(nr, nz):
    """Ordered near pairs (b lexicographically >= a) with multiplicity."""
    offsets = [(0, 0, 1.0), (0, 1, 2.0), (1, -1, 2.0), (1, 0, 2.0), (1, 1, 2.0)]
    ai, aj, bi, bj, mult = [], [], [], [], []
    for di, dj, m in offsets:
        ii, jj = np.meshgrid(np.arange(nr), np.arange(nz), indexing="ij")
        ok = (ii + di < nr) & (jj + dj >= 0) & (jj + dj < nz)
        ai.append(ii[ok])
        aj.append(jj[ok])
        bi.append(ii[ok] + di)
        bj.append(jj[ok] + dj)
        mult.append(np.full(ok.sum(), m))
    return (
        np.concatenate(ai),
        np.concatenate(aj),
        np.concatenate(bi),
        np.concatenate(bj),
        np.concatenate(mult),
    )


def _interp_slots(nodes, base, x):
    """Cell index, fraction and local slot of a coordinate within the 4-node
    local patch starting at base."""
    c = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, nodes.size - 2)
    f = (x - nodes[c]) / (nodes[c + 1] - nodes[c])
    return c - base, np.clip(f, 0.0, 1.0)


_Z_PANELS = 10


def _z_rule(lo, hi, dz, e_self, e_other, q, panels=0):
    """Nodes and weights for the inner vertical integral with the algebraic
    weight z^e_self (z + dz)^e_other on [lo, hi], vectorized over pairs.

    The factors vanish at z = 0 and z = -dz, both at or left of lo.  A
    factor singular at the endpoint is absorbed into a Gauss-Jacobi head
    panel whose length stops at the other factor's scale; `panels`
    geometric Legendre panels cover the rest with explicit weights.  With
    panels = 0 a single panel spans the interval, which is accurate only
    when neither singular point touches it (interior cell pairs)."""
    P = lo.shape[0]
    width = np.maximum(hi - lo, 0.0)
    tol = 1e-13 * np.maximum(hi, 1.0)
    d_self = lo if e_self > 0 else np.full(P, np.inf)
    d_other = lo + dz if e_other > 0 else np.full(P, np.inf)
    at_self = d_self <= tol
    at_other = (d_other <= tol) & ~at_self
    far = np.where(at_self, d_other, np.where(at_other, d_self,
                                              np.minimum(d_self, d_other)))
    h0 = np.minimum(far, width) if panels else width

    xg, wg = roots_legendre(q)
    fg = (xg + 1.0) / 2.0
    nodes = np.zeros((P, q * (panels + 1)))
    wts = np.zeros_like(nodes)
    for mask, expo, own_is_self in (
        (at_self, e_self, True),
        (at_other, e_other, False),
    ):
        if not np.any(mask):
            continue
        xj, wj = roots_jacobi(q, 0.0, expo)
        fj = (xj + 1.0) / 2.0
        zz = lo[mask, None] + h0[mask, None] * fj[None, :]
        ww = (h0[mask, None] / 2.0) ** (expo + 1.0) * wj[None, :]
        if own_is_self:
            if e_other:
                ww = ww * np.abs(zz + dz[mask, None]) ** e_other
        elif e_self:
            ww = ww * zz ** e_self
        nodes[mask, :q] = zz
        wts[mask, :q] = ww
    plain = ~(at_self | at_other)
    if np.any(plain):
        zz = lo[plain, None] + h0[plain, None] * fg[None, :]
        ww = h0[plain, None] * (wg[None, :] / 2.0)
        if e_self:
            ww = ww * zz ** e_self
        if e_other:
            ww = ww * np.abs(zz + dz[plain, None]) ** e_other
        nodes[plain, :q] = zz
        wts[plain, :q] = ww
    if panels:
        ratio = np.where(
            width > 0,
            np.maximum(width / np.maximum(h0, 1e-300), 1.0) ** (1.0 / panels),
            1.0,
        )
        e0 = h0.copy()
        for k in range(panels):
            e1 = np.minimum(e0 * ratio, width)
            pw = np.maximum(e1 - e0, 0.0)
            zz = lo[:, None] + e0[:, None] + pw[:, None] * fg[None, :]
            ww = pw[:, None] * (wg[None, :] / 2.0)
            if e_self:
                ww = ww * zz ** e_self
            if e_other:
                ww = ww * np.abs(zz + dz[:, None]) ** e_other
            sl = slice(q * (k + 1), q * (k + 2))
            nodes[:, sl] = zz
            wts[:, sl] = ww
            e0 = e1
    return nodes, wts


def _box_moments(grid, sigma, q=6):
    """Exact-in-field first and second moments of u = z^(2 sigma - 1) times
    the bilinear interpolant over each dual box, measure r^(n-2) dr dz.

    Returns (map9, c1, Q2): flat indices of the 3x3 node patch (N, 9), first
    moment coefficients (N, 9) and second moment local forms (N, 9, 9), so
    that m1 = c1 . v_patch and m2 = v_patch . Q2 . v_patch.  Vertical factors
    z^a and z^(2a) are integrated with Gauss-Jacobi on boxes touching z = 0
    and explicitly elsewhere."""
    rn, zn = grid.r_nodes, grid.z_nodes
    nr, nz = rn.size, zn.size
    er, ez = _dual_edges(rn), _dual_edges(zn)
    a_exp = 2.0 * sigma - 1.0
    npow = grid.n - 2
    N = nr * nz

    off = np.arange(-1, 2)
    gi = np.clip(np.arange(nr)[:, None] + off[None, :], 0, nr - 1)
    gj = np.clip(np.arange(nz)[:, None] + off[None, :], 0, nz - 1)
    map9 = (gi[:, None, :, None] * nz + gj[None, :, None, :]).reshape(N, 9)

    c1 = np.zeros((N, 9))
    Q2 = np.zeros((N, 9, 9))
    xg, wg = roots_legendre(q)
    fg = (xg + 1.0) / 2.0
    zero_dz = None
    for s_i in (0, 1):
        ii = np.arange(1, nr) if s_i == 0 else np.arange(0, nr - 1)
        ci = ii - 1 + s_i
        lo_r = er[ii] if s_i == 0 else rn[ii]
        hi_r = rn[ii] if s_i == 0 else er[ii + 1]
        rq = lo_r[:, None] + (hi_r - lo_r)[:, None] * fg[None, :]
        wr = (hi_r - lo_r)[:, None] * (wg[None, :] / 2.0) * rq ** npow
        fr = (rq - rn[ci][:, None]) / (rn[ci + 1] - rn[ci])[:, None]
        br = np.stack([1.0 - fr, fr])  # (2, Ni, q)
        Ar = np.einsum("iq,uiq->ui", wr, br)
        Br = np.einsum("iq,uiq,viq->uvi", wr, br, br)
        for s_j in (0, 1):
            jj = np.arange(1, nz) if s_j == 0 else np.arange(0, nz - 1)
            cj = jj - 1 + s_j
            lo_z = ez[jj] if s_j == 0 else zn[jj]
            hi_z = zn[jj] if s_j == 0 else ez[jj + 1]
            if zero_dz is None or zero_dz.size != jj.size:
                zero_dz = np.zeros(jj.size)
            zq1, wz1 = _z_rule(lo_z, hi_z, zero_dz, a_exp, 0.0, q)
            zq2, wz2 = _z_rule(lo_z, hi_z, zero_dz, 2.0 * a_exp, 0.0, q)
            hz = (zn[cj + 1] - zn[cj])[:, None]
            f1 = (zq1 - zn[cj][:, None]) / hz
            f2 = (zq2 - zn[cj][:, None]) / hz
            bz1 = np.stack([1.0 - f1, f1])
            bz2 = np.stack([1.0 - f2, f2])
            Az = np.einsum("jq,vjq->vj", wz1, bz1)
            Bz = np.einsum("jq,vjq,wjq->vwj", wz2, bz2, bz2)
            # local slots of cell corners relative to the node
            node_flat = (ii[:, None] * nz + jj[None, :]).ravel()
            for uu in (0, 1):
                sli = 3 * (s_i - 1 + uu + 1)
                for vv in (0, 1):
                    sl = sli + (s_j - 1 + vv + 1)
                    c1[node_flat, sl] += np.outer(
                        Ar[uu], Az[vv]
                    ).ravel()
                    for uu2 in (0, 1):
                        sli2 = 3 * (s_i - 1 + uu2 + 1)
                        for vv2 in (0, 1):
                            sl2 = sli2 + (s_j - 1 + vv2 + 1)
                            Q2[node_flat, sl, sl2] += np.outer(
                                Br[uu, uu2], Bz[vv, vv2]
                            ).ravel()
    return map9, c1, Q2


_MID_RING = 8


def _mid_pair_forms(grid, params, sigma, weight_fn, q=3):
    """Pairwise quadratic forms for box pairs 2 to _MID_RING cells apart.

    There the kernel is smooth but still varies together with the squared
    field difference across the pair, so a factorized rule is biased; a
    tensor Gauss rule per box pair keeps the coupling.  Returns
    (maps18, ga, gb, L) with the 3x3 node patches of both boxes."""
    rn, zn = grid.r_nodes, grid.z_nodes
    nr, nz = rn.size, zn.size
    er, ez = _dual_edges(rn), _dual_edges(zn)
    a_exp = 2.0 * sigma - 1.0
    npow = grid.n - 2
    xg, wg = roots_legendre(q)
    fg = (xg + 1.0) / 2.0
    hg = wg / 2.0

    def axis_data(nodes, edges, power):
        m = nodes.size
        wid = edges[1:] - edges[:-1]
        Xq = edges[:-1, None] + wid[:, None] * fg[None, :]
        Wq = wid[:, None] * hg[None, :] * Xq ** power
        base = np.clip(np.arange(m) - 1, 0, m - 3)
        crel, frac = _interp_slots(nodes, base[:, None], Xq)
        B = np.zeros((m, q, 3))
        idx = np.broadcast_to(np.arange(m)[:, None], crel.shape)
        gq = np.broadcast_to(np.arange(q)[None, :], crel.shape)
        np.add.at(B, (idx, gq, crel), 1.0 - frac)
        np.add.at(B, (idx, gq, crel + 1), frac)
        return Xq, Wq, base, B

    RQ, WR, base_r, BRr = axis_data(rn, er, npow)
    ZQ, WZ, base_z, BZz = axis_data(zn, ez, 0)
    ZA = ZQ ** a_exp

    maps_all, ga_all, gb_all, L_all = [], [], [], []
    s3 = np.arange(3)
    for di in range(0, _MID_RING + 1):
        for dj in range(-_MID_RING, _MID_RING + 1):
            ring = max(di, abs(dj))
            if ring < 2 or (di == 0 and dj < 0):
                continue
            ii = np.arange(0, nr - di)
            jj = np.arange(max(0, -dj), min(nz, nz - dj))
            if ii.size == 0 or jj.size == 0:
                continue
            I = np.repeat(ii, jj.size)
            J = np.tile(jj, ii.size)
            Ib, Jb = I + di, J + dj
            P = I.size
            K = kernel_values(
                RQ[I][:, :, None, None, None],
                RQ[Ib][:, None, None, :, None],
                ZQ[J][:, None, :, None, None]
                - ZQ[Jb][:, None, None, None, :],
                params,
            )
            KW = (
                K
                * WR[I][:, :, None, None, None]
                * WZ[J][:, None, :, None, None]
                * WR[Ib][:, None, None, :, None]
                * WZ[Jb][:, None, None, None, :]
            )
            if weight_fn is not None:
                KW = KW * weight_fn(
                    RQ[I][:, :, None, None, None],
                    ZQ[J][:, None, :, None, None],
                    RQ[Ib][:, None, None, :, None],
                    ZQ[Jb][:, None, None, None, :],
                )
            ca = np.einsum(
                "pga,pz,pzb->pgzab", BRr[I], ZA[J], BZz[J]
            ).reshape(P, q, q, 9)
            cb = np.einsum(
                "pga,pz,pzb->pgzab", BRr[Ib], ZA[Jb], BZz[Jb]
            ).reshape(P, q, q, 9)
            rowA = KW.sum(axis=(3, 4))
            colB = KW.sum(axis=(1, 2))
            AA = np.einsum("pgz,pgza,pgzb->pab", rowA, ca, ca, optimize=True)
            BB = np.einsum("pgz,pgza,pgzb->pab", colB, cb, cb, optimize=True)
            AB = np.einsum(
                "pgzhw,pgza,phwb->pab",
                KW,
                ca,
                cb,
                optimize=True,
            )
            L = np.zeros((P, 18, 18))
            L[:, :9, :9] = AA
            L[:, 9:, 9:] = BB
            L[:, :9, 9:] = -AB
            L[:, 9:, :9] = -AB.transpose(0, 2, 1)
            L *= 2.0  # both orientations of each unordered pair
            mA = (
                (base_r[I][:, None, None] + s3[None, :, None]) * nz
                + base_z[J][:, None, None]
                + s3[None, None, :]
            ).reshape(P, 9)
            mB = (
                (base_r[Ib][:, None, None] + s3[None, :, None]) * nz
                + base_z[Jb][:, None, None]
                + s3[None, None, :]
            ).reshape(P, 9)
            maps_all.append(np.concatenate([mA, mB], axis=1))
            ga_all.append(I * nz + J)
            gb_all.append(Ib * nz + Jb)
            L_all.append(L)
    return (
        np.concatenate(maps_all),
        np.concatenate(ga_all),
        np.concatenate(gb_all),
        np.concatenate(L_all),
    )


def _exterior_forms(grid, params, sigma, weight_fn, q=2, chunk=200):
    """Cell-local quadratic forms coupling interior mass to the complement
    of the truncation cylinder, where the field itself is zero.

    For each grid cell a 4x4 form X gives vt_loc . X . vt_loc ~
    2 int_cell u(x)^2 kext(x) dmu, with kext(x) the kernel mass seen from x
    in the exterior, accumulated over a geometrically graded exterior tiling
    out to 4000 R.  Tail models add their own terms elsewhere."""
    rn, zn = grid.r_nodes, grid.z_nodes
    nr, nz = rn.size, zn.size
    R = grid.R_max
    npow = grid.n - 2
    a_exp = 2.0 * sigma - 1.0

    # exterior boxes: radial shells past R and a cap past z = R; the tail
    # reaches far out so that slowly converging weighted integrals (power
    # weights with gamma < 2*sigma) keep their scaling law
    off = np.concatenate(
        [
            [0.0],
            np.geomspace(4e-3 * R, 23.0 * R, 28),
            np.geomspace(33.0 * R, 4000.0 * R, 14),
        ]
    )
    eext = R + off
    sc = np.array(
        [
            (eext[k + 1] ** (npow + 2) - eext[k] ** (npow + 2))
            / (npow + 2)
            / ((eext[k + 1] ** (npow + 1) - eext[k] ** (npow + 1)) / (npow + 1))
            for k in range(off.size - 1)
        ]
    )
    sm = np.diff(eext ** (npow + 1)) / (npow + 1)
    wc = 0.5 * (eext[1:] + eext[:-1])
    wm = np.diff(eext)
    rin_c = rn
    rin_m = _box_masses(rn, npow)
    zin_c = zn
    zin_m = _box_masses(zn, 0)
    # region A: s past R, any w; region B: s inside, w past R
    wA_c = np.concatenate([zin_c, wc])
    wA_m = np.concatenate([zin_m, wm])
    sb = np.concatenate(
        [np.repeat(sc, wA_c.size), np.repeat(rin_c, wc.size)]
    )
    wb = np.concatenate([np.tile(wA_c, sc.size), np.tile(wc, rin_c.size)])
    mb = np.concatenate(
        [
            (sm[:, None] * wA_m[None, :]).ravel(),
            (rin_m[:, None] * wm[None, :]).ravel(),
        ]
    )

    xg, wg = roots_legendre(q)
    fg = (xg + 1.0) / 2.0
    hr = np.diff(rn)
    hz = np.diff(zn)
    rg = rn[:-1, None] + hr[:, None] * fg[None, :]
    wr = hr[:, None] * (wg[None, :] / 2.0) * rg ** npow
    zg = zn[:-1, None] + hz[:, None] * fg[None, :]
    wz = hz[:, None] * (wg[None, :] / 2.0) * zg ** (2.0 * a_exp)
    fr = (rg - rn[:-1, None]) / hr[:, None]
    fz = (zg - zn[:-1, None]) / hz[:, None]

    rp = rg.ravel()
    zp = zg.ravel()
    kext = np.zeros((rp.size, zp.size))
    for s0 in range(0, sb.size, chunk):
        s1 = min(s0 + chunk, sb.size)
        kv = kernel_values(
            rp[:, None, None],
            sb[None, None, s0:s1],
            zp[None, :, None] - wb[None, None, s0:s1],
            params,
        )
        if weight_fn is not None:
            kv = kv * weight_fn(
                rp[:, None, None],
                zp[None, :, None],
                sb[None, None, s0:s1],
                wb[None, None, s0:s1],
            )
        kext += kv @ mb[s0:s1]

    kext = kext.reshape(nr - 1, q, nz - 1, q)
    br = np.stack([1.0 - fr, fr])  # (2, nr-1, q)
    bz = np.stack([1.0 - fz, fz])
    # X[c, (u,v), (u2,v2)] with slot order (r corner)*2 + (z corner)
    X = 2.0 * np.einsum(
        "ia,jb,iajb,uia,vjb,wia,xjb->ijuvwx",
        wr,
        wz,
        kext,
        br,
        bz,
        br,
        bz,
        optimize=True,
    ).reshape((nr - 1) * (nz - 1), 4, 4)
    ci = np.arange(nr - 1)
    cj = np.arange(nz - 1)
    uu = np.array([0, 0, 1, 1])
    vv = np.array([0, 1, 0, 1])
    maps = (
        (ci[:, None, None] + uu[None, None, :]) * nz
        + cj[None, :, None]
        + vv[None, None, :]
    ).reshape(-1, 4)
    return maps, X


def _near_local_forms(grid, params, sigma, weight_fn, orders):
    """Per-pair 16x16 local quadratic forms in the nodal regular factor.

    Each dual-cell pair is integrated in relative coordinates: sign quadrants
    of the separation, a Duffy split per quadrant, Gauss-Jacobi in the radial
    Duffy variable absorbing the kernel strength left after the squared field
    difference, and tensor Gauss over the inner cell.  The squared difference
    (z_x^a p_x - z_y^a p_y)^2, a = 2*sigma - 1, is expanded into three terms
    whose z weights are separable, so boundary cells get exact Gauss-Jacobi
    treatment of the z^a factors and the kernel (independent of the inner
    vertical variable) is evaluated once per radial node.
    """
    n_rho, n_v, n_x = orders
    n_z = n_x
    rn, zn = grid.r_nodes, grid.z_nodes
    nr, nz = rn.size, zn.size
    er_edges = _dual_edges(rn)
    ez_edges = _dual_edges(zn)
    ai, aj, bi, bj, mult = _near_pair_list(nr, nz)
    P = ai.size
    ga = ai * nz + aj
    gb = bi * nz + bj

    base_i = np.clip(np.minimum(ai, bi) - 1, 0, nr - 4)
    base_j = np.clip(np.minimum(aj, bj) - 1, 0, nz - 4)
    is_bnd = np.minimum(aj, bj) == 0
    # global flat indices of the 4x4 local patch
    gi = base_i[:, None] + np.arange(4)[None, :]
    gj = base_j[:, None] + np.arange(4)[None, :]
    maps = (gi[:, :, None] * nz + gj[:, None, :]).reshape(P, 16)

    A0r, A1r = er_edges[ai], er_edges[ai + 1]
    B0r, B1r = er_edges[bi], er_edges[bi + 1]
    A0z, A1z = ez_edges[aj], ez_edges[aj + 1]
    B0z, B1z = ez_edges[bj], ez_edges[bj + 1]

    beta = 1.0 - 2.0 * sigma
    xr_j, wr_j = roots_jacobi(n_rho, 0.0, beta)
    rho = (xr_j + 1.0) / 2.0
    w_rho = wr_j * 2.0 ** (-beta - 1.0) * rho ** (2.0 * sigma)
    xv, wv = roots_legendre(n_v)
    vv = (xv + 1.0) / 2.0
    w_v = wv / 2.0
    xg, wg = roots_legendre(n_x)
    gg = (xg + 1.0) / 2.0
    w_g = wg / 2.0

    npow = grid.n - 2
    L = np.zeros((P, 16, 16))

    a_exp = 2.0 * sigma - 1.0
    terms = (
        (2.0 * a_exp, 0.0, 1.0),
        (a_exp, a_exp, -2.0),
        (0.0, 2.0 * a_exp, 1.0),
    )

    def scatter(out, ci, fi, cj, fj):
        # all index/fraction arrays have shape (Ps, n_x, nzt)
        Ps, nq = out.shape[:2]
        for di in (0, 1):
            cr = np.abs(1 - di - fi)
            for dj in (0, 1):
                cz = np.abs(1 - dj - fj)
                slot = ((ci + di) * 4 + cj + dj).reshape(Ps, nq)
                out[pidx, qidx, slot] = (cr * cz).reshape(Ps, nq)

    for sr, sz in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        er = np.maximum(B1r - A0r, 0.0) if sr > 0 else np.maximum(A1r - B0r, 0.0)
        ez = np.maximum(B1z - A0z, 0.0) if sz > 0 else np.maximum(A1z - B0z, 0.0)
        ok = (er > 0) & (ez > 0)
        for batch_bnd in (False, True):
            npan = _Z_PANELS if batch_bnd else 0
            nzt = n_z * (npan + 1)
            sel = np.where(ok & (is_bnd == batch_bnd))[0]
            if sel.size == 0:
                continue
            ers, ezs = er[sel], ez[sel]
            A0rs, A1rs, B0rs, B1rs = A0r[sel], A1r[sel], B0r[sel], B1r[sel]
            A0zs, A1zs, B0zs, B1zs = A0z[sel], A1z[sel], B0z[sel], B1z[sel]
            base_is, base_js = base_i[sel], base_j[sel]
            mults = mult[sel]
            Ps = sel.size
            acc = np.zeros((Ps, 16, 16))
            nq = n_x * nzt
            qidx = np.broadcast_to(np.arange(nq)[None, :], (Ps, nq))
            pidx = np.broadcast_to(np.arange(Ps)[:, None], (Ps, nq))
            for tri in (0, 1):
                for k in range(n_rho):
                    for m in range(n_v):
                        if tri == 0:
                            a_sc, b_sc = rho[k], rho[k] * vv[m]
                        else:
                            a_sc, b_sc = rho[k] * vv[m], rho[k]
                        dr = sr * ers * a_sc
                        dz = sz * ezs * b_sc
                        lo_r = np.maximum(A0rs, B0rs - dr)
                        hi_r = np.minimum(A1rs, B1rs - dr)
                        lo_z = np.maximum(A0zs, B0zs - dz)
                        hi_z = np.minimum(A1zs, B1zs - dz)
                        wid_r = np.maximum(hi_r - lo_r, 0.0)
                        hi_z = np.maximum(hi_z, lo_z)
                        w_pair = mults * ers * ezs * w_rho[k] * w_v[m]
                        # radial inner nodes; the kernel needs only these
                        xr = lo_r[:, None] + wid_r[:, None] * gg[None, :]
                        yr = xr + dr[:, None]
                        kv = kernel_values(xr, yr, dz[:, None], params)
                        wc = (
                            w_pair[:, None]
                            * wid_r[:, None]
                            * w_g[None, :]
                            * kv
                            * xr ** npow
                            * yr ** npow
                        )
                        cxi, fx = _interp_slots(rn, base_is[:, None], xr)
                        cyi, fy = _interp_slots(rn, base_is[:, None], yr)
                        cxi = np.broadcast_to(cxi[:, :, None], (Ps, n_x, nzt))
                        fx = np.broadcast_to(fx[:, :, None], (Ps, n_x, nzt))
                        cyi = np.broadcast_to(cyi[:, :, None], (Ps, n_x, nzt))
                        fy = np.broadcast_to(fy[:, :, None], (Ps, n_x, nzt))
                        for e_x, e_y, coef in terms:
                            zz, zw = _z_rule(
                                lo_z, hi_z, dz, e_x, e_y, n_z, panels=npan
                            )
                            wq = (wc[:, :, None] * zw[:, None, :]).reshape(Ps, nq)
                            if weight_fn is not None:
                                XR = np.broadcast_to(
                                    xr[:, :, None], (Ps, n_x, nzt)
                                )
                                XZ = np.broadcast_to(
                                    zz[:, None, :], (Ps, n_x, nzt)
                                )
                                wq = wq * weight_fn(
                                    XR,
                                    XZ,
                                    XR + dr[:, None, None],
                                    XZ + dz[:, None, None],
                                ).reshape(Ps, nq)
                            A = np.zeros((Ps, nq, 16))
                            if coef > 0 and e_y > 0:
                                # term 3: basis at y only
                                cwi, fw = _interp_slots(
                                    zn, base_js[:, None], zz + dz[:, None]
                                )
                                scatter(
                                    A,
                                    cyi,
                                    fy,
                                    np.broadcast_to(
                                        cwi[:, None, :], (Ps, n_x, nzt)
                                    ),
                                    np.broadcast_to(
                                        fw[:, None, :], (Ps, n_x, nzt)
                                    ),
                                )
                                acc += np.einsum(
                                    "pq,pqa,pqb->pab", coef * wq, A, A,
                                    optimize=True,
                                )
                                continue
                            czi, fz = _interp_slots(zn, base_js[:, None], zz)
                            scatter(
                                A,
                                cxi,
                                fx,
                                np.broadcast_to(czi[:, None, :], (Ps, n_x, nzt)),
                                np.broadcast_to(fz[:, None, :], (Ps, n_x, nzt)),
                            )
                            if coef < 0:
                                # term 2: cross basis, symmetrized
                                B = np.zeros((Ps, nq, 16))
                                cwi, fw = _interp_slots(
                                    zn, base_js[:, None], zz + dz[:, None]
                                )
                                scatter(
                                    B,
                                    cyi,
                                    fy,
                                    np.broadcast_to(
                                        cwi[:, None, :], (Ps, n_x, nzt)
                                    ),
                                    np.broadcast_to(
                                        fw[:, None, :], (Ps, n_x, nzt)
                                    ),
                                )
                                cross = np.einsum(
                                    "pq,pqa,pqb->pab", 0.5 * coef * wq, A, B,
                                    optimize=True,
                                )
                                acc += cross + cross.transpose(0, 2, 1)
                            else:
                                acc += np.einsum(
                                    "pq,pqa,pqb->pab", coef * wq, A, A,
                                    optimize=True,
                                )
            L[sel] += acc
    return maps, ga, gb, L


class AssembledForm:
    """Far + near quadratic form for one (grid, kernel table, weight)."""

    def __init__(self, grid, table, sigma, weight="none"):
        if table.grid_hash != grid_signature(grid):
            raise GridMismatch("kernel table was built for a different grid")
        wfn = _weight_fn(weight)
        self.grid = grid
        self.sigma = float(sigma)
        self.params = table.params
        self.sphere = sphere_surface(grid.n - 2)
        rn, zn = grid.r_nodes, grid.z_nodes
        nr, nz = rn.size, zn.size
        self.N = nr * nz
        r_flat = np.repeat(rn, nz)
        z_flat = np.tile(zn, nr)
        self.r_flat, self.z_flat = r_flat, z_flat
        self.D = np.where(z_flat > 0, z_flat, 1.0) ** (2.0 * sigma - 1.0)
        self.D[z_flat == 0.0] = 0.0

        wr = _box_masses(rn, grid.n - 2)
        wz = _box_masses(zn, 0)
        W = np.repeat(wr, nz) * np.tile(wz, nr)
        self.node_weight = W

        idx_t = t_index_map(table, grid)
        ri = np.repeat(np.arange(nr), nz)
        zi = np.tile(np.arange(nz), nr)
        K = table.values[ri[:, None], ri[None, :], idx_t[zi[:, None], zi[None, :]]]
        M = W[:, None] * W[None, :] * K
        if wfn is not None:
            M *= wfn(
                r_flat[:, None], z_flat[:, None], r_flat[None, :], z_flat[None, :]
            )
        handled = (np.abs(ri[:, None] - ri[None, :]) <= _MID_RING) & (
            np.abs(zi[:, None] - zi[None, :]) <= _MID_RING
        )
        M[handled] = 0.0
        self.M = M
        self.mid_maps, self.mga, self.mgb, self.Lmid = _mid_pair_forms(
            grid, table.params, sigma, wfn
        )
        self.map9, self.c1, self.Q2 = _box_moments(grid, sigma)
        self.ext_maps, self.X = _exterior_forms(grid, table.params, sigma, wfn)

        self.maps, self.ga, self.gb, self.L = _near_local_forms(
            grid, table.params, sigma, wfn, _FINE_ORDERS
        )
        _, _, _, self.L_coarse = _near_local_forms(
            grid, table.params, sigma, wfn, _COARSE_ORDERS
        )

    def _moments(self, vt):
        """Per-box mean and mean square of u against the box measure."""
        vloc = vt.ravel()[self.map9]
        m1 = np.einsum("na,na->n", self.c1, vloc)
        m2 = np.einsum("na,nab,nb->n", vloc, self.Q2, vloc, optimize=True)
        W = np.maximum(self.node_weight, 1e-300)
        return m1 / W, m2 / W

    def _far(self, vt, sel=None):
        P, S = self._moments(vt)
        if sel is not None:
            P = P * sel
            S = S * sel
            row = self.M @ sel.astype(float)
        else:
            row = self.M.sum(axis=1)
        return 2.0 * (np.dot(row, S) - np.dot(P, self.M @ P))

    def _ext(self, vt, sel=None):
        """Coupling of the interior field to the zero exterior; pairs that
        leave the truncation cylinder also leave any interior cap."""
        if sel is not None:
            return 0.0
        vloc = vt.ravel()[self.ext_maps]
        return float(
            np.einsum("pa,pab,pb->", vloc, self.X, vloc, optimize=True)
        )

    def _mid(self, vt, sel=None):
        vloc = vt.ravel()[self.mid_maps]
        e = np.einsum("pa,pab,pb->p", vloc, self.Lmid, vloc, optimize=True)
        if sel is not None:
            e = e * sel[self.mga] * sel[self.mgb]
        return float(e.sum())

    def _near(self, vt, sel=None, coarse=False):
        L = self.L_coarse if coarse else self.L
        vloc = vt.ravel()[self.maps]
        e = np.einsum("pa,pab,pb->p", vloc, L, vloc, optimize=True)
        if sel is not None:
            e = e * sel[self.ga] * sel[self.gb]
        return float(e.sum())

    def parts(self, vt, sel=None):
        """(far, near, near_coarse) including the angular prefactor; far
        includes the coupling to the exterior of the truncation cylinder."""
        far = (
            self._far(vt, sel) + self._mid(vt, sel) + self._ext(vt, sel)
        ) * self.sphere
        near = self._near(vt, sel) * self.sphere
        nearc = self._near(vt, sel, coarse=True) * self.sphere
        return float(far), float(near), float(nearc)

    def energy(self, vt, sel=None):
        far, near, _ = self.parts(vt, sel)
        return far + near

    def bilinear(self, vt1, vt2):
        """a(u1, u2), the symmetric bilinear form matching energy()."""
        W = np.maximum(self.node_weight, 1e-300)
        v1loc = vt1.ravel()[self.map9]
        v2loc = vt2.ravel()[self.map9]
        P1 = np.einsum("na,na->n", self.c1, v1loc) / W
        P2 = np.einsum("na,na->n", self.c1, v2loc) / W
        S12 = (
            np.einsum("na,nab,nb->n", v1loc, self.Q2, v2loc, optimize=True) / W
        )
        row = self.M.sum(axis=1)
        far = 2.0 * (np.dot(row, S12) - np.dot(P1, self.M @ P2))
        far += float(
            np.einsum(
                "pa,pab,pb->",
                vt1.ravel()[self.ext_maps],
                self.X,
                vt2.ravel()[self.ext_maps],
                optimize=True,
            )
        )
        far += float(
            np.einsum(
                "pa,pab,pb->",
                vt1.ravel()[self.mid_maps],
                self.Lmid,
                vt2.ravel()[self.mid_maps],
                optimize=True,
            )
        )
        v1 = vt1.ravel()[self.maps]
        v2 = vt2.ravel()[self.maps]
        near = float(np.einsum("pa,pab,pb->p", v1, self.L, v2, optimize=True).sum())
        return (far + near) * self.sphere

    def grad(self, vt):
        """Gradient of energy() with respect to the nodal regular factor."""
        v = vt.ravel()
        W = np.maximum(self.node_weight, 1e-300)
        vloc = v[self.map9]
        P = np.einsum("na,na->n", self.c1, vloc) / W
        row = self.M.sum(axis=1)
        g_far = np.zeros(self.N)
        np.add.at(
            g_far,
            self.map9,
            4.0
            * (row / W)[:, None]
            * np.einsum("nab,nb->na", self.Q2, vloc, optimize=True),
        )
        np.add.at(
            g_far,
            self.map9,
            -4.0 * ((self.M @ P) / W)[:, None] * self.c1,
        )
        np.add.at(
            g_far,
            self.ext_maps,
            2.0
            * np.einsum(
                "pab,pb->pa", self.X, v[self.ext_maps], optimize=True
            ),
        )
        np.add.at(
            g_far,
            self.mid_maps,
            2.0
            * np.einsum(
                "pab,pb->pa", self.Lmid, v[self.mid_maps], optimize=True
            ),
        )
        vloc = v[self.maps]
        contrib = 2.0 * np.einsum("pab,pb->pa", self.L, vloc, optimize=True)
        g_near = np.zeros(self.N)
        np.add.at(g_near, self.maps, contrib)
        return (g_far + g_near) * self.sphere


_cache: OrderedDict = OrderedDict()
_CACHE_MAX = 8


def assemble(grid, table, sigma, weight="none"):
    key = (table.cache_key(), float(sigma), _weight_key(weight))
    if key not in _cache:
        if len(_cache) >= _CACHE_MAX:
            _cache.popitem(last=False)
        _cache[key] = AssembledForm(grid, table, sigma, weight)
    _cache.move_to_end(key)
    return _cache[key]


def _check_pair(field, table, want_energy):
    if table.grid_hash != grid_signature(field.grid):
        raise GridMismatch("field grid does not match the kernel table grid")
    if abs(field.sigma - table.params.sigma) > 1e-12:
        raise InvalidParams("field and table disagree on sigma")
    if want_energy is not None and table.params.is_energy != want_energy:
        kind = "n + 2*sigma" if want_energy else "n + 2*sigma + 2"
        raise TableExponentMismatch(f"operation needs a table with p = {kind}")


def _ball_sel(form, lam):
    return (form.r_flat ** 2 + form.z_flat ** 2 <= lam * lam).astype(float)


def _tail_pieces(field, params):
    """Exterior-extension estimate of the energy beyond the truncation box.

    Builds a coarse combined grid (subsampled interior plus geometric exterior
    up to 24 R_max), evaluates u through the attached tail model, and sums the
    node-product rule over all pairs touching the exterior.
    """
    grid = field.grid
    R = grid.R_max
    sub = max(1, (grid.r_nodes.size - 1) // 16)
    r_in = grid.r_nodes[::sub]
    z_in = grid.z_nodes[::sub]
    if r_in[-1] != grid.r_nodes[-1]:
        r_in = np.append(r_in, grid.r_nodes[-1])
    if z_in[-1] != grid.z_nodes[-1]:
        z_in = np.append(z_in, grid.z_nodes[-1])
    ext = R * np.geomspace(1.0, 24.0, 15)[1:]
    r_ax = np.concatenate([r_in, ext])
    z_ax = np.concatenate([z_in, ext])
    wr = _box_masses(r_ax, grid.n - 2)
    wz = _box_masses(z_ax, 0)
    RR, ZZ = np.meshgrid(r_ax, z_ax, indexing="ij")
    U = eval_u(field, RR.ravel(), ZZ.ravel()).reshape(RR.shape)
    W = wr[:, None] * wz[None, :]
    inner = (RR <= R) & (ZZ <= R)
    nr, nz = r_ax.size, z_ax.size
    uf, wf = U.ravel(), W.ravel()
    inf_ = inner.ravel()
    lp_weights = wf[~inf_]
    lp_u = uf[~inf_]
    if params is None:
        return 0.0, lp_weights, lp_u
    ri = np.repeat(np.arange(nr), nz)
    zi = np.tile(np.arange(nz), nr)
    rr = np.repeat(r_ax, nz)
    zz = np.tile(z_ax, nr)
    drr = np.abs(ri[:, None] - ri[None, :])
    dzz = np.abs(zi[:, None] - zi[None, :])
    ok = (drr > 1) | (dzz > 1)
    # only pairs with at least one exterior point contribute to the tail
    ok &= ~(inf_[:, None] & inf_[None, :])
    ii, jj = np.where(ok)
    KV_flat = kernel_values(rr[ii], rr[jj], zz[ii] - zz[jj], params)
    diffs = (uf[ii] - uf[jj]) ** 2
    energy_tail = float(np.sum(wf[ii] * wf[jj] * KV_flat * diffs))
    return energy_tail * sphere_surface(grid.n - 2), lp_weights, lp_u


def seminorm(field, table):
    """Nonlocal energy of the field, split far/near/tail."""
    _check_pair(field, table, want_energy=True)
    form = assemble(field.grid, table, field.sigma)
    far, near, nearc = form.parts(field.regular_values)
    tail = 0.0
    if field.tail is not None:
        # only the tail-model-dependent terms; the coupling of the interior
        # to a zero exterior is already inside the assembled form
        with_tail, _, _ = _tail_pieces(field, table.params)
        bare, _, _ = _tail_pieces(replace(field, tail=None), table.params)
        tail = with_tail - bare
    qerr = abs(near - nearc)
    return EnergyBreakdown(
        total=far + near + tail,
        far_part=far,
        near_part=near,
        tail_estimate=tail,
        quad_error_estimate=qerr,
    )


def weighted_seminorm(field, table, weight, lam=None, exterior=False):
    """Energy with a pair weight; optional truncation to B_lambda pairs.

    weight is ("power", gamma) or "gamma0"; with exterior=True the complement
    of the B_lambda x B_lambda pair set is summed instead.
    """
    if weight == "gamma0":
        _check_pair(field, table, want_energy=False)
    else:
        _check_pair(field, table, want_energy=True)
        if weight != "none" and not (
            isinstance(weight, tuple) and weight[0] == "power"
        ):
            raise InvalidParams(f"unknown weight {weight!r}")
    form = assemble(field.grid, table, field.sigma, weight)
    vt = field.regular_values
    if lam is None:
        far, near, nearc = form.parts(vt)
    else:
        sel = _ball_sel(form, lam)
        if exterior:
            fa, na, nca = form.parts(vt)
            fi, ni, nci = form.parts(vt, sel)
            far, near, nearc = fa - fi, na - ni, nca - nci
        else:
            far, near, nearc = form.parts(vt, sel)
    return EnergyBreakdown(
        total=far + near,
        far_part=far,
        near_part=near,
        tail_estimate=0.0,
        quad_error_estimate=abs(near - nearc),
    )


def _interior_mass(field, p, q=4):
    """Integral of |u|^p over the truncation box, cell-wise tensor Gauss on
    the interpolant with the z^((2*sigma-1)*p) boundary factor integrated by
    a Jacobi rule in the first z cell."""
    grid = field.grid
    ap = (2 * field.sigma - 1) * p
    vt = field.regular_values
    xg, wg = roots_legendre(q)
    ra, rb = grid.r_nodes[:-1], grid.r_nodes[1:]
    RQ = ra[:, None] + (rb - ra)[:, None] * (xg[None, :] + 1) / 2
    WR = (rb - ra)[:, None] / 2 * wg[None, :] * RQ ** (grid.n - 2)
    fr = (RQ - ra[:, None]) / (rb - ra)[:, None]
    za, zb = grid.z_nodes[:-1], grid.z_nodes[1:]
    ZQ = za[:, None] + (zb - za)[:, None] * (xg[None, :] + 1) / 2
    WZ = (zb - za)[:, None] / 2 * wg[None, :] * ZQ ** ap
    xj, wj = roots_jacobi(q, 0.0, ap)
    h0 = zb[0] - za[0]
    ZQ[0] = h0 * (xj + 1) / 2
    WZ[0] = (h0 / 2) ** (1 + ap) * wj
    fz = (ZQ - za[:, None]) / (zb - za)[:, None]
    fr_ = fr[:, :, None, None]
    fz_ = fz[None, None, :, :]
    vals = (
        vt[:-1, None, :-1, None] * (1 - fr_) * (1 - fz_)
        + vt[1:, None, :-1, None] * fr_ * (1 - fz_)
        + vt[:-1, None, 1:, None] * (1 - fr_) * fz_
        + vt[1:, None, 1:, None] * fr_ * fz_
    )
    return float(
        np.sum(WR[:, :, None, None] * WZ[None, None, :, :] * np.abs(vals) ** p)
    )


def _interior_mass_grad(field, p, q=4):
    """Exact gradient of _interior_mass with respect to the node values."""
    grid = field.grid
    ap = (2 * field.sigma - 1) * p
    vt = field.regular_values
    xg, wg = roots_legendre(q)
    ra, rb = grid.r_nodes[:-1], grid.r_nodes[1:]
    RQ = ra[:, None] + (rb - ra)[:, None] * (xg[None, :] + 1) / 2
    WR = (rb - ra)[:, None] / 2 * wg[None, :] * RQ ** (grid.n - 2)
    fr = (RQ - ra[:, None]) / (rb - ra)[:, None]
    za, zb = grid.z_nodes[:-1], grid.z_nodes[1:]
    ZQ = za[:, None] + (zb - za)[:, None] * (xg[None, :] + 1) / 2
    WZ = (zb - za)[:, None] / 2 * wg[None, :] * ZQ ** ap
    xj, wj = roots_jacobi(q, 0.0, ap)
    h0 = zb[0] - za[0]
    ZQ[0] = h0 * (xj + 1) / 2
    WZ[0] = (h0 / 2) ** (1 + ap) * wj
    fz = (ZQ - za[:, None]) / (zb - za)[:, None]
    fr_ = fr[:, :, None, None]
    fz_ = fz[None, None, :, :]
    vals = (
        vt[:-1, None, :-1, None] * (1 - fr_) * (1 - fz_)
        + vt[1:, None, :-1, None] * fr_ * (1 - fz_)
        + vt[:-1, None, 1:, None] * (1 - fr_) * fz_
        + vt[1:, None, 1:, None] * fr_ * fz_
    )
    G = (
        p
        * WR[:, :, None, None]
        * WZ[None, None, :, :]
        * np.abs(vals) ** (p - 1)
        * np.sign(vals)
    )
    out = np.zeros(grid.shape)
    out[:-1, :-1] += np.sum(G * (1 - fr_) * (1 - fz_), axis=(1, 3))
    out[1:, :-1] += np.sum(G * fr_ * (1 - fz_), axis=(1, 3))
    out[:-1, 1:] += np.sum(G * (1 - fr_) * fz_, axis=(1, 3))
    out[1:, 1:] += np.sum(G * fr_ * fz_, axis=(1, 3))
    return out


def _exterior_mass(field, p):
    """Integral of |u|^p outside the truncation box through the tail model."""
    grid = field.grid
    R = grid.R_max
    ext = R * np.geomspace(1.0, 32.0, 60)[1:]
    r_ax = np.concatenate([grid.r_nodes, ext])
    z_ax = np.concatenate([grid.z_nodes, ext])
    wr = _box_masses(r_ax, grid.n - 2)
    wz = _box_masses(z_ax, 0)
    RR, ZZ = np.meshgrid(r_ax, z_ax, indexing="ij")
    U = eval_u(field, RR.ravel(), ZZ.ravel()).reshape(RR.shape)
    W = wr[:, None] * wz[None, :]
    outer = (RR > R) | (ZZ > R)
    return float(np.sum(W[outer] * np.abs(U[outer]) ** p))


def lp_norm(field, p):
    """L^p norm of u over the half-space, including the angular factor."""
    if p <= 0:
        raise InvalidParams(f"p must be positive, got {p}")
    grid = field.grid
    mass = _interior_mass(field, p)
    if field.tail is not None:
        mass += _exterior_mass(field, p)
    return (sphere_surface(grid.n - 2) * mass) ** (1.0 / p)


def critical_p(n, sigma):
    return 2.0 * n / (n - 2.0 * sigma)


def rayleigh_quotient(field, table):
    """Energy over the squared critical norm."""
    if not np.any(field.regular_values):
        raise ZeroField("quotient undefined for the zero field")
    den = lp_norm(field, critical_p(field.grid.n, field.sigma))
    return seminorm(field, table).total / den ** 2


def regional_laplacian(field, point, table, pv_radius):
    """Principal-value nonlocal operator at an interior point.

    Two exclusion radii and Richardson extrapolation with the interior rate
    2 - 2*sigma; returns (value, extrapolation_error)."""
    _check_pair(field, table, want_energy=True)
    r0, z0 = point
    grid = field.grid
    R = grid.R_max
    margin = min(z0, R - z0, R - r0)
    if pv_radius <= 0 or pv_radius >= 0.9 * margin:
        raise PointTooCloseToEdge(
            f"pv radius {pv_radius} too large for point {point}"
        )
    wr = _box_masses(grid.r_nodes, grid.n - 2)
    wz = _box_masses(grid.z_nodes, 0)
    RR, ZZ = np.meshgrid(grid.r_nodes, grid.z_nodes, indexing="ij")
    W = wr[:, None] * wz[None, :]
    zpow = np.where(grid.z_nodes > 0, grid.z_nodes, 1.0) ** (2 * field.sigma - 1)
    zpow[grid.z_nodes == 0.0] = 0.0
    U = field.regular_values * zpow[None, :]
    u0 = float(eval_u(field, r0, z0))

    def pv_value(eps):
        kv = kernel_values_excluded(
            np.full(RR.size, r0), RR.ravel(), ZZ.ravel() - z0, table.params, eps * eps
        ).reshape(RR.shape)
        return 2.0 * float(np.sum(W * kv * (u0 - U)))

    v1 = pv_value(pv_radius)
    v2 = pv_value(pv_radius / 2.0)
    theta = 2.0 ** -(2.0 - 2.0 * field.sigma)
    extrap = (v2 - theta * v1) / (1.0 - theta)
    return extrap, abs(extrap - v2)


def _test_bank(grid, sigma):
    """Fixed bank of regular-factor blobs at three dyadic scales.

    Scales run from a third of the domain down to R_max/30 so the bank
    probes both the core region of a pinned minimizer and the midrange,
    not only the domain scale.
    """
    R = grid.R_max
    RR, ZZ = np.meshgrid(grid.r_nodes, grid.z_nodes, indexing="ij")
    bank = []
    for s in (R / 3.0, R / 10.0, R / 30.0):
        for (cr, cz, w) in [
            (0.0, 0.6, 0.3),
            (0.6, 0.3, 0.3),
            (0.25, 1.2, 0.45),
        ]:
            vals = np.exp(
                -(((RR - cr * s) ** 2 + (ZZ - cz * s) ** 2) / (w * s) ** 2)
            )
            bank.append(vals)
    return bank


def el_residual(field, table):
    """Sup over a test bank of the weak-form defect, normalized by the
    energy norms of both the test function and the field itself, so the
    result is dimensionless and dilation invariant."""
    _check_pair(field, table, want_energy=True)
    if not np.any(field.regular_values):
        return 0.0
    grid = field.grid
    form = assemble(grid, table, field.sigma)
    p = critical_p(grid.n, field.sigma)
    e_u = form.energy(field.regular_values)
    # mass and its variation use the same cell-wise Gauss quadrature as the
    # norm itself, so a discrete critical point has a small defect
    mass = _interior_mass(field, p)
    if mass <= 0:
        return 0.0
    mu = e_u / (sphere_surface(grid.n - 2) * mass)
    gmass = _interior_mass_grad(field, p)
    worst = 0.0
    for phi in _test_bank(grid, field.sigma):
        a_up = form.bilinear(field.regular_values, phi)
        rhs = mu * sphere_surface(grid.n - 2) / p * float(np.vdot(gmass, phi))
        norm = np.sqrt(max(form.energy(phi), 1e-300))
        worst = max(worst, abs(a_up - rhs) / norm)
    return worst / np.sqrt(max(e_u, 1e-300))


def brute_force_seminorm(
    u, n, sigma, support_radius, samples=2_000_000, seed=0, rho0=None, chunk=250_000
):
    """Monte Carlo oracle for the full 2n-dimensional double integral.

    u maps an (m, n) array of half-space points to values and must be
    compactly supported within |x| < support_radius.  Pair sampling: x uniform
    in the support box, the separation from an isotropic two-piece radial
    mixture matched to the kernel singularity; returns (estimate, stderr).
    """
    rng = np.random.default_rng(seed)
    Rb = float(support_radius)
    probe = rng.uniform(-3 * Rb, 3 * Rb, size=(200, n))
    probe[:, -1] = np.abs(probe[:, -1])
    far = np.linalg.norm(probe, axis=1) > 1.2 * Rb
    if np.any(np.abs(u(probe[far])) > 0):
        raise NonCompactSupport("oracle requires compact support")
    if rho0 is None:
        rho0 = 0.5 * Rb
    vol_box = (2.0 * Rb) ** (n - 1) * Rb
    sph = sphere_surface(n - 1)
    p_exp = n + 2 * sigma
    total, total2, m_done = 0.0, 0.0, 0

    while m_done < samples:
        m = min(chunk, samples - m_done)
        x = rng.uniform(-Rb, Rb, size=(m, n))
        x[:, -1] = 0.5 * (x[:, -1] + Rb)  # uniform in (0, Rb)
        w = rng.normal(size=(m, n))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        pick = rng.random(m) < 0.5
        uu = rng.random(m)
        rho = np.where(
            pick,
            rho0 * uu ** (1.0 / (2.0 - 2.0 * sigma)),
            rho0 * np.maximum(uu, 1e-300) ** (-1.0 / (2.0 * sigma)),
        )
        pdf = 0.5 * np.where(
            rho <= rho0,
            (2.0 - 2.0 * sigma) * rho ** (1.0 - 2.0 * sigma) / rho0 ** (2.0 - 2.0 * sigma),
            2.0 * sigma * rho0 ** (2.0 * sigma) * rho ** (-1.0 - 2.0 * sigma),
        )
        y = x + rho[:, None] * w
        in_half = y[:, -1] > 0
        in_box = in_half & np.all(np.abs(y[:, :-1]) <= Rb, axis=1) & (y[:, -1] <= Rb)
        uy = np.zeros(m)
        if np.any(in_half):
            uy[in_half] = u(y[in_half])
        du = u(x) - uy
        f = du * du * rho ** (-p_exp)
        wgt = vol_box * sph * rho ** (n - 1) / pdf
        est = np.where(in_half, f * wgt * (2.0 - in_box), 0.0)
        total += est.sum()
        total2 += (est ** 2).sum()
        m_done += m
    mean = total / m_done
    var = max(total2 / m_done - mean ** 2, 0.0)
    return mean, np.sqrt(var / m_done)

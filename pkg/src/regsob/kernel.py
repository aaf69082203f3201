"""Angular reduction and tabulation of the singular pair interaction kernel.

For fields on the half-space that depend only on (|x'|, x_n), the 2n-dimensional
interaction |xi - zeta|^(-p) reduces to a three-variable kernel

    K_p(r, s, t) = integral over S^(n-2) of (r^2 + s^2 - 2 r s w_1 + t^2)^(-p/2)

where r, s are horizontal radii and t is the vertical difference.  The module
evaluates K_p for any dimension n >= 2 and tabulates it on a grid.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import roots_jacobi, roots_legendre

from .errors import DiagonalSingularity, InvalidParams, OutOfMemoryEstimate

# Nodes per panel of the composite rule; 12-point Gauss on a dyadic panel of
# m^(-p/2) is accurate to ~1e-14, which dominates the error budget.
_PANEL_NODES = 12
_MAX_PANELS = 48


def sphere_surface(d):
    """Surface measure of the unit sphere S^d in R^(d+1)."""
    if d < 0:
        raise InvalidParams(f"sphere dimension must be >= 0, got {d}")
    return 2.0 * np.pi ** ((d + 1) / 2.0) / gamma_fn((d + 1) / 2.0)


@dataclass(frozen=True)
class KernelParams:
    """Dimension, order and exponent of the reduced kernel.

    The exponent p is constrained to the two values used by the energy
    (p = n + 2*sigma) and by the curvature coefficient (p = n + 2*sigma + 2).
    """

    n: int
    sigma: float
    p: float

    def __post_init__(self):
        if self.n < 2 or int(self.n) != self.n:
            raise InvalidParams(f"n must be an integer >= 2, got {self.n}")
        if not (0.5 < self.sigma < 1.0):
            raise InvalidParams(f"sigma must lie in (1/2, 1), got {self.sigma}")
        allowed = (self.n + 2 * self.sigma, self.n + 2 * self.sigma + 2)
        if not any(abs(self.p - a) < 1e-12 for a in allowed):
            raise InvalidParams(
                f"p must be n + 2*sigma or n + 2*sigma + 2, got {self.p}"
            )

    @classmethod
    def energy(cls, n, sigma):
        return cls(n, sigma, n + 2 * sigma)

    @classmethod
    def curvature(cls, n, sigma):
        return cls(n, sigma, n + 2 * sigma + 2)

    @property
    def is_energy(self):
        return abs(self.p - (self.n + 2 * self.sigma)) < 1e-12


def _jacobi_rule(n, a, b):
    x, w = roots_jacobi(n, a, b)
    return x, w


def _closed_form_d2(p, c, rs):
    """Exact angle integral over S^2: elementary antiderivative in m."""
    q = p / 2.0
    lo = c - 2.0 * rs
    hi = c + 2.0 * rs
    return (2.0 * np.pi) * (lo ** (1.0 - q) - hi ** (1.0 - q)) / ((q - 1.0) * 2.0 * rs)


def _composite_moment(p, m0, m1, alpha):
    """integral_{m0}^{m1} m^(-p/2) ((m - m0)(m1 - m))^alpha dm, vectorized.

    Splits dyadically away from the peak at m = m0; the singular endpoint
    factors are absorbed into Gauss-Jacobi weights on the first/last panels.
    """
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    T = m1 - m0
    out = np.zeros_like(m0)
    mild = T <= 2.0 * m0
    peaked = ~mild

    q = p / 2.0

    if np.any(mild):
        a = m0[mild]
        tt = T[mild]
        x, w = _jacobi_rule(_PANEL_NODES, alpha, alpha)
        tau = tt[:, None] * (x[None, :] + 1.0) / 2.0
        g = (a[:, None] + tau) ** (-q)
        out[mild] = (tt / 2.0) ** (2.0 * alpha + 1.0) * (g @ w)

    if np.any(peaked):
        a = m0[peaked]
        tt = T[peaked]
        acc = np.zeros_like(a)
        # first panel [0, m0]: left-endpoint weight tau^alpha
        xj, wj = _jacobi_rule(_PANEL_NODES, 0.0, alpha)
        h = a
        tau = h[:, None] * (xj[None, :] + 1.0) / 2.0
        f = (a[:, None] + tau) ** (-q) * (tt[:, None] - tau) ** alpha
        acc += (h / 2.0) ** (alpha + 1.0) * (f @ wj)
        # dyadic middle panels [m0 2^k, m0 2^(k+1)] clipped to [m0, T/2]
        xg, wg = roots_legendre(_PANEL_NODES)
        half = tt / 2.0
        for k in range(_MAX_PANELS):
            lo = np.minimum(a * 2.0 ** k, half)
            hi = np.minimum(a * 2.0 ** (k + 1), half)
            width = hi - lo
            if not np.any(width > 0):
                break
            tau = lo[:, None] + width[:, None] * (xg[None, :] + 1.0) / 2.0
            f = tau ** alpha * (tt[:, None] - tau) ** alpha * (a[:, None] + tau) ** (-q)
            acc += (width / 2.0) * (f @ wg)
        # last panel [T/2, T]: right-endpoint weight (T - tau)^alpha
        xj, wj = _jacobi_rule(_PANEL_NODES, alpha, 0.0)
        tau = half[:, None] + half[:, None] * (xj[None, :] + 1.0) / 2.0
        f = tau ** alpha * (a[:, None] + tau) ** (-q)
        acc += (half / 2.0) ** (alpha + 1.0) * (f @ wj)
        out[peaked] = acc
    return out


def kernel_values(r, s, t, params):
    """Vectorized K_p on broadcasted arrays; the caller guarantees that no
    element sits exactly on the diagonal singularity."""
    r, s, t = np.broadcast_arrays(
        np.asarray(r, dtype=float), np.asarray(s, dtype=float), np.asarray(t, dtype=float)
    )
    n, p = params.n, params.p
    d = n - 2
    c = r * r + s * s + t * t
    rs = r * s
    m0 = (r - s) ** 2 + t * t
    m1 = (r + s) ** 2 + t * t
    if np.any(m0 == 0.0):
        raise DiagonalSingularity("kernel evaluated at r = s, t = 0")

    out = np.empty_like(c)
    axis_free = rs == 0.0
    if np.any(axis_free):
        out[axis_free] = sphere_surface(d) * c[axis_free] ** (-p / 2.0)
    rest = ~axis_free
    if np.any(rest):
        if d == 0:
            out[rest] = m0[rest] ** (-p / 2.0) + m1[rest] ** (-p / 2.0)
        elif d == 2:
            out[rest] = _closed_form_d2(p, c[rest], rs[rest])
        else:
            alpha = (d - 2) / 2.0
            J = _composite_moment(p, m0[rest], m1[rest], alpha)
            out[rest] = (
                sphere_surface(d - 1) * (2.0 * rs[rest]) ** (-(d - 1)) * J
            )
    return out


def angular_kernel(r, s, t, params):
    """Angle-averaged interaction kernel K_p(r, s, t).

    Symmetric in (r, s) and even in t; scales as lambda^(-p) under joint
    dilation.  Raises DiagonalSingularity at r = s, t = 0.
    """
    if r < 0 or s < 0:
        raise InvalidParams("radii must be nonnegative")
    if (r - s) ** 2 + t * t == 0.0:
        raise DiagonalSingularity(f"(r, s, t) = ({r}, {s}, {t}) is on the diagonal")
    return float(kernel_values(r, s, t, params))


def kernel_values_excluded(r, s, t, params, m_lo):
    """K_p restricted to squared separations >= m_lo (used for the
    principal-value exclusion ball).  Vectorized; elements whose full range
    lies below m_lo contribute 0."""
    r, s, t = np.broadcast_arrays(
        np.asarray(r, dtype=float), np.asarray(s, dtype=float), np.asarray(t, dtype=float)
    )
    n, p = params.n, params.p
    d = n - 2
    c = r * r + s * s + t * t
    rs = r * s
    m1 = (r + s) ** 2 + t * t
    m0 = (r - s) ** 2 + t * t
    out = np.zeros_like(c)

    gone = m1 <= m_lo
    full = m0 >= m_lo
    keep_full = full & ~gone
    if np.any(keep_full):
        out[keep_full] = kernel_values(r[keep_full], s[keep_full], t[keep_full], params)
    part = ~full & ~gone
    if np.any(part):
        rp, sp, tp = r[part], s[part], t[part]
        cp = c[part]
        rsp = rs[part]
        # angle range with separation >= sqrt(m_lo): cos(phi) <= (c - m_lo)/(2 r s)
        if d == 0:
            out[part] = np.where(m1[part] >= m_lo, m1[part] ** (-p / 2.0), 0.0)
        elif d == 2:
            q = p / 2.0
            lo = np.maximum(m0[part], m_lo)
            hi = m1[part]
            out[part] = (
                2.0 * np.pi * (lo ** (1.0 - q) - hi ** (1.0 - q)) / ((q - 1.0) * 2.0 * rsp)
            )
        else:
            # shifted lower endpoint kills the left singular weight; a plain
            # dyadic composite from the new endpoint suffices
            alpha = (d - 2) / 2.0
            lo = np.maximum(m0[part], m_lo)
            vals = np.zeros_like(cp)
            xg, wg = roots_legendre(_PANEL_NODES)
            m0p = m0[part]
            m1p = m1[part]
            gap0 = lo - m0p
            for k in range(_MAX_PANELS):
                a_k = np.minimum(lo + gap0 * (2.0 ** k - 1.0), m1p)
                b_k = np.minimum(lo + gap0 * (2.0 ** (k + 1) - 1.0), m1p)
                width = b_k - a_k
                if not np.any(width > 0):
                    break
                m = a_k[:, None] + width[:, None] * (xg[None, :] + 1.0) / 2.0
                f = (
                    m ** (-p / 2.0)
                    * (m - m0p[:, None]) ** alpha
                    * np.maximum(m1p[:, None] - m, 0.0) ** alpha
                )
                vals += (width / 2.0) * (f @ wg)
            out[part] = sphere_surface(d - 1) * (2.0 * rsp) ** (-(d - 1)) * vals
    return out


@dataclass
class KernelTable:
    """Tabulated K_p over a grid's radii and vertical differences.

    t_nodes spans every signed pairwise difference of the grid's z nodes;
    values are filled for t >= 0 and reflected.  near_diag_mask flags entries
    inside the singular-cell neighbourhood; those are excluded from far-field
    sums and handled by the local cell quadrature in the energy module.
    """

    params: KernelParams
    r_nodes: np.ndarray
    s_nodes: np.ndarray
    t_nodes: np.ndarray
    values: np.ndarray
    near_diag_mask: np.ndarray
    grid_hash: str = ""
    t_tol: float = 0.0

    def t_index(self, t):
        """Index of a vertical difference in t_nodes (tolerance matched)."""
        return int(lookup_t(self.t_nodes, t, self.t_tol))

    def nbytes(self):
        return self.values.nbytes + self.near_diag_mask.nbytes

    def cache_key(self):
        h = hashlib.sha256()
        h.update(repr((self.params.n, self.params.sigma, self.params.p)).encode())
        h.update(self.grid_hash.encode())
        return h.hexdigest()[:16]


def grid_signature(grid):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(grid.r_nodes).tobytes())
    h.update(np.ascontiguousarray(grid.z_nodes).tobytes())
    h.update(repr(grid.n).encode())
    return h.hexdigest()[:16]


def grouped_t_nodes(z):
    """Signed pairwise z differences, deduplicated with a tolerance and
    mirrored exactly about 0.  Returns (t_nodes, tol)."""
    z = np.asarray(z, dtype=float)
    diffs = (z[:, None] - z[None, :]).ravel()
    scale = float(np.max(np.abs(diffs))) or 1.0
    tol = 1e-12 * scale
    pos = np.sort(diffs[diffs > tol])
    reps = []
    if pos.size:
        start = 0
        for k in range(1, pos.size + 1):
            if k == pos.size or pos[k] - pos[k - 1] > tol:
                reps.append(float(np.mean(pos[start:k])))
                start = k
    reps = np.asarray(reps)
    t_nodes = np.concatenate([-reps[::-1], [0.0], reps])
    return t_nodes, tol


def lookup_t(t_nodes, t, tol):
    """Nearest-node index for exact (up to rounding) z differences."""
    t = np.asarray(t, dtype=float)
    idx = np.clip(np.searchsorted(t_nodes, t), 1, t_nodes.size - 1)
    left = idx - 1
    idx = np.where(np.abs(t_nodes[left] - t) <= np.abs(t_nodes[idx] - t), left, idx)
    if np.any(np.abs(t_nodes[idx] - t) > 10 * tol + 1e-300):
        raise InvalidParams("z difference not represented in the table")
    return idx


def build_kernel_table(grid, params, max_bytes=4 << 30):
    """Tabulate K_p at all (r_i, s_j, z_k - z_l) of a half-space grid.

    Entries whose generating node pairs are all index-adjacent (the singular
    cell neighbourhood) are flagged in near_diag_mask; the exactly singular
    entries (r_i = s_j with t = 0) are stored as 0 under the mask.
    """
    if params.n != grid.n:
        raise InvalidParams(
            f"kernel dimension {params.n} does not match grid dimension {grid.n}"
        )
    r = grid.r_nodes
    z = grid.z_nodes
    t_nodes, tol = grouped_t_nodes(z)
    nr, nt = r.size, t_nodes.size
    est = nr * nr * nt * 9  # float64 values + bool mask
    if est > max_bytes:
        raise OutOfMemoryEstimate(
            f"kernel table would need ~{est / 1e9:.2f} GB "
            f"({nr}x{nr}x{nt}); limit is {max_bytes / 1e9:.2f} GB"
        )

    # t values produced by at least one index-adjacent z pair
    t_adjacent = np.zeros(nt, dtype=bool)
    for j in range(z.size):
        for l in (j - 1, j, j + 1):
            if 0 <= l < z.size:
                t_adjacent[int(lookup_t(t_nodes, z[j] - z[l], tol))] = True

    r_adjacent = np.zeros((nr, nr), dtype=bool)
    for i in range(nr):
        for j in (i - 1, i, i + 1):
            if 0 <= j < nr:
                r_adjacent[i, j] = True
    mask = r_adjacent[:, :, None] & t_adjacent[None, None, :]

    # evaluate for t >= 0 and reflect (kernel even in t)
    values = np.zeros((nr, nr, nt), dtype=float)
    nonneg = np.where(t_nodes >= 0.0)[0]
    R3 = np.broadcast_to(r[:, None, None], (nr, nr, nonneg.size))
    S3 = np.broadcast_to(r[None, :, None], (nr, nr, nonneg.size))
    T3 = np.broadcast_to(t_nodes[nonneg][None, None, :], (nr, nr, nonneg.size))
    singular = (R3 == S3) & (T3 == 0.0)
    flat_ok = ~singular.ravel()
    vals = np.zeros(R3.size, dtype=float)
    vals[flat_ok] = kernel_values(
        R3.ravel()[flat_ok], S3.ravel()[flat_ok], T3.ravel()[flat_ok], params
    )
    values[:, :, nonneg] = vals.reshape(R3.shape)
    neg = np.where(t_nodes < 0.0)[0]
    if neg.size:
        # each -t has a matching +t entry
        pos_sorted = t_nodes[nonneg]
        match = np.searchsorted(pos_sorted, -t_nodes[neg])
        values[:, :, neg] = values[:, :, nonneg[match]]

    return KernelTable(
        params=params,
        r_nodes=r.copy(),
        s_nodes=r.copy(),
        t_nodes=t_nodes,
        values=values,
        near_diag_mask=mask,
        grid_hash=grid_signature(grid),
        t_tol=tol,
    )


def t_index_map(table, grid):
    """idx[j, l] such that table.t_nodes[idx[j, l]] matches z_j - z_l."""
    z = grid.z_nodes
    diffs = z[:, None] - z[None, :]
    return lookup_t(table.t_nodes, diffs, table.t_tol)


def save_table(table, path):
    """Persist a kernel table in the binary container format."""
    from . import io_container

    header = {
        "kind": "kernel_table",
        "n": table.params.n,
        "sigma": table.params.sigma,
        "p": table.params.p,
        "grid_hash": table.grid_hash,
        "t_tol": table.t_tol,
    }
    arrays = {
        "r_nodes": table.r_nodes,
        "s_nodes": table.s_nodes,
        "t_nodes": table.t_nodes,
        "values": table.values,
        "near_diag_mask": table.near_diag_mask.astype(float),
    }
    io_container.write_container(path, header, arrays)


def load_table(path):
    from . import io_container

    header, arrays = io_container.read_container(path)
    return KernelTable(
        params=KernelParams(
            n=int(header["n"]), sigma=float(header["sigma"]), p=float(header["p"])
        ),
        r_nodes=arrays["r_nodes"],
        s_nodes=arrays["s_nodes"],
        t_nodes=arrays["t_nodes"],
        values=arrays["values"],
        near_diag_mask=arrays["near_diag_mask"].astype(bool),
        grid_hash=str(header["grid_hash"]),
        t_tol=float(header["t_tol"]),
    )

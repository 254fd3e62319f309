"""Closed-form trigonometric moments of Gaussian variables.

For x ~ N(mu, var) the first moments are

    E[sin x] = exp(-var/2) sin(mu)
    E[cos x] = exp(-var/2) cos(mu)

and the second moments

    E[sin^2 x]     = (1 - exp(-2 var) cos(2 mu)) / 2
    E[cos^2 x]     = (1 + exp(-2 var) cos(2 mu)) / 2
    E[sin x cos x] = exp(-2 var) sin(2 mu) / 2.

Harmonics follow because k*x is again Gaussian with mean k*mu and
variance k^2*var, and joint moments of sines/cosines of two correlated
Gaussians reduce to first moments of their sum and difference through
product-to-sum identities. These identities drive every squashing and
angle-augmentation computation in the package.
"""

from __future__ import annotations

import numpy as np

from .chain import assemble_jacobian
from .errors import DomainError, NotPsdError
from .validation import check_square, check_vector, symmetrize


def trig_moments(mu, var, k=1):
    """E[sin(k x)] and E[cos(k x)] for x ~ N(mu, var).

    Returns (e_sin, e_cos). Inputs may be scalars or arrays.
    """
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise DomainError("variance must be nonnegative")
    damp = np.exp(-0.5 * k * k * var)
    return damp * np.sin(k * mu), damp * np.cos(k * mu)


def trig_second_moments(mu, var):
    """E[sin^2 x], E[cos^2 x], E[sin x cos x] for x ~ N(mu, var)."""
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise DomainError("variance must be nonnegative")
    damp = np.exp(-2.0 * var)
    c2 = damp * np.cos(2.0 * mu)
    e_sin2 = 0.5 * (1.0 - c2)
    e_cos2 = 0.5 * (1.0 + c2)
    e_sincos = 0.5 * damp * np.sin(2.0 * mu)
    return e_sin2, e_cos2, e_sincos


def joint_trig_cross_moment(mean, cov, harmonics=(1, 1)):
    """E[sin(k_a z_a) * sin(k_b z_b)] for jointly Gaussian (z_a, z_b).

    Product-to-sum reduction: sin A sin B = (cos(A - B) - cos(A + B)) / 2,
    and both A -/+ B are Gaussian again.
    """
    mean = check_vector(mean, "mean", size=2)
    cov = check_square(cov, "cov", size=2)
    cov = symmetrize(cov)
    ka, kb = harmonics
    va = ka * ka * cov[0, 0]
    vb = kb * kb * cov[1, 1]
    vab = ka * kb * cov[0, 1]
    if cov[0, 0] < 0 or cov[1, 1] < 0 or (
            cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2 < -1e-12 * max(
                1.0, cov[0, 0] * cov[1, 1])):
        raise NotPsdError("joint covariance is not positive semidefinite")
    ma = ka * mean[0]
    mb = kb * mean[1]
    _, cos_diff = trig_moments(ma - mb, va + vb - 2 * vab)
    _, cos_sum = trig_moments(ma + mb, va + vb + 2 * vab)
    return 0.5 * (cos_diff - cos_sum)


def _pair_cov_blocks(ma, mb, va, vb, vab):
    """Covariances of (sin z_a, cos z_a) with (sin z_b, cos z_b).

    Returns (ss, cc, sc, cs) where sc = cov[sin z_a, cos z_b]. The shared
    structure: with h = exp(-(va+vb)/2), ep = exp(vab), em = exp(-vab),

        ss = h [ (ep-1) cos(ma-mb) - (em-1) cos(ma+mb) ] / 2
        cc = h [ (ep-1) cos(ma-mb) + (em-1) cos(ma+mb) ] / 2
        sc = h [ (ep-1) sin(ma-mb) + (em-1) sin(ma+mb) ] / 2
        cs = h [-(ep-1) sin(ma-mb) + (em-1) sin(ma+mb) ] / 2
    """
    h = np.exp(-0.5 * (va + vb))
    ep = np.expm1(vab)
    em = np.expm1(-vab)
    cd, cs_ = np.cos(ma - mb), np.cos(ma + mb)
    sd, ss_ = np.sin(ma - mb), np.sin(ma + mb)
    ss = 0.5 * h * (ep * cd - em * cs_)
    cc = 0.5 * h * (ep * cd + em * cs_)
    sc = 0.5 * h * (ep * sd + em * ss_)
    cs = 0.5 * h * (-ep * sd + em * ss_)
    return ss, cc, sc, cs


def _pair_cov_partials(ma, mb, va, vb, vab):
    """Partials of the four pair-covariance blocks.

    Returns a dict mapping block name to a tuple of derivatives with
    respect to (ma, mb, va, vb, vab).
    """
    h = np.exp(-0.5 * (va + vb))
    ep = np.expm1(vab)
    em = np.expm1(-vab)
    dep = np.exp(vab)
    dem = -np.exp(-vab)
    cd, csum = np.cos(ma - mb), np.cos(ma + mb)
    sd, ssum = np.sin(ma - mb), np.sin(ma + mb)
    ss, cc, sc, cs = _pair_cov_blocks(ma, mb, va, vb, vab)

    out = {}
    out["ss"] = (
        0.5 * h * (-ep * sd + em * ssum),         # d/dma
        0.5 * h * (ep * sd + em * ssum),          # d/dmb
        -0.5 * ss, -0.5 * ss,                     # d/dva, d/dvb
        0.5 * h * (dep * cd - dem * csum),        # d/dvab
    )
    out["cc"] = (
        0.5 * h * (-ep * sd - em * ssum),
        0.5 * h * (ep * sd - em * ssum),
        -0.5 * cc, -0.5 * cc,
        0.5 * h * (dep * cd + dem * csum),
    )
    out["sc"] = (
        0.5 * h * (ep * cd + em * csum),
        0.5 * h * (-ep * cd + em * csum),
        -0.5 * sc, -0.5 * sc,
        0.5 * h * (dep * sd + dem * ssum),
    )
    out["cs"] = (
        0.5 * h * (-ep * cd + em * csum),
        0.5 * h * (ep * cd + em * csum),
        -0.5 * cs, -0.5 * cs,
        0.5 * h * (-dep * sd + dem * ssum),
    )
    return out


def augment_with_trig(mean, cov, angle_dims):
    """Joint Gaussian over [x, sin(x_i), cos(x_i) for i in angle_dims].

    Given x ~ N(mean, cov), computes the exact first two moments of the
    augmented vector and the flat Jacobian of those moments with respect
    to (mean, cov). Raw-to-trig covariances use the exact Gaussian
    identities cov[x_j, sin z] = cov[x_j, z] E[cos z] and
    cov[x_j, cos z] = -cov[x_j, z] E[sin z]; trig-to-trig covariances use
    the pair formulas in `_pair_cov_blocks`.

    Returns (mean_aug, cov_aug, jac) with jac in `chain` layout, mapping
    flat input moments (d + d^2) to flat output moments.
    """
    mean = check_vector(mean, "mean")
    cov = symmetrize(check_square(cov, "cov", size=mean.shape[0]))
    d = mean.shape[0]
    angle_dims = list(angle_dims)
    k = len(angle_dims)
    da = d + 2 * k

    m_ang = mean[angle_dims]
    v_ang = cov[angle_dims, angle_dims]
    if np.any(v_ang < 0):
        raise DomainError("angle variances must be nonnegative")
    e_sin, e_cos = trig_moments(m_ang, v_ang)

    mean_aug = np.zeros(da)
    mean_aug[:d] = mean
    mean_aug[d::2] = e_sin
    mean_aug[d + 1::2] = e_cos

    cov_aug = np.zeros((da, da))
    cov_aug[:d, :d] = cov

    # raw-to-trig: cov[x, sin z_a] = cov[x, z_a] E[cos z_a], etc.
    for a, ia in enumerate(angle_dims):
        cov_aug[:d, d + 2 * a] = cov[:, ia] * e_cos[a]
        cov_aug[:d, d + 2 * a + 1] = -cov[:, ia] * e_sin[a]
    cov_aug[d:, :d] = cov_aug[:d, d:].T

    # trig-to-trig blocks
    for a in range(k):
        for b in range(k):
            vab = cov[angle_dims[a], angle_dims[b]]
            ss, cc, sc, cs = _pair_cov_blocks(
                m_ang[a], m_ang[b], v_ang[a], v_ang[b], vab)
            cov_aug[d + 2 * a, d + 2 * b] = ss
            cov_aug[d + 2 * a + 1, d + 2 * b + 1] = cc
            cov_aug[d + 2 * a, d + 2 * b + 1] = sc
            cov_aug[d + 2 * a + 1, d + 2 * b] = cs
    cov_aug = symmetrize(cov_aug)

    jac = _augment_jacobian(mean, cov, angle_dims, e_sin, e_cos)
    return mean_aug, cov_aug, jac


def _augment_jacobian(mean, cov, angle_dims, e_sin, e_cos):
    d = mean.shape[0]
    k = len(angle_dims)
    da = d + 2 * k
    m_ang = mean[angle_dims]
    v_ang = cov[angle_dims, angle_dims]

    dm_dm = np.zeros((da, d))
    dm_dv = np.zeros((da, d, d))
    dv_dm = np.zeros((da, da, d))
    dv_dv = np.zeros((da, da, d, d))

    dm_dm[:d, :] = np.eye(d)
    for a, ia in enumerate(angle_dims):
        rs, rc = d + 2 * a, d + 2 * a + 1
        dm_dm[rs, ia] = e_cos[a]
        dm_dm[rc, ia] = -e_sin[a]
        dm_dv[rs, ia, ia] = -0.5 * e_sin[a]
        dm_dv[rc, ia, ia] = -0.5 * e_cos[a]

    # raw-raw block: identity on symmetric matrices
    for p in range(d):
        for q in range(d):
            if p == q:
                dv_dv[p, p, p, p] = 1.0
            else:
                dv_dv[p, q, p, q] = 0.5
                dv_dv[p, q, q, p] = 0.5

    def add_dv(r, s, i, j, val):
        # symmetrized accumulation into d cov_aug[r,s] / d cov[i,j]
        if i == j:
            dv_dv[r, s, i, i] += val
        else:
            dv_dv[r, s, i, j] += 0.5 * val
            dv_dv[r, s, j, i] += 0.5 * val

    # raw-to-trig rows/columns
    for a, ia in enumerate(angle_dims):
        cs_col, cc_col = d + 2 * a, d + 2 * a + 1
        de_sin_dm = e_cos[a]
        de_cos_dm = -e_sin[a]
        de_sin_dv = -0.5 * e_sin[a]
        de_cos_dv = -0.5 * e_cos[a]
        for j in range(d):
            vj = cov[j, ia]
            # cov[x_j, sin] = vj * e_cos
            add_dv(j, cs_col, j, ia, e_cos[a])
            dv_dm[j, cs_col, ia] += vj * de_cos_dm
            add_dv(j, cs_col, ia, ia, vj * de_cos_dv)
            # cov[x_j, cos] = -vj * e_sin
            add_dv(j, cc_col, j, ia, -e_sin[a])
            dv_dm[j, cc_col, ia] += -vj * de_sin_dm
            add_dv(j, cc_col, ia, ia, -vj * de_sin_dv)
            dv_dm[cs_col, j] = dv_dm[j, cs_col]
            dv_dm[cc_col, j] = dv_dm[j, cc_col]
            dv_dv[cs_col, j] = dv_dv[j, cs_col]
            dv_dv[cc_col, j] = dv_dv[j, cc_col]

    # trig-to-trig blocks
    for a in range(k):
        for b in range(k):
            ia, ib = angle_dims[a], angle_dims[b]
            vab = cov[ia, ib]
            partials = _pair_cov_partials(
                m_ang[a], m_ang[b], v_ang[a], v_ang[b], vab)
            rows = {"ss": (d + 2 * a, d + 2 * b),
                    "cc": (d + 2 * a + 1, d + 2 * b + 1),
                    "sc": (d + 2 * a, d + 2 * b + 1),
                    "cs": (d + 2 * a + 1, d + 2 * b)}
            for name, (r, s) in rows.items():
                dma, dmb, dva, dvb, dvab = partials[name]
                dv_dm[r, s, ia] += dma
                dv_dm[r, s, ib] += dmb
                add_dv(r, s, ia, ia, dva)
                add_dv(r, s, ib, ib, dvb)
                add_dv(r, s, ia, ib, dvab)

    return assemble_jacobian(dm_dm, dm_dv, dv_dm, dv_dv)

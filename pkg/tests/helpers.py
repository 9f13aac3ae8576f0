"""Shared test oracles."""
import math

import numpy as np

from ptx.estimators import ipw_weights


def eif_unit(r, a, c, y, pi, rho, p1, p0, mu11, mu00):
    """Scalar transcription of the influence-function terms for one unit.

    Written out term by term without the vectorised helper, as an
    independent check on ``compute_eif_terms``.
    """
    e = p1 - p0
    in1 = 1.0 if (r == 1 and a == 1) else 0.0
    in0 = 1.0 if (r == 1 and a == 0) else 0.0
    d1 = pi * rho
    d0 = (1.0 - pi) * rho
    yc = y * c if in1 else 0.0
    cc = c if (in1 or in0) else 0.0
    y0 = y * (1 - c) if in0 else 0.0

    psi_yc_1 = in1 * (yc - mu11 * p1) / d1 + mu11 * p1
    psi_c_1 = in1 * (cc - p1) / d1 + p1
    psi_c_0 = in0 * (cc - p0) / d0 + p0
    psi_notc_1 = in1 * ((1 - cc) - (1 - p1)) / d1 + (1 - p1)
    psi_notc_0 = in0 * ((1 - cc) - (1 - p0)) / d0 + (1 - p0)
    psi_y_notc_0 = in0 * (y0 - mu00 * (1 - p0)) / d0 + mu00 * (1 - p0)
    psi_notr = (1 - r) - (1 - rho)

    phi1 = e / p1 * (1 - rho) * psi_yc_1
    phi1 -= mu11 * (1 - rho) * (psi_c_0 - p0 / p1 * psi_c_1)
    phi1 += e * psi_notr * mu11
    phi0 = e / (1 - p0) * (1 - rho) * psi_y_notc_0
    phi0 -= mu00 * (1 - rho) * (psi_notc_1 - psi_notc_0 * (1 - p1) / (1 - p0))
    phi0 += e * psi_notr * mu00
    lam = (psi_c_1 - psi_c_0) * (1 - rho) + e * psi_notr
    return phi1, phi0, lam


def ratio_se(num, den):
    """Delta-method standard error of mean(num)/mean(den)."""
    num = np.asarray(num, float)
    den = np.asarray(den, float)
    tau = num.mean() / den.mean()
    infl = (num - tau * den) / den.mean()
    return math.sqrt(np.mean(infl**2) / num.size)


def mc_standard_errors(dataset, nu):
    """Linearisation standard errors of the plug-in, Hajek IPW and OM
    estimators (nuisances held fixed)."""
    e = nu.p1 - nu.p0
    r = dataset.r.astype(float)
    _, _, y = dataset.filled()
    plug = ratio_se(e * (1 - nu.rho) * (nu.mu11 - nu.mu00), e * (1 - nu.rho))
    om = ratio_se(e * (1 - r) * (nu.mu11 - nu.mu00), e * (1 - r))
    w1, w0 = ipw_weights(dataset, nu)
    m1 = np.sum(w1 * y) / np.sum(w1)
    m0 = np.sum(w0 * y) / np.sum(w0)
    infl = w1 * (y - m1) / w1.mean() - w0 * (y - m0) / w0.mean()
    ipw = math.sqrt(np.mean(infl**2) / y.size)
    return {"plugin": plug, "ipw": ipw, "om": om}

"""Peak-height likelihood under the residue generator of :mod:`dnaprivacy.assay`.

A hypothesis is summarised on the panel grid by two moment arrays:
``S1`` (expected summed height per position, stutter included) and ``S2``
(sum of squared component means).  The height at a position is the sum of
independent Gamma components sharing one CV, approximated by the Gamma with
the same mean and variance; exact when a single component lands there.
Drop-in adds ``n ~ Poisson(dropin_rate * freq)`` further components per
position (Poisson thinning of the per-locus count), marginalised up to
:data:`MAX_DROPINS`.

All arrays broadcast over leading batch axes so that many hypotheses can be
scored against one residue in a single call.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammainc, gammaln, logsumexp

from .assay import EpgParams, Residue, Specimen, expected_allele_grid
from .genotype import FrequencyPanel

MAX_DROPINS = 2
_SERIES_TERMS = 40


@lru_cache(maxsize=32)
def _stutter_matrix(panel: FrequencyPanel) -> np.ndarray:
    """(L, P, P) matrix moving a value at position j to its stutter position."""
    grid = panel.grid
    L, P = grid.shape
    M = np.zeros((L, P, P))
    for i in range(L):
        for j in range(P):
            t = grid.stutter_to[i, j]
            if grid.valid[i, j] and t >= 0:
                M[i, j, t] = 1.0
    M.flags.writeable = False
    return M


def add_stutter(A: np.ndarray, Q: np.ndarray, panel: FrequencyPanel, ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """Turn allele-only moments (A, Q) into full position moments (S1, S2)."""
    if ratio == 0:
        return A, Q
    M = _stutter_matrix(panel)
    st = ratio * A
    S1 = A + np.einsum("...lp,lpq->...lq", st, M)
    S2 = Q + np.einsum("...lp,lpq->...lq", st * st, M)
    return S1, S2


def specimen_moments(specimen: Specimen, panel: FrequencyPanel, epg: EpgParams) -> tuple[np.ndarray, np.ndarray]:
    A, Q = expected_allele_grid(specimen, panel, epg)
    return add_stutter(A, Q, panel, epg.stutter_ratio)


def _log_lower_gamma_series(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """log P(a, x) by the power series; used where gammainc underflows."""
    term = np.ones_like(a)
    total = np.ones_like(a)
    for k in range(1, _SERIES_TERMS):
        term = term * x / (a + k)
        total = total + term
    with np.errstate(divide="ignore"):
        return a * np.log(x) - x - gammaln(a + 1.0) + np.log(total)


def _gamma_logcdf(shape: np.ndarray, x: np.ndarray) -> np.ndarray:
    p = gammainc(shape, x)
    with np.errstate(divide="ignore"):
        out = np.log(p)
    small = p < 1e-280
    if np.any(small):
        out[small] = _log_lower_gamma_series(shape[small], x[small])
    return out


def _gamma_logpdf(h: np.ndarray, shape: np.ndarray, scale: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return (shape - 1.0) * np.log(h) - h / scale - gammaln(shape) - shape * np.log(scale)


def dropin_rates(panel: FrequencyPanel, epg: EpgParams) -> np.ndarray:
    return epg.dropin_rate * panel.grid.freq


def grid_loglik(
    heights: np.ndarray,
    off_grid: np.ndarray,
    S1: np.ndarray,
    S2: np.ndarray,
    panel: FrequencyPanel,
    epg: EpgParams,
) -> np.ndarray:
    """Per-locus log-likelihood, shape ``S1.shape[:-1]`` (batch..., L)."""
    cv = epg.peak_height_cv
    if cv <= 0:
        raise ValueError("likelihood needs peak_height_cv > 0")
    grid = panel.grid
    S1, S2 = np.broadcast_arrays(np.asarray(S1, float), np.asarray(S2, float))
    shape_full = S1.shape
    observed = np.broadcast_to(heights > 0, shape_full)
    h_full = np.broadcast_to(heights, shape_full)
    valid = np.broadcast_to(grid.valid, shape_full)
    lam = dropin_rates(panel, epg)
    lam_full = np.broadcast_to(lam, shape_full)
    mu = epg.dropin_mean
    at = epg.analytical_threshold
    cv2 = cv * cv

    terms = []
    for n in range(MAX_DROPINS + 1):
        if n == 0:
            log_pois = -lam_full
            live = valid
        else:
            live = valid & (lam_full > 0)
            with np.errstate(divide="ignore"):
                log_pois = -lam_full + n * np.log(np.where(lam_full > 0, lam_full, 1.0)) - math.lgamma(n + 1)
        s1 = S1 + n * mu
        s2 = S2 + n * mu * mu
        pos = live & (s1 > 0)
        val = np.full(shape_full, -np.inf)
        # nothing expected and nothing observed: probability one
        val[live & ~pos & ~observed] = 0.0
        m_obs = pos & observed
        m_abs = pos & ~observed
        if m_obs.any():
            a1, a2 = s1[m_obs], s2[m_obs]
            val[m_obs] = _gamma_logpdf(h_full[m_obs], a1 * a1 / (cv2 * a2), cv2 * a2 / a1)
        if m_abs.any():
            a1, a2 = s1[m_abs], s2[m_abs]
            if at > 0:
                val[m_abs] = _gamma_logcdf(a1 * a1 / (cv2 * a2), (at * a1 / (cv2 * a2)))
            else:
                val[m_abs] = -np.inf
        terms.append(val + log_pois)
    per_pos = logsumexp(np.stack(terms), axis=0)
    per_pos = np.where(grid.valid, per_pos, 0.0)
    out = per_pos.sum(axis=-1)
    return np.where(off_grid > 0, -np.inf, out)


def residue_loglik(residue: Residue, S1: np.ndarray, S2: np.ndarray, panel: FrequencyPanel,
                   epg: EpgParams, per_locus: bool = False) -> np.ndarray:
    heights, off = residue.dense(panel)
    ll = grid_loglik(heights, off, S1, S2, panel, epg)
    return ll if per_locus else ll.sum(axis=-1)


def specimen_loglik(residue: Residue, specimen: Specimen, panel: FrequencyPanel, epg: EpgParams) -> float:
    S1, S2 = specimen_moments(specimen, panel, epg)
    return float(residue_loglik(residue, S1, S2, panel, epg))


def log_likelihood_ratio(residue: Residue, hyp_a: Specimen, hyp_b: Specimen,
                         panel: FrequencyPanel, epg: EpgParams) -> float:
    """log L(a) - log L(b); exactly antisymmetric in (a, b)."""
    la = specimen_loglik(residue, hyp_a, panel, epg)
    lb = specimen_loglik(residue, hyp_b, panel, epg)
    return _diff(la, lb)


def _diff(la: float, lb: float) -> float:
    if la == lb:
        return 0.0
    return la - lb


def locus_peak_likelihood(
    observed: Iterable[tuple[int, float]],
    hypothesis: Sequence[tuple[tuple[int, int], float]],
    epg: EpgParams,
    panel: FrequencyPanel,
    locus: str,
) -> float:
    """Log-likelihood of one locus' peaks given contributor genotypes and masses.

    ``hypothesis`` is a list of ``((allele, allele), mass)``.
    """
    names = panel.locus_names
    i = names.index(locus)
    grid = panel.grid
    idx = grid.index[i]
    P = grid.shape[1]
    A = np.zeros(P)
    Q = np.zeros(P)
    for pair, mass in hypothesis:
        if not mass > 0:
            raise ValueError("hypothesis masses must be positive")
        for a in pair:
            if a not in panel.locus(locus).alleles:
                raise ValueError(f"allele {a} is not in the panel at {locus}")
        scale = mass * epg.mean_peak_height
        d = np.zeros(P)
        for a in pair:
            d[idx[a]] += 1.0
        A += scale * d
        Q += scale * scale * d * d
    heights = np.zeros(P)
    off = 0
    for a, h in observed:
        j = idx.get(int(a))
        if j is None:
            off += 1
        else:
            heights[j] = float(h)
    # lift the single locus into a full-panel call with every other locus empty
    L = grid.shape[0]
    A_full = np.zeros((L, P))
    Q_full = np.zeros((L, P))
    H_full = np.zeros((L, P))
    A_full[i], Q_full[i], H_full[i] = A, Q, heights
    off_full = np.zeros(L, dtype=np.int64)
    off_full[i] = off
    S1, S2 = add_stutter(A_full, Q_full, panel, epg.stutter_ratio)
    return float(grid_loglik(H_full, off_full, S1, S2, panel, epg)[i])

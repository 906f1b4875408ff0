"""Discrete-time survival: hazards, NLL loss, C-Index, Kaplan-Meier and RMST.

Time is measured in integer bins ``0..T-1``. A hazard ``h_t`` is the
probability of the event in bin ``t`` given survival to the start of ``t``.
"""

from __future__ import annotations

import warnings

import numpy as np

from .exceptions import ContractError, UndefinedMetricError
from .numerics import ag
from .validation import check_hazards, check_labels

HAZARD_EPS = 1e-7


class HazardClampWarning(RuntimeWarning):
    """Hazards touched 0 or 1 and were clamped before taking logs."""


def survival_from_hazards(h):
    """S(t) = prod_{s <= t} (1 - h_s), along the last axis."""
    h = check_hazards(h)
    return np.cumprod(1.0 - h, axis=-1)


def risk_score(h):
    """Negated expected survival mass, ``-sum_t S(t)``; higher is worse."""
    return -survival_from_hazards(h).sum(axis=-1)


def _label_masks(time_bin, event, n_bins):
    """Masks selecting log h_t (event bin) and log(1 - h_s) (survived bins)."""
    bins = np.arange(n_bins)
    event_mask = ((bins == time_bin) & bool(event)).astype(np.float64)
    survived = bins < time_bin if event else bins <= time_bin
    return event_mask, survived.astype(np.float64)


def _clamp(h):
    clamped = np.clip(h, HAZARD_EPS, 1.0 - HAZARD_EPS)
    if np.any(clamped != h):
        warnings.warn("hazards clamped to [1e-7, 1 - 1e-7]", HazardClampWarning, stacklevel=3)
    return clamped


def nll_loss(h, label):
    """Negative log-likelihood of one discrete-time survival label.

    Parameters
    ----------
    h : array-like, shape (T,)
        Hazards.
    label : SurvivalLabel or (time_bin, event)

    Returns
    -------
    float
        ``-[log h_t + sum_{s<t} log(1-h_s)]`` for an event at ``t``,
        ``-sum_{s<=t} log(1-h_s)`` for a subject censored at ``t``.
    """
    h = check_hazards(h)
    time_bin, event = int(label[0]), bool(label[1])
    if not 0 <= time_bin < h.shape[-1]:
        raise ContractError(f"time bin {time_bin} outside [0, {h.shape[-1]})")
    h = _clamp(h)
    event_mask, survived = _label_masks(time_bin, event, h.shape[-1])
    return float(-(np.log(h) @ event_mask + np.log1p(-h) @ survived))


def nll_loss_tensor(hazards, time_bin, event):
    """Differentiable NLL for a ``(1, T)`` hazard tensor."""
    n_bins = hazards.shape[-1]
    if not 0 <= time_bin < n_bins:
        raise ContractError(f"time bin {time_bin} outside [0, {n_bins})")
    if np.any((hazards.value < HAZARD_EPS) | (hazards.value > 1.0 - HAZARD_EPS)):
        warnings.warn("hazards clamped to [1e-7, 1 - 1e-7]", HazardClampWarning, stacklevel=2)
        hazards = ag.clip(hazards, HAZARD_EPS, 1.0 - HAZARD_EPS)
    event_mask, survived = _label_masks(time_bin, event, n_bins)
    ll = ag.sum(ag.log(hazards) * event_mask) + ag.sum(ag.log(1.0 - hazards) * survived)
    return -ll


def _c_index_counts(risks, time, event):
    """(2 x concordant mass, comparable pairs) as exact integers."""
    comparable = (time[:, None] < time[None, :]) & event[:, None]
    higher = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    n_pairs = int(comparable.sum())
    twice_conc = int(2 * (comparable & higher).sum() + (comparable & tied).sum())
    return twice_conc, n_pairs


def c_index(risks, labels):
    """Harrell's concordance index.

    A pair ``(i, j)`` is comparable when ``t_i < t_j`` and ``i`` had an event;
    pairs with tied observed times are excluded. Concordant pairs
    (``risk_i > risk_j``) count 1, risk ties count 0.5.

    Raises
    ------
    UndefinedMetricError
        If there are no comparable pairs.
    """
    risks = np.asarray(risks, dtype=np.float64).ravel()
    time, event = check_labels(labels)
    if risks.shape[0] != time.shape[0]:
        raise ContractError(f"{risks.shape[0]} risks for {time.shape[0]} labels")
    twice_conc, n_pairs = _c_index_counts(risks, time, event)
    if n_pairs == 0:
        raise UndefinedMetricError("no comparable pairs; C-Index undefined")
    return (twice_conc / 2) / n_pairs


def km_curve(labels, n_bins=None):
    """Kaplan-Meier survival per bin.

    ``S(t) = prod_{s<=t} (1 - d_s / n_s)`` where ``n_s`` counts subjects whose
    observed bin is ``>= s``; censored subjects leave after their bin.
    """
    time, event = check_labels(labels)
    if time.size == 0:
        raise ContractError("km_curve needs at least one label")
    n_bins = int(time.max()) + 1 if n_bins is None else n_bins
    if time.max() >= n_bins:
        raise ContractError(f"time bin {time.max()} outside [0, {n_bins})")
    deaths = np.bincount(time[event], minlength=n_bins).astype(np.float64)
    leaving = np.bincount(time, minlength=n_bins).astype(np.float64)
    at_risk = time.size - np.concatenate([[0.0], np.cumsum(leaving)[:-1]])
    factor = np.ones(n_bins)
    nonzero = at_risk > 0
    factor[nonzero] = 1.0 - deaths[nonzero] / at_risk[nonzero]
    return np.cumprod(factor)


def baseline_logit_hazard(time_bin, event, n_bins):
    """Logit of the smoothed pooled hazard per bin, ``(d_t + 0.5) / (n_t + 1)``.

    Used to start a hazard head at the marginal hazard rather than at 0.5,
    so the optimiser spends its budget on covariate effects.
    """
    time_bin = np.asarray(time_bin, dtype=np.int64)
    event = np.asarray(event, dtype=bool)
    deaths = np.bincount(time_bin[event], minlength=n_bins)[:n_bins].astype(np.float64)
    leaving = np.bincount(time_bin, minlength=n_bins)[:n_bins].astype(np.float64)
    at_risk = time_bin.size - np.concatenate([[0.0], np.cumsum(leaving)[:-1]])
    h = np.clip((deaths + 0.5) / (at_risk + 1.0), 1e-3, 1 - 1e-3)
    return np.log(h / (1.0 - h))


def rmst(curve, horizon):
    """Restricted mean survival time with unit-width bins.

    Left-endpoint rule with survival 1 before bin 0:
    ``RMST(h) = 1 + sum_{t=0}^{h-2} S(t)``.
    """
    curve = np.asarray(curve, dtype=np.float64)
    horizon = int(horizon)
    if horizon < 1:
        raise ContractError("RMST horizon must be >= 1")
    if horizon > curve.shape[0]:
        raise ContractError(f"horizon {horizon} exceeds curve length {curve.shape[0]}")
    return 1.0 + float(curve[: horizon - 1].sum())

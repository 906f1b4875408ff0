"""Synthetic multi-cancer cohorts with planted, known transferability.

Each patient draws a latent risk ``r ~ U(0, 1)``. Each of their slides holds
background instances ``N(offset_c, I)`` plus a Binomial number of
"prognostic" instances, with prevalence rising linearly in ``r``, that are
shifted by ``signal_strength`` along the cancer's signal dimensions. Event
times are Weibull with scale falling in ``r``; censoring is drawn
independently of ``r`` with probability ``censor_rate`` and moves the observed
bin uniformly into ``[0, event bin]``.

With ``nuisance`` on, every slide also carries instances shifted along the
other cancers' signal blocks, at a prevalence drawn independently of risk.
Such tissue is present but uninformative for this cancer, so a model only
transfers where the signal dimensions are actually shared.

Two cancers share prognostic knowledge exactly on ``shared_dims(S, T)``, the
overlap of their signal dimensions.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ..exceptions import ContractError
from ..validation import make_labels
from .data import Cohort, InstanceBag


def default_signal_dims(n_cancers, d, width=4):
    """Consecutive cancers share a block: (0, 1) overlap, (2, 3) overlap, ..."""
    dims = []
    for c in range(n_cancers):
        start = (c // 2) * width
        if start + width > d:
            raise ContractError(f"d={d} too small for {n_cancers} signal blocks of width {width}")
        dims.append(tuple(range(start, start + width)))
    return dims


def _per_cancer(value, n, name):
    if np.ndim(value) == 0:
        return [value] * n
    value = list(value)
    if len(value) != n:
        raise ContractError(f"{name} needs {n} entries, got {len(value)}")
    return value


@dataclass
class SynthSpec:
    n_cancers: int = 3
    n_patients: int | list = 400
    d: int = 32
    m_range: tuple = (20, 200)
    n_bins: int = 10
    signal_dims: list | None = None
    censor_rate: float | list = 0.3
    prevalence: tuple = (0.05, 0.5)
    signal_strength: float = 2.5
    risk_effect: float = 7.0
    weibull_shape: float = 3.0
    time_scale: float = 0.45
    multi_slide_rate: float = 0.1
    nuisance: bool = False
    cancer_shift: float | list = 0.0
    codes: list | None = None
    seed: int = 0

    def __post_init__(self):
        if self.signal_dims is None:
            self.signal_dims = default_signal_dims(self.n_cancers, self.d)
        self.signal_dims = [tuple(int(i) for i in dims) for dims in self.signal_dims]
        if self.codes is None:
            self.codes = [f"SYN{c}" for c in range(self.n_cancers)]
        self.codes = list(self.codes)
        if len(self.signal_dims) != self.n_cancers or len(self.codes) != self.n_cancers:
            raise ContractError("signal_dims and codes need one entry per cancer")
        for dims in self.signal_dims:
            if any(not 0 <= i < self.d for i in dims):
                raise ContractError(f"signal dims {dims} outside [0, {self.d})")
        for rate in _per_cancer(self.censor_rate, self.n_cancers, "censor_rate"):
            if not 0 <= rate < 1:
                raise ContractError(f"censor_rate {rate} outside [0, 1)")
        lo, hi = self.m_range
        if not 1 <= lo <= hi:
            raise ContractError(f"bad m_range {self.m_range}")

    def shared_dims(self, source, target):
        """Signal dimensions two cancers (by index or code) have in common."""
        s = self.codes.index(source) if isinstance(source, str) else source
        t = self.codes.index(target) if isinstance(target, str) else target
        return tuple(sorted(set(self.signal_dims[s]) & set(self.signal_dims[t])))

    def to_dict(self):
        out = asdict(self)
        out["m_range"] = list(self.m_range)
        out["prevalence"] = list(self.prevalence)
        out["signal_dims"] = [list(d) for d in self.signal_dims]
        return out


@dataclass
class GroundTruth:
    """Per-cancer planted quantities, aligned with the cohort's bags."""

    risk: np.ndarray
    prognostic: list = field(default_factory=list)
    signal_dims: tuple = ()
    offset: np.ndarray | None = None

    def to_dict(self):
        return {
            "risk": self.risk.tolist(),
            "prognostic_counts": [int(m.sum()) for m in self.prognostic],
            "signal_dims": list(self.signal_dims),
        }


def _f32(x):
    return x.astype(np.float32).astype(np.float64)


def _event_bins(rng, risk, spec):
    k = spec.weibull_shape
    scale = spec.time_scale * spec.n_bins * np.exp(-spec.risk_effect * (risk - 0.5) / k)
    t = scale * rng.weibull(k, size=risk.shape[0])
    return np.minimum(np.floor(t), spec.n_bins - 1).astype(np.int64)


def _synth_one(rng, spec, c):
    code = spec.codes[c]
    n = int(_per_cancer(spec.n_patients, spec.n_cancers, "n_patients")[c])
    censor_rate = float(_per_cancer(spec.censor_rate, spec.n_cancers, "censor_rate")[c])
    shift = float(_per_cancer(spec.cancer_shift, spec.n_cancers, "cancer_shift")[c])
    dims = list(spec.signal_dims[c])
    foreign = []
    if spec.nuisance:
        for other in dict.fromkeys(spec.signal_dims):
            block = [i for i in other if i not in dims]
            if block and block not in foreign:
                foreign.append(block)
    if not dims:
        warnings.warn(f"cancer {code} has no signal dims; its cohort is pure noise", stacklevel=3)

    offset = shift * rng.standard_normal(spec.d)
    direction = np.zeros(spec.d)
    direction[dims] = spec.signal_strength

    risk = rng.uniform(0.0, 1.0, size=n)
    event_bin = _event_bins(rng, risk, spec)
    censored = rng.uniform(size=n) < censor_rate
    observed = np.where(censored, np.floor(rng.uniform(size=n) * (event_bin + 1)), event_bin).astype(np.int64)
    n_slides = np.where(rng.uniform(size=n) < spec.multi_slide_rate, 2, 1)

    lo, hi = spec.m_range
    p_lo, p_hi = spec.prevalence
    bags, times, events, bag_risk, masks = [], [], [], [], []
    for i in range(n):
        prevalence = p_lo + (p_hi - p_lo) * risk[i]
        for s in range(n_slides[i]):
            m = int(rng.integers(lo, hi + 1))
            mask = rng.uniform(size=m) < prevalence
            x = rng.standard_normal((m, spec.d)) + offset + mask[:, None] * direction
            for block in foreign:
                hit = rng.uniform(size=m) < rng.uniform(p_lo, p_hi)
                x[np.ix_(hit, block)] += spec.signal_strength
            bags.append(InstanceBag(f"{code}-P{i:04d}-S{s}", f"{code}-P{i:04d}", code, _f32(x)))
            times.append(observed[i])
            events.append(not censored[i])
            bag_risk.append(risk[i])
            masks.append(mask)
    cohort = Cohort(code, bags, make_labels(np.array(times), np.array(events)), spec.n_bins,
                    {"synthetic": True, "signal_dims": dims})
    truth = GroundTruth(np.array(bag_risk), masks, tuple(dims), offset)
    return cohort, truth


def synth_cohorts(spec):
    """Generate one cohort per cancer in ``spec``.

    Returns
    -------
    cohorts : list of Cohort
    truth : dict of str -> GroundTruth
        Latent risk and prognostic-instance masks per cancer code.
    """
    rng = np.random.default_rng(spec.seed)
    cohorts, truth = [], {}
    for c in range(spec.n_cancers):
        cohort, gt = _synth_one(rng, spec, c)
        cohorts.append(cohort)
        truth[cohort.cancer_code] = gt
    return cohorts, truth


def signal_score(bag, dims):
    """Oracle bag score: mean activation of the instances along ``dims``.

    Tracks the prognostic-instance fraction of a bag whose cancer plants
    signal on ``dims``; used to bound what a learned model can reach.
    """
    x = np.asarray(getattr(bag, "features", bag))
    dims = list(dims)
    if not dims:
        return 0.0
    return float(x[:, dims].mean())

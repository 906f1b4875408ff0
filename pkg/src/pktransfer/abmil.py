"""Gated-attention multiple-instance survival model (ABMIL).

Per bag ``X`` of ``M`` instances::

    H      = relu(X W_e + b_e)                         (M, d_embed)
    logits = (tanh(H V) * sigmoid(H U)) w              (M, 1)
    a      = softmax(logits over instances)
    z      = a^T H                                     (1, d_embed)
    hazard = sigmoid(z W_h + b_h)                      (1, T)

``z`` is the bag-level encoding reused, frozen, as an expert by the routing
model.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, params_checksum, save_checkpoint
from .exceptions import ContractError, TrainingError, UndefinedMetricError
from .numerics import Tensor, ag, dense_params
from .survival import baseline_logit_hazard, c_index, nll_loss_tensor, risk_score, survival_from_hazards
from .training import TrainConfig, run_training
from .validation import check_bag, check_bags, check_labels

ABMIL_KIND = "abmil"


@dataclass
class AbmilConfig:
    d_in: int
    d_embed: int = 512
    d_attn: int = 256
    n_bins: int = 10
    gated: bool = True

    def __post_init__(self):
        if min(self.d_in, self.d_embed, self.d_attn, self.n_bins) < 1:
            raise ContractError(f"all ABMIL dimensions must be >= 1: {self}")

    def to_dict(self):
        return asdict(self)


def attention_params(rng, prefix, d_embed, d_attn, gated=True):
    p = {}
    p.update(dense_params(rng, f"{prefix}.V", d_embed, d_attn))
    if gated:
        p.update(dense_params(rng, f"{prefix}.U", d_embed, d_attn))
    p.update(dense_params(rng, f"{prefix}.w", d_attn, 1))
    return p


def attention_pool(h, p, prefix, gated=True):
    """Attention pooling of rows of ``h``; returns ``(z, attention)``.

    ``attention`` is an ``(M, 1)`` column summing to one.
    """
    a_v = ag.tanh(h @ p[f"{prefix}.V.weight"] + p[f"{prefix}.V.bias"])
    if gated:
        a_u = ag.sigmoid(h @ p[f"{prefix}.U.weight"] + p[f"{prefix}.U.bias"])
        a_v = a_v * a_u
    logits = a_v @ p[f"{prefix}.w.weight"] + p[f"{prefix}.w.bias"]
    attn = ag.softmax(logits, axis=0)
    return attn.T @ h, attn


@dataclass(eq=False)
class AbmilModel:
    """Parameters of one cancer-specific model plus its config."""

    config: AbmilConfig
    params: dict = field(repr=False)

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        p = {}
        p.update(dense_params(rng, "embed", config.d_in, config.d_embed))
        p.update(attention_params(rng, "attn", config.d_embed, config.d_attn, config.gated))
        p.update(dense_params(rng, "head", config.d_embed, config.n_bins))
        return cls(config, p)

    def constants(self):
        """Parameter values wrapped as non-differentiable tensors."""
        return {k: Tensor(v.value) for k, v in self.params.items()}

    def graph(self, x, params=None):
        """Build the forward graph; returns ``(hazards, attention, z)`` tensors."""
        p = self.params if params is None else params
        h = ag.relu(ag.as_tensor(x) @ p["embed.weight"] + p["embed.bias"])
        z, attn = attention_pool(h, p, "attn", self.config.gated)
        hazards = ag.sigmoid(z @ p["head.weight"] + p["head.bias"])
        return hazards, attn, z

    def forward(self, bag):
        """Hazards ``(T,)`` and instance attention ``(M,)`` for one bag."""
        x = check_bag(bag, self.config.d_in)
        hazards, attn, _ = self.graph(x, self.constants())
        return hazards.value[0], attn.value[:, 0]

    def encode(self, bag):
        """Bag encoding ``z`` (the pre-head representation), shape ``(d_embed,)``."""
        x = check_bag(bag, self.config.d_in)
        _, _, z = self.graph(x, self.constants())
        return z.value[0]

    def arrays(self):
        return {k: v.value for k, v in self.params.items()}

    def checksum(self):
        return params_checksum(self.arrays())

    def copy(self):
        return AbmilModel(AbmilConfig(**self.config.to_dict()),
                          {k: Tensor(v.value.copy(), requires_grad=True, name=k)
                           for k, v in self.params.items()})

    def save(self, path, extra=None):
        return save_checkpoint(path, ABMIL_KIND, self.config.to_dict(), self.arrays(), extra)

    @classmethod
    def load(cls, path):
        header, arrays = load_checkpoint(path)
        if header["kind"] != ABMIL_KIND:
            raise ContractError(f"{path} holds a {header['kind']!r} checkpoint, not ABMIL")
        return cls.from_arrays(header["config"], arrays)

    @classmethod
    def from_arrays(cls, config, arrays):
        return cls(AbmilConfig(**config),
                   {k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in arrays.items()})


def fit_abmil(model, bags, time, event, cfg, item_ids=None, on_epoch=None, init_bias=True):
    """Train ``model`` in place on validated bags; returns the epoch NLL history.

    With ``init_bias`` (and at least one epoch) the hazard-head bias first
    starts at the training set's pooled logit hazard.
    """
    rng = np.random.default_rng(cfg.seed)
    if init_bias and cfg.epochs > 0:
        model.params["head.bias"].value[0] = baseline_logit_hazard(time, event, model.config.n_bins)

    def window_loss(idx):
        losses = []
        for i in idx:
            hazards, _, _ = model.graph(bags[i])
            losses.append(nll_loss_tensor(hazards, int(time[i]), bool(event[i])))
        total = losses[0]
        for item in losses[1:]:
            total = total + item
        return total * (1.0 / len(losses)), [float(item.value) for item in losses]

    return run_training(model.params, len(bags), window_loss, cfg, rng, item_ids, on_epoch)


class AbmilSurvival(BaseEstimator):
    """Discrete-time survival estimator over bags of instances.

    Parameters
    ----------
    d_embed, d_attn : int
        Instance embedding width and attention hidden width.
    n_bins : int or None
        Number of time bins; inferred as ``max(time_bin) + 1`` when None.
    gated : bool
        Gated (tanh * sigmoid) or plain tanh attention.
    lr, weight_decay, epochs, accumulation_steps, warmup_epochs
        Optimisation settings, see :class:`~pktransfer.training.TrainConfig`.
    random_state : int
        Seeds both initialisation and the bag order.

    Attributes
    ----------
    model_ : AbmilModel
    history_ : list of float
        Mean training NLL per epoch.
    n_features_in_ : int
    """

    def __init__(self, d_embed=512, d_attn=256, n_bins=None, gated=True, lr=1e-4,
                 weight_decay=1e-5, epochs=20, accumulation_steps=16, warmup_epochs=1,
                 random_state=0):
        self.d_embed = d_embed
        self.d_attn = d_attn
        self.n_bins = n_bins
        self.gated = gated
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.accumulation_steps = accumulation_steps
        self.warmup_epochs = warmup_epochs
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(self.lr, self.weight_decay, self.epochs, self.accumulation_steps,
                           self.warmup_epochs, self.random_state)

    def fit(self, X, y):
        bags = check_bags(X)
        time, event = check_labels(y, self.n_bins)
        if len(bags) != len(time):
            raise ContractError(f"{len(bags)} bags but {len(time)} labels")
        n_bins = self.n_bins if self.n_bins is not None else int(time.max()) + 1
        config = AbmilConfig(bags[0].shape[1], self.d_embed, self.d_attn, n_bins, self.gated)
        self.model_ = AbmilModel.init(config, self.random_state)
        ids = [getattr(b, "bag_id", str(i)) for i, b in enumerate(X)]
        self.history_ = fit_abmil(self.model_, bags, time, event, self._train_config(), ids)
        self.n_features_in_ = config.d_in
        return self

    @classmethod
    def from_model(cls, model, **params):
        """Wrap an already-trained :class:`AbmilModel` as a fitted estimator."""
        c = model.config
        est = cls(d_embed=c.d_embed, d_attn=c.d_attn, n_bins=c.n_bins, gated=c.gated, **params)
        est.model_ = model
        est.history_ = []
        est.n_features_in_ = c.d_in
        return est

    def predict_hazards(self, X):
        check_is_fitted(self, "model_")
        bags = check_bags(X, self.model_.config.d_in)
        return np.stack([self.model_.forward(b)[0] for b in bags])

    def predict_survival(self, X):
        return survival_from_hazards(self.predict_hazards(X))

    def predict(self, X):
        """Risk scores, higher meaning worse prognosis."""
        return risk_score(self.predict_hazards(X))

    def transform(self, X):
        """Bag encodings, shape ``(n_bags, d_embed)``."""
        check_is_fitted(self, "model_")
        bags = check_bags(X, self.model_.config.d_in)
        return np.stack([self.model_.encode(b) for b in bags])

    def attention(self, bag):
        check_is_fitted(self, "model_")
        return self.model_.forward(bag)[1]

    def score(self, X, y):
        """C-Index of the predicted risks."""
        return c_index(self.predict(X), y)


@dataclass
class CVResult:
    """Per-fold models and test-fold C-Indices of a cross-validated run."""

    models: list
    fold_scores: list
    histories: list
    train_ids: dict
    failures: dict = field(default_factory=dict)

    @property
    def mean(self):
        vals = [s for s in self.fold_scores if np.isfinite(s)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def std(self):
        vals = [s for s in self.fold_scores if np.isfinite(s)]
        return float(np.std(vals)) if vals else float("nan")

    def to_dict(self):
        return {"fold_scores": [float(s) for s in self.fold_scores], "mean": self.mean,
                "std": self.std, "histories": self.histories, "failures": self.failures}


def safe_c_index(risks, labels):
    try:
        return c_index(risks, labels)
    except UndefinedMetricError:
        return float("nan")


def train_cancer_specific(cohort, folds, cfg=None, model_cfg=None, aggregate="slide"):
    """Cross-validate ABMIL on one cohort.

    For every fold a fresh model is trained on the remaining folds and
    scored on the held-out fold. A fold whose loss turns non-finite is
    aborted; its diagnostics land in ``failures`` and its score is NaN.

    Parameters
    ----------
    cohort : Cohort
    folds : FoldAssignment
    cfg : TrainConfig, optional
    model_cfg : dict, optional
        Overrides for :class:`AbmilConfig` (``d_embed``, ``d_attn``, ``gated``).
    aggregate : {"slide", "patient"}
        Score slides individually, or average risks per patient first.
    """
    cfg = cfg or TrainConfig()
    model_cfg = dict(model_cfg or {})
    config = AbmilConfig(d_in=cohort.d, n_bins=cohort.n_bins, **model_cfg)
    bags = [b.features for b in cohort.bags]
    models, scores, histories, trace, failures = [], [], [], {}, {}
    for fold in range(folds.k):
        train_idx, test_idx = folds.split(cohort, fold)
        trace[fold] = [cohort.bags[i].bag_id for i in train_idx]
        model = AbmilModel.init(config, cfg.seed + 1000 * fold)
        fold_cfg = TrainConfig(**{**cfg.to_dict(), "seed": cfg.seed + 1000 * fold})
        try:
            hist = fit_abmil(model, [bags[i] for i in train_idx], cohort.time_bin[train_idx],
                             cohort.event[train_idx], fold_cfg, trace[fold])
        except TrainingError as exc:
            warnings.warn(f"{cohort.cancer_code} fold {fold} aborted: {exc}", stacklevel=2)
            failures[fold] = {"message": str(exc), **exc.details}
            models.append(model)
            scores.append(float("nan"))
            histories.append([])
            continue
        est = AbmilSurvival.from_model(model)
        risks = est.predict([bags[i] for i in test_idx])
        scores.append(score_risks(risks, cohort, test_idx, aggregate))
        models.append(model)
        histories.append(hist)
    return CVResult(models, scores, histories, trace, failures)


def score_risks(risks, cohort, idx, aggregate="slide"):
    """C-Index of ``risks`` for bags ``idx`` of ``cohort``; NaN if undefined."""
    idx = np.asarray(idx)
    labels = cohort.labels[idx]
    if aggregate == "patient":
        pids = [cohort.bags[i].patient_id for i in idx]
        order = list(dict.fromkeys(pids))
        risks = np.array([np.mean([r for r, p in zip(risks, pids) if p == q]) for q in order])
        first = [pids.index(q) for q in order]
        labels = labels[first]
    elif aggregate != "slide":
        raise ContractError(f"unknown aggregate mode {aggregate!r}")
    return safe_c_index(risks, labels)


def attention_dump(model, bag, path):
    """Write ``instance_index,attention`` rows for one bag to a CSV file."""
    _, attn = model.forward(bag)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance_index", "attention"])
            for i, a in enumerate(attn):
                writer.writerow([i, repr(float(a))])
    except OSError as exc:
        raise OSError(f"cannot write attention dump to {path}: {exc}") from exc
    return attn

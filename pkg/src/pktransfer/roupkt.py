"""Routing-based mixture of frozen cancer-specific experts.

For a target cancer, every cancer-specific ABMIL model is a frozen expert
encoder. A router reads the bag and scores the experts; the top ``K``
experts' encodings pass through per-expert trainable adapters and are mixed
with the renormalised router weights before a shared hazard head::

    w      = softmax(router(X))                                  (n,)
    S      = top-K(w), ties broken by registry order
    w_hat  = w[S] / sum(w[S])
    z_mix  = sum_{k in S} w_hat_k * adapter_k(E_k(X))
    hazard = sigmoid(z_mix W_h + b_h)

Training adds a load-balance loss and a router z-loss to the mean NLL of each
accumulation window. Expert encodings are cached since encoders never change.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .abmil import AbmilModel, attention_params, attention_pool, safe_c_index
from .checkpoint import load_checkpoint, params_checksum, save_checkpoint
from .exceptions import ContractError, IntegrityError, TrainingError
from .numerics import Tensor, ag, dense_params
from .survival import baseline_logit_hazard, c_index, nll_loss_tensor, risk_score
from .training import TrainConfig, run_training
from .validation import bag_keys, check_bag, check_bags, check_labels

ROUPKT_KIND = "roupkt"
ROUTER_KINDS = ("attention", "mean")
EXPERT_SUBSETS = ("all", "positive-only", "exclude-target")
COMBINERS = ("router", "mean", "attention", "gated", "gru", "self-attention")


@dataclass
class MoeConfig:
    """Mixture settings.

    ``combiner="router"`` is the routed mixture; the other combiners replace
    routing with a fixed rule over all expert features. ``hard_uniform``
    keeps top-K selection but mixes the selected experts with equal weight.
    """

    k: int = 5
    coef_lb: float = 0.01
    coef_lz: float = 0.01
    router_kind: str = "attention"
    expert_subset: str = "all"
    adapter_hidden: int = 512
    router_embed: int = 512
    router_attn: int = 256
    combiner: str = "router"
    hard_uniform: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("K must be >= 1")
        if self.coef_lb < 0 or self.coef_lz < 0:
            raise ContractError("auxiliary loss coefficients must be >= 0")
        if self.router_kind not in ROUTER_KINDS:
            raise ContractError(f"router_kind must be one of {ROUTER_KINDS}")
        if self.expert_subset not in EXPERT_SUBSETS:
            raise ContractError(f"expert_subset must be one of {EXPERT_SUBSETS}")
        if self.combiner not in COMBINERS:
            raise ContractError(f"combiner must be one of {COMBINERS}")
        if min(self.adapter_hidden, self.router_embed, self.router_attn) < 1:
            raise ContractError("hidden sizes must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RoutingDecision:
    """Router scores ``w``, selected expert indices, and mixing weights ``w_hat``."""

    w: np.ndarray
    selected: tuple
    w_hat: np.ndarray


def top_k(w, k):
    """Indices of the ``k`` largest entries; equal values keep registry order."""
    w = np.asarray(w, dtype=np.float64)
    if k > w.shape[0]:
        raise ContractError(f"K={k} exceeds the number of experts {w.shape[0]}")
    order = np.lexsort((np.arange(w.shape[0]), -w))
    return tuple(sorted(int(i) for i in order[:k]))


def routing_weights(w, selected, hard_uniform=False):
    """Mixing weights over ``selected``; the full set keeps ``w`` itself."""
    w = np.asarray(w, dtype=np.float64)
    if hard_uniform:
        return np.full(len(selected), 1.0 / len(selected))
    if len(selected) == w.shape[0]:
        return w.copy()
    sub = w[list(selected)]
    return sub / sub.sum()


def load_balance_loss(w, selected, k):
    """``n * sum_tau f_tau * mean_w_tau`` over one window of bags.

    Parameters
    ----------
    w : array-like of shape (B, n) or list of Tensor (1, n)
        Router probabilities per bag. Tensors keep the result differentiable.
    selected : list of tuple
        Selected expert indices per bag.
    k : int
    """
    if isinstance(w, (list, tuple)) and w and isinstance(w[0], Tensor):
        stacked = ag.concat(list(w), axis=0)
        n = stacked.shape[1]
    else:
        stacked = np.atleast_2d(np.asarray(w, dtype=np.float64))
        n = stacked.shape[1]
    b = stacked.shape[0]
    if b == 0 or len(selected) != b:
        raise ContractError("load balance loss needs one selection per bag in a non-empty window")
    counts = np.zeros(n)
    for sel in selected:
        counts[list(sel)] += 1.0
    f = counts / (b * k)
    if isinstance(stacked, Tensor):
        p_bar = ag.mean(stacked, axis=0, keepdims=True)
        return ag.sum(p_bar * f[None, :]) * float(n)
    return float(n * np.dot(f, stacked.mean(axis=0)))


def z_loss(logits):
    """Mean over bags of ``logsumexp(logits)**2``; Tensor rows stay differentiable."""
    if isinstance(logits, (list, tuple)) and logits and isinstance(logits[0], Tensor):
        stacked = ag.concat(list(logits), axis=0)
        return ag.mean(ag.square(ag.logsumexp(stacked, axis=1)))
    x = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if x.shape[0] == 0:
        raise ContractError("z-loss needs a non-empty window")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    return float(np.mean(lse ** 2))


class FeatureCache:
    """Precomputed expert encodings keyed by ``(bag key, expert index)``.

    The cache remembers each encoder's parameter checksum; looking up an
    expert whose encoder has changed raises :class:`IntegrityError`.
    """

    def __init__(self, checksums):
        self.checksums = list(checksums)
        self._store = {}

    @classmethod
    def build(cls, bags, experts, keys=None):
        cache = cls([e.checksum() for e in experts])
        keys = keys if keys is not None else bag_keys(bags)
        for key, bag in zip(keys, bags):
            x = check_bag(bag, experts[0].config.d_in)
            for j, enc in enumerate(experts):
                cache._store[(key, j)] = enc.encode(x)
        return cache

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return key in self._store

    def verify(self, checksums):
        if list(checksums) != self.checksums:
            stale = [i for i, (a, b) in enumerate(zip(checksums, self.checksums)) if a != b]
            raise IntegrityError(f"feature cache is stale for experts {stale or 'all'}")

    def get(self, key, j):
        return self._store[(key, j)]

    def stack(self, key, n):
        return np.stack([self._store[(key, j)] for j in range(n)])


def _router_params(rng, cfg, d_in, n):
    p = {}
    if cfg.router_kind == "attention":
        p.update(dense_params(rng, "router.embed", d_in, cfg.router_embed))
        p.update(attention_params(rng, "router.attn", cfg.router_embed, cfg.router_attn, True))
        p.update(dense_params(rng, "router.out", cfg.router_embed, n))
    else:
        p.update(dense_params(rng, "router.out", d_in, n))
    return p


def _combiner_params(rng, cfg, d):
    name = cfg.combiner
    p = {}
    if name == "attention":
        p.update(attention_params(rng, "comb.attn", d, d, gated=False))
    elif name == "gated":
        p.update(attention_params(rng, "comb.attn", d, d, gated=True))
    elif name == "gru":
        for gate in ("z", "r", "n"):
            p.update(dense_params(rng, f"comb.gru.{gate}x", d, d))
            p.update(dense_params(rng, f"comb.gru.{gate}h", d, d))
    elif name == "self-attention":
        for proj in ("q", "k", "v"):
            p.update(dense_params(rng, f"comb.sa.{proj}", d, d))
    return p


@dataclass(eq=False)
class MoeModel:
    """Router, adapters and head over a fixed registry of frozen experts."""

    config: MoeConfig
    experts: list
    codes: list
    params: dict = field(repr=False)
    n_bins: int = 10

    def __post_init__(self):
        if not self.experts:
            raise ContractError("need at least one expert")
        dims = {(e.config.d_in, e.config.d_embed) for e in self.experts}
        if len(dims) != 1:
            raise ContractError(f"experts disagree on (d_in, d_embed): {sorted(dims)}")
        if self.config.combiner == "router" and self.config.k > len(self.experts):
            raise ContractError(f"K={self.config.k} exceeds the number of experts {len(self.experts)}")
        self.expert_checksums = [e.checksum() for e in self.experts]

    @property
    def n(self):
        return len(self.experts)

    @property
    def d_in(self):
        return self.experts[0].config.d_in

    @property
    def d_embed(self):
        return self.experts[0].config.d_embed

    @classmethod
    def init(cls, config, experts, codes=None, n_bins=None, seed=0):
        experts = list(experts)
        codes = list(codes) if codes is not None else [f"E{i}" for i in range(len(experts))]
        n_bins = n_bins if n_bins is not None else experts[0].config.n_bins
        d_in, d = experts[0].config.d_in, experts[0].config.d_embed
        rng = np.random.default_rng(seed)
        p = {}
        if config.combiner == "router":
            p.update(_router_params(rng, config, d_in, len(experts)))
        for j in range(len(experts)):
            p.update(dense_params(rng, f"adapter{j}.fc1", d, config.adapter_hidden))
            p.update(dense_params(rng, f"adapter{j}.fc2", config.adapter_hidden, d))
        p.update(_combiner_params(rng, config, d))
        p.update(dense_params(rng, "head", d, n_bins))
        return cls(config, experts, codes, p, n_bins)

    # -- graph pieces --------------------------------------------------------

    def router_logits(self, x, p):
        x = ag.as_tensor(x)
        if self.config.router_kind == "attention":
            h = ag.relu(x @ p["router.embed.weight"] + p["router.embed.bias"])
            pooled, _ = attention_pool(h, p, "router.attn", True)
        else:
            pooled = ag.mean(x, axis=0, keepdims=True)
        return pooled @ p["router.out.weight"] + p["router.out.bias"]

    def adapter(self, j, z, p):
        h = ag.relu(z @ p[f"adapter{j}.fc1.weight"] + p[f"adapter{j}.fc1.bias"])
        return h @ p[f"adapter{j}.fc2.weight"] + p[f"adapter{j}.fc2.bias"]

    def expert_features(self, x, key=None, cache=None):
        """``(n, d_embed)`` encodings, from ``cache`` when given."""
        if cache is not None:
            cache.verify(self.expert_checksums)
            return cache.stack(key, self.n)
        return np.stack([e.encode(x) for e in self.experts])

    def _combine(self, e, p):
        name = self.config.combiner
        if name == "mean":
            return ag.mean(e, axis=0, keepdims=True)
        if name in ("attention", "gated"):
            z, _ = attention_pool(e, p, "comb.attn", gated=name == "gated")
            return z
        if name == "gru":
            h = None
            for j in range(self.n):
                x = e[j:j + 1]

                def gate(g, act, hh):
                    out = x @ p[f"comb.gru.{g}x.weight"] + p[f"comb.gru.{g}x.bias"]
                    if hh is not None:
                        out = out + hh @ p[f"comb.gru.{g}h.weight"] + p[f"comb.gru.{g}h.bias"]
                    return act(out)

                zg = gate("z", ag.sigmoid, h)
                rg = gate("r", ag.sigmoid, h)
                cand = gate("n", ag.tanh, None if h is None else rg * h)
                h = (1.0 - zg) * cand if h is None else (1.0 - zg) * cand + zg * h
            return h
        if name == "self-attention":
            q = e @ p["comb.sa.q.weight"] + p["comb.sa.q.bias"]
            k = e @ p["comb.sa.k.weight"] + p["comb.sa.k.bias"]
            v = e @ p["comb.sa.v.weight"] + p["comb.sa.v.bias"]
            a = ag.softmax((q @ k.T) * (1.0 / np.sqrt(self.d_embed)), axis=1)
            return ag.mean(a @ v, axis=0, keepdims=True)
        raise ContractError(f"unknown combiner {name!r}")

    def graph(self, x, feats, params=None, k=None):
        """Forward graph for one bag.

        Returns
        -------
        hazards : Tensor (1, T)
        logits : Tensor (1, n) or None
        w : Tensor (1, n) or None
        decision : RoutingDecision or None
        """
        p = self.params if params is None else params
        feats = np.asarray(feats, dtype=np.float64)
        if self.config.combiner != "router":
            adapted = ag.concat([self.adapter(j, Tensor(feats[j:j + 1]), p) for j in range(self.n)], axis=0)
            z_mix = self._combine(adapted, p)
            hazards = ag.sigmoid(z_mix @ p["head.weight"] + p["head.bias"])
            return hazards, None, None, None
        k = self.config.k if k is None else k
        logits = self.router_logits(x, p)
        w = ag.softmax(logits, axis=1)
        selected = top_k(w.value[0], k)
        if self.config.hard_uniform:
            w_hat = Tensor(np.full((1, len(selected)), 1.0 / len(selected)))
        elif len(selected) == self.n:
            w_hat = w
        else:
            sub = ag.take(w, (slice(None), list(selected)))
            w_hat = sub / ag.sum(sub)
        adapted = ag.concat([self.adapter(j, Tensor(feats[j:j + 1]), p) for j in selected], axis=0)
        z_mix = w_hat @ adapted
        hazards = ag.sigmoid(z_mix @ p["head.weight"] + p["head.bias"])
        decision = RoutingDecision(w.value[0].copy(), selected, w_hat.value[0].copy())
        return hazards, logits, w, decision

    def dense_forward(self, bag, cache=None, key=None):
        """Soft mixture of every expert weighted by the full router softmax."""
        x = check_bag(bag, self.d_in)
        feats = self.expert_features(x, key, cache)
        p = self.constants()
        w = ag.softmax(self.router_logits(x, p), axis=1)
        adapted = ag.concat([self.adapter(j, Tensor(feats[j:j + 1]), p) for j in range(self.n)], axis=0)
        return ag.sigmoid((w @ adapted) @ p["head.weight"] + p["head.bias"]).value[0]

    # -- inference -----------------------------------------------------------

    def constants(self):
        return {k: Tensor(v.value) for k, v in self.params.items()}

    def forward(self, bag, cache=None, key=None, k=None):
        """Hazards ``(T,)`` and the routing decision (None for fixed combiners)."""
        x = check_bag(bag, self.d_in)
        if cache is not None and key is None:
            key = bag_keys([bag])[0]
        feats = self.expert_features(x, key, cache)
        hazards, _, _, decision = self.graph(x, feats, self.constants(), k=k)
        return hazards.value[0], decision

    def route(self, bag, k=None):
        x = check_bag(bag, self.d_in)
        if self.config.combiner != "router":
            raise ContractError(f"combiner {self.config.combiner!r} does not route")
        w = ag.softmax(self.router_logits(x, self.constants()), axis=1).value[0]
        selected = top_k(w, self.config.k if k is None else k)
        return RoutingDecision(w, selected, routing_weights(w, selected, self.config.hard_uniform))

    # -- persistence ---------------------------------------------------------

    def arrays(self):
        return {k: v.value for k, v in self.params.items()}

    def checksum(self):
        return params_checksum(self.arrays())

    def save(self, path):
        extra = {"experts": [{"code": c, "checksum": s} for c, s in zip(self.codes, self.expert_checksums)],
                 "n_bins": self.n_bins}
        return save_checkpoint(path, ROUPKT_KIND, self.config.to_dict(), self.arrays(), extra)

    @classmethod
    def load(cls, path, experts):
        """Restore a checkpoint; ``experts`` maps code to the frozen encoder."""
        header, arrays = load_checkpoint(path)
        if header["kind"] != ROUPKT_KIND:
            raise ContractError(f"{path} holds a {header['kind']!r} checkpoint, not a mixture")
        refs = header["extra"]["experts"]
        chosen = []
        for ref in refs:
            enc = experts.get(ref["code"])
            if enc is None:
                raise ContractError(f"checkpoint needs expert {ref['code']!r}")
            if enc.checksum() != ref["checksum"]:
                raise IntegrityError(f"expert {ref['code']!r} does not match the checkpoint")
            chosen.append(enc)
        params = {k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in arrays.items()}
        return cls(MoeConfig(**header["config"]), chosen, [r["code"] for r in refs], params,
                   header["extra"]["n_bins"])


def select_experts(target, fold, sources, cfg, positive=None):
    """Expert registry for one target fold.

    Parameters
    ----------
    target : str
    fold : int
        The target's own expert is its model from this fold; other experts
        are their first-fold models.
    sources : dict of str -> CVResult
        Trained models in registry order.
    cfg : MoeConfig
    positive : set of str, optional
        Sources transferring positively to ``target``; required for the
        ``positive-only`` subset.
    """
    codes, experts = [], []
    for code, res in sources.items():
        if code == target:
            if cfg.expert_subset == "exclude-target":
                continue
            model = res.models[fold]
        else:
            if cfg.expert_subset == "positive-only":
                if positive is None:
                    raise ContractError("positive-only subset needs the set of positive sources")
                if code not in positive:
                    continue
            model = res.models[0]
        codes.append(code)
        experts.append(model)
    if not experts:
        raise ContractError(f"no experts left for target {target!r}")
    return codes, experts


def fit_moe(model, bags, keys, time, event, cache, train_cfg, item_ids=None, on_epoch=None):
    """Train router, adapters and head in place.

    Returns ``(history, routing)``: the epoch NLL history and, per epoch,
    the mean router score of every expert (None for fixed combiners).
    """
    rng = np.random.default_rng(train_cfg.seed)
    if train_cfg.epochs > 0:
        model.params["head.bias"].value[0] = baseline_logit_hazard(time, event, model.n_bins)
    feats = [cache.stack(key, model.n) for key in keys]
    cache.verify(model.expert_checksums)
    cfg = model.config
    routed = cfg.combiner == "router"
    score_sum, routing = np.zeros(model.n), []

    def window_loss(idx):
        nlls, ws, logits, sels = [], [], [], []
        for i in idx:
            hazards, lg, w, decision = model.graph(bags[i], feats[i])
            nlls.append(nll_loss_tensor(hazards, int(time[i]), bool(event[i])))
            if routed:
                ws.append(w)
                logits.append(lg)
                sels.append(decision.selected)
                score_sum[:] += decision.w
        total = nlls[0]
        for item in nlls[1:]:
            total = total + item
        loss = total * (1.0 / len(nlls))
        if routed and cfg.coef_lb > 0:
            loss = loss + load_balance_loss(ws, sels, cfg.k) * cfg.coef_lb
        if routed and cfg.coef_lz > 0:
            loss = loss + z_loss(logits) * cfg.coef_lz
        return loss, [float(item.value) for item in nlls]

    def epoch_end(epoch, nll):
        if routed:
            routing.append((score_sum / len(bags)).tolist())
            score_sum[:] = 0.0
        if on_epoch is not None:
            on_epoch(epoch, nll)

    history = run_training(model.params, len(bags), window_loss, train_cfg, rng, item_ids, epoch_end)
    return history, (routing if routed else None)


@dataclass
class MoeCVResult:
    models: list
    fold_scores: list
    histories: list
    routing: list
    failures: dict = field(default_factory=dict)

    @property
    def mean(self):
        vals = [s for s in self.fold_scores if np.isfinite(s)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def std(self):
        vals = [s for s in self.fold_scores if np.isfinite(s)]
        return float(np.std(vals)) if vals else float("nan")

    def routing_csv(self, path=None):
        """Rows ``fold,epoch,expert,mean_score`` of the routing dynamics."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fold", "epoch", "expert", "mean_score"])
        for fold, (model, log) in enumerate(zip(self.models, self.routing)):
            for epoch, scores in enumerate(log or []):
                for code, s in zip(model.codes, scores):
                    writer.writerow([fold, epoch, code, repr(float(s))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_dict(self):
        return {"fold_scores": [float(s) for s in self.fold_scores], "mean": self.mean,
                "std": self.std, "histories": self.histories, "failures": self.failures}


def train_roupkt(cohort, folds, sources, cfg=None, train_cfg=None, positive=None, caches=None):
    """Cross-validate the mixture on a target cohort.

    Parameters
    ----------
    cohort : Cohort
        Target cohort; ``sources`` must contain its own CV result trained
        on the same ``folds``.
    folds : FoldAssignment
    sources : dict of str -> CVResult
        Expert registry in order.
    cfg : MoeConfig
    train_cfg : TrainConfig
    positive : set of str, optional
        For the ``positive-only`` expert subset.
    caches : dict, optional
        Reused feature caches keyed by ``(fold, tuple of expert checksums)``.
    """
    cfg = cfg or MoeConfig()
    train_cfg = train_cfg or TrainConfig()
    caches = caches if caches is not None else {}
    target = cohort.cancer_code
    keys = cohort.bag_ids
    bags = [b.features for b in cohort.bags]
    models, scores, histories, routing, failures = [], [], [], [], {}
    for fold in range(folds.k):
        codes, experts = select_experts(target, fold, sources, cfg, positive)
        if cfg.combiner == "router" and cfg.k > len(experts):
            raise ContractError(f"K={cfg.k} exceeds the {len(experts)} experts available for {target}")
        seed = train_cfg.seed + 1000 * fold
        model = MoeModel.init(cfg, experts, codes, cohort.n_bins, seed)
        cache_key = (fold, tuple(model.expert_checksums))
        if cache_key not in caches:
            caches[cache_key] = FeatureCache.build(bags, experts, keys)
        cache = caches[cache_key]
        train_idx, test_idx = folds.split(cohort, fold)
        fold_cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": seed})
        try:
            hist, log = fit_moe(model, [bags[i] for i in train_idx], [keys[i] for i in train_idx],
                                cohort.time_bin[train_idx], cohort.event[train_idx], cache, fold_cfg,
                                [keys[i] for i in train_idx])
        except TrainingError as exc:
            warnings.warn(f"{target} fold {fold} aborted: {exc}", stacklevel=2)
            failures[fold] = {"message": str(exc), **exc.details}
            models.append(model)
            scores.append(float("nan"))
            histories.append([])
            routing.append(None)
            continue
        risks = [risk_score(model.forward(bags[i], cache, keys[i])[0]) for i in test_idx]
        scores.append(safe_c_index(np.array(risks), cohort.labels[test_idx]))
        models.append(model)
        histories.append(hist)
        routing.append(log)
    return MoeCVResult(models, scores, histories, routing, failures)


DEFAULT_K_SWEEP = (3, 5, 7, 13)
DEFAULT_LZ_SWEEP = (0.0, 0.001, 0.005, 0.01)


def default_variants(n_experts, k_sweep=DEFAULT_K_SWEEP, lz_sweep=DEFAULT_LZ_SWEEP):
    """Named config overrides for the ablation study.

    K values above the number of experts are dropped and ``K = n`` is
    always included.
    """
    variants = [("subset=all", {"expert_subset": "all"}),
                ("subset=positive-only", {"expert_subset": "positive-only"}),
                ("subset=exclude-target", {"expert_subset": "exclude-target"}),
                ("router=attention", {"router_kind": "attention"}),
                ("router=mean", {"router_kind": "mean"})]
    ks = sorted({k for k in k_sweep if k <= n_experts} | {n_experts})
    variants += [(f"K={k}", {"k": k}) for k in ks]
    variants += [(f"coef_lz={c}", {"coef_lz": c}) for c in lz_sweep]
    variants += [(f"combiner={c}", {"combiner": c}) for c in COMBINERS if c != "router"]
    return variants


@dataclass
class AblationReport:
    rows: list

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant", "n_experts", "k", "mean", "std", "fold_scores"])
        for r in self.rows:
            writer.writerow([r["variant"], r["n_experts"], r["k"], repr(r["mean"]), repr(r["std"]),
                             ";".join(repr(s) for s in r["fold_scores"])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def ablation_suite(cohort, folds, sources, base_cfg=None, train_cfg=None, variants=None, positive=None):
    """Train every variant on the same folds and experts and tabulate CV scores.

    ``variants`` is a list of ``(name, overrides)`` applied to ``base_cfg``;
    by default :func:`default_variants`. ``K`` is clipped to the number of
    experts a subset leaves.
    """
    base_cfg = base_cfg or MoeConfig()
    n_all = len(sources)
    variants = variants if variants is not None else default_variants(n_all)
    caches, rows = {}, []
    for name, overrides in variants:
        cfg = MoeConfig(**{**base_cfg.to_dict(), **overrides})
        n = len(select_experts(cohort.cancer_code, 0, sources, cfg, positive)[0])
        if cfg.k > n:
            cfg = MoeConfig(**{**cfg.to_dict(), "k": n})
        res = train_roupkt(cohort, folds, sources, cfg, train_cfg, positive, caches)
        rows.append({"variant": name, "n_experts": n, "k": cfg.k, "mean": res.mean, "std": res.std,
                     "fold_scores": [float(s) for s in res.fold_scores], "result": res})
    return AblationReport(rows)


class RoupktSurvival(BaseEstimator):
    """Mixture-of-experts survival estimator over fixed frozen experts.

    Parameters
    ----------
    experts : list of AbmilModel
        Frozen expert encoders in registry order.
    codes : list of str, optional
        Registry names of the experts.
    k, coef_lb, coef_lz, router_kind, adapter_hidden, router_embed, router_attn, combiner, hard_uniform
        See :class:`MoeConfig`.
    lr, weight_decay, epochs, accumulation_steps, warmup_epochs
        See :class:`~pktransfer.training.TrainConfig`.
    random_state : int

    Attributes
    ----------
    model_ : MoeModel
    history_ : list of float
    routing_ : list of list of float or None
        Mean router score per expert and epoch.
    """

    def __init__(self, experts=None, codes=None, k=5, coef_lb=0.01, coef_lz=0.01,
                 router_kind="attention", adapter_hidden=512, router_embed=512, router_attn=256,
                 combiner="router", hard_uniform=False, lr=1e-4, weight_decay=1e-5, epochs=20,
                 accumulation_steps=16, warmup_epochs=1, random_state=0):
        self.experts = experts
        self.codes = codes
        self.k = k
        self.coef_lb = coef_lb
        self.coef_lz = coef_lz
        self.router_kind = router_kind
        self.adapter_hidden = adapter_hidden
        self.router_embed = router_embed
        self.router_attn = router_attn
        self.combiner = combiner
        self.hard_uniform = hard_uniform
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.accumulation_steps = accumulation_steps
        self.warmup_epochs = warmup_epochs
        self.random_state = random_state

    def _moe_config(self):
        return MoeConfig(self.k, self.coef_lb, self.coef_lz, self.router_kind, "all",
                         self.adapter_hidden, self.router_embed, self.router_attn, self.combiner,
                         self.hard_uniform)

    def fit(self, X, y):
        if not self.experts:
            raise ContractError("RoupktSurvival needs at least one expert")
        for e in self.experts:
            if not isinstance(e, AbmilModel):
                raise ContractError("experts must be AbmilModel instances")
        bags = check_bags(X, self.experts[0].config.d_in)
        time, event = check_labels(y, self.experts[0].config.n_bins)
        if len(bags) != len(time):
            raise ContractError(f"{len(bags)} bags but {len(time)} labels")
        self.model_ = MoeModel.init(self._moe_config(), self.experts, self.codes,
                                    seed=self.random_state)
        keys = bag_keys(X)
        self.cache_ = FeatureCache.build(bags, self.model_.experts, keys)
        cfg = TrainConfig(self.lr, self.weight_decay, self.epochs, self.accumulation_steps,
                          self.warmup_epochs, self.random_state)
        self.history_, self.routing_ = fit_moe(self.model_, bags, keys, time, event, self.cache_, cfg, keys)
        self.n_features_in_ = bags[0].shape[1]
        return self

    def predict_hazards(self, X):
        check_is_fitted(self, "model_")
        bags = check_bags(X, self.model_.d_in)
        return np.stack([self.model_.forward(b)[0] for b in bags])

    def predict(self, X):
        return risk_score(self.predict_hazards(X))

    def route(self, bag):
        check_is_fitted(self, "model_")
        return self.model_.route(bag)

    def score(self, X, y):
        return c_index(self.predict(X), y)

"""Training loop: per-iteration source reliability scoring and routing,
prototype maintenance, the main (hard-branch) step and the structural
(easy-branch) step."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .clustering import NOISE, ClusterAssignment, DbscanParams, assign_clusters, tune_dbscan
from .data import SubjectDataset
from .diffmath import RMSprop, binary_cross_entropy, one_hot, softmax_cross_entropy, supcon_loss
from .nets import (
    HednModel,
    backward_domain,
    forward_class_logits,
    forward_domain,
    forward_embedding,
    forward_features,
    init_model,
    predict_logits,
)
from .prototypes import MemoryBanks, init_banks, predict_batch, pseudo_labels, update_bank_from_batch

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    iterations: int = 1000
    batch_size: int = 96
    lambda2: float = 0.01
    gamma_s: float = 0.5
    gamma_t: float = 0.1
    tau: float = 0.1
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    dropout_p: float = 0.5
    lambda1_rate: float = 10.0
    seed: int = 42
    easy_network: bool = True
    tune_with_trials: bool = True
    ema_train_mode: bool = True

    def validate(self) -> "TrainConfig":
        checks = [
            (self.lr > 0, "lr must be positive"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (self.iterations >= 1, "iterations must be >= 1"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.lambda2 >= 0, "lambda2 must be >= 0"),
            (0 <= self.gamma_s < 1, "gamma_s must lie in [0, 1)"),
            (0 <= self.gamma_t < 1, "gamma_t must lie in [0, 1)"),
            (self.tau > 0, "tau must be positive"),
            (0 <= self.rms_alpha < 1, "rms_alpha must lie in [0, 1)"),
            (self.rms_eps > 0, "rms_eps must be positive"),
            (0 <= self.dropout_p < 1, "dropout_p must lie in [0, 1)"),
            (self.lambda1_rate > 0, "lambda1_rate must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


@dataclass
class ReliabilityReport:
    scores: np.ndarray
    k_easy: int
    k_hard: int


@dataclass
class IterationLog:
    iteration: int
    k_easy: int
    k_hard: int
    L_cls: float
    L_adv: float
    L_cl: float
    L_clu_s: float
    L_clu_t: float
    lambda1: float
    wall_time: float = 0.0
    reliability: tuple[float, ...] = ()


@dataclass
class Batch:
    domain_index: int
    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray
    clusters: np.ndarray


@dataclass
class Domain:
    """A dataset paired with its fixed cluster assignment."""

    data: SubjectDataset
    clusters: ClusterAssignment


def lambda1_schedule(iteration: int, total: int, rate: float = 10.0) -> float:
    p = iteration / total
    return 2.0 / (1.0 + math.exp(-rate * p)) - 1.0


def sample_batches(domains: list[Domain], batch_size: int, rng: np.random.Generator) -> list[Batch]:
    """One batch per domain: without replacement when the domain is large
    enough, with replacement otherwise."""
    out = []
    for i, dom in enumerate(domains):
        n = len(dom.data)
        if n == 0:
            raise ValueError(f"domain {dom.data.domain_id} is empty")
        idx = rng.choice(n, size=batch_size, replace=n < batch_size)
        out.append(Batch(i, idx, dom.data.features[idx], dom.data.labels[idx],
                         dom.clusters.labels[idx]))
    return out


def select_roles(scores) -> tuple[int, int]:
    """Easy = argmax, hard = argmin, smallest index on ties. When every score
    ties, hard takes the next index so the roles stay distinct."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 2:
        raise ConfigError("reliability routing needs at least 2 source domains")
    k_easy = int(np.argmax(scores))
    k_hard = int(np.argmin(scores))
    if k_easy == k_hard:
        k_hard = (k_easy + 1) % len(scores)
    return k_easy, k_hard


def assess_reliability(model: HednModel, source_batches: list[Batch]) -> ReliabilityReport:
    if len(source_batches) < 2:
        raise ConfigError("reliability routing needs at least 2 source domains")
    scores = np.empty(len(source_batches))
    for i, b in enumerate(source_batches):
        logits = predict_logits(model, b.x)
        loss, _ = softmax_cross_entropy(logits, one_hot(b.y, model.n_classes))
        scores[i] = -loss
    k_easy, k_hard = select_roles(scores)
    return ReliabilityReport(scores, k_easy, k_hard)


def update_prototypes(model: HednModel, banks: MemoryBanks, easy_batch: Batch, k_easy: int,
                      target_batch: Batch, gamma_s: float, gamma_t: float,
                      train_mode: bool = True) -> None:
    """EMA-refresh the easy source bank and the target bank from embeddings of
    the current batches. Other banks are untouched.

    With ``train_mode`` the embeddings use batch statistics, as the network
    produces them during the step; BN running statistics are restored so only
    the optimisation steps advance them."""
    saved = [b.copy() for b in model.buffers()]
    for batch, bank, gamma in ((easy_batch, banks.source_banks[k_easy], gamma_s),
                               (target_batch, banks.target_bank, gamma_t)):
        train = train_mode and len(batch.x) >= 2
        z = forward_embedding(model, forward_features(model, batch.x, train), train)
        update_bank_from_batch(bank, z, batch.clusters, gamma)
    for buf, old in zip(model.buffers(), saved):
        buf[...] = old


def main_loss_and_grads(model: HednModel, hard_batch: Batch, target_batch: Batch,
                        target_pseudo: np.ndarray | None, lambda1: float, lambda2: float):
    """Forward/backward for the main step; accumulates gradients into f, h,
    d and returns the loss terms ``(L_cls, L_adv, L_cl)``.

    The discriminator receives the gradient of ``L_adv``; the features receive
    it reversed and scaled by ``lambda1``. ``L_cl`` is skipped when
    ``target_pseudo`` is None.
    """
    nb = len(hard_batch.x)
    x = np.concatenate([hard_batch.x, target_batch.x])
    feats = forward_features(model, x, True)
    logits = forward_class_logits(model, feats, True)
    l_cls, g_cls = softmax_cross_entropy(logits[:nb], one_hot(hard_batch.y, model.n_classes))
    g_logits = np.zeros_like(logits)
    g_logits[:nb] = g_cls
    l_cl = 0.0
    if target_pseudo is not None and lambda2 > 0:
        l_cl, g_cl = softmax_cross_entropy(logits[nb:], one_hot(target_pseudo, model.n_classes))
        g_logits[nb:] = lambda2 * g_cl
    probs = forward_domain(model, feats, True)
    l_src, g_src = binary_cross_entropy(probs[:nb], np.ones(nb))
    l_tgt, g_tgt = binary_cross_entropy(probs[nb:], np.zeros(len(probs) - nb))
    g_feats = model.h.backward(g_logits)
    g_feats = g_feats + backward_domain(model, np.concatenate([g_src, g_tgt]), lambda1)
    model.f.backward(g_feats)
    return l_cls, l_src + l_tgt, l_cl


def step1_main(model: HednModel, hard_batch: Batch, target_batch: Batch, banks: MemoryBanks | None,
               k_easy: int, lambda1: float, lambda2: float, optimizer: RMSprop):
    """Update f, h and d on ``L_cls + lambda1 L_adv + lambda2 L_cl``; g is
    frozen (only evaluated) here."""
    target_pseudo = None
    if banks is not None and lambda2 > 0:
        z_t = forward_embedding(model, forward_features(model, target_batch.x, False), False)
        target_pseudo = pseudo_labels(banks, k_easy, z_t)
    optimizer.zero_grad()
    losses = main_loss_and_grads(model, hard_batch, target_batch, target_pseudo, lambda1, lambda2)
    optimizer.step()
    return losses


def _supcon_on_g(model: HednModel, batch: Batch, tau: float) -> float:
    keep = batch.clusters != NOISE
    if keep.sum() < 2:
        return 0.0
    feats = forward_features(model, batch.x[keep], False)
    z = forward_embedding(model, feats, True)
    loss, grad = supcon_loss(z, batch.clusters[keep], tau)
    if loss != 0.0 or np.any(grad):
        model.g.backward(grad)
    return loss


def struct_loss_and_grads(model: HednModel, easy_batch: Batch, target_batch: Batch, tau: float):
    return _supcon_on_g(model, easy_batch, tau), _supcon_on_g(model, target_batch, tau)


def step2_struct(model: HednModel, easy_batch: Batch, target_batch: Batch, tau: float,
                 optimizer: RMSprop):
    """Update g only, on the cluster contrastive loss of the easy source batch
    plus that of the target batch. Noise rows are dropped."""
    optimizer.zero_grad()
    losses = struct_loss_and_grads(model, easy_batch, target_batch, tau)
    optimizer.step()
    return losses


@dataclass
class TrainResult:
    model: HednModel
    banks: MemoryBanks | None
    logs: list[IterationLog]
    config: TrainConfig
    dbscan_params: DbscanParams | None = None
    adaptation_time: float = 0.0
    source_assignments: list[ClusterAssignment] = field(default_factory=list)
    target_assignment: ClusterAssignment | None = None

    def predict(self, x) -> np.ndarray:
        """Prototype vote when the easy branch is on, classifier argmax
        otherwise."""
        if self.banks is not None:
            return predict_batch(self.banks, self.model, x)
        return np.argmax(predict_logits(self.model, x), axis=1)


def make_optimizers(model: HednModel, config: TrainConfig) -> tuple[RMSprop, RMSprop]:
    def opt(parts):
        params = [p for part in parts for p in part.params()]
        grads = [g for part in parts for g in part.grads()]
        return RMSprop(params, grads, lr=config.lr, alpha=config.rms_alpha, eps=config.rms_eps,
                       weight_decay=config.weight_decay)

    return opt([model.f, model.h, model.d]), opt([model.g])


def cluster_domains(sources: list[SubjectDataset], target: SubjectDataset, config: TrainConfig):
    """Tune DBSCAN on the target and apply the winning parameters to every
    domain."""
    trials = target.trial_ids if config.tune_with_trials else None
    tuned = tune_dbscan(target.features, trial_ids=trials)
    if tuned.params is None:
        log.warning("DBSCAN grid rejected every configuration; using fallback clusters")
    src = [assign_clusters(s.features, tuned.params, s.labels) for s in sources]
    tgt = tuned.assignment
    return tuned.params, src, tgt


def _check_finite(it: int, *values: float) -> None:
    if not all(math.isfinite(v) for v in values):
        raise NumericError(f"non-finite loss at iteration {it}: {values}")


def train(sources: list[SubjectDataset], target: SubjectDataset, config: TrainConfig | None = None,
          n_classes: int | None = None, source_assignments=None, target_assignment=None,
          on_iteration=None) -> TrainResult:
    """Run the full training procedure and return the final model, banks and
    per-iteration logs. Deterministic for a fixed ``config.seed``."""
    config = (config or TrainConfig()).validate()
    if len(sources) < 2:
        raise ConfigError("need at least 2 source domains")
    d_in = target.n_features
    if any(s.n_features != d_in for s in sources):
        raise ConfigError("all domains must share the feature dimension")
    if n_classes is None:
        n_classes = int(max(s.labels.max() for s in sources)) + 1
    n_classes = max(n_classes, 2)
    for s in sources:
        if not s.labeled:
            raise ConfigError(f"source domain {s.domain_id} is unlabeled")
        s.check_labels(n_classes)

    params = None
    if source_assignments is None or target_assignment is None:
        params, source_assignments, target_assignment = cluster_domains(sources, target, config)

    model = init_model(d_in, n_classes, seed=config.seed, dropout_p=config.dropout_p)
    banks = None
    if config.easy_network:
        banks = init_banks(sources, target, source_assignments, target_assignment, model)
    opt_main, opt_g = make_optimizers(model, config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    domains = [Domain(s, a) for s, a in zip(sources, source_assignments)]
    domains.append(Domain(target, target_assignment))

    logs = []
    t0 = time.perf_counter()
    for it in range(config.iterations):
        t_it = time.perf_counter()
        batches = sample_batches(domains, config.batch_size, rng)
        src_batches, tgt_batch = batches[:-1], batches[-1]
        report = assess_reliability(model, src_batches)
        k_easy, k_hard = report.k_easy, report.k_hard
        lam1 = lambda1_schedule(it, config.iterations, config.lambda1_rate)

        if banks is not None:
            update_prototypes(model, banks, src_batches[k_easy], k_easy, tgt_batch,
                              config.gamma_s, config.gamma_t, config.ema_train_mode)
        l_cls, l_adv, l_cl = step1_main(model, src_batches[k_hard], tgt_batch, banks, k_easy,
                                        lam1, config.lambda2 if banks is not None else 0.0,
                                        opt_main)
        l_clu_s = l_clu_t = 0.0
        if banks is not None:
            l_clu_s, l_clu_t = step2_struct(model, src_batches[k_easy], tgt_batch, config.tau, opt_g)
        _check_finite(it, l_cls, l_adv, l_cl, l_clu_s, l_clu_t)
        entry = IterationLog(it, k_easy, k_hard, l_cls, l_adv, l_cl, l_clu_s, l_clu_t, lam1,
                             time.perf_counter() - t_it, tuple(float(r) for r in report.scores))
        logs.append(entry)
        if on_iteration is not None:
            on_iteration(entry, model, banks)
    elapsed = time.perf_counter() - t0
    model.eval()
    return TrainResult(model, banks, logs, config, params, elapsed,
                       list(source_assignments), target_assignment)


LOG_FIELDS = [f.name for f in fields(IterationLog) if f.name not in ("wall_time", "reliability")]


def write_logs(path, logs: list[IterationLog], include_timing: bool = False) -> None:
    """Iteration log as CSV. Wall time is excluded unless requested so that
    reruns produce byte-identical files."""
    cols = LOG_FIELDS + (["wall_time"] if include_timing else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for entry in logs:
            row = asdict(entry)
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])

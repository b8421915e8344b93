"""Joint supervised training with interleaved feature reclustering.

Per batch: forward pass under the current membership matrix, combined loss
(supervision plus the weighted cluster-shape regularizer), one Adam step.
After the optimizer step the feature weights are re-unified and reclustered
on the configured cadence; centroid motion is EMA-damped whenever the
membership flips. Early stopping watches the validation supervised loss and
the returned checkpoint is the best-validation one, not the last.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import AdamState, adam_step, stack
from .clustering import (
    ClusterState,
    ReclusterOptions,
    hard_membership,
    init_kmeanspp,
    init_prior,
    membership_from_scores,
    recluster,
    reg_basis,
    reg_loss,
    score_points,
    unify_all,
    unify_tensor,
)
from .metrics import ari, auprc, auroc, nmi, silhouette
from .model import GroupedStepwiseModel, ModelConfig, supervised_loss
from .synthdata import LabeledDataset

RESULTS_SCHEMA = "featgroups-results-v1"
HISTORY_SCHEMA = "featgroups-history-v1"


@dataclass
class ExperimentConfig:
    """Everything one training run depends on; JSON-round-trippable."""

    seed: int = 0
    val_fraction: float = 0.1
    # model
    hidden: int = 6
    groups: int = 3
    agg_mode: str = "mean"
    psi: str = "mlp"
    seq_width: int = 6
    seq_heads: int = 2
    positional_encoding: bool = False
    # optimization
    lr: float = 0.002
    epochs: int = 1000
    batch_size: int = 5000
    patience: int = 10
    # grouping
    grouping: str = "dynamic"  # dynamic | fixed
    fixed_groups: list | None = None  # per-feature cluster ids when fixed
    algorithm: str = "kmeans"  # kmeans | fuzzy | gmm
    membership: str = "hard"  # hard | soft
    delta: float = 0.8
    combine_mode: str = "bias_sum_linear"
    init: str = "kmeanspp"  # kmeanspp | prior
    prior_groups: list | None = None  # per-feature cluster ids
    fuzzifier: float = 2.0
    covariance_type: str = "full"
    ema_rule: str = "moment_matching"
    reg_weight: float = 0.0
    reg_variant: str = "hard"
    ema_decay: float = 0.0
    recluster_every: int = 1
    recluster_unit: str = "epoch"  # epoch | batch | never
    standardize: bool = True  # z-score features with train-split statistics
    feature_init: str = "shared"  # shared | independent embedding-weight init

    def __post_init__(self):
        for name, value in (
            ("reg_weight", self.reg_weight),
            ("ema_decay", self.ema_decay),
            ("delta", self.delta),
        ):
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")
        if self.recluster_every < 1:
            raise ValueError("recluster_every must be >= 1 (use recluster_unit='never' to disable)")
        if self.recluster_unit not in ("epoch", "batch", "never"):
            raise ValueError(f"unknown recluster_unit {self.recluster_unit!r}")
        if self.grouping not in ("dynamic", "fixed"):
            raise ValueError(f"unknown grouping {self.grouping!r}")
        if self.grouping == "fixed" and self.fixed_groups is None:
            raise ValueError("fixed grouping needs fixed_groups")
        if self.algorithm not in ("kmeans", "fuzzy", "gmm"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.init not in ("kmeanspp", "prior"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "prior" and self.grouping == "dynamic" and self.prior_groups is None:
            raise ValueError("prior init needs prior_groups")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    reg_loss: float
    val_loss: float
    membership: list  # (F, K) 0/1
    centroids: list
    ari: float | None
    nmi: float | None
    silhouette: float | None

    def to_json(self) -> str:
        payload = {"schema": HISTORY_SCHEMA, **asdict(self)}
        return json.dumps(payload, sort_keys=True)


@dataclass
class TrainResult:
    model: GroupedStepwiseModel
    cluster_state: ClusterState
    membership: np.ndarray
    history: list  # EpochRecord
    best_epoch: int
    best_val_loss: float
    metrics: dict
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    diverged: bool = False
    divergence_info: dict | None = None


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last-good checkpoint."""

    def __init__(self, message: str, result: TrainResult):
        super().__init__(message)
        self.result = result


def _groups_to_matrix(assignment, k: int) -> np.ndarray:
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.min() < 0 or assignment.max() >= k:
        raise ValueError(f"group ids must be in [0, {k})")
    member = np.zeros((assignment.size, k))
    member[np.arange(assignment.size), assignment] = 1.0
    return member


def _split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return order[n_val:], order[:n_val]


def _batched_logits(model: GroupedStepwiseModel, x, membership, batch_size: int) -> np.ndarray:
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], batch_size):
        stop = start + batch_size
        out[start:stop] = model.forward(x[start:stop], membership).data
    return out


def _mean_bce(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits
    return float(np.mean(np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))))


def _partition_from_state(points, state: ClusterState, membership: np.ndarray, fixed: bool) -> np.ndarray:
    if fixed or state is None:
        # fixed groupings report the grouping actually used by the model
        return membership.argmax(axis=1)
    return score_points(points, state).argmax(axis=1)


def _clustering_metrics(dataset, points, state, membership, fixed: bool = False):
    truth = dataset.truth_labels if dataset.truth_groups else None
    partition = _partition_from_state(points, state, membership, fixed)
    ari_val = nmi_val = sil_val = None
    if truth is not None:
        ari_val = ari(truth, partition)
        nmi_val = nmi(truth, partition)
    if len(np.unique(partition)) >= 2:
        sil_val = silhouette(points, partition)
    return ari_val, nmi_val, sil_val, partition


def _init_clustering(config: ExperimentConfig, points, rng_init):
    kind = config.algorithm
    if config.grouping == "fixed":
        # fixed runs never recluster, so a centroid-only state suffices; an
        # empty fixed group (legal, e.g. random references) gets the global
        # mean as a placeholder centroid
        member = _groups_to_matrix(config.fixed_groups, config.groups)
        sizes = member.sum(axis=0)
        centroids = np.empty((config.groups, points.shape[1]))
        for k in range(config.groups):
            centroids[k] = points[member[:, k] > 0].mean(axis=0) if sizes[k] else points.mean(axis=0)
        state = ClusterState(kind="kmeans", centroids=centroids)
        state.membership = member
        return state, member
    if config.init == "prior":
        member = _groups_to_matrix(config.prior_groups, config.groups)
        state = init_prior(
            points, member, kind=kind, fuzzifier=config.fuzzifier, covariance_type=config.covariance_type
        )
        return state, member
    state = init_kmeanspp(
        points,
        config.groups,
        rng_init,
        kind=kind,
        fuzzifier=config.fuzzifier,
        covariance_type=config.covariance_type,
    )
    member = membership_from_scores(score_points(points, state), config.membership, config.delta)
    state.membership = member
    return state, member


def train(config: ExperimentConfig, dataset: LabeledDataset) -> TrainResult:
    """Run the full training loop and return the best-validation checkpoint."""
    x, y = dataset.series, dataset.labels.astype(np.float64)
    if x.shape[0] < 2:
        raise ValueError("dataset must contain at least 2 samples")
    rng_model = np.random.default_rng([config.seed, 0])
    rng_batch = np.random.default_rng([config.seed, 1])
    rng_init = np.random.default_rng([config.seed, 2])
    rng_split = np.random.default_rng([config.seed, 3])

    train_idx, val_idx = _split_indices(x.shape[0], config.val_fraction, rng_split)
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]
    norm_mean = np.zeros(x.shape[2])
    norm_std = np.ones(x.shape[2])
    if config.standardize:
        norm_mean = x_train.mean(axis=(0, 1))
        norm_std = np.maximum(x_train.std(axis=(0, 1)), 1e-12)
        x_train = (x_train - norm_mean) / norm_std
        x_val = (x_val - norm_mean) / norm_std

    model_config = ModelConfig(
        feature_cards=[1] * x.shape[2],
        hidden=config.hidden,
        groups=config.groups,
        agg_mode=config.agg_mode,
        psi=config.psi,
        seq_width=config.seq_width,
        seq_heads=config.seq_heads,
        positional_encoding=config.positional_encoding,
        feature_init=config.feature_init,
    )
    model = GroupedStepwiseModel(model_config, rng_model)
    params = model.parameters()
    adam = AdamState.for_params(params)

    points = unify_all(model.feature_weight_arrays(), config.combine_mode)
    state, membership = _init_clustering(config, points, rng_init)
    recluster_options = ReclusterOptions(
        combine_mode=config.combine_mode,
        membership=config.membership,
        delta=config.delta,
        alpha=config.ema_decay,
        ema_rule=config.ema_rule,
    )
    dynamic = config.grouping == "dynamic" and config.recluster_unit != "never"

    history: list[EpochRecord] = []
    best_val = np.inf
    best_epoch = -1
    best_snapshot = (model.state_dict(), state.copy(), membership.copy())
    stall = 0
    step = 0

    def make_result(metrics, diverged=False, info=None) -> TrainResult:
        best_model = GroupedStepwiseModel(model_config, np.random.default_rng([config.seed, 0]))
        best_model.load_state_dict(best_snapshot[0])
        return TrainResult(
            model=best_model,
            cluster_state=best_snapshot[1],
            membership=best_snapshot[2],
            history=history,
            best_epoch=best_epoch,
            best_val_loss=float(best_val),
            metrics=metrics,
            norm_mean=norm_mean,
            norm_std=norm_std,
            diverged=diverged,
            divergence_info=info,
        )

    for epoch in range(config.epochs):
        order = rng_batch.permutation(x_train.shape[0])
        epoch_losses = []
        epoch_regs = []
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            logits = model.forward(x_train[batch], membership)
            loss = supervised_loss(logits, y_train[batch])
            total = loss
            reg_value = 0.0
            if config.reg_weight > 0.0:
                u = stack([unify_tensor(w, config.combine_mode) for w in model.feature_weights])
                if config.reg_variant == "hard":
                    basis = membership
                else:
                    basis = reg_basis(unify_all(model.feature_weight_arrays(), config.combine_mode), state)
                reg, _ = reg_loss(u, basis, state.centroids, config.reg_variant)
                reg_value = reg.item()
                total = loss + config.reg_weight * reg
            loss_value = loss.item()
            if not np.isfinite(loss_value) or not np.isfinite(reg_value):
                info = {
                    "epoch": epoch,
                    "step": step,
                    "train_loss": loss_value,
                    "reg_loss": reg_value,
                }
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}", make_result({}, True, info)
                )
            epoch_losses.append(loss_value)
            epoch_regs.append(reg_value)
            total.backward()
            # parameters of groups that are currently empty never enter
            # the graph; they simply receive no update
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            adam_step(params, grads, adam, config.lr)
            step += 1
            if dynamic and config.recluster_unit == "batch" and step % config.recluster_every == 0:
                membership, state = recluster(model.feature_weight_arrays(), state, recluster_options)
        if dynamic and config.recluster_unit == "epoch" and (epoch + 1) % config.recluster_every == 0:
            membership, state = recluster(model.feature_weight_arrays(), state, recluster_options)

        val_logits = _batched_logits(model, x_val, membership, config.batch_size)
        val_loss = _mean_bce(val_logits, y_val)
        points = unify_all(model.feature_weight_arrays(), config.combine_mode)
        ari_val, nmi_val, sil_val, _ = _clustering_metrics(
            dataset, points, state, membership, fixed=config.grouping == "fixed"
        )
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)),
                reg_loss=float(np.mean(epoch_regs)),
                val_loss=val_loss,
                membership=membership.astype(int).tolist(),
                centroids=state.centroids.tolist(),
                ari=ari_val,
                nmi=nmi_val,
                silhouette=sil_val,
            )
        )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = (model.state_dict(), state.copy(), membership.copy())
            stall = 0
        else:
            stall += 1
            if stall > config.patience:
                break

    result = make_result({})
    result.metrics = evaluate(
        result.model, result.cluster_state, result.membership, dataset, config, norm_mean, norm_std
    )
    return result


def evaluate(
    model: GroupedStepwiseModel,
    state: ClusterState | None,
    membership: np.ndarray,
    dataset: LabeledDataset,
    config: ExperimentConfig,
    norm_mean: np.ndarray | None = None,
    norm_std: np.ndarray | None = None,
) -> dict:
    """Classification metrics on the validation split plus clustering quality
    of the final membership against the dataset's ground-truth groups."""
    rng_split = np.random.default_rng([config.seed, 3])
    _, val_idx = _split_indices(dataset.series.shape[0], config.val_fraction, rng_split)
    x_val = dataset.series[val_idx]
    if norm_mean is not None and norm_std is not None:
        x_val = (x_val - norm_mean) / norm_std
    logits = _batched_logits(model, x_val, membership, config.batch_size)
    scores = 1.0 / (1.0 + np.exp(-logits))
    labels = dataset.labels[val_idx]
    points = unify_all(model.feature_weight_arrays(), config.combine_mode)
    ari_val, nmi_val, sil_val, partition = _clustering_metrics(
        dataset, points, state, membership, fixed=config.grouping == "fixed"
    )
    return {
        "auprc": auprc(scores, labels) if 0 < labels.sum() < labels.size else None,
        "auroc": auroc(scores, labels) if 0 < labels.sum() < labels.size else None,
        "ari": ari_val,
        "nmi": nmi_val,
        "silhouette": sil_val,
        "partition": partition.tolist(),
        "val_loss": _mean_bce(logits, labels.astype(np.float64)),
    }

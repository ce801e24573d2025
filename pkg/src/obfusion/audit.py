"""Attribute-inference evaluation: raw-trained desired/intrusive classifiers,
privacy loss, re-identification attacks, embedding-leakage audits over
contrastive snapshots, and the guidance-weight trade-off sweep."""

from __future__ import annotations

import csv
import io
import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import TOOL_VERSION
from . import nncore as nn
from .data import Dataset, load_dataset
from .errors import ConfigError, DependencyError, NumericError, SchemaError
from .guidance import GuidanceSpec, ModelBundle, Negation, obfuscate_batch
from .mine import MineConfig, mine_estimate

TRAINED_ON = ("raw", "obfuscated")

SWEEP_FIELDS = ("w_u", "w_s", "utility_acc", "utility_f1", "intrusive_acc",
                "privacy_loss")
MI_FIELDS = ("epoch", "attribute", "mi_nats")


# ---------------------------------------------------------------------------
# inference classifier


class SegmentClassifier(nn.Module):
    """Four strided conv layers then a three-layer FC head over segments."""

    def __init__(self, channels: int, window_len: int, n_classes: int,
                 rng: np.random.Generator,
                 conv_channels: tuple[int, ...] = (16, 32, 64, 64),
                 fc_widths: tuple[int, int] = (128, 64)):
        super().__init__()
        if len(conv_channels) != 4:
            raise ConfigError("classifier uses exactly four conv layers")
        self.channels, self.window_len = channels, window_len
        self.n_classes = n_classes
        self.conv_channels = tuple(conv_channels)
        self.fc_widths = tuple(fc_widths)
        length = window_len
        c_in = channels
        for i, c_out in enumerate(conv_channels):
            self.add_child(f"conv{i}", nn.Conv1d(c_in, c_out, 3, rng, stride=2))
            length = (length - 1) // 2 + 1
            c_in = c_out
        self.flat_dim = c_in * length
        self.add_child("fc", nn.MLP([self.flat_dim, *fc_widths, n_classes], rng))
        self.act = nn.SiLU()

    def forward(self, x: np.ndarray):
        caches = []
        h = x
        for i in range(4):
            h, c = self._children[f"conv{i}"].forward(h)
            h, a = self.act.forward(h)
            caches.append((c, a))
        shape = h.shape
        logits, c_fc = self._children["fc"].forward(h.reshape(h.shape[0], -1))
        logp = nn.log_softmax(logits)
        return logp, (caches, shape, c_fc, logp)

    def backward(self, cache, grad_out):
        caches, shape, c_fc, logp = cache
        p = np.exp(logp)
        dlogits = grad_out - p * grad_out.sum(axis=1, keepdims=True)
        grads: dict[str, np.ndarray] = {}
        (dh,), g = self._children["fc"].backward(c_fc, dlogits)
        grads.update(nn.prefix_grads("fc", g))
        dh = dh.reshape(shape)
        for i in range(3, -1, -1):
            c, a = caches[i]
            (dh,), _ = self.act.backward(a, dh)
            (dh,), g = self._children[f"conv{i}"].backward(c, dh)
            grads.update(nn.prefix_grads(f"conv{i}", g))
        return (dh,), grads

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return self.predict(x)

    def meta(self) -> dict:
        return {"channels": self.channels, "window_len": self.window_len,
                "n_classes": self.n_classes,
                "conv_channels": list(self.conv_channels),
                "fc_widths": list(self.fc_widths)}


@dataclass
class ClassifierConfig:
    conv_channels: tuple[int, ...] = (16, 32, 64, 64)
    fc_widths: tuple[int, int] = (128, 64)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    holdout: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError("holdout must be in (0, 1)")


@dataclass
class TrainedClassifier:
    model: SegmentClassifier
    attribute: str
    trained_on: str
    holdout_accuracy: float
    loss_history: list[float] = field(default_factory=list)


def predict_labels(model: SegmentClassifier, values: np.ndarray) -> np.ndarray:
    """Argmax over class log-probs; ties resolve to the lowest class index."""
    return model.log_prob(values.astype(np.float32)).argmax(axis=1)


def train_eval_classifier(dataset: Dataset, attribute: str,
                          cfg: ClassifierConfig | None = None,
                          rng: np.random.Generator | None = None,
                          trained_on: str = "raw") -> TrainedClassifier:
    cfg = cfg or ClassifierConfig()
    cfg.validate()
    if trained_on not in TRAINED_ON:
        raise ConfigError(f"trained_on must be one of {TRAINED_ON}")
    if attribute not in dataset.labels:
        raise SchemaError(f"attribute {attribute!r} not in dataset")
    labels = dataset.labels[attribute]
    n_classes = dataset.cardinality(attribute)
    if np.unique(labels).size < 2:
        raise ConfigError(f"attribute {attribute!r} is degenerate in this "
                          f"dataset")
    rng = rng or np.random.default_rng(cfg.seed)
    model = SegmentClassifier(dataset.channels, dataset.window_len, n_classes,
                              rng, cfg.conv_channels, cfg.fc_widths)
    opt = nn.make_optimizer(model.params(), "adam", lr=cfg.lr)

    n = len(dataset)
    order = rng.permutation(n)
    n_hold = max(1, int(round(cfg.holdout * n)))
    hold, fit = order[:n_hold], order[n_hold:]
    x = dataset.values.astype(np.float32)

    history = []
    for epoch in range(cfg.epochs):
        epoch_order = fit[rng.permutation(fit.size)]
        total, batches = 0.0, 0
        for start in range(0, epoch_order.size, cfg.batch_size):
            idx = epoch_order[start:start + cfg.batch_size]
            logp, cache = model.forward(x[idx])
            b = idx.size
            loss = -float(logp[np.arange(b), labels[idx]].mean())
            if not np.isfinite(loss):
                raise NumericError(f"classifier diverged at epoch {epoch}")
            seed = np.zeros_like(logp)
            seed[np.arange(b), labels[idx]] = -1.0 / b
            _, grads = model.backward(cache, seed)
            nn.optimizer_step(opt, model.params(), grads)
            total += loss
            batches += 1
        history.append(total / batches)

    acc = float((predict_labels(model, x[hold]) == labels[hold]).mean())
    return TrainedClassifier(model=model, attribute=attribute,
                             trained_on=trained_on, holdout_accuracy=acc,
                             loss_history=history)


# ---------------------------------------------------------------------------
# metrics


def accuracy_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    if y_true.shape != y_pred.shape:
        raise ConfigError("label arrays must align")
    return float((y_true == y_pred).mean())


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1; absent classes contribute 0."""
    scores = []
    for c in range(n_classes):
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores))


def privacy_loss(accuracy: float, cardinality: int) -> float:
    """Deviation of intrusive accuracy from uniform guessing."""
    if cardinality < 2:
        raise ConfigError(f"cardinality must be >= 2, got {cardinality}")
    if not 0.0 <= accuracy <= 1.0:
        raise ConfigError(f"accuracy must be in [0, 1], got {accuracy}")
    return abs(accuracy - 1.0 / cardinality)


# ---------------------------------------------------------------------------
# reporting


@dataclass
class EvalReport:
    metrics: dict[str, dict]
    guidance: dict | None = None
    seed: int | None = None
    checkpoint_digests: dict[str, str] = field(default_factory=dict)
    wall_clock_per_segment: float | None = None
    f1_averaging: str = "macro"
    tool_version: str = TOOL_VERSION

    def to_json(self) -> str:
        payload = {"metrics": self.metrics, "guidance": self.guidance,
                   "seed": self.seed,
                   "checkpoint_digests": self.checkpoint_digests,
                   "wall_clock_per_segment": self.wall_clock_per_segment,
                   "f1_averaging": self.f1_averaging,
                   "tool_version": self.tool_version}
        return json.dumps(payload, sort_keys=True, indent=2)


def evaluate(dataset: Dataset, classifiers: dict[str, TrainedClassifier],
             guidance: dict | None = None, seed: int | None = None,
             checkpoint_digests: dict[str, str] | None = None,
             wall_clock_per_segment: float | None = None) -> EvalReport:
    """Score frozen classifiers on a dataset; pure given its inputs."""
    schema = {a.name: a for a in dataset.schema}
    metrics: dict[str, dict] = {}
    for attr, clf in classifiers.items():
        if attr not in schema:
            raise SchemaError(f"attribute {attr!r} missing from dataset schema")
        truth = dataset.labels[attr]
        pred = predict_labels(clf.model, dataset.values)
        card = schema[attr].cardinality
        entry = {"role": schema[attr].role,
                 "accuracy": accuracy_score(truth, pred),
                 "macro_f1": macro_f1(truth, pred, card),
                 "trained_on": clf.trained_on}
        if schema[attr].role in ("private", "unspecified"):
            entry["privacy_loss"] = privacy_loss(entry["accuracy"], card)
        metrics[attr] = entry
    return EvalReport(metrics=metrics, guidance=guidance, seed=seed,
                      checkpoint_digests=dict(checkpoint_digests or {}),
                      wall_clock_per_segment=wall_clock_per_segment)


def reidentification_attack(obf_train: Dataset, obf_test: Dataset,
                            private_attribute: str,
                            cfg: ClassifierConfig | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Adversary retrains on obfuscated data with true private labels."""
    trained = train_eval_classifier(obf_train, private_attribute, cfg, rng,
                                    trained_on="obfuscated")
    pred = predict_labels(trained.model, obf_test.values)
    return accuracy_score(obf_test.labels[private_attribute], pred)


# ---------------------------------------------------------------------------
# embedding-leakage audit over training snapshots


def _snapshot_epoch(path: str | os.PathLike) -> int | None:
    m = re.search(r"(\d+)(?=\.[^.]+$)", os.path.basename(os.fspath(path)))
    return int(m.group(1)) if m else None


def disentanglement_audit(snapshot_paths: list[str | os.PathLike],
                          attributes: list[str] | None = None,
                          mine_cfg: MineConfig | None = None,
                          noise_std: float = 0.01,
                          rng: np.random.Generator | None = None
                          ) -> list[dict]:
    """MI between embedding snapshots and each attribute, one row per
    (epoch, attribute); labels enter as one-hot vectors plus tiny noise."""
    if not snapshot_paths:
        raise DependencyError("no embedding snapshots to audit")
    mine_cfg = mine_cfg or MineConfig(width=64, steps=800)
    rng = rng or np.random.default_rng(mine_cfg.seed)
    rows: list[dict] = []
    for i, path in enumerate(snapshot_paths):
        if not os.path.exists(path):
            raise DependencyError(f"missing snapshot {os.fspath(path)!r}")
        snap = load_dataset(path)
        emb = snap.values.reshape(len(snap), -1)
        epoch = _snapshot_epoch(path)
        names = attributes or [a.name for a in snap.schema]
        for attr in names:
            if attr not in snap.labels:
                raise SchemaError(f"attribute {attr!r} missing from snapshot")
            card = snap.cardinality(attr)
            onehot = np.eye(card, dtype=np.float32)[snap.labels[attr]]
            onehot = onehot + noise_std * rng.standard_normal(onehot.shape)
            est = mine_estimate(emb, onehot, mine_cfg,
                                np.random.default_rng(mine_cfg.seed))
            rows.append({"epoch": i if epoch is None else epoch,
                         "attribute": attr, "mi_nats": est})
    return rows


def mi_rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MI_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in MI_FIELDS})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# guidance-weight sweep


def cell_seed(base_seed: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence((base_seed, i, j)).generate_state(1)[0])


def tradeoff_sweep(w_u_grid: list[float], w_s_grid: list[float],
                   bundle: ModelBundle, eval_dataset: Dataset,
                   classifiers: dict[str, TrainedClassifier],
                   public_attribute: str, private_attribute: str,
                   seed: int = 0, batch_size: int = 128) -> list[dict]:
    """Obfuscate the eval set at every grid cell with frozen models and
    score utility against intrusion; rows are keyed by grid coordinates."""
    if not w_u_grid or not w_s_grid:
        raise ConfigError("sweep grids must be nonempty")
    for attr in (public_attribute, private_attribute):
        if attr not in classifiers:
            raise ConfigError(f"no classifier supplied for {attr!r}")
    schema = {a.name: a for a in eval_dataset.schema}
    card = schema[private_attribute].cardinality
    rows: list[dict] = []
    for i, w_u in enumerate(w_u_grid):
        for j, w_s in enumerate(w_s_grid):
            negs = [Negation(private_attribute, w_s)] if w_s != 0.0 else []
            gspec = GuidanceSpec(w_u=w_u, negations=negs)
            obf, _ = obfuscate_batch(eval_dataset, bundle, gspec,
                                     seed=cell_seed(seed, i, j),
                                     batch_size=batch_size)
            u_pred = predict_labels(classifiers[public_attribute].model,
                                    obf.values)
            s_pred = predict_labels(classifiers[private_attribute].model,
                                    obf.values)
            u_true = eval_dataset.labels[public_attribute]
            s_true = eval_dataset.labels[private_attribute]
            u_acc = accuracy_score(u_true, u_pred)
            s_acc = accuracy_score(s_true, s_pred)
            rows.append({"w_u": w_u, "w_s": w_s,
                         "utility_acc": u_acc,
                         "utility_f1": macro_f1(u_true, u_pred,
                                                schema[public_attribute]
                                                .cardinality),
                         "intrusive_acc": s_acc,
                         "privacy_loss": privacy_loss(s_acc, card)})
    return rows


def sweep_rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in SWEEP_FIELDS})
    return buf.getvalue()

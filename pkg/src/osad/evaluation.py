"""Metrics and attacked evaluation protocols (white-box, black-box, OOD)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .attacks import AttackConfig, attack_labels, ce_loss_fn, run_attack
from .data import ImageBatch, OpenSetData, iterate_batches, make_eval_stream
from .errors import ConfigError, DataError
from .networks import OsdnModel, eval_mode
from .openmax import OpenMaxModel, fit_evt, openmax_probs, predict


def closed_set_accuracy(true_labels, predicted_labels) -> float:
    """Percentage of correct known-class predictions."""
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.size == 0:
        raise DataError("closed-set accuracy of an empty set is undefined")
    return 100.0 * float(np.mean(t == p))


def auc_roc(scores, is_open) -> float:
    """Tie-aware Mann-Whitney estimate of P(open score > known score)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_open, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC-ROC needs both open-set and known samples")
    r = rankdata(s, method="average")
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_f1(true_labels, predicted_labels, num_labels: int) -> float:
    """Unweighted mean of per-class F1 over classes that occur in either array."""
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.shape != p.shape:
        raise DataError("true and predicted labels differ in length")
    if t.size and (t.min() < 0 or t.max() >= num_labels or p.min() < 0 or p.max() >= num_labels):
        raise DataError(f"labels must lie in 0..{num_labels - 1}")
    f1s = []
    for c in range(num_labels):
        tp = np.sum((p == c) & (t == c))
        n_pred, n_true = np.sum(p == c), np.sum(t == c)
        if n_pred == 0 and n_true == 0:
            continue
        denom = n_pred + n_true
        f1s.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(f1s)) if f1s else 0.0


@dataclass
class EvalReport:
    closed_set_acc: float
    auc_roc: float | None
    macro_f1: float | None = None
    per_sample: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {"closed_set_acc": self.closed_set_acc, "auc_roc": self.auc_roc, "macro_f1": self.macro_f1}

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics(), "meta": self.meta}, indent=2, sort_keys=True)

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = ["true_label", "closed_pred", "openmax_pred", "open_score"]
        w.writerow(keys)
        for row in zip(*(self.per_sample[k] for k in keys)):
            w.writerow([row[0], row[1], row[2], repr(float(row[3]))])
        return buf.getvalue()


@torch.no_grad()
def features_and_logits(model: OsdnModel, x: torch.Tensor, feature_space: str = "latent"):
    z = model.encode(x)
    logits = model.classify_known(z)
    v = logits if feature_space == "logits" else z
    return v.double().numpy(), logits.double().numpy()


def calibrate(model: OsdnModel, data: OpenSetData, tail_size: int = 20, sigma: int = 3,
              threshold: float = 0.95, feature_space: str = "latent", belief: str = "cdf",
              batch_size: int = 256) -> OpenMaxModel:
    """Fit OpenMax on clean, correctly classified training images."""
    vs, ls, ys = [], [], []
    with eval_mode(model):
        for b in iterate_batches(data.train_x, data.train_y, batch_size):
            v, l = features_and_logits(model, b.pixels, feature_space)
            vs.append(v)
            ls.append(l)
            ys.append(b.labels.numpy())
    v, l, y = np.concatenate(vs), np.concatenate(ls), np.concatenate(ys)
    return fit_evt(v, y, data.num_known, tail_size, sigma, predictions=l.argmax(axis=1),
                   threshold=threshold, feature_space=feature_space, belief=belief)


def _attack_stream(stream: Sequence[ImageBatch], num_known: int, attack: AttackConfig,
                   attack_model: Callable[[torch.Tensor], torch.Tensor]) -> list[torch.Tensor]:
    out = []
    for b in stream:
        is_known = b.labels < num_known
        labels, _ = attack_labels(attack_model, b.pixels, b.labels, is_known)
        out.append(run_attack(ce_loss_fn(attack_model), b.pixels, labels, attack).pixels)
    return out


def score(model: OsdnModel, om: OpenMaxModel, stream: Sequence[ImageBatch], num_known: int,
          attack: AttackConfig | None, attack_model=None, meta: dict | None = None,
          require_open: bool = True) -> EvalReport:
    """Attack every batch (open-set items with predicted labels), then score with OpenMax."""
    meta = dict(meta or {})
    with eval_mode(model):
        if attack is not None and attack.family != "none":
            src = attack_model if attack_model is not None else model.logits
            adv = _attack_stream(stream, num_known, attack, src)
        else:
            adv = [b.pixels for b in stream]
        vs, ls = zip(*(features_and_logits(model, x, om.feature_space) for x in adv))
    v, l = np.concatenate(vs), np.concatenate(ls)
    y = torch.cat([b.labels for b in stream]).numpy()
    scores = openmax_probs(l, v, om)
    om_pred = predict(scores.probs, om.threshold)
    closed_pred = l.argmax(axis=1)
    known = y < num_known
    acc = closed_set_accuracy(y[known], closed_pred[known])
    auc = None
    if (~known).any():
        auc = auc_roc(scores.open_score, ~known)
    elif require_open:
        raise DataError("stream contains no open-set samples")
    f1 = macro_f1(y, om_pred, num_known + 1)
    per_sample = {"true_label": y.tolist(), "closed_pred": closed_pred.tolist(),
                  "openmax_pred": om_pred.tolist(), "open_score": scores.open_score.tolist()}
    meta["attack"] = asdict(attack) if attack is not None else None
    return EvalReport(acc, auc, f1, per_sample, meta)


def evaluate(model: OsdnModel, om: OpenMaxModel, data: OpenSetData, attack: AttackConfig | None,
             partition: str = "test", batch_size: int = 256, meta: dict | None = None) -> EvalReport:
    stream = make_eval_stream(data, partition, include_open=True, batch_size=batch_size)
    return score(model, om, stream, data.num_known, attack, meta=meta)


def run_blackbox(target: OsdnModel, substitute: torch.nn.Module, om: OpenMaxModel, data: OpenSetData,
                 attack: AttackConfig, batch_size: int = 256, meta: dict | None = None) -> EvalReport:
    """Score ``target`` on adversarial test data crafted against ``substitute`` only."""
    if substitute is None:
        raise ConfigError("missing substitute model")
    if substitute is target or isinstance(substitute, OsdnModel):
        raise ConfigError("the substitute must differ structurally from the target")
    tgt = {id(p) for p in target.parameters()}
    if any(id(p) in tgt for p in substitute.parameters()):
        raise ConfigError("the substitute shares parameters with the target")
    substitute.eval()
    meta = {**(meta or {}), "protocol": "blackbox"}
    stream = make_eval_stream(data, "test", include_open=True, batch_size=batch_size)
    return score(target, om, stream, data.num_known, attack, attack_model=substitute, meta=meta)


def evaluate_ood(model: OsdnModel, om: OpenMaxModel, known_x: np.ndarray, known_y: np.ndarray,
                 ood_x: np.ndarray, attack: AttackConfig | None, batch_size: int = 256,
                 meta: dict | None = None) -> EvalReport:
    """Known test images plus an out-of-distribution source labeled as open."""
    c = om.num_classes
    x = np.concatenate([known_x, ood_x]).astype(np.float32)
    y = np.concatenate([known_y, np.full(len(ood_x), c, dtype=np.int64)])
    stream = list(iterate_batches(x, y, batch_size))
    return score(model, om, stream, c, attack, meta={**(meta or {}), "protocol": "ood"})

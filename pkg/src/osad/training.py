"""Losses and the alternating main/peer adversarial training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackConfig, ce_loss_fn, run_attack
from .data import OpenSetData, iterate_batches, rotate_images
from .errors import ContractError, DataError, NumericError
from .networks import OsdnModel, eval_mode, frozen_batchnorm

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
TERMS = ("cls_adv", "rec", "ssd", "mut")
REC_REDUCTIONS = ("sum", "pixel_mean")


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    val_attack: bool = True
    weights: dict = field(default_factory=lambda: {t: 1.0 for t in TERMS})
    rec_reduction: str = "sum"
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.rec_reduction not in REC_REDUCTIONS:
            raise ValueError(f"rec_reduction must be one of {REC_REDUCTIONS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


@dataclass(frozen=True)
class LossBreakdown:
    cls_adv: float = 0.0
    rec: float = 0.0
    ssd: float = 0.0
    mut: float = 0.0
    total_main: float = 0.0
    cls_clean: float = 0.0
    mut_peer: float = 0.0
    total_peer: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


# -- individual losses -----------------------------------------------------------

def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    c = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in 0..{c - 1}")
    return F.cross_entropy(logits, labels)


def loss_cls_adv(model: OsdnModel, x_adv: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return cross_entropy(model.logits(x_adv), y)


def reconstruction_error(x_clean: torch.Tensor, recon: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Batch mean of per-image squared error, summed (default) or averaged over pixels."""
    err = (x_clean - recon).pow(2).flatten(1)
    per_image = err.sum(dim=1) if reduction == "sum" else err.mean(dim=1)
    return per_image.mean()


def loss_rec(model: OsdnModel, x_clean: torch.Tensor, x_adv: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    return reconstruction_error(x_clean, model.decode(model.encode(x_adv)), reduction)


def loss_mutual(p_target: torch.Tensor, p_learner: torch.Tensor, atol: float = 1e-6) -> torch.Tensor:
    """Batch-mean KL(p_target || p_learner); the caller detaches whichever side is the target."""
    for name, p in (("p_target", p_target), ("p_learner", p_learner)):
        if not torch.isfinite(p).all():
            raise NumericError(f"{name} contains non-finite probabilities")
        if (p < 0).any() or not torch.allclose(p.sum(dim=1), torch.ones(p.shape[0], dtype=p.dtype), atol=atol):
            raise ContractError(f"{name} rows must be probability distributions")
    pt = p_target.clamp_min(PROB_FLOOR)
    pl = p_learner.clamp_min(PROB_FLOOR)
    return (p_target * (pt.log() - pl.log())).sum(dim=1).mean()


def kl_from_logits(target_logits: torch.Tensor, learner_logits: torch.Tensor) -> torch.Tensor:
    return loss_mutual(F.softmax(target_logits, dim=1), F.softmax(learner_logits, dim=1))


def sample_rotations(n: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(0, 4, (n,), generator=generator)


def rotated_adversarial(model: OsdnModel, x_clean: torch.Tensor, r: torch.Tensor,
                        attack: AttackConfig) -> torch.Tensor:
    """Rotate, then attack the encoder + transformation head with the rotation labels."""
    x_rot = rotate_images(x_clean, r)
    with frozen_batchnorm(model):
        return run_attack(ce_loss_fn(model.rotation_logits), x_rot, r, attack).pixels


def loss_ssd(model: OsdnModel, x_clean: torch.Tensor, generator: torch.Generator,
             attack: AttackConfig) -> torch.Tensor:
    r = sample_rotations(x_clean.shape[0], generator)
    x_rot_adv = rotated_adversarial(model, x_clean, r, attack)
    return cross_entropy(model.rotation_logits(x_rot_adv), r)


# -- step-level composition --------------------------------------------------------

def main_losses(model: OsdnModel, x: torch.Tensor, y: torch.Tensor, x_adv: torch.Tensor,
                x_rot_adv: torch.Tensor | None = None, r: torch.Tensor | None = None,
                peer_probs: torch.Tensor | None = None, weights: dict | None = None,
                rec_reduction: str = "sum") -> dict:
    """Weighted main-branch terms for fixed adversarial inputs; disabled terms are absent."""
    w = weights or {}
    z = model.encode(x_adv)
    logits = model.classify_known(z)
    out = {"cls_adv": w.get("cls_adv", 1.0) * cross_entropy(logits, y), "logits_adv": logits}
    if model.decoder is not None:
        out["rec"] = w.get("rec", 1.0) * reconstruction_error(x, model.decode(z), rec_reduction)
    if model.transform_head is not None:
        out["ssd"] = w.get("ssd", 1.0) * cross_entropy(model.rotation_logits(x_rot_adv), r)
    if model.peer is not None:
        out["mut"] = w.get("mut", 1.0) * loss_mutual(peer_probs.detach(), F.softmax(logits, dim=1))
    out["total"] = sum(out[t] for t in TERMS if t in out)
    return out


def peer_losses(model: OsdnModel, x: torch.Tensor, y: torch.Tensor, main_probs: torch.Tensor,
                weights: dict | None = None) -> dict:
    w = weights or {}
    logits = model.peer_forward(x)
    cls = cross_entropy(logits, y)
    mut = w.get("mut", 1.0) * loss_mutual(main_probs.detach(), F.softmax(logits, dim=1))
    return {"cls_clean": cls, "mut_peer": mut, "total": cls + mut, "logits": logits}


class Trainer:
    """Owns the optimizers and RNG; one instance per training run."""

    def __init__(self, model: OsdnModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.opt_main = torch.optim.Adam(model.main_parameters(), lr=cfg.learning_rate)
        self.opt_peer = (torch.optim.Adam(model.peer_parameters(), lr=cfg.learning_rate)
                         if model.peer is not None else None)

    def step(self, x: torch.Tensor, y: torch.Tensor) -> LossBreakdown:
        model, cfg = self.model, self.cfg
        model.train()
        with frozen_batchnorm(model):
            x_adv = run_attack(ce_loss_fn(model.logits), x, y, cfg.attack).pixels
        x_rot_adv = r = None
        if model.transform_head is not None:
            r = sample_rotations(x.shape[0], self.generator)
            x_rot_adv = rotated_adversarial(model, x, r, cfg.attack)
        peer_probs = None
        if model.peer is not None:
            with torch.no_grad(), frozen_batchnorm(model.peer):
                peer_probs = F.softmax(model.peer_forward(x), dim=1)

        terms = main_losses(model, x, y, x_adv, x_rot_adv, r, peer_probs, cfg.weights, cfg.rec_reduction)
        total = terms["total"]
        if not torch.isfinite(total):
            raise NumericError(f"non-finite main loss: {total.item()}")
        self.opt_main.zero_grad(set_to_none=True)
        total.backward()
        self.opt_main.step()

        values = {t: float(terms[t].detach()) for t in TERMS if t in terms}
        values["total_main"] = math.fsum(values[t] for t in TERMS if t in values)
        if model.peer is not None:
            main_probs = F.softmax(terms["logits_adv"].detach(), dim=1)
            p = peer_losses(model, x, y, main_probs, cfg.weights)
            if not torch.isfinite(p["total"]):
                raise NumericError(f"non-finite peer loss: {p['total'].item()}")
            self.opt_peer.zero_grad(set_to_none=True)
            p["total"].backward()
            self.opt_peer.step()
            values["cls_clean"] = float(p["cls_clean"].detach())
            values["mut_peer"] = float(p["mut_peer"].detach())
            values["total_peer"] = values["cls_clean"] + values["mut_peer"]
        return LossBreakdown(**values)


def train_step(model: OsdnModel, x: torch.Tensor, y: torch.Tensor, cfg: TrainConfig,
               trainer: Trainer | None = None) -> LossBreakdown:
    return (trainer or Trainer(model, cfg)).step(x, y)


# -- accuracy used for checkpoint selection ---------------------------------------

def adversarial_accuracy(logits_fn, x: np.ndarray, y: np.ndarray, attack: AttackConfig | None,
                         batch_size: int = 256) -> float:
    correct = 0
    for b in iterate_batches(x, y, batch_size):
        xb = b.pixels
        if attack is not None and attack.family != "none":
            xb = run_attack(ce_loss_fn(logits_fn), xb, b.labels, attack).pixels
        with torch.no_grad():
            correct += int((logits_fn(xb).argmax(dim=1) == b.labels).sum())
    if len(y) == 0:
        raise DataError("no samples to score")
    return 100.0 * correct / len(y)


@dataclass
class FitResult:
    model: OsdnModel
    history: list[dict]
    best_epoch: int
    best_val_acc: float
    initial_val_acc: float


def fit(model: OsdnModel, data: OpenSetData, cfg: TrainConfig,
        history_path: str | Path | None = None) -> FitResult:
    """Train for ``cfg.epochs`` and keep the state with the best validation accuracy."""
    torch.manual_seed(cfg.seed)
    trainer = Trainer(model, cfg)
    known = data.val_y < data.split.open_label
    vx, vy = data.val_x[known], data.val_y[known]
    if len(data.train_y) == 0 or len(vy) == 0:
        raise DataError("training and validation partitions must be non-empty")
    val_attack = cfg.attack if cfg.val_attack else None

    def validate() -> float:
        with eval_mode(model):
            return adversarial_accuracy(model.logits, vx, vy, val_attack, cfg.eval_batch_size)

    initial = validate()
    best_state, best_acc, best_epoch = copy.deepcopy(model.state_dict()), -1.0, -1
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        try:
            sums: dict[str, float] = {}
            n = 0
            for b in iterate_batches(data.train_x, data.train_y, cfg.batch_size, shuffle=True,
                                     seed=cfg.seed * 1000 + epoch):
                losses = trainer.step(b.pixels, b.labels).as_dict()
                for k, v in losses.items():
                    sums[k] = sums.get(k, 0.0) + v
                n += 1
            val_acc = validate()
        except (NumericError, DataError):
            model.load_state_dict(best_state)
            logger.exception("training aborted in epoch %d; best checkpoint retained", epoch)
            raise
        record = {"epoch": epoch, "val_acc": val_acc, **{k: v / n for k, v in sums.items()}}
        history.append(record)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        logger.info("epoch %d: total_main %.4f val_acc %.2f", epoch, record["total_main"], val_acc)
        if val_acc > best_acc:
            best_state, best_acc, best_epoch = copy.deepcopy(model.state_dict()), val_acc, epoch
    model.load_state_dict(best_state)
    model.eval()
    return FitResult(model, history, best_epoch, best_acc, initial)


def fit_classifier(model: torch.nn.Module, x: np.ndarray, y: np.ndarray, attack: AttackConfig,
                   epochs: int, batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> torch.nn.Module:
    """Plain (adversarial) training for substitute models."""
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for epoch in range(epochs):
        model.train()
        for b in iterate_batches(x, y, batch_size, shuffle=True, seed=seed * 1000 + epoch):
            with frozen_batchnorm(model):
                xa = run_attack(ce_loss_fn(model), b.pixels, b.labels, attack).pixels
            loss = cross_entropy(model(xa), b.labels)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    return model

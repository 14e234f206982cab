"""FGSM, PGD and rectangular occlusion attacks in pixel space.

Every attack takes a ``loss_fn(x, y) -> per-sample loss`` closure over the
attacked model, so parameters never need to be passed explicitly and are
never modified.  Gradients are taken with respect to the input only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .errors import ConfigError, NumericError

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

FAMILIES = ("fgsm", "pgd", "roa", "none")


@dataclass(frozen=True)
class RoaRect:
    height: int | None = None
    width: int | None = None
    search: str = "grid"
    inner_steps: int = 10
    stride: int | None = None
    candidates: int = 5

    def resolve(self, image_h: int, image_w: int) -> tuple[int, int, int]:
        h = self.height or max(2, image_h // 8)
        w = self.width or max(2, image_w // 8)
        if h > image_h or w > image_w:
            raise ConfigError(f"rectangle {h}x{w} does not fit a {image_h}x{image_w} image")
        stride = self.stride or min(h, w)
        return h, w, stride


@dataclass(frozen=True)
class AttackConfig:
    family: str = "pgd"
    epsilon: float = 0.3
    step_size: float = 0.01
    iterations: int = 5
    pixel_range: tuple[float, float] = (0.0, 1.0)
    roa: RoaRect = field(default_factory=RoaRect)
    loss_target: str = "softmax_ce"

    def __post_init__(self):
        family = self.family.lower()
        object.__setattr__(self, "family", family)
        if family not in FAMILIES:
            raise ConfigError(f"unknown attack family {self.family!r}; valid options: {', '.join(FAMILIES)}")
        lo, hi = self.pixel_range
        if not lo < hi:
            raise ConfigError("pixel_range.low must be below pixel_range.high")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        if family in ("pgd", "roa"):
            if self.step_size <= 0:
                raise ConfigError("step_size must be positive")
        if family == "pgd":
            if self.iterations < 1:
                raise ConfigError("iterations must be at least 1")
            if self.step_size > self.epsilon:
                raise ConfigError("PGD requires step_size <= epsilon")
        if family == "roa":
            if self.roa.search not in ("grid", "gradient_guided"):
                raise ConfigError(f"unknown ROA search {self.roa.search!r}; valid options: grid, gradient_guided")
            if self.roa.inner_steps < 0:
                raise ConfigError("ROA inner_steps must be nonnegative")
        if self.loss_target != "softmax_ce":
            raise ConfigError(f"unsupported attack.loss_target {self.loss_target!r}; valid options: softmax_ce")


@dataclass(frozen=True)
class AdversarialBatch:
    pixels: torch.Tensor
    source_labels: torch.Tensor
    provenance: str = "ground_truth"
    rect: torch.Tensor | None = None  # (n, 4): top, left, height, width; ROA only


def input_gradient(loss_fn: LossFn, x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample losses and d(sum of losses)/dx, with non-finite checks."""
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        losses = loss_fn(x, y)
        (grad,) = torch.autograd.grad(losses.sum(), x)
    bad = ~torch.isfinite(grad.flatten(1)).all(dim=1)
    if bad.any():
        raise NumericError(f"non-finite input gradient at batch index {int(bad.nonzero()[0])}")
    return losses.detach(), grad.detach()


def fgsm(loss_fn: LossFn, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig) -> AdversarialBatch:
    lo, hi = cfg.pixel_range
    if cfg.epsilon == 0:
        return AdversarialBatch(x.detach().clone(), y)
    _, grad = input_gradient(loss_fn, x, y)
    x_adv = torch.clamp(x.detach() + cfg.epsilon * grad.sign(), lo, hi)
    return AdversarialBatch(x_adv, y)


def pgd(loss_fn: LossFn, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig) -> AdversarialBatch:
    """Signed-gradient ascent from the clean input, projected onto the ball and pixel range."""
    lo, hi = cfg.pixel_range
    x0 = x.detach()
    lower = torch.clamp(x0 - cfg.epsilon, min=lo)
    upper = torch.clamp(x0 + cfg.epsilon, max=hi)
    x_adv = x0.clone()
    if cfg.epsilon == 0:
        return AdversarialBatch(x_adv, y)
    for _ in range(cfg.iterations):
        _, grad = input_gradient(loss_fn, x_adv, y)
        x_adv = torch.min(torch.max(x_adv + cfg.step_size * grad.sign(), lower), upper)
    return AdversarialBatch(x_adv, y)


def _rect_mask(n: int, shape, tops, lefts, h: int, w: int) -> torch.Tensor:
    rows = torch.arange(shape[-2]).view(1, -1, 1)
    cols = torch.arange(shape[-1]).view(1, 1, -1)
    tops = tops.view(-1, 1, 1)
    lefts = lefts.view(-1, 1, 1)
    m = (rows >= tops) & (rows < tops + h) & (cols >= lefts) & (cols < lefts + w)
    return m.unsqueeze(1).expand(n, shape[1], shape[-2], shape[-1])


def _placements(H: int, W: int, h: int, w: int, stride: int) -> list[tuple[int, int]]:
    return [(t, l) for t in range(0, H - h + 1, stride) for l in range(0, W - w + 1, stride)]


@torch.no_grad()
def _placement_losses(loss_fn: LossFn, x, y, places, h, w, fill) -> torch.Tensor:
    n = x.shape[0]
    out = torch.empty(n, len(places), dtype=x.dtype)
    for j, (t, l) in enumerate(places):
        xp = x.clone()
        xp[:, :, t:t + h, l:l + w] = fill
        out[:, j] = loss_fn(xp, y).detach()
    return out


def roa(loss_fn: LossFn, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig) -> AdversarialBatch:
    """Place one rectangle per image at a loss-maximizing spot, then optimize its contents."""
    lo, hi = cfg.pixel_range
    x0 = x.detach()
    n, _, H, W = x0.shape
    h, w, stride = cfg.roa.resolve(H, W)
    places = _placements(H, W, h, w, stride)
    fill = 0.5 * (lo + hi)
    if cfg.roa.search == "grid":
        losses = _placement_losses(loss_fn, x0, y, places, h, w, fill)
        best = losses.argmax(dim=1)
        chosen = torch.tensor(places)[best]
    else:
        _, grad = input_gradient(loss_fn, x0, y)
        energy = grad.abs().sum(dim=1)
        scores = torch.stack([energy[:, t:t + h, l:l + w].sum(dim=(1, 2)) for t, l in places], dim=1)
        k = min(cfg.roa.candidates, len(places))
        top = scores.topk(k, dim=1).indices
        chosen = torch.empty(n, 2, dtype=torch.long)
        for i in range(n):
            cand = [places[j] for j in top[i].tolist()]
            li = _placement_losses(loss_fn, x0[i:i + 1], y[i:i + 1], cand, h, w, fill)
            chosen[i] = torch.tensor(cand[int(li.argmax())])
    mask = _rect_mask(n, x0.shape, chosen[:, 0], chosen[:, 1], h, w)
    x_adv = torch.where(mask, torch.full_like(x0, fill), x0)
    for _ in range(cfg.roa.inner_steps):
        _, grad = input_gradient(loss_fn, x_adv, y)
        step = torch.clamp(x_adv + cfg.step_size * grad.sign(), lo, hi)
        x_adv = torch.where(mask, step, x0)
    rect = torch.cat([chosen, torch.tensor([[h, w]]).expand(n, 2)], dim=1)
    return AdversarialBatch(x_adv, y, rect=rect)


def run_attack(loss_fn: LossFn, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
               provenance: str = "ground_truth") -> AdversarialBatch:
    if cfg.family == "none":
        adv = AdversarialBatch(x.detach().clone(), y)
    else:
        adv = {"fgsm": fgsm, "pgd": pgd, "roa": roa}[cfg.family](loss_fn, x, y, cfg)
    if provenance != adv.provenance:
        adv = AdversarialBatch(adv.pixels, adv.source_labels, provenance, adv.rect)
    return adv


def ce_loss_fn(logits_fn: Callable[[torch.Tensor], torch.Tensor]) -> LossFn:
    """Per-sample softmax cross-entropy of ``logits_fn`` as an attack objective."""
    def loss(x, y):
        return torch.nn.functional.cross_entropy(logits_fn(x), y, reduction="none")
    return loss


@torch.no_grad()
def attack_labels(logits_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                  labels: torch.Tensor, is_known: torch.Tensor | bool) -> tuple[torch.Tensor, list[str]]:
    """Ground truth for known samples, the model's top known class for open-set ones."""
    n = x.shape[0]
    known = torch.as_tensor(is_known, dtype=torch.bool)
    if known.dim() == 0:
        known = known.expand(n)
    out = labels.clone()
    if (~known).any():
        pred = logits_fn(x[~known]).argmax(dim=1)
        out[~known] = pred
    prov = ["ground_truth" if k else "model_prediction" for k in known.tolist()]
    return out, prov

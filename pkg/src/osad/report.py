"""Tables and figures for completed runs."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .attacks import attack_labels, ce_loss_fn, run_attack  # noqa: E402
from .networks import OsdnModel, eval_mode  # noqa: E402
from .pipeline import to_csv  # noqa: E402

logger = logging.getLogger(__name__)


def results_table(entries: list[dict], metric: str) -> str:
    """Methods as rows, attacks as columns, one metric per table."""
    attacks = sorted({e["attack"] for e in entries if e["metric"] == metric})
    runs: list[str] = []
    for e in entries:
        if e["metric"] == metric and e["run"] not in runs:
            runs.append(e["run"])
    cell = {(e["run"], e["attack"]): e["value"] for e in entries if e["metric"] == metric}
    return to_csv(["run", *attacks], [[r, *(cell.get((r, a), "") for a in attacks)] for r in runs])


def _to_img(x: torch.Tensor) -> np.ndarray:
    a = x.detach().numpy()
    return a[0] if a.shape[0] == 1 else np.transpose(a, (1, 2, 0))


def triptych(model: OsdnModel, x: torch.Tensor, y: torch.Tensor, attack, path: Path, n: int = 6) -> Path | None:
    """Clean / adversarial / reconstruction rows; returns None when the decoder is disabled."""
    if model.decoder is None:
        return None
    x, y = x[:n], y[:n]
    with eval_mode(model):
        labels, _ = attack_labels(model.logits, x, y, y < model.num_classes)
        adv = run_attack(ce_loss_fn(model.logits), x, labels, attack).pixels
        with torch.no_grad():
            rec = model.decode(model.encode(adv))
    fig, axes = plt.subplots(3, len(x), figsize=(1.6 * len(x), 5), squeeze=False)
    for j in range(len(x)):
        for i, (row, name) in enumerate(((x, "clean"), (adv, "adversarial"), (rec, "reconstruction"))):
            ax = axes[i][j]
            ax.imshow(_to_img(row[j]), cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_ylabel(name, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def export_latents(model: OsdnModel, x: np.ndarray, y: np.ndarray, path: Path, attack=None,
                   batch_size: int = 256) -> int:
    """Write one latent vector per evaluated sample, plus a 2-D principal-component scatter."""
    zs = []
    with eval_mode(model):
        for start in range(0, len(y), batch_size):
            xb = torch.from_numpy(x[start:start + batch_size])
            yb = torch.from_numpy(y[start:start + batch_size])
            if attack is not None and attack.family != "none":
                labels, _ = attack_labels(model.logits, xb, yb, yb < model.num_classes)
                xb = run_attack(ce_loss_fn(model.logits), xb, labels, attack).pixels
            with torch.no_grad():
                zs.append(model.encode(xb).numpy())
    z = np.concatenate(zs).astype(np.float64)
    header = ["label"] + [f"z{i}" for i in range(z.shape[1])]
    rows = [[int(lbl)] + [repr(float(v)) for v in row] for lbl, row in zip(y, z)]
    Path(path).write_text(to_csv(header, rows))
    centered = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    fig, ax = plt.subplots(figsize=(4, 4))
    for lbl in np.unique(y):
        m = y == lbl
        ax.scatter(proj[m, 0], proj[m, 1], s=4, label="open" if lbl == model.num_classes else str(lbl))
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(Path(path).with_suffix(".png"), dpi=100)
    plt.close(fig)
    return len(rows)


def feature_maps(model: OsdnModel, x: torch.Tensor, path: Path, channels: int = 4) -> Path:
    """Channel grids before and after each block's denoising layer for one image."""
    with eval_mode(model), torch.no_grad():
        _, maps = model.encoder(x[:1], return_maps=True)
    pairs = [(maps[i], maps[i + 1]) for i in range(0, len(maps), 2)]
    fig, axes = plt.subplots(2 * len(pairs), channels, figsize=(1.5 * channels, 3 * len(pairs)), squeeze=False)
    for b, (pre, post) in enumerate(pairs):
        for k in range(channels):
            for r, (m, name) in enumerate(((pre, "pre"), (post, "post"))):
                ax = axes[2 * b + r][k]
                if k < m.shape[1]:
                    ax.imshow(m[0, k].numpy(), cmap="viridis")
                ax.set_xticks([])
                ax.set_yticks([])
                if k == 0:
                    ax.set_ylabel(f"block{b + 1} {name}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path

"""Run orchestration: train, calibrate, evaluate, ablate; run-directory layout."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .data import CHANNELS, IMAGE_SIZES, OpenSetData, make_ood_fixture, load_image_folder, prepare_data
from .errors import ConfigError, DataError
from .evaluation import EvalReport, calibrate, evaluate, evaluate_ood, run_blackbox
from .networks import ModelConfig, OsdnModel, SubstituteSpec, build_substitute
from .openmax import OpenMaxModel
from .training import FitResult, fit, fit_classifier

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
COMPONENTS = ("encoder", "decoder", "open_set_head", "transform_head", "peer")

# Table 7 rows: (dec, dadl, ssd, caml); the encoder is always on
ABLATION_GRID: list[dict] = [
    {"dec": False, "dadl": False, "ssd": False, "caml": False},
    {"dec": False, "dadl": True, "ssd": False, "caml": False},
    {"dec": True, "dadl": False, "ssd": False, "caml": False},
    {"dec": True, "dadl": True, "ssd": False, "caml": False},
    {"dec": False, "dadl": True, "ssd": True, "caml": False},
    {"dec": True, "dadl": False, "ssd": True, "caml": False},
    {"dec": True, "dadl": False, "ssd": True, "caml": True},
    {"dec": True, "dadl": True, "ssd": True, "caml": False},
    {"dec": True, "dadl": True, "ssd": True, "caml": True},
]


def toggle_label(t: dict) -> str:
    return "+".join(["Enc"] + [name for key, name in
                               (("dec", "Dec"), ("dadl", "DADL"), ("ssd", "SSD"), ("caml", "CAML")) if t[key]])


def code_version() -> str:
    h = hashlib.sha256()
    root = resources.files("osad")
    for p in sorted(Path(str(root)).rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts:
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path, model: OsdnModel, epoch: int, cfg_hash: str, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "toggles": model.cfg.toggles,
        "config_hash": cfg_hash,
        "epoch": epoch,
        "components": {name: getattr(model, name).state_dict()
                       for name in COMPONENTS if getattr(model, name) is not None},
        **(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[OsdnModel, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    mc = dict(payload["model_config"])
    for k in ("widths", "blocks", "peer_widths", "pixel_range"):
        mc[k] = tuple(mc[k])
    model = OsdnModel(ModelConfig(**mc))
    for name, state in payload["components"].items():
        getattr(model, name).load_state_dict(state)
    model.eval()
    return model, payload


# -- building blocks ------------------------------------------------------------------

_DATA_CACHE: dict = {}


def load_data(cfg: dict) -> OpenSetData:
    dc = C.data_config(cfg)
    key = (dc.dataset, dc.split, dc.root, dc.val_fraction, dc.seed, dc.toy_train_per_class, dc.toy_test_per_class)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = prepare_data(dc)
    return _DATA_CACHE[key]


def build_model(cfg: dict, data: OpenSetData) -> OsdnModel:
    torch.manual_seed(int(cfg["seed"]))
    return OsdnModel(C.model_config(cfg, data.num_known))


def train(cfg: dict, data: OpenSetData | None = None, run_dir: Path | None = None) -> FitResult:
    data = data or load_data(cfg)
    model = build_model(cfg, data)
    history = None
    if run_dir is not None:
        history = Path(run_dir) / "history.jsonl"
        history.unlink(missing_ok=True)
    result = fit(model, data, C.train_config(cfg), history_path=history)
    if run_dir is not None:
        save_checkpoint(Path(run_dir) / "checkpoint.pt", model, result.best_epoch, C.config_hash(cfg),
                        {"val_acc": result.best_val_acc, "code_version": code_version()})
    return result


def calibrate_model(cfg: dict, model: OsdnModel, data: OpenSetData) -> OpenMaxModel:
    o = cfg["openmax"]
    return calibrate(model, data, int(o["tail_size"]), int(o["sigma"]), float(o["threshold"]),
                     o["feature_space"], o["belief"], int(cfg["eval"]["batch_size"]))


def evaluate_attacks(cfg: dict, model: OsdnModel, om: OpenMaxModel, data: OpenSetData,
                     families=None) -> dict[str, EvalReport]:
    families = families or cfg["eval"]["attacks"]
    meta = {"dataset": data.meta, "seed": cfg["seed"], "config_hash": C.config_hash(cfg)}
    out = {}
    for fam in families:
        torch.manual_seed(int(cfg["seed"]))
        out[fam] = evaluate(model, om, data, C.attack_config(cfg, fam), "test",
                            int(cfg["eval"]["batch_size"]), meta=meta)
    return out


def train_substitute(cfg: dict, data: OpenSetData, arch_id: str | None = None) -> torch.nn.Module:
    bb = cfg["eval"]["blackbox"]
    ds = cfg["data"]["dataset"]
    spec = SubstituteSpec(arch_id or bb["substitute"], data.num_known, CHANNELS[ds], IMAGE_SIZES[ds], int(bb["width"]))
    torch.manual_seed(int(cfg["seed"]) + 17)
    sub = build_substitute(spec)
    attack = C.attack_config(cfg) if cfg["train"]["adversarial"] else C.attack_config(cfg, "none")
    return fit_classifier(sub, data.train_x, data.train_y, attack, int(bb["epochs"]),
                          int(cfg["train"]["batch_size"]), float(cfg["train"]["learning_rate"]), int(cfg["seed"]))


def blackbox_reports(cfg: dict, model: OsdnModel, om: OpenMaxModel, data: OpenSetData,
                     substitute: torch.nn.Module, families=("fgsm", "pgd")) -> dict[str, EvalReport]:
    return {f: run_blackbox(model, substitute, om, data, C.attack_config(cfg, f), int(cfg["eval"]["batch_size"]),
                            meta={"substitute": cfg["eval"]["blackbox"]["substitute"]})
            for f in families}


def ood_images(cfg: dict, n: int | None = None) -> np.ndarray:
    o = cfg["eval"]["ood"]
    ds = cfg["data"]["dataset"]
    n = n or int(o["count"])
    if o["source"] == "synthetic":
        return make_ood_fixture(n, seed=int(cfg["seed"]) + 99, size=IMAGE_SIZES[ds], channels=CHANNELS[ds])
    if o["source"] == "folder":
        if not o["path"]:
            raise ConfigError("missing required key eval.ood.path")
        return load_image_folder(o["path"], IMAGE_SIZES[ds], o["mode"], CHANNELS[ds], limit=n)
    raise ConfigError(f"unknown OOD source {o['source']!r}; valid options: synthetic, folder")


# -- tables ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else repr(round(float(v), 10))


def metrics_rows(reports: dict[str, EvalReport], label: str = "") -> list[list[str]]:
    rows = []
    for fam, rep in reports.items():
        for metric, value in rep.metrics().items():
            if value is not None:
                rows.append([label, fam, metric, _fmt(value)])
    return rows


def to_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_reports(run_dir: Path, reports: dict[str, EvalReport], prefix: str = "") -> Path:
    rep_dir = Path(run_dir) / "report"
    rep_dir.mkdir(parents=True, exist_ok=True)
    for fam, rep in reports.items():
        (rep_dir / f"{prefix}{fam}.json").write_text(rep.to_json())
        (rep_dir / f"{prefix}{fam}_per_sample.csv").write_text(rep.per_sample_csv())
    table = rep_dir / f"{prefix}metrics.csv"
    rows = metrics_rows(reports, Path(run_dir).name)
    if table.exists():
        # keep rows for attacks that were not re-evaluated this time
        with open(table, newline="") as fh:
            kept = [r for r in list(csv.reader(fh))[1:] if r and r[1] not in reports]
        rows = kept + rows
    table.write_text(to_csv(["run", "attack", "metric", "value"], rows))
    return table


# -- whole runs -----------------------------------------------------------------------

@dataclass
class RunResult:
    cfg: dict
    model: OsdnModel
    fit: FitResult
    openmax: OpenMaxModel
    reports: dict[str, EvalReport]
    run_dir: Path | None = None
    extra: dict = field(default_factory=dict)


def prepare_run_dir(cfg: dict) -> Path:
    run_id = cfg["run_id"] or f"{cfg['method'] or 'run'}-s{cfg['seed']}-{C.config_hash(cfg)[:8]}"
    run_dir = Path(cfg["output_dir"]) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(C.dump(cfg))
    (run_dir / "code_version.txt").write_text(code_version() + "\n")
    return run_dir


def run_pipeline(cfg: dict, run_dir: Path | None = None, families=None) -> RunResult:
    """Train, calibrate OpenMax on clean training data, evaluate under each attack."""
    data = load_data(cfg)
    result = train(cfg, data, run_dir)
    om = calibrate_model(cfg, result.model, data)
    reports = evaluate_attacks(cfg, result.model, om, data, families)
    if run_dir is not None:
        om.save(Path(run_dir) / "calibration.json", {"config_hash": C.config_hash(cfg)})
        write_reports(run_dir, reports)
    return RunResult(cfg, result.model, result, om, reports, run_dir)


def with_toggles(cfg: dict, toggles: dict, seed: int | None = None) -> dict:
    out = copy.deepcopy(cfg)
    out["method"] = None
    out["model"]["dec"] = toggles["dec"]
    out["model"]["ssd"] = toggles["ssd"]
    out["model"]["caml"] = toggles["caml"]
    out["dadl"]["enabled"] = toggles["dadl"]
    out["model"]["denoiser"] = None
    if seed is not None:
        out["seed"] = seed
    C.validate(out)
    return out


def ablate(base: dict, grid=None, seeds=(0,), families=("pgd",), out_dir: Path | None = None) -> list[dict]:
    """Train/evaluate every toggle row under every seed; failures are recorded per row."""
    grid = ABLATION_GRID if grid is None else grid
    rows = []
    for toggles in grid:
        for seed in seeds:
            row = {"components": toggle_label(toggles), "seed": seed, **toggles}
            try:
                res = run_pipeline(with_toggles(base, toggles, seed), families=families)
                rep = res.reports[families[-1]]
                row.update(auc_roc=rep.auc_roc, closed_set_acc=rep.closed_set_acc, error=None)
            except Exception as exc:  # noqa: BLE001 - a failed row must not stop the grid
                logger.exception("ablation row %s seed %s failed", row["components"], seed)
                row.update(auc_roc=None, closed_set_acc=None, error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.csv").write_text(ablation_csv(rows))
    return rows


def ablation_summary(rows: list[dict]) -> list[dict]:
    """Median over seeds per component row, preserving grid order."""
    order, groups = [], {}
    for r in rows:
        key = r["components"]
        if key not in groups:
            order.append(key)
            groups[key] = []
        groups[key].append(r)
    out = []
    for key in order:
        ok = [r for r in groups[key] if r["error"] is None]
        out.append({
            "components": key,
            "auc_roc": float(np.median([r["auc_roc"] for r in ok])) if ok else None,
            "closed_set_acc": float(np.median([r["closed_set_acc"] for r in ok])) if ok else None,
            "seeds": len(ok),
        })
    return out


def ablation_csv(rows: list[dict]) -> str:
    header = ["components", "seed", "auc_roc", "closed_set_acc", "error"]
    return to_csv(header, [[r["components"], r["seed"], _fmt(r["auc_roc"]), _fmt(r["closed_set_acc"]),
                            r["error"] or ""] for r in rows])


def save_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))

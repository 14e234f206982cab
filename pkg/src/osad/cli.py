"""``osad`` command line: train, calibrate, attack, eval, report, ablate.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as C
from . import pipeline as P
from .errors import ConfigError, DataError
from .evaluation import score
from .data import iterate_batches

logger = logging.getLogger("osad")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _common(p: argparse.ArgumentParser, needs_config: bool = True):
    if needs_config:
        p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=sorted(C.METHODS))
    p.add_argument("--run-id")
    p.add_argument("--output-dir")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="osad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and evaluate it")
    _common(p)
    p.add_argument("--no-eval", action="store_true", help="skip calibration and evaluation")

    p = sub.add_parser("calibrate", help="fit OpenMax for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("attack", help="write an adversarial test corpus for replay")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--family", default="pgd", choices=["fgsm", "pgd", "roa"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="evaluate a checkpoint under attack")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", action="append", choices=["none", "fgsm", "pgd", "roa"])
    p.add_argument("--blackbox", metavar="ARCH", help="train a substitute of this architecture and transfer")
    p.add_argument("--corpus", help="replay a corpus written by `osad attack`")
    p.add_argument("--ood", action="store_true", help="out-of-distribution protocol (macro-F1)")

    p = sub.add_parser("report", help="tables and figures for completed runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train/evaluate the component grid")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--rows", type=int, nargs="+", help="subset of grid rows (0-based)")
    return parser


def _resolve(args, base_config: str | None = None) -> dict:
    overrides = list(args.overrides)
    if getattr(args, "method", None):
        overrides.insert(0, f"method={args.method}")
    for flag, key in (("seed", "seed"), ("run_id", "run_id"), ("output_dir", "output_dir")):
        if getattr(args, flag, None) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    return C.load_config(getattr(args, "config", None) or base_config, overrides)


def _checkpoint_context(args):
    ck = Path(args.checkpoint)
    model, payload = P.load_checkpoint(ck)
    run_dir = ck.parent
    snapshot = run_dir / "config.yaml"
    cfg = _resolve(args, str(snapshot) if snapshot.exists() else None)
    return model, payload, cfg, run_dir


def _calibration(cfg, model, data, run_dir: Path):
    from .openmax import OpenMaxModel

    path = run_dir / "calibration.json"
    if path.exists():
        return OpenMaxModel.load(path)
    om = P.calibrate_model(cfg, model, data)
    om.save(path, {"config_hash": C.config_hash(cfg)})
    return om


def cmd_train(args) -> int:
    cfg = _resolve(args)
    run_dir = P.prepare_run_dir(cfg)
    if args.no_eval:
        P.train(cfg, run_dir=run_dir)
    else:
        res = P.run_pipeline(cfg, run_dir)
        for fam, rep in res.reports.items():
            print(f"{fam}: closed-set acc {rep.closed_set_acc:.2f}  AUC-ROC {rep.auc_roc:.4f}")
    print(run_dir)
    return 0


def cmd_calibrate(args) -> int:
    model, _, cfg, run_dir = _checkpoint_context(args)
    om = P.calibrate_model(cfg, model, P.load_data(cfg))
    om.save(run_dir / "calibration.json", {"config_hash": C.config_hash(cfg)})
    print(run_dir / "calibration.json")
    return 0


def cmd_attack(args) -> int:
    model, payload, cfg, run_dir = _checkpoint_context(args)
    for flag, key in (("epsilon", "attack.epsilon"), ("steps", "attack.iterations"), ("step_size", "attack.step_size")):
        if getattr(args, flag) is not None:
            C.set_key(cfg, key, getattr(args, flag))
    attack = C.attack_config(cfg, args.family)
    data = P.load_data(cfg)
    from .attacks import attack_labels, ce_loss_fn, run_attack

    xs, ys = [], []
    model.eval()
    for b in iterate_batches(data.test_x, data.test_y, int(cfg["eval"]["batch_size"])):
        labels, _ = attack_labels(model.logits, b.pixels, b.labels, b.labels < data.num_known)
        xs.append(run_attack(ce_loss_fn(model.logits), b.pixels, labels, attack).pixels.numpy())
        ys.append(b.labels.numpy())
    out = Path(args.out) if args.out else run_dir / "attacks" / args.family
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "pixels.npy", np.concatenate(xs))
    np.save(out / "labels.npy", np.concatenate(ys))
    manifest = {"attack": {k: v for k, v in vars(attack).items() if k != "roa"} | {"roa": vars(attack.roa)},
                "source_checkpoint": str(Path(args.checkpoint).resolve()),
                "source_config_hash": payload.get("config_hash"), "num_known": data.num_known,
                "dataset": data.meta}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    print(out)
    return 0


def cmd_eval(args) -> int:
    model, _, cfg, run_dir = _checkpoint_context(args)
    data = P.load_data(cfg)
    om = _calibration(cfg, model, data, run_dir)
    if args.corpus:
        corpus = Path(args.corpus)
        if not (corpus / "manifest.json").exists():
            raise DataError(f"no corpus manifest under {corpus}")
        x, y = np.load(corpus / "pixels.npy"), np.load(corpus / "labels.npy")
        stream = list(iterate_batches(x, y, int(cfg["eval"]["batch_size"])))
        reports = {"corpus": score(model, om, stream, data.num_known, None, meta={"corpus": str(corpus)})}
        P.write_reports(run_dir, reports, prefix="replay_")
    elif args.blackbox:
        sub = P.train_substitute(cfg, data, args.blackbox)
        families = [a for a in (args.attack or ["fgsm", "pgd"]) if a != "none"]
        reports = P.blackbox_reports(cfg, model, om, data, sub, families)
        P.write_reports(run_dir, reports, prefix=f"blackbox_{args.blackbox}_")
    elif args.ood:
        from .evaluation import evaluate_ood

        fam = (args.attack or ["pgd"])[-1]
        known = data.test_y < data.num_known
        rep = evaluate_ood(model, om, data.test_x[known], data.test_y[known], P.ood_images(cfg),
                           C.attack_config(cfg, fam))
        reports = {fam: rep}
        P.write_reports(run_dir, reports, prefix="ood_")
    else:
        reports = P.evaluate_attacks(cfg, model, om, data, args.attack)
        P.write_reports(run_dir, reports)
    for name, rep in reports.items():
        auc = "n/a" if rep.auc_roc is None else f"{rep.auc_roc:.4f}"
        print(f"{name}: closed-set acc {rep.closed_set_acc:.2f}  AUC-ROC {auc}  macro-F1 {rep.macro_f1:.4f}")
    return 0


def cmd_report(args) -> int:
    import csv

    from . import report as R
    from .openmax import OpenMaxModel

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries, missing, notes = [], [], []
    for run in map(Path, args.runs):
        table = run / "report" / "metrics.csv"
        if not table.exists():
            missing.append(str(table))
            continue
        with open(table) as fh:
            entries += list(csv.DictReader(fh))
        ck = run / "checkpoint.pt"
        if not ck.exists():
            missing.append(str(ck))
            continue
        model, _ = P.load_checkpoint(ck)
        cfg = C.load_config(run / "config.yaml")
        data = P.load_data(cfg)
        x = torch.from_numpy(data.test_x[:8])
        y = torch.from_numpy(data.test_y[:8])
        if R.triptych(model, x, y, C.attack_config(cfg, "pgd"), out / f"{run.name}_triptych.png") is None:
            notes.append(f"{run.name}: decoder disabled, triptych omitted")
        R.export_latents(model, data.test_x, data.test_y, out / f"{run.name}_latents.csv", C.attack_config(cfg, "pgd"))
        R.feature_maps(model, x, out / f"{run.name}_feature_maps.png")
        if not (run / "calibration.json").exists():
            notes.append(f"{run.name}: no calibration artifact")
        else:
            OpenMaxModel.load(run / "calibration.json")
    for metric in ("closed_set_acc", "auc_roc", "macro_f1"):
        (out / f"table_{metric}.csv").write_text(R.results_table(entries, metric))
    (out / "NOTES.txt").write_text("\n".join(notes + [f"missing: {m}" for m in missing]) + "\n")
    for m in missing:
        print(f"missing artifact: {m}", file=sys.stderr)
    print(out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    grid = P.ABLATION_GRID if args.rows is None else [P.ABLATION_GRID[i] for i in args.rows]
    run_dir = P.prepare_run_dir({**cfg, "run_id": cfg["run_id"] or f"ablate-{C.config_hash(cfg)[:8]}"})
    rows = P.ablate(cfg, grid, args.seeds, out_dir=run_dir)
    summary = P.ablation_summary(rows)
    (run_dir / "ablation_summary.csv").write_text(P.to_csv(
        ["components", "auc_roc", "closed_set_acc", "seeds"],
        [[s["components"], P._fmt(s["auc_roc"]), P._fmt(s["closed_set_acc"]), s["seeds"]] for s in summary]))
    for s in summary:
        print(f"{s['components']:<28} AUC {s['auc_roc']}  acc {s['closed_set_acc']}")
    print(run_dir)
    return 0


COMMANDS = {"train": cmd_train, "calibrate": cmd_calibrate, "attack": cmd_attack, "eval": cmd_eval,
            "report": cmd_report, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"osad: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        logger.debug("failure", exc_info=True)
        print(f"osad: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def run_command(argv) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())

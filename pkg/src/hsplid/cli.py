"""Command-line entry point: ``python -m hsplid <verb> --config PATH --out DIR``.

Verbs: gen-data, train, attack, probe, theory, ablate, report.  Bad
configuration exits with status 1 and one line ``error: config: ...``;
runtime failures exit with status 2 and ``error: <module>: ...``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks, report, theory
from .config import ABLATION_ROWS, ConfigError, DataConfig, EvalConfig, TrainConfig, ablation_configs, load_config
from .datasets import DatasetError, build_cmnist, build_synthetic_shapes, load_archive, load_mnist_dir, save_archive
from .trainer import accuracy, fit, load_checkpoint

VERBS = ("gen-data", "train", "attack", "probe", "theory", "ablate", "report")

log = logging.getLogger("hsplid")


class ManifestExists(RuntimeError):
    pass


def _guard(path: Path):
    if path.exists():
        raise ManifestExists(f"refusing to overwrite {path}")


def _write_manifest(path: Path, doc: dict):
    _guard(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_data(dcfg: DataConfig):
    if dcfg.archive:
        if not Path(dcfg.archive).exists():
            raise ConfigError(f"archive not found: {dcfg.archive}")
        return load_archive(dcfg.archive)
    if dcfg.dataset == "synthetic":
        return build_synthetic_shapes(dcfg.n_per_class, dcfg.num_classes, dcfg.pair_seed, dcfg.val_fraction)
    if not Path(dcfg.mnist_dir).is_dir():
        raise ConfigError(f"mnist_dir not found: {dcfg.mnist_dir}")
    return build_cmnist(load_mnist_dir(dcfg.mnist_dir), dcfg.pair_seed, dcfg.split_seed,
                        dcfg.val_fraction, dcfg.limit or None)


def _checkpoints(ecfg: EvalConfig, out: Path):
    names = [s.strip() for s in ecfg.checkpoint.split(",") if s.strip()] or [str(out / "checkpoint.zip")]
    for n in names:
        if not Path(n).exists():
            raise ConfigError(f"checkpoint not found: {n}")
    return names


def _base_manifest(verb, args, cfgs, data=None):
    tcfg, dcfg, ecfg = cfgs
    return {
        "command": verb,
        "config_path": str(args.config) if args.config else None,
        "train": tcfg.to_dict(),
        "data": dcfg.__dict__,
        "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in ecfg.__dict__.items()},
        "seed": tcfg.seed,
        "dataset_sha256": data.digest() if data is not None else None,
    }


def attack_specs(ecfg: EvalConfig):
    specs = [attacks.AttackSpec(ecfg.attack, eps, ecfg.attack_alpha, ecfg.attack_iters, ecfg.attack_region,
                                ecfg.block_fraction, ecfg.random_start) for eps in ecfg.attack_epsilons]
    specs += [attacks.CorruptionSpec(kind, ecfg.corruption_severity, ecfg.attack_region, ecfg.block_fraction)
              for kind in ecfg.corruptions]
    return specs


def evaluate(model, data, ecfg: EvalConfig):
    return [attacks.robust_accuracy(model, data.test, spec, ecfg.eval_seeds) for spec in attack_specs(ecfg)]


def _selection_metric(data, ecfg: EvalConfig, eps: float):
    spec = attacks.AttackSpec("pgd", eps, ecfg.attack_alpha, ecfg.attack_iters, "full",
                              random_start=ecfg.random_start)
    return lambda model: attacks.robust_accuracy(model, data.val, spec, (0,)).mean


# ------------------------------------------------------------------- verbs


def cmd_gen_data(args, cfgs, out: Path):
    data = load_data(cfgs[1])
    _guard(out / "gen-data.manifest.json")
    digest = save_archive(data, out / "dataset.hsds")
    _write_manifest(out / "gen-data.manifest.json", _base_manifest("gen-data", args, cfgs, data))
    print(f"wrote {out / 'dataset.hsds'} sha256={digest}")


def train_one(data, tcfg: TrainConfig, ecfg: EvalConfig, out: Path):
    _guard(out / "manifest.json")
    sel = _selection_metric(data, ecfg, tcfg.select_epsilon) if tcfg.select_epsilon > 0 else None
    return fit(data, tcfg, out_dir=out, selection_metric=sel)


def cmd_train(args, cfgs, out: Path):
    tcfg, dcfg, ecfg = cfgs
    data = load_data(dcfg)
    model, mask, man = train_one(data, tcfg, ecfg, out)
    print(f"clean_acc_val={man.final['clean_acc_val']:.4f} s={man.final['s']}")


def cmd_attack(args, cfgs, out: Path):
    tcfg, dcfg, ecfg = cfgs
    ckpts = _checkpoints(ecfg, out)
    data = load_data(dcfg)
    _guard(out / "attack.manifest.json")
    results = []
    for ck in ckpts:
        model, mask, meta = load_checkpoint(ck)
        results += evaluate(model, data, ecfg)
    attacks.write_eval_csv(out / "eval.csv", results)
    attacks.write_aggregate_csv(out / "eval_summary.csv", [row for r in results for row in r.rows()])
    doc = _base_manifest("attack", args, cfgs, data)
    doc["checkpoints"] = ckpts
    _write_manifest(out / "attack.manifest.json", doc)
    for r in results:
        print(f"{r.name} {r.region} eps={r.epsilon:g}: {r.mean:.4f} +- {r.std:.4f}")


def cmd_probe(args, cfgs, out: Path):
    tcfg, dcfg, ecfg = cfgs
    ckpts = _checkpoints(ecfg, out)
    data = load_data(dcfg)
    _guard(out / "probe.manifest.json")
    lines = ["checkpoint,subspace,binarized,accuracy,degenerate,num_classes"]
    for ck in ckpts:
        model, mask, _ = load_checkpoint(ck)
        for sub in ("nonsalient", "salient"):
            r = attacks.probe_nonsalient(model, mask, data, ecfg.probe_binarized, sub)
            lines.append(f"{ck},{sub},{str(ecfg.probe_binarized).lower()},{r.accuracy!r},"
                         f"{str(r.degenerate).lower()},{r.num_classes}")
            print(f"{ck} {sub}: {r.accuracy:.4f}{' (degenerate)' if r.degenerate else ''}")
    (out / "probe.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out / "probe.manifest.json", _base_manifest("probe", args, cfgs, data))


def cmd_theory(args, cfgs, out: Path):
    tcfg, dcfg, ecfg = cfgs
    ckpts = _checkpoints(ecfg, out)
    _guard(out / "theory.manifest.json")
    rows = []
    for ck in ckpts:
        model, mask, _ = load_checkpoint(ck)
        dim = int(np.prod(model.input_shape))
        tm = theory.TmvnConfig(dim, ecfg.tmvn_sigma, ecfg.tmvn_radius, ecfg.tmvn_samples, tcfg.seed)
        model_id = Path(ck).parent.name or Path(ck).stem
        rows += theory.evaluate_model(model_id, model, mask, tm, ecfg.theory_r, ecfg.theory_trials,
                                      ecfg.lipschitz_pairs, ecfg.kernel_sup_product, kcfg=tcfg.kernel_cfg)
    theory.write_theory_csv(out / "theory.csv", rows)
    text = theory.summary_text(rows, ecfg.kernel_sup_product)
    (out / "theory_summary.txt").write_text(text)
    doc = _base_manifest("theory", args, cfgs)
    doc["checkpoints"] = ckpts
    _write_manifest(out / "theory.manifest.json", doc)
    print(text, end="")


def cmd_ablate(args, cfgs, out: Path):
    tcfg, dcfg, ecfg = cfgs
    data = load_data(dcfg)
    _guard(out / "ablate.manifest.json")
    table = []
    for name, cfg in ablation_configs(tcfg).items():
        sub = out / name
        model, mask, man = train_one(data, cfg, ecfg, sub)
        results = evaluate(model, data, ecfg)
        attacks.write_eval_csv(sub / "eval.csv", results)
        row = {"config": name, "clean_acc": accuracy(model, data.test), "s": man.final["s"]}
        for r in results:
            row[f"{r.name}_{r.region}_{r.epsilon:g}"] = r.mean
        table.append(row)
        print(f"{name}: " + " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                     for k, v in row.items() if k != "config"))
    cols = list(table[0])
    lines = [",".join(cols)] + [",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols)
                                for r in table]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    (out / "ablation.txt").write_text(report.format_table(table, cols))
    _write_manifest(out / "ablate.manifest.json", _base_manifest("ablate", args, cfgs, data))


def cmd_report(args, cfgs, out: Path):
    paths = sorted(p for p in out.rglob("eval.csv"))
    if not paths:
        raise ConfigError(f"no eval.csv files under {out}")
    rows = report.summarize(paths)
    report.write_summary(rows, out / "summary.csv")
    text = report.format_table(rows, ["source", "attack", "region", "epsilon", "mean", "std", "n"])
    (out / "summary.txt").write_text(text)
    if args.svg:
        (out / "robust_accuracy.svg").write_text(
            report.line_chart_svg(report.accuracy_series(rows), "robust accuracy vs epsilon"))
    print(text, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "probe": cmd_probe,
    "theory": cmd_theory,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hsplid", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", type=Path, help="key = value configuration file")
    ap.add_argument("--out", type=Path, default=Path("."), help="output directory")
    ap.add_argument("--seed", type=int, help="override the training seed")
    ap.add_argument("--svg", action="store_true", help="also write SVG charts (report)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _failing_module(exc: BaseException) -> str:
    mod = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        p = Path(frame.filename)
        if p.parent.name == "hsplid":
            mod = p.stem
    return mod


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None and not args.config.exists():
            raise ConfigError(f"config not found: {args.config}")
        cfgs = load_config(args.config) if args.config else (TrainConfig(), DataConfig(), EvalConfig())
        if args.seed is not None:
            cfgs = (replace(cfgs[0], seed=args.seed), *cfgs[1:])
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.verb](args, cfgs, args.out)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as a one-line report
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {_failing_module(exc)}: {msg}", file=sys.stderr)
        if os.environ.get("HSPLID_DEBUG"):
            traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

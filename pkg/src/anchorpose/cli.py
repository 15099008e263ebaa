"""Command-line entry point: ``anchorpose <subcommand> [options]``.

Every subcommand writes ``manifest.json`` next to its outputs. The output
directory is ``--out`` if given, else ``$ANCHORPOSE_OUT/<subcommand>``,
else ``./anchorpose_runs/<subcommand>``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from .anchors import AnchorConfigError, generate_anchor_grid
from .config import ConfigError, RunManifest, TrainConfig, load_config_file, resolve_config
from .data_synth import (DatasetError, SyntheticHandConfig, generate_dataset, read_dataset,
                         stack_records, write_dataset)

OUT_ENV = "ANCHORPOSE_OUT"
CONFIG_KEYS = [f.name for f in fields(TrainConfig)]


class UsageError(Exception):
    pass


def _out_dir(args, sub: str) -> Path:
    if getattr(args, "out", None):
        path = Path(args.out)
    elif os.environ.get(OUT_ENV):
        path = Path(os.environ[OUT_ENV]) / sub
    else:
        path = Path("anchorpose_runs") / sub
    path.mkdir(parents=True, exist_ok=True)
    return path


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    g = p.add_argument_group("config keys (override the config file)")
    for key in CONFIG_KEYS:
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="V")


def _add_data_flags(p: argparse.ArgumentParser, prefix: str = "data", count: int = 2000,
                    seed: int = 1) -> None:
    """``--data FILE`` or a synthetic set from ``--data-count`` / ``--data-seed``."""
    key = prefix.replace("-", "_")
    p.add_argument(f"--{prefix}", dest=key, help="dataset file written by `synth`")
    p.add_argument(f"--{prefix}-count", dest=f"{key}_count", type=int, default=count,
                   help=f"synthetic sample count when no file is given (default {count})")
    p.add_argument(f"--{prefix}-seed", dest=f"{key}_seed", type=int, default=seed,
                   help=f"synthetic data seed (default {seed})")


def _resolve(args, manifest: RunManifest | None = None):
    file_values = {}
    if manifest is not None:
        file_values.update({k: ",".join(map(str, v)) if isinstance(v, list) else str(v)
                            for k, v in manifest.config.items()})
    if getattr(args, "config", None):
        file_values.update(load_config_file(args.config))
    flags = {k: getattr(args, "cfg_" + k) for k in CONFIG_KEYS
             if getattr(args, "cfg_" + k, None) is not None}
    return resolve_config(file_values, flags)


def _data_spec(args, prefix: str = "data") -> dict:
    path = getattr(args, prefix)
    if path:
        return {"path": str(path)}
    return {"synthetic": {"count": getattr(args, f"{prefix}_count"),
                          "seed": getattr(args, f"{prefix}_seed")}}


def _load_data(spec: dict, image_size: int):
    if "path" in spec:
        records = read_dataset(spec["path"])
    else:
        syn = spec["synthetic"]
        records = generate_dataset(SyntheticHandConfig(image_size=image_size),
                                   syn["count"], syn["seed"])
    return stack_records(records)


def _write_manifest(out: Path, cfg: TrainConfig, provenance: dict, outputs: dict,
                    command: str, extras: dict | None = None) -> None:
    outputs = dict(outputs, manifest=str(out / "manifest.json"))
    RunManifest.build(cfg, provenance, outputs, command, extras).write(out / "manifest.json")


def _command_line(argv) -> str:
    return " ".join(["anchorpose", *argv])


# -- subcommands -----------------------------------------------------------

def cmd_synth(args, argv) -> int:
    out = _out_dir(args, "synth")
    cfg, prov = resolve_config(flag_values={"image_size": args.image_size})
    records = generate_dataset(SyntheticHandConfig(image_size=args.image_size), args.count,
                               args.seed)
    path = out / "dataset.bin"
    write_dataset(records, path)
    _write_manifest(out, cfg, prov, {"dataset": str(path)}, _command_line(argv),
                    {"data": {"synthetic": {"count": args.count, "seed": args.seed}}})
    print(f"wrote {len(records)} samples to {path}")
    return 0


def cmd_anchors(args, argv) -> int:
    depths = tuple(float(v) for v in args.depths.split(",") if v.strip())
    anchors = generate_anchor_grid(args.image_size, args.stride, depths)
    out = _out_dir(args, "anchors")
    path = out / "anchors.csv"
    path.write_text(anchors.to_csv())
    cfg, prov = _resolve(args)
    _write_manifest(out, cfg, prov, {"anchors": str(path)}, _command_line(argv),
                    {"image_size": args.image_size, "stride": args.stride,
                     "depths": list(depths)})
    print(f"wrote {len(anchors)} anchors to {path}")
    return 0


def cmd_train(args, argv) -> int:
    from .train_eval import TrainingDiverged, train
    manifest = RunManifest.read(args.manifest) if args.manifest else None
    cfg, prov = _resolve(args, manifest)
    if manifest is not None and args.data is None and "data" in manifest.extras \
            and not _explicit(argv, ("--data-count", "--data-seed")):
        spec = manifest.extras["data"]
    else:
        spec = _data_spec(args)
    data = _load_data(spec, cfg.image_size)
    out = _out_dir(args, "train")

    def progress(row):
        if args.verbose:
            print(f"epoch {row['epoch']} step {row['step']} total {row['total']:.4f}")

    outputs = {"checkpoint": str(out / "checkpoint.bin"), "steps": str(out / "steps.csv"),
               "epochs": str(out / "epochs.csv")}
    try:
        result = train(cfg, data, out, progress=progress)
    except TrainingDiverged as exc:
        outputs["checkpoint"] = exc.checkpoint
        _write_manifest(out, cfg, prov, outputs, _command_line(argv), {"data": spec,
                                                                       "diverged": str(exc)})
        print(f"error: {exc}; last finite state saved to {exc.checkpoint}", file=sys.stderr)
        return 1
    for i, rep in enumerate(result.epochs, 1):
        print(f"epoch {i}: {rep.format()}")
    _write_manifest(out, cfg, prov, outputs, _command_line(argv),
                    {"data": spec, "final_loss": result.final_loss})
    print(f"checkpoint written to {result.checkpoint}")
    return 0


def _explicit(argv, flags) -> bool:
    return any(a.split("=", 1)[0] in flags for a in argv)


def _load_model(path):
    from .train_eval import AnchorPoseNet, load_checkpoint
    state, meta = load_checkpoint(path)
    cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in meta["config"].items()})
    model = AnchorPoseNet(cfg)
    model.load_state_dict(state)
    return model, cfg


def cmd_eval(args, argv) -> int:
    from .train_eval import evaluate
    model, cfg = _load_model(args.checkpoint)
    spec = _data_spec(args)
    report = evaluate(model, _load_data(spec, cfg.image_size), cfg.batch_size)
    out = _out_dir(args, "eval")
    path = out / "metrics.json"
    path.write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    _write_manifest(out, cfg, {k: "checkpoint" for k in CONFIG_KEYS}, {"metrics": str(path)},
                    _command_line(argv), {"data": spec, "checkpoint": args.checkpoint})
    print(report.format())
    return 0


def cmd_infer(args, argv) -> int:
    from .train_eval.evaluate import predict, write_outputs
    model, cfg = _load_model(args.checkpoint)
    spec = _data_spec(args)
    data = _load_data(spec, cfg.image_size)
    preds = predict(model, data.images, cfg.batch_size, keep_weights=True)
    out = _out_dir(args, "infer")
    paths = write_outputs(out, preds, model.anchors.coords)
    _write_manifest(out, cfg, {k: "checkpoint" for k in CONFIG_KEYS}, paths,
                    _command_line(argv), {"data": spec, "checkpoint": args.checkpoint})
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .train_eval.checks import check_model, format_checks
    cfg, prov = _resolve(args)
    checks = check_model(cfg, batch=args.batch, max_elements=args.max_elements, seed=cfg.seed)
    table = format_checks(checks)
    out = _out_dir(args, "gradcheck")
    (out / "gradcheck.txt").write_text(table + "\n")
    _write_manifest(out, cfg, prov, {"table": str(out / "gradcheck.txt")}, _command_line(argv))
    print(table)
    return 0 if all(c.passed for c in checks) else 1


def cmd_ablate(args, argv) -> int:
    from .train_eval.ablation import ANCHOR_ROWS, COMPONENT_ROWS, run_ablation
    cfg, prov = _resolve(args)
    known = {**COMPONENT_ROWS, **ANCHOR_ROWS}
    names = [r.strip() for r in args.rows.split(",")] if args.rows else list(known)
    unknown = [n for n in names if n not in known]
    if unknown:
        raise UsageError(f"unknown ablation rows {unknown}; choose from {sorted(known)}")
    train_spec, test_spec = _data_spec(args), _data_spec(args, "test_data")
    train_data = _load_data(train_spec, cfg.image_size)
    test_data = _load_data(test_spec, cfg.image_size)
    rows = run_ablation(cfg, train_data, test_data, {n: known[n] for n in names},
                        on_row=lambda r: print(r.format(), flush=True))
    out = _out_dir(args, "ablate")
    path = out / "ablation.csv"
    with open(path, "w") as fh:
        fh.write("row,mpjpe_all,mpjpe_single,mpjpe_two,epe,train_seconds\n")
        for r in rows:
            vals = [r.report.mpjpe_all, r.report.mpjpe_single, r.report.mpjpe_two, r.report.epe]
            fh.write(",".join([r.name] + ["" if v is None else f"{v:.4f}" for v in vals]
                              + [f"{r.train_seconds:.1f}"]) + "\n")
    _write_manifest(out, cfg, prov, {"table": str(path)}, _command_line(argv),
                    {"data": train_spec, "test_data": test_spec, "rows": names})
    return 0


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchorpose",
                                     description="Anchor-based 3D two-hand pose toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("synth", help="generate a synthetic two-hand dataset")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("anchors", help="write the anchor grid as CSV")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--depths", default="-100,0,100", help="comma-separated depths in mm")
    p.add_argument("--out")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("train", help="train a model")
    _add_data_flags(p)
    p.add_argument("--manifest", help="re-run from a manifest.json written by a previous run")
    p.add_argument("--out")
    p.add_argument("--verbose", action="store_true", help="print every step")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("infer", cmd_infer, "write predicted joints and anchor weights")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        _add_data_flags(p, count=300, seed=2)
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every learnable module")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--max-elements", type=int, default=4,
                   help="entries checked per parameter tensor")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="component and anchor-setting sweep")
    _add_data_flags(p)
    _add_data_flags(p, "test-data", count=300, seed=2)
    p.add_argument("--rows", help="comma-separated subset of rows")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _join_negative_values(argv: list[str]) -> list[str]:
    """Let ``--depths -100,0,100`` through: argparse would read the value as a flag."""
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--depths" and i + 1 < len(argv):
            out.append(f"--depths={argv[i + 1]}")
            i += 2
            continue
        out.append(argv[i])
        i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(_join_negative_values(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args, argv)
    except (ConfigError, AnchorConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

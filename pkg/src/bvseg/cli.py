"""Command-line entry point: ``bvseg <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import io
from .model import state_to_bytes, synthesize
from .pipeline import TRANSFORMS, decompose, generalization_probe, mean_dice, dice, segment

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DECOMPOSE_OUTPUTS = ("contour_mean", "contour_var", "basis_mean", "rho_mean", "upsilon_mean")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _keys_help() -> str:
    cfg = io.RunConfig()
    lines = ["config keys (file 'key = value' or --set key=value) and defaults:"]
    for key, value in cfg.as_dict().items():
        lines.append(f"  {key:<24}{io.format_value(value)}")
    lines.append("")
    lines.append("precedence: flags > --config file > defaults")
    lines.append(f"probe transforms: {', '.join(sorted(TRANSFORMS))}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="config file of 'key = value' lines")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--k", type=int, help="number of classes K (default 2)")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; may be repeated")
    common.add_argument("-v", "--verbose", action="store_true")

    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="bvseg", description="Variational contour/basis decomposition and "
                "segmentation of grayscale images.", epilog=_keys_help(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("decompose", parents=[common], help="unsupervised decomposition",
                       epilog=_keys_help(), formatter_class=fmt)
    d.add_argument("image", type=Path, help="grayscale PNG (8/16-bit) or raw BSG1 map")

    s = sub.add_parser("segment", parents=[common], help="decomposition plus label map",
                       epilog=_keys_help(), formatter_class=fmt)
    s.add_argument("image", type=Path)
    s.add_argument("--labels", type=Path, help="8-bit PNG of class ids; enables supervision")

    e = sub.add_parser("evaluate", parents=[common], help="per-class and average Dice")
    e.add_argument("pred", type=Path, help="predicted label PNG")
    e.add_argument("gt", type=Path, help="ground-truth label PNG")

    y = sub.add_parser("synthesize", parents=[common], help="write a synthetic test scene")
    y.add_argument("scene", help="scene file of 'key = value' lines, or 'standard'")

    r = sub.add_parser("probe", parents=[common], help="Dice drop under an intensity remap, "
                       "with and without the variational loss", epilog=_keys_help(),
                       formatter_class=fmt)
    r.add_argument("scene", help="scene file, or 'standard'")
    r.add_argument("--transform", required=True, choices=sorted(TRANSFORMS))
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.k is not None:
        out["K"] = str(args.k)
    return out


def _load_scene(arg: str, K_override):
    if arg == "standard":
        spec = io.parse_scene_spec("")
    else:
        path = Path(arg)
        spec = io.parse_scene_spec(path.read_text(), str(path))
    if K_override is not None and K_override != spec.K:
        spec = replace(spec, K=K_override, levels=())
    return spec


def _write_pair(out: Path, name: str, values) -> None:
    io.write_map(out / f"{name}.bsg", values, "raw")
    io.write_map(out / f"{name}.png", values, "png16")


def _write_decomposition(out: Path, state) -> None:
    _write_pair(out, "contour_mean", state.q_x.mean[0])
    _write_pair(out, "contour_var", state.q_x.var[0])
    _write_pair(out, "basis_mean", state.q_m.mean[0])
    _write_pair(out, "rho_mean", state.q_rho.mean[0])
    _write_pair(out, "upsilon_mean", state.q_upsilon.mean[0])
    (out / "state.bss").write_bytes(state_to_bytes(state))


def _run_config_file(out: Path, cfg) -> None:
    (out / "config.txt").write_text(io.dump_config(cfg))


def cmd_decompose(args, cfg) -> int:
    y = io.read_image(args.image).data
    res = decompose(y, cfg.hyper, cfg.fit)
    out = args.out_dir
    _write_decomposition(out, res.state)
    _run_config_file(out, cfg)
    report = {"command": "decompose", "stop_reason": res.report.stop_reason,
              "losses": io.loss_summary(res.report.history)}
    (out / "metrics.json").write_text(io.metrics_json(report))
    return EXIT_OK


def cmd_segment(args, cfg) -> int:
    y = io.read_image(args.image).data
    labels = None
    if args.labels is not None:
        labels = io.read_labels(args.labels, cfg.hyper.K)
        if labels.shape != y.shape:
            raise ValueError(f"label image {labels.shape} does not match image {y.shape}")
    res = segment(y, labels, cfg.hyper, cfg.fit)
    out = args.out_dir
    _write_decomposition(out, res.state)
    io.write_labels(out / "label_map.png", res.label_map)
    for k in range(cfg.hyper.K):
        _write_pair(out, f"omega_mean_{k}", res.boundary[k])
    _run_config_file(out, cfg)
    report = {"command": "segment", "supervised": labels is not None,
              "stop_reason": res.report.stop_reason,
              "losses": io.loss_summary(res.report.history)}
    if labels is not None:
        report["train_dice"] = [dice(res.label_map, labels, k) for k in range(cfg.hyper.K)]
    (out / "metrics.json").write_text(io.metrics_json(report))
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    pred = io.read_labels(args.pred)
    gt = io.read_labels(args.gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    K = args.k if args.k is not None else int(max(pred.max(), gt.max())) + 1
    per_class = [dice(pred, gt, k) for k in range(K)]
    for k, v in enumerate(per_class):
        print(f"class {k} Dice {v!r}")
    print(f"average Dice {mean_dice(pred, gt, K)!r}")
    return EXIT_OK


def cmd_synthesize(args, cfg) -> int:
    spec = _load_scene(args.scene, args.k)
    seed = cfg.fit.seed
    y, labels, basis, contour = synthesize(spec, seed)
    out = args.out_dir
    _write_pair(out, "image", y)
    _write_pair(out, "gt_basis", basis)
    _write_pair(out, "gt_contour", contour)
    io.write_labels(out / "gt_label.png", labels)
    return EXIT_OK


def cmd_probe(args, cfg) -> int:
    spec = _load_scene(args.scene, args.k)
    h = cfg.hyper
    if h.K != spec.K:
        h = replace(h, K=spec.K)
    rep = generalization_probe(spec, args.transform, h, cfg.fit, scene_seed=cfg.fit.seed)
    text = io.metrics_json(rep.as_dict())
    (args.out_dir / "probe.json").write_text(text)
    print(f"gap lambda={h.lam!r}: {rep.gap_lambda:.9g}")
    print(f"gap lambda=0: {rep.gap_lambda0:.9g}")
    return EXIT_OK


COMMANDS = {
    "decompose": cmd_decompose,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "synthesize": cmd_synthesize,
    "probe": cmd_probe,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = io.parse_config(args.config, _overrides(args))
        if args.command != "evaluate":
            args.out_dir.mkdir(parents=True, exist_ok=True)
    except (UsageError, io.ConfigError) as exc:
        print(f"bvseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"bvseg: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        return COMMANDS[args.command](args, cfg)
    except io.ConfigError as exc:
        print(f"bvseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"bvseg: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

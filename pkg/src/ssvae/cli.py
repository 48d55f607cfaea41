"""Command-line entry point: ``ssvae <command> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from .model import save_params
from .verify import FAULTS, SUITES, all_passed, inject_fault, run_verify

EXIT_OK = 0
EXIT_VERIFY_FAILED = 2
EXIT_CONFIG = 3


def _overrides(extra: list[str]) -> dict[str, str]:
    """Turn leftover ``--key value`` pairs into config overrides."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise H.ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            value = extra[i + 1]
            i += 2
        else:
            raise H.ConfigError(f"option --{key} needs a value")
        out[key] = value
    return out


def _config(args, extra) -> H.ExperimentConfig:
    return H.load_config(args.config, _overrides(extra))


def _first_dataset(cfg: H.ExperimentConfig, name: str | None) -> str:
    return name or cfg.datasets[0].name


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    name = _first_dataset(cfg, args.dataset)
    bundle = H._bundle(cfg, name)
    data = bundle.prepared(args.rotation, args.fraction, cfg.max_len)
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed + args.rotation
    tr, rep = H.fit_with_alpha_selection(cfg, args.variant, data, seed, out / "logs" / f"train_{name}_{args.variant}")
    save_params(out / "model", tr.best_params())
    H.append_raw(out / "raw.csv", rep)
    print(f"{rep.variant} on {name}: best dev {rep.best_dev:.4f} (epoch {rep.best_epoch}), "
          f"test {rep.test_accuracy:.4f}, alpha {rep.alpha:g}, {rep.param_count} params")
    return EXIT_OK


def cmd_sweep(args, extra) -> int:
    cfg = _config(args, extra)
    name = _first_dataset(cfg, args.dataset)
    reports = H.run_sweep(cfg, args.variant, name, args.fraction, args.rotation)
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    H.write_raw(out / "raw.csv", reports)
    for r in reports:
        print(f"alpha={r.alpha:g}  dev={r.best_dev:.4f}  test={r.test_accuracy:.4f}")
    print(f"selected alpha={reports[0].alpha:g}")
    return EXIT_OK


def cmd_matrix(args, extra) -> int:
    cfg = _config(args, extra)
    table = H.run_matrix(cfg)
    print(H.render_markdown(table), end="")
    return EXIT_OK


def cmd_speed(args, extra) -> int:
    cfg = _config(args, extra)
    rows = H.run_speed_bench(cfg)
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    md = H.render_speed(rows, "markdown")
    (out / "table.md").write_text(md, encoding="utf-8")
    (out / "table.csv").write_text(H.render_speed(rows, "csv"), encoding="utf-8")
    print(md, end="")
    return EXIT_OK


def cmd_ood(args, extra) -> int:
    if args.source:
        extra = extra + ["--source", args.source]
    if args.target:
        extra = extra + ["--target", args.target]
    cfg = _config(args, extra)
    table = H.run_ood(cfg)
    print(H.render_markdown(table), end="")
    return EXIT_OK


def cmd_stats(args, extra) -> int:
    cfg = _config(args, extra)
    print(H.dataset_stats(cfg), end="")
    return EXIT_OK


def cmd_verify(args, extra) -> int:
    if extra:
        raise H.ConfigError(f"verify takes no overrides, got {' '.join(extra)}")
    if args.fault:
        with inject_fault(args.fault):
            results = run_verify(args.suite, args.seed)
    else:
        results = run_verify(args.suite, args.seed)
    for r in results:
        print(r.line())
    ok = all_passed(results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssvae", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value experiment file")
        return sp

    for name, fn, hlp in (("train", cmd_train, "train one variant (alpha chosen on dev)"),
                          ("sweep", cmd_sweep, "one run per alpha on a single cell")):
        sp = with_config(sub.add_parser(name, help=hlp))
        sp.add_argument("--variant", default="ssvae")
        sp.add_argument("--dataset")
        sp.add_argument("--fraction", type=float, default=1.0)
        sp.add_argument("--rotation", type=int, default=0)
        sp.set_defaults(fn=fn)

    with_config(sub.add_parser("matrix", help="variant x dataset x fraction accuracy table")).set_defaults(fn=cmd_matrix)
    with_config(sub.add_parser("speed", help="per-step time relative to SSVAE")).set_defaults(fn=cmd_speed)
    sp = with_config(sub.add_parser("ood", help="train on source, test on target"))
    sp.add_argument("--source")
    sp.add_argument("--target")
    sp.set_defaults(fn=cmd_ood)
    with_config(sub.add_parser("stats", help="dataset statistics")).set_defaults(fn=cmd_stats)

    sp = sub.add_parser("verify", help="run the self-check suites")
    sp.add_argument("--suite", choices=SUITES + ("all",), default="all")
    sp.add_argument("--fault", choices=FAULTS, help="inject a known bug first (negative control)")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args, extra)
    except H.ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""``capskit`` command line.

Exit codes: 0 success, 1 a verification check failed, 2 bad configuration,
3 file-system error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, dump_config, load_config

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("capskit")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capskit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (
        ("generate", "write a synthetic dataset (PGM crops + manifest.csv)"),
        ("verify", "equivalence checks on random-weight networks"),
        ("train", "train and evaluate one network per sampler and seed"),
        ("ablate", "component grid plus beta and temperature sweeps"),
        ("report", "re-render CSV and SVG files from a saved record.json"),
    ):
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", type=Path, help="INI experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--sampler", help="comma-separated sampler kinds")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--temperature", type=float)
        sp.add_argument("--set", dest="test_set", choices=("mdt", "bdt"))
        if name in ("train", "ablate"):
            sp.add_argument("--checkpoints", action="store_true",
                            help="also save trained weights under OUT/checkpoints")
        if name == "report":
            sp.add_argument("record", nargs="?", type=Path,
                            help="record.json or a run directory (default: --out)")
    return p


def _print_csv(path: Path):
    sys.stdout.write(path.read_text())


def run(args) -> int:
    from . import experiments as X
    from .datagen import make_dataset, save_dataset
    from .report import emit_report, load_record

    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, out=args.out, sampler=args.sampler,
                          beta=args.beta, temperature=args.temperature, test_set=args.test_set)
    out = Path(cfg.run.out)

    if args.command == "generate":
        seed = int(cfg.run.seeds[0])
        ds = make_dataset(cfg.run.n_raw, cfg.run.n_test_raw, seed, cfg.protocol, cfg.raw)
        save_dataset(ds, out)
        (out / "config.ini").write_text(dump_config(cfg))
        print(f"train={len(ds.train)} val={len(ds.val)} "
              f"mdt={sum(map(len, ds.mdt))} bdt={sum(map(len, ds.bdt))} -> {out}")
        return EXIT_OK

    if args.command == "report":
        src = args.record or out
        try:
            record = load_record(src)
        except (ValueError, KeyError) as exc:
            raise OSError(f"{src}: unreadable record ({exc})") from None
        paths = emit_report(record, out)
    else:
        ckpt = out / "checkpoints" if getattr(args, "checkpoints", False) else None
        if args.command == "verify":
            record = X.cmd_verify(cfg)
        elif args.command == "train":
            record = X.cmd_train_eval(cfg, ckpt)
        else:
            record = X.cmd_ablate(cfg, ckpt)
        paths = emit_report(record, out)
        (out / "config.ini").write_text(dump_config(cfg))

    for p in paths:
        if p.suffix == ".csv":
            _print_csv(p)
    for p in paths:
        print(f"wrote {p}", file=sys.stderr)
    if record.failed:
        for c in record.failed:
            print(f"FAILED {c['name']}: {c['detail']}", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        # a bare ValueError here is an invalid setting such as CAPSKIT_THREADS
        kind = "I/O error" if isinstance(exc, OSError) else "config error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

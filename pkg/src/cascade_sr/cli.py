"""Command-line entry points: ``train``, ``infer``, ``eval``, ``plan``, ``plot``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import re
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

log = logging.getLogger("cascade_sr")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    """Bad flags, bad config or missing inputs (exit code 2)."""


def _parse_set(items: list[str]) -> dict:
    from .config import parse_value

    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    from .base_sr import BaseSRModel, pretrain_base
    from .checkpoint import load_base, save_base
    from .config import ConfigError, load_config
    from .data import Dataset, make_synthetic_dataset
    from .trainer import run_training

    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.steps is not None:
        overrides["train.steps"] = args.steps
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc

    out = Path(cfg.out_dir)
    if cfg.data.path is not None:
        if not Path(cfg.data.path).is_dir():
            raise UsageError(f"dataset path not found: {cfg.data.path}")
        try:
            data = Dataset.from_folder(cfg.data.path, cfg.data.crop_size)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    else:
        data = make_synthetic_dataset(cfg.data.synthetic_n, cfg.data.synthetic_size, cfg.seed, cfg.data.crop_size)
    train, val = data.split(cfg.data.n_val) if cfg.data.n_val else (data, None)
    out.mkdir(parents=True, exist_ok=True)
    data.write_manifest(out / "dataset.json", {"n_val": cfg.data.n_val})

    if cfg.base.mode == "learned":
        if cfg.base.checkpoint:
            base = load_base(cfg.base.checkpoint)
        else:
            base = pretrain_base(train, cfg.base.epochs, seed=cfg.seed)
            save_base(base, out / "base.pt")
    else:
        base = BaseSRModel()

    def progress(step, loss):
        if step % max(cfg.train.log_every, 1) == 0:
            log.info("step %d loss %.5f", step, loss)

    run_training(cfg, train, base=base, out_dir=out, resume=args.resume, progress=progress)
    print(f"checkpoint written to {out / 'checkpoint.pt'}")
    return EXIT_OK


# ---------------------------------------------------------------- infer


def cmd_infer(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .imaging import UnsupportedImageError, load_image, save_image
    from .sampler import SamplerConfig, ScgReference, super_resolve

    if not args.scale > 1:
        raise UsageError(f"--scale must be > 1, got {args.scale}")
    if args.scg == "off" and args.zeta is not None:
        raise UsageError("--scg off contradicts an explicit --zeta")
    if args.zeta is not None and args.zeta < 0:
        raise UsageError(f"--zeta must be >= 0, got {args.zeta}")
    try:
        bundle = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    try:
        img = load_image(args.input)
    except (FileNotFoundError, UnsupportedImageError) as exc:
        raise UsageError(str(exc)) from exc

    scg = bundle.config.scg
    cfg = SamplerConfig(
        zeta=scg.zeta if args.zeta is None else args.zeta,
        seed=args.seed,
        scg_reference=ScgReference.parse(args.scg or scg.reference),
        strategy=args.strategy or scg.strategy,
        fixed_scale=bundle.config.train.fixed_scale,
    )
    try:
        out, trace = super_resolve(img, args.scale, bundle.model, bundle.base, bundle.schedule, cfg, return_trace=True)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, out_path)
    if args.dump_stages:
        dump = Path(args.dump_stages)
        dump.mkdir(parents=True, exist_ok=True)
        for i, x in enumerate(trace.stages, 1):
            save_image(x.clamp(-1, 1), dump / f"stage_{i}.png")
    print(trace.plan.format_table())
    print(f"wrote {out_path} ({out.shape[-2]}x{out.shape[-1]}), {trace.denoiser_calls} denoiser calls")
    return EXIT_OK


# ---------------------------------------------------------------- eval

SCALE_NAME = re.compile(r"^(?P<stem>.+)_x(?P<scale>\d+(?:\.\d+)?)$")


def _pngs(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise UsageError(f"not a directory: {folder}")
    return {p.name: p for p in sorted(folder.iterdir()) if p.suffix.lower() == ".png"}


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def cmd_eval(args) -> int:
    from .imaging import load_image
    from .metrics import ConsistencyMatrix, psnr, self_ssim, ssim

    if not (args.pred and args.gt) and not args.selfssim:
        raise UsageError("give --pred and --gt, and/or --selfssim")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise UsageError("--pred and --gt go together")
        pred, gt = _pngs(Path(args.pred)), _pngs(Path(args.gt))
        unmatched = sorted(set(pred) ^ set(gt))
        for name in unmatched:
            log.warning("skipping %s: no counterpart in the other directory", name)
        common = sorted(set(pred) & set(gt))
        if not common:
            raise UsageError("no matching filenames between --pred and --gt")
        rows = []
        for name in common:
            a, b = load_image(pred[name]), load_image(gt[name])
            if a.shape != b.shape:
                log.warning("skipping %s: shape %s vs %s", name, tuple(a.shape), tuple(b.shape))
                continue
            rows.append((name, psnr(a, b), ssim(a, b)))
        for metric, col in (("psnr", 1), ("ssim", 2)):
            with open(out / f"{metric}.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["file", metric])
                for r in rows:
                    w.writerow([r[0], _fmt(r[col])])
                if rows:
                    w.writerow(["mean", _fmt(float(np.mean([r[col] for r in rows])))])
        if rows:
            print(f"PSNR mean {_fmt(float(np.mean([r[1] for r in rows])))}  SSIM mean {np.mean([r[2] for r in rows]):.4f}")

    if args.selfssim:
        groups: dict[str, dict[float, Path]] = defaultdict(dict)
        for name, p in _pngs(Path(args.selfssim)).items():
            m = SCALE_NAME.match(Path(name).stem)
            if m is None:
                log.warning("skipping %s: expected <name>_x<scale>.png", name)
                continue
            groups[m["stem"]][float(m["scale"])] = p
        mats = []
        for stem, files in sorted(groups.items()):
            if len(files) < 2:
                log.warning("skipping %s: only one scale", stem)
                continue
            mats.append(self_ssim({s: load_image(files[s]) for s in sorted(files)}))
        if not mats:
            raise UsageError("no image has outputs at two or more scales")
        scales = mats[0].scales
        if any(m.scales != scales for m in mats):
            raise UsageError("images were evaluated at different scale sets")
        mean = ConsistencyMatrix(scales, np.mean([m.values for m in mats], axis=0))
        with open(out / "selfssim.csv", "w", newline="") as f:
            csv.writer(f).writerows(mean.to_csv_rows())
        table = mean.format_table()
        (out / "selfssim.txt").write_text(table + "\n")
        print(table)
    return EXIT_OK


# ---------------------------------------------------------------- plan


def cmd_plan(args) -> int:
    from .scale_plan import plan_scales

    try:
        plan = plan_scales(args.scale, args.fixed_scale, tuple(args.input_res), args.strategy)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(plan.format_table())
    if args.csv:
        rows = plan.table()
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------- plot


def _read_csv(path: str) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"CSV not found: {p}")
    with open(p, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise UsageError(f"{p} holds no data rows")
    return rows


def _column(rows: list[dict], *names: str) -> np.ndarray:
    for n in names:
        if n in rows[0]:
            return np.array([float(r[n]) for r in rows])
    raise UsageError(f"CSV lacks a column named one of {names}")


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not (args.loss or args.sweep):
        raise UsageError("give --loss and/or --sweep")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.loss:
        rows = _read_csv(args.loss)
        step, loss = _column(rows, "step"), _column(rows, "loss")
        order = np.argsort(step, kind="stable")
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(step[order], loss[order], lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("L1 loss")
        if np.all(loss > 0):
            ax.set_yscale("log")
        fig.tight_layout()
        fig.savefig(out / "loss.png", dpi=100)
        plt.close(fig)
        print(f"wrote {out / 'loss.png'}")
    if args.sweep:
        rows = _read_csv(args.sweep)
        zeta = _column(rows, "zeta")
        score = _column(rows, "score", "consistency", "selfssim", "residual")
        order = np.argsort(zeta, kind="stable")
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(zeta[order], score[order], marker="o")
        ax.set_xlabel("guidance strength zeta")
        ax.set_ylabel("consistency score")
        fig.tight_layout()
        fig.savefig(out / "sweep.png", dpi=100)
        plt.close(fig)
        print(f"wrote {out / 'sweep.png'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cascade-sr", description="Self-cascaded diffusion super-resolution at arbitrary scales.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the shared denoiser", description="Train the shared cascade denoiser.")
    t.add_argument("--config", help="flat 'section.key = value' config file (defaults used when omitted)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    t.add_argument("--seed", type=int, help="seed for all randomness (overrides config)")
    t.add_argument("--out-dir", help="directory for checkpoints, logs and the resolved config")
    t.add_argument("--steps", type=int, help="number of optimizer steps (overrides train.steps)")
    t.add_argument("--resume", help="checkpoint to continue training from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="super-resolve one image", description="Upscale a PNG by an arbitrary factor.")
    i.add_argument("--input", required=True, help="input PNG")
    i.add_argument("--scale", type=float, required=True, help="target scale factor S > 1")
    i.add_argument("--checkpoint", required=True, help="trained checkpoint")
    i.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    i.add_argument("--zeta", type=float, help="guidance strength (default from checkpoint config)")
    i.add_argument("--scg", choices=["prev", "init", "off"], help="guidance reference: previous stage, initial input, or off")
    i.add_argument("--strategy", choices=["rl", "rf", "us"], help="scale split: remainder last/first or uniform")
    i.add_argument("--out", required=True, help="output PNG path")
    i.add_argument("--dump-stages", metavar="DIR", help="also write every stage output to DIR")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM/SelfSSIM over result folders", description="Score result folders.")
    e.add_argument("--pred", help="folder of predicted PNGs")
    e.add_argument("--gt", help="folder of ground-truth PNGs with matching filenames")
    e.add_argument("--selfssim", metavar="DIR", help="folder of <name>_x<scale>.png outputs for cross-scale SSIM")
    e.add_argument("--out", default="eval", help="output folder for CSVs and the text matrix")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plan", help="print the stage plan for a scale", description="Print the stage plan.")
    pl.add_argument("--scale", type=float, required=True, help="target scale factor S > 1")
    pl.add_argument("--fixed-scale", type=float, default=2.0, help="fixed per-stage scale (default 2)")
    pl.add_argument("--input-res", type=int, nargs=2, default=(1, 1), metavar=("H", "W"), help="input resolution")
    pl.add_argument("--strategy", choices=["rl", "rf", "us"], default="rl", help="scale split strategy")
    pl.add_argument("--csv", help="also write the table to this CSV")
    pl.set_defaults(func=cmd_plan)

    pt = sub.add_parser("plot", help="render loss curves and zeta sweeps", description="Plot CSV logs to PNG.")
    pt.add_argument("--loss", help="training log CSV (columns step, loss)")
    pt.add_argument("--sweep", help="sweep CSV (columns zeta, score)")
    pt.add_argument("--out", default="plots", help="output folder")
    pt.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

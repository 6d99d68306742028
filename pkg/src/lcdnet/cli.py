"""Command-line driver.

Exit codes: 0 success, 1 usage error, 2 runtime failure. ``LCDNET_THREADS``
caps BLAS and numba threads when set before the numeric libraries load.
Every run writes a JSON echo of its arguments; ``lcdnet replay FILE`` reruns it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")
ECHO_NAME = "run_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _apply_threads() -> None:
    n = os.environ.get("LCDNET_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise UsageError(f"LCDNET_THREADS must be a positive integer, got {n!r}")
    for var in THREAD_VARS:
        os.environ.setdefault(var, n)
    if "numba" in sys.modules:
        import warnings

        import numba

        with warnings.catch_warnings():
            # threading-layer probes warn about optional backends
            warnings.simplefilter("ignore")
            numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


# -- argument groups -------------------------------------------------------------

def _widths(text: str):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated integers: {text!r}")
    if len(vals) != 5:
        raise argparse.ArgumentTypeError("exactly five decoder widths are needed")
    return vals


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--widths", type=_widths, default=None,
                   help="decoder widths, deepest first (default 96,64,64,64,64)")
    g.add_argument("--exchange-fraction", type=float, default=0.5)
    g.add_argument("--eps", type=float, default=1e-5, help="GMM epsilon, in [0, 1e-5]")
    g.add_argument("--no-tif", action="store_true", help="disable channel exchange")
    g.add_argument("--no-ffm", action="store_true", help="replace FFM by |x1 - x2|")
    g.add_argument("--no-gmm", action="store_true", help="drop the gates from the decoder")
    g.add_argument("--ffm-literal", action="store_true",
                   help="use the line-by-line reference fusion listing")
    g.add_argument("--gmm-norm", choices=("rms", "mean_squared"), default="rms",
                   help="GMM normalizer: sqrt(mean(ed^2)) or mean(ed)^2 variant")
    g.add_argument("--model-seed", type=int, default=None,
                   help="weight-init seed (defaults to --seed)")


def _model_config(args):
    from .model import ModelConfig

    kw = dict(eps=args.eps, exchange_fraction=args.exchange_fraction, use_tif=not args.no_tif,
              use_ffm=not args.no_ffm, use_gmm=not args.no_gmm, ffm_literal=args.ffm_literal,
              gmm_norm=args.gmm_norm,
              seed=args.model_seed if args.model_seed is not None else getattr(args, "seed", 0))
    if args.widths is not None:
        kw["decoder_widths"] = args.widths
    return ModelConfig(**kw)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcdnet", description="Lightweight bitemporal change detection.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-synthetic", help="write a seeded synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, default=1000, help="total pairs over all splits")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--density", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-fraction", type=float, default=0.2,
                   help="share of pairs written to the test split")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--pretrained", default=None, help="encoder weights archive")
    t.add_argument("--freeze-bn", action="store_true", help="keep encoder batch-norm statistics fixed")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--weight-decay", type=float, default=2.5e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--train-split", default="train")
    t.add_argument("--val-split", default=None, help="default: val if present, else test")
    t.add_argument("--augment", action="store_true", help="enable noise and rotation augmentation")
    t.add_argument("--quiet", action="store_true")
    _model_args(t)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--batch-size", type=int, default=8)
    e.add_argument("--no-maps", action="store_true", help="skip confusion-map PNGs")

    pr = sub.add_parser("predict", help="change mask for one image pair")
    pr.add_argument("--t1", required=True)
    pr.add_argument("--t2", required=True)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--out", required=True, help="output mask PNG")
    pr.add_argument("--label", default=None, help="reference mask; adds a confusion PNG")
    pr.add_argument("--threshold", type=float, default=0.5)

    pf = sub.add_parser("profile", help="parameter and MAC report")
    pf.add_argument("--input", type=int, default=256)
    pf.add_argument("--format", choices=("text", "csv"), default="text")
    pf.add_argument("--out", default=None, help="write the report here instead of stdout")
    _model_args(pf)

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--trials", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--case", action="append", default=None, help="restrict to named cases")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--out", default=None, help="directory for the config echo")

    rp = sub.add_parser("replay", help="rerun the command recorded in a config echo file")
    rp.add_argument("file")

    for sp in (g, t, e, pr, pf, gc):
        sp.add_argument("--echo", default=None, help=f"config echo path (default <out>/{ECHO_NAME})")
    return p


# -- commands ----------------------------------------------------------------------

def _echo(args, argv: List[str]) -> None:
    path = args.echo
    if path is None:
        out = getattr(args, "out", None)
        if args.command == "predict":
            path = os.path.splitext(out)[0] + ".config.json"
        elif args.command == "profile" and out is not None:
            path = os.path.splitext(out)[0] + ".config.json"
        elif out is not None:
            path = os.path.join(out, ECHO_NAME)
        else:
            path = ECHO_NAME
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    from . import __version__

    record = {"command": args.command, "argv": argv, "version": __version__,
              "args": {k: v for k, v in sorted(vars(args).items()) if k != "echo"}}
    if hasattr(args, "no_tif"):
        record["model_config"] = json.loads(_model_config(args).to_json())
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")


def cmd_gen_synthetic(args) -> int:
    from .data import generate_synthetic

    if not 0.0 <= args.test_fraction < 1.0:
        raise UsageError("--test-fraction must lie in [0, 1)")
    if args.pairs < 1:
        raise UsageError("--pairs must be positive")
    n_test = int(round(args.pairs * args.test_fraction))
    hw = (args.size, args.size)
    generate_synthetic(args.out, args.pairs - n_test, hw, args.density, args.seed, "train")
    if n_test:
        generate_synthetic(args.out, n_test, hw, args.density, args.seed, "test")
    print(f"wrote {args.pairs - n_test} train and {n_test} test pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .backbone import maybe_load_pretrained
    from .data import AugmentConfig, load_dataset
    from .model import LcdNet
    from .trainer import TrainConfig, fit

    val_split = args.val_split
    if val_split is None:
        val_split = "val" if os.path.isdir(os.path.join(args.data, "val")) else "test"
    train = load_dataset(args.data, args.train_split)
    val = load_dataset(args.data, val_split)
    model = LcdNet(_model_config(args))
    maybe_load_pretrained(model.encoder, args.pretrained)
    if args.freeze_bn:
        from .nn import BatchNorm2d

        for _, m in model.encoder.named_modules():
            if isinstance(m, BatchNorm2d):
                m.frozen = True
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      weight_decay=args.weight_decay, seed=args.seed,
                      augment=AugmentConfig(seed=args.seed) if args.augment else None,
                      out_dir=args.out, verbose=not args.quiet)
    log = fit(model, train, val, config=cfg)
    if log.best_epoch is None:
        print("no checkpoint written")
    else:
        print(f"best IoU {log.best_iou:.4f} at epoch {log.best_epoch}; checkpoint {log.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .metrics import compute_metrics, save_confusion_png, write_metrics_csv
    from .model import load_checkpoint
    from .trainer import evaluate

    model, _ = load_checkpoint(args.checkpoint)
    pairs = load_dataset(args.data, args.split)
    if not pairs:
        raise RuntimeError(f"split {args.split!r} is empty")
    counts, masks = evaluate(model, pairs, args.batch_size, args.threshold)
    m = compute_metrics(counts)
    os.makedirs(args.out, exist_ok=True)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"),
                      [(os.path.basename(os.path.normpath(args.data)), args.split, m)])
    if not args.no_maps:
        maps = os.path.join(args.out, "confusion")
        os.makedirs(maps, exist_ok=True)
        for p, mask in zip(pairs, masks):
            save_confusion_png(mask, p.label, os.path.join(maps, p.name + ".png"))
    fmt = lambda v: "undefined" if v is None else f"{v:.4f}"
    print(f"pc {fmt(m.pc)}  rc {fmt(m.rc)}  f1 {fmt(m.f1)}  oa {fmt(m.oa)}  "
          f"kappa {fmt(m.kappa_standard)}  iou {fmt(m.iou)}")
    return 0


def cmd_predict(args) -> int:
    import numpy as np
    from PIL import Image

    from .backbone import normalize_images
    from .data import _read_label, _read_rgb
    from .metrics import save_confusion_png
    from .model import load_checkpoint, predict

    model, _ = load_checkpoint(args.checkpoint)
    t1 = _read_rgb(args.t1, args.t1)
    t2 = _read_rgb(args.t2, args.t2)
    if t1.shape != t2.shape:
        raise RuntimeError(f"T1 {t1.shape[:2]} and T2 {t2.shape[:2]} differ in size")
    mask = predict(model, normalize_images(t1), normalize_images(t2), args.threshold)[0, 0]
    d = os.path.dirname(args.out)
    if d:
        os.makedirs(d, exist_ok=True)
    Image.fromarray((mask * 255).astype(np.uint8), "L").save(args.out)
    if args.label is not None:
        label = _read_label(args.label, args.label)
        save_confusion_png(mask, label, os.path.splitext(args.out)[0] + "_confusion.png")
    print(f"changed pixels: {int(mask.sum())} of {mask.size}")
    return 0


def cmd_profile(args) -> int:
    from .model import LcdNet
    from .profiler import count_macs, summary_text, to_csv, to_text

    model = LcdNet(_model_config(args))
    rep = count_macs(model, (args.input, args.input))
    text = to_csv(rep) if args.format == "csv" else to_text(rep) + "\n" + summary_text(rep)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        print(summary_text(rep), end="")
    else:
        print(text, end="")
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    def show(name, err, secs):
        flag = "ok" if err < args.tol else "FAIL"
        print(f"{name:26s} max rel err {err:.3e}  {secs:6.1f}s  {flag}", flush=True)

    try:
        results = run_suite(trials=args.trials, seed=args.seed, names=args.case, progress=show)
    except KeyError as exc:
        raise UsageError(str(exc.args[0]))
    worst = max(results.values())
    print(f"worst {worst:.3e} over {len(results)} cases x {args.trials} trials")
    return 0 if worst < args.tol else 2


COMMANDS = {"gen-synthetic": cmd_gen_synthetic, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "profile": cmd_profile, "grad-check": cmd_grad_check}


def run(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _apply_threads()
        args = build_parser().parse_args(argv)
        if args.command == "replay":
            with open(args.file, encoding="utf-8") as fh:
                recorded = json.load(fh)["argv"]
            return run(recorded)
        _echo(args, argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"lcdnet: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

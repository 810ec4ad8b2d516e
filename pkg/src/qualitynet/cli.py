"""Command-line entry point: corpus synthesis, training, evaluation, scoring and experiments."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from qualitynet import net
from qualitynet._io import atomic_open
from qualitynet.features import StftConfig, magnitude_spectrogram
from qualitynet.gradcheck import run_trials
from qualitynet.optim import TrainConfig, learning_curve, load_checkpoint, save_checkpoint, train
from qualitynet.signal import SynthConfig, build_corpus, read_manifest, read_wav

log = logging.getLogger("qualitynet")

GRADCHECK_TOL = 1e-4

# flags each subcommand cannot run without (checked after the config file is merged)
REQUIRED = {
    "synth": ("out",),
    "train": ("manifest", "val", "out"),
    "eval": ("model", "manifest"),
    "score": ("model", "wav"),
    "learning-curve": ("corpus", "out"),
    "ablate": ("corpus", "out"),
}


class CliError(Exception):
    pass


def thread_count() -> int:
    raw = os.environ.get("QNET_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"QNET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"QNET_THREADS must be a positive integer, got {raw!r}")
    return n


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None
    if not sizes:
        raise argparse.ArgumentTypeError("size list is empty")
    return sizes


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fgb", type=float, default=-3.0, help="forget-gate bias initial value")
    p.add_argument("--no-frame-constraint", action="store_true", help="drop the frame-level loss term")
    p.add_argument("--frame-term-mean", action="store_true", help="average rather than sum the frame term")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=100)
    p.add_argument("--dense", type=int, default=50)
    p.add_argument("--seed", type=int, default=0, help="init and shuffle seed")
    p.add_argument("--cache-dir", type=Path, help="directory for cached spectrograms")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qualitynet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="key=value file supplying any flag")
        return p

    p = command("synth", "synthesize the train/val/test corpus")
    p.add_argument("--out", type=Path)
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = command("train", "train a model and write a checkpoint plus history CSV")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--val", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--history", type=Path, help="default: <out>.history.csv")
    _add_training_flags(p)

    p = command("eval", "score a manifest and report MSE/LCC/SRCC")
    p.add_argument("--model", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--json-out", type=Path)
    p.add_argument("--scatter-out", type=Path)
    p.add_argument("--clamp", action="store_true", help="clamp predictions to [1.0, 4.5]")

    p = command("score", "score a single WAV file")
    p.add_argument("--model", type=Path)
    p.add_argument("--wav", type=Path)
    p.add_argument("--frames-out", type=Path)

    p = command("gradcheck", "finite-difference check of the backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=12)

    p = command("learning-curve", "test metrics versus training-set size")
    p.add_argument("--corpus", type=Path, help="directory holding train.csv, val.csv, test.csv")
    p.add_argument("--sizes", type=_sizes, default=[25, 100, 500])
    p.add_argument("--out", type=Path)
    _add_training_flags(p)

    p = command("ablate", "train with and without the frame constraint")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--out", type=Path)
    _add_training_flags(p)
    return parser


def read_config(path: Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{n}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(sub: argparse.ArgumentParser, args: argparse.Namespace, argv: list[str]) -> None:
    """Fill flags from the config file unless given on the command line."""
    values = read_config(args.config)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    given = {a.dest for a in sub._actions for s in a.option_strings
             if any(x == s or x.startswith(s + "=") for x in argv)}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise CliError(f"unknown config key {key!r}")
        if key in given:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in _TRUE | _FALSE:
                raise CliError(f"config key {key!r} expects a boolean, got {raw!r}")
            setattr(args, key, raw.lower() in _TRUE)
        else:
            try:
                setattr(args, key, action.type(raw) if action.type else raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CliError(f"config key {key!r}: {exc}") from None


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        max_epochs=args.epochs, patience=args.patience, lr=args.lr,
        shuffle_seed=args.seed, init_seed=args.seed, fgb=args.fgb,
        alpha_enabled=not args.no_frame_constraint, frame_term_mean=args.frame_term_mean,
        hidden=args.hidden, dense=args.dense,
    )


def _corpus(root: Path):
    paths = [Path(root) / f"{s}.csv" for s in ("train", "val", "test")]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise CliError(f"missing corpus manifest(s): {', '.join(missing)}")
    return [read_manifest(p) for p in paths]


def _manifest(path: Path):
    if not Path(path).is_file():
        raise CliError(f"missing manifest {path}")
    return read_manifest(path)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_train=args.train, n_val=args.val, n_test=args.test, master_seed=args.seed)
    manifests = build_corpus(cfg, args.out, workers=thread_count())
    for split, m in manifests.items():
        print(f"{split}: {len(m)} utterances -> {Path(args.out) / (split + '.csv')}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    params, history = train(_manifest(args.manifest), _manifest(args.val), cfg, cache_dir=args.cache_dir)
    save_checkpoint(params, args.out)
    hist_path = args.history or Path(str(args.out) + ".history.csv")
    history.write_csv(hist_path)
    best = history.epochs[history.best_epoch - 1]
    print(f"best epoch {history.best_epoch}: val_mse {best.val_mse:.4f}; wrote {args.out} and {hist_path}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.model)
    from qualitynet.metrics import evaluate

    report = evaluate(params, _manifest(args.manifest), clamp=args.clamp)
    if args.json_out:
        report.write_json(args.json_out)
    if args.scatter_out:
        report.write_rows_csv(args.scatter_out)
    print(json.dumps(report.summary(), indent=2))
    return 0


def cmd_score(args) -> int:
    params = load_checkpoint(args.model)
    result = net.predict(magnitude_spectrogram(read_wav(args.wav), StftConfig()), params)
    if args.frames_out:
        with atomic_open(args.frames_out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame_index", "q_t"])
            for t, q in enumerate(result.q):
                w.writerow([t, repr(float(q))])
    print(f"{args.wav}\t{result.Q:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise CliError("--trials must be >= 1")
    rows = run_trials(args.seed, args.trials)
    for r in rows:
        print(f"trial {r['trial']:3d}  F={r['F']} H={r['H']} T={r['T']}  max_rel_err {r['max_rel_err']:.3e}")
    worst = max(r["max_rel_err"] for r in rows)
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def cmd_learning_curve(args) -> int:
    tr, va, te = _corpus(args.corpus)
    rows = learning_curve(tr, va, te, args.sizes, _train_config(args), cache_dir=args.cache_dir)
    with atomic_open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size", "mse", "lcc", "srcc"])
        for r in rows:
            w.writerow([r.size, _fmt(r.mse), _fmt(r.lcc), _fmt(r.srcc)])
    for r in rows:
        print(f"size {r.size}: lcc {_fmt(r.lcc)}")
    return 0


def ablation_rows(tr, va, te, cfg: TrainConfig, cache_dir=None) -> list[dict]:
    from dataclasses import replace

    from qualitynet.metrics import evaluate

    rows = []
    for name, alpha in (("with constraint", True), ("without constraint", False)):
        params, _ = train(tr, va, replace(cfg, alpha_enabled=alpha), cache_dir=cache_dir)
        rep = evaluate(params, te)
        rows.append({"model": name, "mse": rep.mse, "lcc": rep.lcc, "srcc": rep.srcc,
                     "clean_frame_variance": rep.clean_frame_variance})
    return rows


def cmd_ablate(args) -> int:
    tr, va, te = _corpus(args.corpus)
    rows = ablation_rows(tr, va, te, _train_config(args), args.cache_dir)
    cols = ["model", "mse", "lcc", "srcc", "clean_frame_variance"]
    with atomic_open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["model"]] + [_fmt(r[c]) for c in cols[1:]])
    for r in rows:
        print(f"{r['model']:>20}: " + "  ".join(f"{c} {_fmt(r[c])}" for c in cols[1:]))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "gradcheck": cmd_gradcheck,
    "learning-curve": cmd_learning_curve,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        if args.config is not None:
            _apply_config(sub, args, argv)
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED.get(args.command, ())
                   if getattr(args, k) is None]
        if missing:
            sub.error(f"the following arguments are required: {', '.join(missing)}")
        return COMMANDS[args.command](args)
    except (CliError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

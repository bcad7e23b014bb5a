"""Command line: gen-data, train, enhance, evaluate, analyze.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
Every command prints its resolved configuration first. ``--config FILE``
reads ``key=value`` lines that replace the defaults; explicit flags win.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dsp
from .data import NOISE_KINDS, CorpusManifest, load_corpus, read_manifest, write_corpus
from .metrics import EvalRow, bss_eval, mean_row, stoi, write_report
from .model.arch import CANONICAL_NAMES, canonical_archs, count_params, describe, receptive_field
from .model.checkpoint import load_checkpoint
from .model.net import BASELINE_NAMES, UNet

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcunet", description="Speech enhancement with recurrent-convolutional U-nets.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-count", type=int, default=64)
    g.add_argument("--test-count", type=int, default=16)
    g.add_argument("--snr-db", type=float, default=0.0)
    g.add_argument("--noise-kind", choices=NOISE_KINDS + ("both",), default="both")
    g.add_argument("--min-duration", type=float, default=2.0)
    g.add_argument("--max-duration", type=float, default=4.0)

    t = sub.add_parser("train", help="train a network on a corpus")
    t.add_argument("--arch", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="best-snapshot checkpoint path")
    t.add_argument("--target", choices=("mapping", "irm"), default=None,
                   help="default: mapping for U-nets, irm for the baselines")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=15)
    t.add_argument("--lr", type=float, default=None, help="default 0.01 with RC pairs, else 0.001")
    t.add_argument("--lr-decay", type=float, default=0.99)
    t.add_argument("--val-fraction", type=float, default=0.10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--clip", type=float, default=100.0)
    t.add_argument("--clip-all", action="store_true", help="clip every gradient, not only recurrences")
    t.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    t.add_argument("--log", default=None, help="CSV training log (default: <out>.log.csv)")

    e = sub.add_parser("enhance", help="enhance one WAV file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)

    v = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--passthrough", action="store_true", help="score the unprocessed mixtures")
    v.add_argument("--corpus", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--filter-len", type=int, default=512)
    v.add_argument("--no-reference", action="store_true",
                   help="omit the passthrough mean row that is written next to a checkpoint's mean")

    a = sub.add_parser("analyze", help="print block tables, parameter counts, receptive fields")
    which = a.add_mutually_exclusive_group(required=True)
    which.add_argument("--arch")
    which.add_argument("--all", action="store_true")
    a.add_argument("--target", choices=("mapping", "irm"), default="mapping")

    for s in (g, t, e, v, a):
        s.add_argument("--config", default=None, help="key=value file overriding the defaults")
    return p


def _read_config(path: str) -> dict[str, str]:
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return parser.parse_args(argv)
    # first pass only locates the config file, so required flags may still be missing
    subs = parser._subparsers._group_actions[0].choices
    loose = [(a, a.required) for s in subs.values() for a in s._actions]
    loose += [(g, g.required) for s in subs.values() for g in s._mutually_exclusive_groups]
    for obj, _ in loose:
        obj.required = False
    try:
        args = parser.parse_args(argv)
    finally:
        for obj, req in loose:
            obj.required = req
    sub = subs[args.command]
    actions = {a.dest: a for a in sub._actions}
    overrides = {}
    for k, raw in _read_config(args.config).items():
        if k not in actions or k in ("config", "help"):
            raise UsageError(f"unknown config key {k!r} for {args.command}")
        act = actions[k]
        if isinstance(act, argparse._StoreTrueAction):
            val = raw.lower() in ("1", "true", "yes", "on")
        else:
            val = act.type(raw) if act.type else raw
            if act.choices and val not in act.choices:
                raise UsageError(f"config {k}={raw}: expected one of {list(act.choices)}")
        overrides[k] = val
    # config replaces defaults; flags given on the command line still take precedence
    for act in sub._actions:
        act.required = act.required and act.dest not in overrides
    for grp in sub._mutually_exclusive_groups:
        if any(a.dest in overrides for a in grp._group_actions):
            grp.required = False
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def _print_config(args: argparse.Namespace) -> None:
    print("resolved config:")
    for k, v in sorted(vars(args).items()):
        print(f"  {k} = {v}")
    sys.stdout.flush()


def _arch_names() -> str:
    return ", ".join(CANONICAL_NAMES + BASELINE_NAMES)


def _load(ckpt):
    if not Path(ckpt).is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, meta = load_checkpoint(ckpt, dtype=np.float32)
    return model, meta


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    manifest = CorpusManifest(
        seed=args.seed, train_count=args.train_count, test_count=args.test_count,
        min_duration=args.min_duration, max_duration=args.max_duration,
        snr_db=args.snr_db, noise_kind=args.noise_kind,
    )
    if not 0 < manifest.min_duration <= manifest.max_duration:
        raise UsageError("need 0 < min-duration <= max-duration")
    root = write_corpus(args.out, manifest)
    print(f"wrote {manifest.train_count} train + {manifest.test_count} test utterances to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, default_lr, prepare, train

    if args.arch not in CANONICAL_NAMES + BASELINE_NAMES:
        raise UsageError(f"unknown architecture {args.arch!r}; choose from: {_arch_names()}")
    if not (Path(args.corpus) / "manifest").is_file():
        raise UsageError(f"no corpus manifest in {args.corpus}")
    target = args.target or ("irm" if args.arch in BASELINE_NAMES else "mapping")
    if args.arch in BASELINE_NAMES and target != "irm":
        raise UsageError(f"{args.arch} predicts masks; use --target irm")
    lr = args.lr if args.lr is not None else default_lr(args.arch)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr0=lr, lr_decay=args.lr_decay,
        val_fraction=args.val_fraction, seed=args.seed, target_mode=target,
        clip_threshold=args.clip, clip_all=args.clip_all, dtype=args.dtype,
    )
    print(f"  effective lr0 = {lr}, target = {target}")
    examples = prepare(load_corpus(args.corpus, "train"))
    log = args.log or str(args.out) + ".log.csv"

    def report(rec):
        flag = " *" if rec.snapshot else ""
        print(f"epoch {rec.epoch:4d}  lr {rec.lr:.3g}  loss {rec.train_loss:.5f}  val SDR {rec.val_sdr:.3f} dB{flag}",
              flush=True)

    _, state = train(args.arch, examples, cfg, checkpoint_path=args.out, log_path=log, progress=report)
    print(f"best val SDR {state.best_val_sdr:.3f} dB at epoch {state.best_epoch}; checkpoint {args.out}; log {log}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    from .train import enhance

    model, _ = _load(args.ckpt)
    if not Path(args.inp).is_file():
        raise UsageError(f"input not found: {args.inp}")
    noisy = dsp.read_wav(args.inp)
    out = enhance(model, noisy)
    dsp.write_wav(args.out, out)
    print(f"wrote {args.out} ({out.duration:.3f} s at {out.sample_rate} Hz)")
    return EXIT_OK


def _score(uid, kind, snr, est, u, filter_len) -> EvalRow:
    r = bss_eval(est, u.clean, u.noise, filter_len)
    return EvalRow(uid, kind, snr, r.sdr_db, r.sir_db, r.sar_db, stoi(u.clean, est).score)


def cmd_evaluate(args) -> int:
    from .train import enhance

    model = None
    if not args.passthrough:
        model, _ = _load(args.ckpt)
    if not (Path(args.corpus) / "manifest").is_file():
        raise UsageError(f"no corpus manifest in {args.corpus}")
    manifest = read_manifest(args.corpus)
    utts = load_corpus(args.corpus, "test")
    if not utts:
        raise UsageError("test split is empty")
    rows, ref = [], []
    for u in utts:
        if model is None:
            rows.append(_score(u.id, u.noise_kind, manifest.snr_db, u.mixture, u, args.filter_len))
        else:
            est = enhance(model, u.mixture)
            rows.append(_score(u.id, u.noise_kind, manifest.snr_db, est, u, args.filter_len))
            if not args.no_reference:
                ref.append(_score(u.id, u.noise_kind, manifest.snr_db, u.mixture, u, args.filter_len))
        r = rows[-1]
        print(f"{r.id}  {r.noise_kind:8s} SDR {r.sdr:7.3f}  SIR {r.sir:7.3f}  SAR {r.sar:7.3f}  STOI {r.stoi:.4f}",
              flush=True)
    mean_id = "passthrough_mean" if model is None else "mean"
    extra = [mean_row(ref, "passthrough_mean")] if ref else []
    mean = write_report(args.out, rows, mean_id=mean_id, extra=extra)
    print(f"{mean.id}: SDR {mean.sdr:.3f}  SIR {mean.sir:.3f}  SAR {mean.sar:.3f}  STOI {mean.stoi:.4f}")
    for x in extra:
        print(f"{x.id}: SDR {x.sdr:.3f}  SIR {x.sir:.3f}  SAR {x.sar:.3f}  STOI {x.stoi:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    archs = canonical_archs(args.target)
    if args.all:
        names = list(CANONICAL_NAMES)
    elif args.arch in archs:
        names = [args.arch]
    else:
        raise UsageError(f"unknown architecture {args.arch!r}; choose from: {', '.join(CANONICAL_NAMES)}")
    for name in names:
        spec = archs[name]
        registry = UNet(spec).n_params()
        print(f"== {name}")
        print(describe(spec))
        print(f"parameters: {count_params(spec)} (registry: {registry})")
        print(f"receptive field (time, frequency): {receptive_field(spec)}")
        print()
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as e:  # argparse usage errors
        return int(e.code) if e.code is not None else EXIT_OK
    except (UsageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    _print_config(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - surface any runtime failure as exit 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

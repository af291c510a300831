"""Command-line entry point: ``hanet <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input (bad flags, config keys, file formats,
shape mismatches), 2 runtime failure (divergence, failed gradient check, I/O).

Every subcommand takes ``--config FILE`` with one ``key = value`` per line.
Keys are flag names without the leading dashes; explicit flags override the
file. ``--config paper`` selects the reference model size.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from hanet.autodiff import NonFiniteError
from hanet.data import (FormatError, SynthSpec, load_dataset, load_features,
                        load_labels, read_manifest, save_features, save_labels, split,
                        synth_generate, write_manifest)
from hanet.experiments import SWEEP_GRID
from hanet.model import REFERENCE_PARAM_COUNT, ModelConfig, Variant, param_count_formula


PRESETS = {"paper": {"L": "200", "T": "50", "N": "5", "D-feat": "2048", "classes": "6"}}


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ flag groups

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file, or 'paper' for the reference sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker/BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _model(p: argparse.ArgumentParser, L=32, T=20, N=3, D=None, C=None) -> None:
    p.add_argument("--L", type=int, default=L, help="hidden size")
    p.add_argument("--T", type=int, default=T, help="frames per segment")
    p.add_argument("--N", type=int, default=N, help="segments per window")
    p.add_argument("--D-feat", type=int, default=D, help="feature dims (default: from data)")
    p.add_argument("--classes", type=int, default=C)
    p.add_argument("--variant", choices=[v.value for v in Variant], default="full")
    p.add_argument("--decoder-seed", choices=["per_segment", "last_segment"],
                   default="per_segment")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience")
    p.add_argument("--clip-norm", type=float, default=None)


def _metrics(p: argparse.ArgumentParser) -> None:
    p.add_argument("--aggregate", choices=["per-video", "pooled"], default="per-video")
    p.add_argument("--background", type=int, default=None,
                   help="class id excluded from segmental metrics")


def build_parser() -> Parser:
    top = Parser(prog="hanet", description="Hierarchical attention action segmentation.")
    sub = top.add_subparsers(dest="command", parser_class=Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--D-feat", type=int, default=16)
    p.add_argument("--num-sequences", type=int, default=20)
    p.add_argument("--min-len", type=int, default=100)
    p.add_argument("--max-len", type=int, default=300)
    p.add_argument("--mean-len", type=float, default=10.0, help="mean action length")
    p.add_argument("--noise", type=float, default=0.0, help="feature noise sigma")
    p.add_argument("--order", type=int, choices=[0, 2], default=0,
                   help="2: next action depends on the previous two")
    p.add_argument("--val-fraction", type=float, default=0.25)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _model(p)
    _training(p)
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--val", required=True, help="validation manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines log (default: <out>.log.jsonl)")
    p.add_argument("--background", type=int, default=None)
    p.add_argument("--plot", action="store_true", help="also write <out>.history.png")

    p = sub.add_parser("eval", help="score predictions or a checkpoint")
    _common(p)
    _metrics(p)
    p.add_argument("--manifest", required=True, help="ground-truth manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred-dir", help="directory written by 'predict'")
    src.add_argument("--checkpoint")
    p.add_argument("--classes", type=int, default=None, help="required with --pred-dir")
    p.add_argument("--out", help="write <out>.txt and <out>.json reports")

    p = sub.add_parser("predict", help="export label tracks and attention weights")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--plot", action="store_true", help="also write <id>.track.png")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _common(p)
    _model(p, L=8, T=4, N=3, D=5, C=3)
    p.set_defaults(variant=None)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("bench", help="time forward passes")
    _common(p)
    _model(p, L=200, T=50, N=5, D=2048, C=6)
    p.add_argument("--windows", type=int, default=50)

    p = sub.add_parser("sweep", help="one-at-a-time L/T/N sweep")
    _common(p)
    _model(p)
    _training(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--plot", action="store_true", help="also write <out>.png")
    for name, values in SWEEP_GRID.items():
        p.add_argument(f"--{name}-grid", type=_int_list, default=values,
                       help=f"comma-separated {name} values (default {','.join(map(str, values))})")

    p = sub.add_parser("ablation", help="compare variants over seeds on the long-range task")
    _common(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out", help="CSV of per-seed scores")
    return top


# ------------------------------------------------------------------ config files

def _config_argv(sub: argparse.ArgumentParser, source: str) -> list[str]:
    """Turn a preset or key = value file into flags placed before the real ones."""
    if source in PRESETS:
        items = list(PRESETS[source].items())
    else:
        items = []
        for lineno, line in enumerate(Path(source).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            items.append((key.replace("_", "-"), value))
    actions = {opt: a for a in sub._actions for opt in a.option_strings}
    argv = []
    for key, value in items:
        action = actions.get(f"--{key}")
        if action is None or key == "config":
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs a boolean, got {value!r}")
            if value.lower() in ("true", "1", "yes"):
                argv.append(f"--{key}")
        else:
            argv += [f"--{key}", value]
    return argv


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        args = parser.parse_args([args.command] + _config_argv(sub, args.config) + argv[1:])
    if getattr(args, "threads", 1) < 1:
        raise UsageError("--threads must be >= 1")
    return args


# ------------------------------------------------------------------ helpers

def _model_config(args, D_feat: int | None = None, C: int | None = None, **kw) -> ModelConfig:
    D = args.D_feat if args.D_feat is not None else D_feat
    C = args.classes if args.classes is not None else C
    if D is None or C is None:
        raise ValueError("--D-feat and --classes are required here")
    return ModelConfig(L=args.L, T=args.T, N=args.N, D_feat=D, C=C,
                       variant=kw.get("variant", args.variant), decoder_seed=args.decoder_seed)


def _train_config(args):
    from hanet.training import TrainConfig
    return TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       seed=args.seed, early_stop_patience=args.patience, clip_norm=args.clip_norm)


def _infer_dims(manifest) -> int:
    feat_path, _ = read_manifest(manifest)[0]
    return load_features(feat_path).frames.shape[1]


def _check_dims(data, cfg: ModelConfig) -> None:
    for seq, _ in data:
        if seq.frames.shape[1] != cfg.D_feat:
            raise ValueError(f"{seq.source_id}: features have {seq.frames.shape[1]} dims, "
                             f"model expects {cfg.D_feat}")


def _blas(threads: int):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


# ------------------------------------------------------------------ subcommands

def cmd_synth(args) -> int:
    spec = SynthSpec(C=args.classes, D_feat=args.D_feat, num_sequences=args.num_sequences,
                     min_len=args.min_len, max_len=args.max_len, mean_action_len=args.mean_len,
                     noise_sigma=args.noise, order=args.order)
    data = synth_generate(spec, args.seed)
    train_data, val_data = split(data, args.val_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = {}
    for seq, track in data:
        feat, lab = out / f"{seq.source_id}.feat", out / f"{seq.source_id}.labels"
        save_features(feat, seq)
        save_labels(lab, track.labels)
        pairs[seq.source_id] = (feat, lab)
    write_manifest(out / "manifest.tsv", list(pairs.values()))
    write_manifest(out / "train.tsv", [pairs[s.source_id] for s, _ in train_data])
    write_manifest(out / "val.tsv", [pairs[s.source_id] for s, _ in val_data])
    print(f"wrote {len(data)} sequences ({len(train_data)} train, {len(val_data)} val) to {out}")
    return 0


def cmd_train(args) -> int:
    from hanet import checkpoint
    from hanet.experiments import windows_for
    from hanet.model import init_params
    from hanet.training import train

    tcfg = _train_config(args)
    cfg = _model_config(args, D_feat=_infer_dims(args.train))
    train_data = load_dataset(args.train, cfg.C)
    val_data = load_dataset(args.val, cfg.C)
    _check_dims(train_data + val_data, cfg)
    log_path = Path(args.log or f"{args.out}.log.jsonl")
    log_path.write_text("")
    with _blas(args.threads):
        result = train(init_params(cfg, args.seed), windows_for(train_data, cfg), val_data, tcfg,
                       log_path=log_path, background=args.background)
    checkpoint.save(args.out, result.params)
    best = result.history[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: val_accuracy={best.val_accuracy:.4f} "
          f"val_f1@50={best.val_f1_50:.4f}")
    print(f"checkpoint {args.out}, log {log_path}")
    if args.plot:
        from hanet.plotting import plot_history
        records = [json.loads(line) for line in log_path.read_text().splitlines()]
        plot_history(records, f"{args.out}.history.png")
    return 0


def _eval_from_dir(args):
    from hanet.metrics import evaluate_sequence
    from hanet.predict import read_probs

    if args.classes is None:
        raise ValueError("--classes is required with --pred-dir")
    evals = []
    for feat_path, label_path in read_manifest(args.manifest):
        source_id = Path(feat_path).stem
        track = load_labels(label_path, args.classes)
        stem = Path(args.pred_dir) / source_id
        pred = load_labels(f"{stem}.pred.txt", args.classes).labels
        probs_path = Path(f"{stem}.probs.csv")
        probs = read_probs(probs_path)[1] if probs_path.exists() else None
        if len(pred) != len(track):
            raise FormatError(f"{source_id}: prediction has {len(pred)} frames but ground "
                              f"truth has {len(track)}")
        evals.append(evaluate_sequence(pred, track.labels, args.classes, probs, track.mask,
                                       args.background, source_id))
    return evals


def cmd_eval(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from hanet import checkpoint
    from hanet.metrics import aggregate, evaluate_sequence, format_report, write_reports
    from hanet.predict import predict_sequence

    if args.pred_dir:
        evals, C = _eval_from_dir(args), args.classes
    else:
        params = checkpoint.load(args.checkpoint)
        C = params.cfg.C
        if args.classes is not None and args.classes != C:
            raise ValueError(f"--classes {args.classes} but checkpoint has {C}")
        data = load_dataset(args.manifest, C)
        _check_dims(data, params.cfg)

        def one(item):
            seq, track = item
            pred, probs, _ = predict_sequence(params, seq)
            return evaluate_sequence(pred, track.labels, C, probs, track.mask, args.background,
                                     seq.source_id)

        with _blas(1 if args.threads > 1 else args.threads):
            if args.threads > 1:
                with ThreadPoolExecutor(args.threads) as pool:
                    evals = list(pool.map(one, data))
            else:
                evals = [one(item) for item in data]
    sys.stdout.write(format_report(aggregate(evals, C, args.aggregate, args.background)))
    if args.out:
        write_reports(args.out, evals, C, args.background)
    return 0


def cmd_predict(args) -> int:
    from hanet import checkpoint
    from hanet.predict import predict_export

    params = checkpoint.load(args.checkpoint)
    data = load_dataset(args.manifest, params.cfg.C)
    _check_dims(data, params.cfg)
    with _blas(1 if args.threads > 1 else args.threads):
        ids = predict_export(params, data, args.out, attention=not args.no_attention,
                             threads=args.threads, plot=args.plot)
    print(f"wrote {len(ids)} label tracks to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from hanet.training import grad_check

    variants = [Variant(args.variant)] if args.variant else list(Variant)
    ok = True
    with _blas(args.threads):
        for variant in variants:
            cfg = _model_config(args, variant=variant)
            r = grad_check(cfg, seed=args.seed, step=args.step)
            passed = r.passed(args.tolerance)
            ok &= passed
            print(f"{r.variant}: max_rel_error={r.max_rel_error:.3e} at {r.worst_parameter} "
                  f"checked={r.checked} params={param_count_formula(cfg)} "
                  f"seconds={r.seconds:.2f} {'PASS' if passed else 'FAIL'}")
    ref = ModelConfig.reference()
    print(f"reference: L=200, D_feat=2048, C=6 has {param_count_formula(ref)} parameters; "
          f"the published figure is {REFERENCE_PARAM_COUNT / 1e6:.1f}M (unreconciled)")
    return 0 if ok else 2


def cmd_bench(args) -> int:
    from hanet.experiments import bench

    cfg = _model_config(args)
    result = bench(cfg, n_windows=args.windows, seed=args.seed, threads=args.threads)
    print(f"L={cfg.L} T={cfg.T} N={cfg.N} D_feat={cfg.D_feat} C={cfg.C} "
          f"variant={cfg.variant.value} threads={args.threads}")
    print(result.summary())
    return 0


def cmd_sweep(args) -> int:
    from hanet.experiments import SWEEP_COLUMNS, sweep, write_csv

    tcfg = _train_config(args)
    base = _model_config(args, D_feat=_infer_dims(args.train))
    train_data = load_dataset(args.train, base.C)
    val_data = load_dataset(args.val, base.C)
    _check_dims(train_data + val_data, base)
    with _blas(args.threads):
        grid = {name: getattr(args, f"{name}_grid") for name in SWEEP_GRID}
        rows = sweep(base, train_data, val_data, tcfg, grid=grid, seed=args.seed)
    write_csv(args.out, rows, SWEEP_COLUMNS)
    print(f"wrote {len(rows)} rows to {args.out}")
    if args.plot:
        from hanet.plotting import plot_sweep
        plot_sweep(rows, f"{Path(args.out).with_suffix('')}.png")
    return 0


def cmd_ablation(args) -> int:
    from hanet.experiments import ablation, write_csv

    if args.seeds < 1:
        raise ValueError("--seeds must be >= 1")
    with _blas(args.threads):
        result = ablation(seeds=range(args.seed, args.seed + args.seeds), epochs=args.epochs)
    for variant, score in result.medians.items():
        print(f"{variant}: median val f1@50 = {score:.4f}")
    print(f"ordered full >= minus-ve >= minus-ve-se: {result.ordered()}")
    if args.out:
        rows = [{"seed": args.seed + k, **{v: s[k] for v, s in result.scores.items()}}
                for k in range(args.seeds)]
        write_csv(args.out, rows, ["seed"] + list(result.scores))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench, "sweep": cmd_sweep,
            "ablation": cmd_ablation}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except (OSError, ValueError) as exc:
        print(f"hanet: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from hanet.training import DivergenceError
    try:
        return COMMANDS[args.command](args)
    except (DivergenceError, NonFiniteError) as exc:
        print(f"hanet: runtime failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, NotADirectoryError, IsADirectoryError) as exc:
        print(f"hanet: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ArithmeticError, MemoryError) as exc:
        print(f"hanet: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

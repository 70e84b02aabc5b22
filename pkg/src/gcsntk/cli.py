"""Command-line entry point.

Every subcommand prints a single JSON document on stdout and logs to
stderr. Run settings come from built-in defaults, then an optional dataset
preset, then a flat ``key=value`` config file, then command-line flags (the
flag wins).

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
divergence, 4 gradient check above threshold.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import timeit
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ._backend import BACKEND
from .condense import PRESETS, CondenseConfig, condense, evaluate
from .data_io import (
    SBMSpec,
    bundle_meta,
    kcenter_coreset,
    load_bundle,
    load_condensed,
    random_coreset,
    save_bundle,
    save_condensed,
    sbm_generate,
    write_matrix,
)
from .errors import (
    BundleError,
    ConfigError,
    DegenerateDegreeError,
    DimensionError,
    DivergenceError,
    GCSNTKError,
    InsufficientNodesError,
    LabelRangeError,
    NumericalError,
)
from .grad import grad_check
from .graph import CondensedGraph, one_hot, prepare_target
from .kernel import KernelConfig, cross_and_self, kernel_matrix

log = logging.getLogger("gcsntk")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4
GRAD_THRESHOLD = 1e-4


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _is_none(text):
    return str(text).strip().lower() in ("", "none")


def _opt_int(text):
    return None if _is_none(text) else int(text)


def _opt_str(text):
    return None if _is_none(text) else str(text).strip()


# Every run-config key, its parser and its default.
RUN_KEYS = {
    "dataset": (_opt_str, None),
    "out": (_opt_str, None),
    "preset": (_opt_str, None),
    "budget": (_opt_int, None),
    "nodes_per_class": (_opt_int, None),
    "epochs": (int, 200),
    "learning_rate": (float, 0.01),
    "lam": (float, 1.0),
    "kind": (str, "sntk"),
    "K": (int, 2),
    "L": (int, 2),
    "alpha": (float, 2.0),
    "mode": (str, "normalized"),
    "variant": (str, "X"),
    "seed": (int, 0),
    "eval_every": (int, 1),
    "init": (str, "sample"),
    "loss_rows": (str, "train"),
    "stop_coef_grad": (_bool, False),
    "preprocess_rounds": (int, 1),
}
KERNEL_KEYS = ("kind", "K", "L", "alpha", "mode")


def parse_config_text(text, source="<config>"):
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in RUN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key, value):
    if value is None:
        return None
    parse = RUN_KEYS[key][0]
    try:
        return parse(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def resolve_config(file_values=None, flag_values=None):
    """Merge defaults < preset < file < flags into a dict of typed values."""
    file_values = dict(file_values or {})
    flag_values = {k: v for k, v in (flag_values or {}).items() if v is not None}
    cfg = {k: d for k, (_, d) in RUN_KEYS.items()}
    preset = _opt_str(flag_values.get("preset", file_values.get("preset", "none")))
    if preset is not None:
        if preset.lower() not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.update(PRESETS[preset.lower()])
    for src in (file_values, flag_values):
        for k, v in src.items():
            cfg[k] = _coerce(k, v)
    return cfg


def format_config(cfg):
    """Serialize a resolved config so that feeding it back reproduces it."""
    lines = []
    for key in RUN_KEYS:
        v = cfg.get(key)
        if v is None:
            v = "none"
        lines.append(f"{key}={v!r}" if isinstance(v, float) else f"{key}={v}")
    return "\n".join(lines) + "\n"


def kernel_from(cfg):
    return KernelConfig(cfg["kind"], cfg["K"], cfg["L"], cfg["alpha"], cfg["mode"])


def condense_config_from(cfg):
    return CondenseConfig(
        budget=cfg["budget"],
        nodes_per_class=cfg["nodes_per_class"],
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        lam=cfg["lam"],
        kernel=kernel_from(cfg),
        variant=cfg["variant"],
        seed=cfg["seed"],
        eval_every=cfg["eval_every"],
        init=cfg["init"],
        loss_rows=cfg["loss_rows"],
        stop_coef_grad=cfg["stop_coef_grad"],
    )


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"missing required setting {k!r}")


def _load_target(cfg):
    _require(cfg, "dataset")
    return prepare_target(load_bundle(cfg["dataset"]), cfg["preprocess_rounds"])


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _kernel_meta(kernel, lam, preprocess_rounds):
    return {
        "kernel": {f.name: getattr(kernel, f.name) for f in fields(kernel)},
        "lam": lam,
        "preprocess_rounds": preprocess_rounds,
    }


# -- subcommands --------------------------------------------------------------


def cmd_condense(cfg):
    _require(cfg, "dataset", "out")
    config = condense_config_from(cfg)
    out = Path(cfg["out"])
    target = _load_target(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(format_config(cfg))
    meta = _kernel_meta(config.kernel, config.lam, cfg["preprocess_rounds"])
    t0 = time.perf_counter()
    with open(out / "metrics.jsonl", "w") as fh:

        def on_epoch(rec):
            fh.write(json.dumps({"epoch": rec.epoch, "loss": rec.loss, "val_acc": rec.val_acc, "seconds": rec.seconds}) + "\n")
            fh.flush()
            if rec.val_acc is not None:
                log.info("epoch %d  loss %.6g  val %.4f", rec.epoch, rec.loss, rec.val_acc)

        try:
            best, history = condense(target, config, on_epoch)
        except DivergenceError as exc:
            save_condensed(exc.checkpoint, out / "checkpoint", {**meta, "diverged_at_epoch": exc.epoch})
            log.error("%s; checkpoint written to %s", exc, out / "checkpoint")
            _emit({"status": "diverged", "epoch": exc.epoch, "checkpoint": str(out / "checkpoint")})
            return EXIT_DIVERGED
    seconds = time.perf_counter() - t0
    save_condensed(best, out / "condensed", {**meta, "best_epoch": history.best_epoch})
    test_acc = evaluate(best, target, config.kernel, config.lam, "test", config.variant)
    _emit(
        {
            "status": "ok",
            "m": best.m,
            "best_epoch": history.best_epoch,
            "best_val_accuracy": history.best_val_acc,
            "test_accuracy": test_acc,
            "seconds": seconds,
            "condensed": str(out / "condensed"),
        }
    )
    return EXIT_OK


def cmd_evaluate(cfg, condensed_path, explicit):
    _require(cfg, "dataset")
    condensed = load_condensed(condensed_path)
    meta = bundle_meta(condensed_path)
    trained = meta.get("kernel")
    kernel = kernel_from(cfg)
    if trained:
        # Kernel settings saved with the condensed graph apply unless overridden.
        merged = {k: (cfg[k] if k in explicit else trained.get(k, cfg[k])) for k in KERNEL_KEYS}
        kernel = KernelConfig(**merged)
        diff = {k: (trained.get(k), merged[k]) for k in KERNEL_KEYS if trained.get(k) != merged[k]}
        if diff:
            log.warning("evaluating with kernel settings that differ from training: %s", diff)
    lam = cfg["lam"] if "lam" in explicit or "lam" not in meta else float(meta["lam"])
    rounds = cfg["preprocess_rounds"]
    if "preprocess_rounds" not in explicit and "preprocess_rounds" in meta:
        rounds = int(meta["preprocess_rounds"])
    target = prepare_target(load_bundle(cfg["dataset"]), rounds)
    if condensed.x_s.shape[1] != target.operand.x.shape[1]:
        raise DimensionError(
            f"condensed features have {condensed.x_s.shape[1]} columns, dataset has {target.operand.x.shape[1]}"
        )
    _emit({"test_accuracy": evaluate(condensed, target, kernel, lam, "test")})
    return EXIT_OK


def cmd_grad_check(cfg, step):
    kernel = kernel_from(cfg)
    if cfg["dataset"] is None:
        graph = sbm_generate(SBMSpec(seed=cfg["seed"]))
    else:
        graph = load_bundle(cfg["dataset"])
    target = prepare_target(graph, cfg["preprocess_rounds"])
    m = cfg["budget"] or 4
    rng = np.random.default_rng(cfg["seed"])
    labels = np.arange(m) % target.num_classes
    adj = None
    if cfg["variant"] == "XA":
        p = rng.standard_normal((m, m))
        adj = 0.5 * (p + p.T)
    elif cfg["variant"] != "X":
        raise ConfigError(f"variant must be X or XA, got {cfg['variant']!r}")
    point = CondensedGraph(rng.standard_normal((m, target.operand.x.shape[1])), one_hot(labels, target.num_classes), adj)
    report = grad_check(target, point, kernel, cfg["lam"], cfg["variant"], step, cfg["loss_rows"])
    report["threshold"] = GRAD_THRESHOLD
    report["passed"] = report["max_rel_error"] <= GRAD_THRESHOLD
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_GRADCHECK


def cmd_kernel_dump(cfg, out_file, against):
    _require(cfg, "dataset")
    kernel = kernel_from(cfg)
    left = prepare_target(load_bundle(cfg["dataset"]), cfg["preprocess_rounds"])
    right = None if against is None else prepare_target(load_bundle(against), cfg["preprocess_rounds"])
    k = kernel_matrix(left, right, kernel)
    write_matrix(out_file, k)
    _emit({"path": str(out_file), "rows": int(k.shape[0]), "cols": int(k.shape[1])})
    return EXIT_OK


def _parse_blocks(text):
    try:
        blocks = tuple(int(b) for b in text.split(","))
    except ValueError:
        raise ConfigError(f"blocks must be comma-separated integers, got {text!r}") from None
    return blocks


def cmd_sbm_gen(args):
    spec = SBMSpec(_parse_blocks(args.blocks), args.p_in, args.p_out, args.d, args.mu, args.sigma, args.seed)
    graph = sbm_generate(spec)
    save_bundle(graph, args.output, {"generator": "sbm", "spec": {f.name: getattr(spec, f.name) for f in fields(spec)}})
    _emit({"path": str(args.output), "n": graph.n, "num_edges": int(len(graph.edge_list()))})
    return EXIT_OK


def cmd_coreset(cfg, method):
    _require(cfg, "dataset", "out", "budget")
    target = _load_target(cfg)
    pick = {"random": random_coreset, "kcenter": kcenter_coreset}[method]
    core = pick(target, cfg["budget"], cfg["seed"])
    kernel = kernel_from(cfg)
    save_condensed(core, cfg["out"], {**_kernel_meta(kernel, cfg["lam"], cfg["preprocess_rounds"]), "method": method})
    acc = evaluate(core, target, kernel, cfg["lam"], "test")
    _emit({"path": str(cfg["out"]), "method": method, "m": core.m, "test_accuracy": acc})
    return EXIT_OK


def loglog_slope(sizes, seconds):
    """Least-squares slope of ``log(seconds)`` against ``log(sizes)``."""
    return float(np.polyfit(np.log(sizes), np.log(seconds), 1)[0])


def benchmark_cross_kernel(sizes, m=32, d=64, kernel=None, repeats=3, seed=0, degree=10.0):
    """Best-of-``repeats`` time of the SNTK cross kernel on two-block graphs of each size.

    Average degree is held fixed so the graph grows linearly with ``n``.
    The target-side coefficients are recomputed inside every timed call, and
    each sample loops the call until it spans at least 0.2 s.
    """
    kernel = kernel or KernelConfig("sntk", 1, 1)
    rng = np.random.default_rng(seed)
    x_s = rng.standard_normal((m, d))
    rows = []
    for n in sizes:
        half = n // 2
        p_in = min(1.0, degree / half)
        graph = sbm_generate(SBMSpec((half, n - half), p_in, p_in / 10.0, d, 1.0, 0.5, seed))
        target = prepare_target(graph)

        def call():
            target.operand.cache.clear()
            cross_and_self(target, x_s, None, kernel)

        timer = timeit.Timer(call)
        number, _ = timer.autorange()
        best = min(timer.repeat(repeats, number)) / number
        rows.append({"N": int(n), "seconds": best})
        log.info("N=%d  %.4fs", n, best)
    return rows


def cmd_benchmark(cfg, sizes, m, d, repeats):
    kernel = kernel_from(cfg)
    if kernel.kind != "sntk":
        raise ConfigError("benchmark times the sntk cross kernel; set kind=sntk")
    rows = benchmark_cross_kernel(sizes, m, d, kernel, repeats, cfg["seed"])
    slope = loglog_slope([r["N"] for r in rows], [r["seconds"] for r in rows])
    _emit({"backend": BACKEND, "M": m, "K": kernel.K, "L": kernel.L, "rows": rows, "slope": slope})
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def _add_run_flags(p, keys):
    p.add_argument("--config", help="flat key=value settings file")
    for key in keys:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=f"override '{key}'")


def _int_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="more logging on stderr")
    parser = argparse.ArgumentParser(prog="gcsntk", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def sub_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    kernel_keys = list(KERNEL_KEYS)

    p = sub_parser("condense", help="condense a graph bundle; writes condensed/, metrics.jsonl, run_config.txt")
    _add_run_flags(p, list(RUN_KEYS))

    p = sub_parser("evaluate", help="test accuracy of KRR fit on a condensed bundle")
    p.add_argument("condensed", help="condensed bundle directory")
    _add_run_flags(p, ["dataset", "lam", "preprocess_rounds"] + kernel_keys)

    p = sub_parser("grad-check", help="analytic vs finite-difference gradients at a random point")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    _add_run_flags(p, ["dataset", "budget", "lam", "variant", "seed", "loss_rows", "preprocess_rounds"] + kernel_keys)

    p = sub_parser("kernel-dump", help="write a dense kernel matrix in the binary matrix layout")
    p.add_argument("output", help="destination file")
    p.add_argument("--against", help="second bundle for a cross kernel")
    _add_run_flags(p, ["dataset", "preprocess_rounds"] + kernel_keys)

    p = sub_parser("sbm-gen", help="generate a stochastic block model bundle")
    p.add_argument("output", help="destination bundle directory")
    p.add_argument("--blocks", default="50,50", help="comma-separated block sizes")
    p.add_argument("--p-in", type=float, default=0.5)
    p.add_argument("--p-out", type=float, default=0.05)
    p.add_argument("--d", type=int, default=8, help="feature dimension")
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub_parser("coreset", help="random or k-center coreset baseline, saved as a condensed bundle")
    p.add_argument("--method", choices=("random", "kcenter"), default="random")
    _add_run_flags(p, ["dataset", "out", "budget", "seed", "lam", "preprocess_rounds"] + kernel_keys)

    p = sub_parser("benchmark", help="time the sntk cross kernel over a ladder of graph sizes")
    p.add_argument("--sizes", type=_int_list, default=[1000, 2000, 4000])
    p.add_argument("--m", type=int, default=32, help="condensed size")
    p.add_argument("--d", type=int, default=64, help="feature dimension")
    p.add_argument("--repeats", type=int, default=3)
    _add_run_flags(p, ["seed"] + kernel_keys)
    p.set_defaults(K="1", L="1")
    return parser


def _settings(args):
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        file_values = parse_config_text(path.read_text(), str(path))
    flags = {k: getattr(args, k) for k in RUN_KEYS if getattr(args, k, None) is not None}
    return resolve_config(file_values, flags), set(flags) | set(file_values)


def _dispatch(args):
    if args.command == "sbm-gen":
        return cmd_sbm_gen(args)
    cfg, explicit = _settings(args)
    if args.command == "condense":
        return cmd_condense(cfg)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.condensed, explicit)
    if args.command == "grad-check":
        return cmd_grad_check(cfg, args.step)
    if args.command == "kernel-dump":
        pr = cfg["preprocess_rounds"] if "preprocess_rounds" in explicit else 0
        return cmd_kernel_dump({**cfg, "preprocess_rounds": pr}, args.output, args.against)
    if args.command == "coreset":
        return cmd_coreset(cfg, args.method)
    if args.command == "benchmark":
        return cmd_benchmark(cfg, args.sizes, args.m, args.d, args.repeats)
    raise ConfigError(f"unknown command {args.command!r}")


def _thread_limit():
    raw = os.environ.get("GCSNTK_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GCSNTK_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"GCSNTK_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        limit = _thread_limit()
        # Overflow is detected and reported by the pipeline's finiteness checks.
        with np.errstate(over="ignore", invalid="ignore"):
            if limit is None:
                return _dispatch(args)
            with threadpool_limits(limits=limit):
                return _dispatch(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (BundleError, DimensionError, LabelRangeError, DegenerateDegreeError, InsufficientNodesError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("numerical error: %s", exc)
        return EXIT_DIVERGED
    except GCSNTKError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Every run writes a JSON manifest holding the resolved arguments, input and
output digests and timing.  ``flowrecover replay MANIFEST`` runs the same
command again.  Timestamps live only in the manifest, so the other outputs
of a replay are byte-identical to the original run.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, kernels
from . import benchmarks as bm
from . import gradcheck as gc
from . import selector as sel
from . import trainer as tr
from .library import SparseODEModel

log = logging.getLogger("flowrecover")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CommandError(RuntimeError):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _finite(x):
    return x if isinstance(x, (int, str)) or x is None or math.isfinite(x) else None


def _read_json(path, what: str) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise CommandError(f"{what} {path} not found") from None
    except json.JSONDecodeError as exc:
        raise CommandError(f"{what} {path}: not valid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise CommandError(f"{what} {path}: expected a JSON object")
    return d


def _load_dataset(path):
    if not os.path.exists(path):
        raise CommandError(f"dataset {path} not found")
    try:
        return bm.load_csv(path)
    except bm.CSVFormatError as exc:
        raise CommandError(str(exc)) from None


# --- commands -------------------------------------------------------------

def cmd_generate(args) -> tuple[int, list[Path], dict]:
    if args.spec:
        try:
            spec = bm.BenchmarkSpec.load(args.spec)
        except (OSError, ValueError) as exc:
            raise CommandError(f"bad spec: {exc}") from None
    else:
        spec = bm.default_spec(args.system)
    overrides = {k: getattr(args, k) for k in ("duration", "rate", "noise") if getattr(args, k) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        try:
            spec = bm.BenchmarkSpec.from_dict({**json.loads(spec.to_json()), **overrides})
        except ValueError as exc:
            raise CommandError(str(exc)) from None
    try:
        data = bm.generate(spec)
    except bm.GenerationError as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bm.save_csv(data, out)
    print(f"wrote {data.n_samples} samples of {spec.system} to {out}")
    return EXIT_OK, [out], {"spec": json.loads(spec.to_json())}


def _train_config(args) -> tr.TrainConfig:
    d = {}
    if args.config:
        d.update(_read_json(args.config, "config"))
    for flag, key in (("epochs", "epochs"), ("hidden", "hidden"), ("window", "window"), ("batch_size", "batch_size"),
                      ("tau", "tau"), ("lr", "lr"), ("substeps", "substeps"), ("order", "order"),
                      ("steps_per_batch", "steps_per_batch"), ("seed", "seed"), ("threads", "threads")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    try:
        return tr.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"bad training config: {exc}") from None


def _truth(spec: str | None):
    if not spec:
        return None
    if spec in bm.SYSTEMS:
        return bm.ground_truth_model(bm.default_spec(spec))
    return SparseODEModel.from_dict(_read_json(spec, "truth model"))


def cmd_recover(args) -> tuple[int, list[Path], dict]:
    data = _load_dataset(args.data)
    cfg = _train_config(args)
    truth = _truth(args.truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    progress_lines = []

    def progress(epoch, loss, support):
        line = f"epoch {epoch} loss {loss:.17g} support {support}"
        progress_lines.append(line)
        log.info(line)

    try:
        result = tr.train(data, cfg, truth, progress=progress)
    except (tr.TrainingError, tr.DatasetError) as exc:
        raise CommandError(str(exc)) from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "support"])
    for e, (l, s) in enumerate(zip(result.loss_history, result.support_history)):
        w.writerow([e, repr(float(l)), s])
    metrics = result.metrics()
    metrics["mse"] = _finite(metrics["mse"])
    metrics["config"] = cfg.to_dict()
    files = [
        _write(out / "model.json", result.model.to_json() + "\n"),
        _write(out / "metrics.json", _dump(metrics)),
        _write(out / "loss_history.csv", buf.getvalue()),
        _write(out / "progress.log", "\n".join(progress_lines) + ("\n" if progress_lines else "")),
        _write(out / "report.txt", result.report()),
    ]
    params = out / "params.bin"
    params.write_bytes(result.params.to_bytes())
    files.append(params)
    sys.stdout.write(result.report())
    return EXIT_OK, files, {"config": cfg.to_dict(), "wall_seconds": result.wall_seconds}


def cmd_eval(args) -> tuple[int, list[Path], dict]:
    data = _load_dataset(args.data)
    try:
        model = SparseODEModel.from_dict(_read_json(args.model, "model"))
        m = tr.evaluate(model, data, substeps=args.substeps, horizon=args.horizon)
    except (ValueError, tr.DatasetError) as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out)
    doc = {"mse": _finite(m.mse), "diverged": m.diverged, "horizon_samples": m.horizon_samples,
           "support": [sorted(s) for s in m.support]}
    truth = _truth(args.truth)
    if truth is not None:
        doc["support_vs_truth"] = asdict(tr.support_report(model, truth))
    f = _write(out / "eval.json", _dump(doc))
    mse = "inf (diverged)" if m.diverged else f"{m.mse:.4g}"
    print(f"reconstruction MSE: {mse} over {m.horizon_samples} samples")
    return EXIT_OK, [f], {}


def cmd_select(args) -> tuple[int, list[Path], dict]:
    if not 0.0 <= args.gamma <= 1.0:
        raise UsageError("--gamma must be in [0, 1]")
    try:
        table = sel.MeasurementTable.load(args.table)
    except (OSError, sel.TableError) as exc:
        raise CommandError(str(exc)) from None
    surrogates = sel.fit_all(table, args.lam, args.degree)
    res = sel.enumerate_select(surrogates, args.gamma, args.eps_max, args.R, P=args.goal, M="memory")
    if args.refine:
        lo, hi = args.refine
        eq = sel.dram_formula()
        a, h, hid, e, n = res.config
        res.eps = sel.refine_continuous(lambda x: eq.predict({"e": e, "N": n, "hi": hid, "eps": x}), lo, hi)
    out = Path(args.out)
    doc = res.to_dict()
    doc["P_target"] = surrogates[args.goal].target
    doc["P_unit"] = surrogates[args.goal].unit
    doc["surrogates"] = {k: v.to_dict() for k, v in surrogates.items()}
    doc = json.loads(json.dumps(doc, default=lambda o: None), parse_constant=lambda c: None)
    files = [_write(out / "selection.json", _dump(doc)), _write(out / "selection.txt", res.report())]
    sys.stdout.write(res.report())
    if not res.feasible:
        print("infeasible: no configuration meets the constraints; showing the least-violating one")
    return EXIT_OK, files, {"feasible": res.feasible}


def cmd_gradcheck(args) -> tuple[int, list[Path], dict]:
    d = {"hidden": 8, "window": 20, "seed": 0, "delta": 1e-4, "tol": 1e-4, "gru_tol": 1e-5}
    if args.config:
        d.update(_read_json(args.config, "gradcheck config"))
    if args.seed is not None:
        d["seed"] = args.seed
    checks = [
        (gc.gru_gradcheck(seed=d["seed"]), d["gru_tol"]),
        (gc.dense_gradcheck(seed=d["seed"]), d["gru_tol"]),
        (gc.zero_loss_check(seed=d["seed"]), 0.0),
        (gc.pipeline_gradcheck(d["hidden"], d["window"], d["seed"], d["delta"]), d["tol"]),
    ]
    lines, doc, ok = [], [], True
    for res, tol in checks:
        good = res.passed(tol)
        ok &= good
        lines.append(f"{'PASS' if good else 'FAIL'} {res.line()} tol={tol:g}")
        doc.append({**asdict(res), "tol": tol, "passed": good})
    out = Path(args.out)
    files = [_write(out / "gradcheck.json", _dump(doc)), _write(out / "gradcheck.txt", "\n".join(lines) + "\n")]
    print("\n".join(lines))
    return (EXIT_OK if ok else EXIT_FAIL), files, {"config": d}


class UsageError(ValueError):
    pass


COMMANDS = {"generate": cmd_generate, "recover": cmd_recover, "eval": cmd_eval, "select": cmd_select,
            "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowrecover", description="Sparse ODE recovery and configuration selection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: config value, else 0)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for per-window solves")
        sp.add_argument("--out", required=True, help=out_help)

    g = sub.add_parser("generate", help="simulate a benchmark system to CSV")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="benchmark spec JSON")
    src.add_argument("--system", choices=bm.SYSTEMS, help="use the built-in default spec")
    g.add_argument("--duration", type=float)
    g.add_argument("--rate", type=float)
    g.add_argument("--noise", type=float)
    common(g, "output CSV path")

    r = sub.add_parser("recover", help="train on a dataset and extract the sparse model")
    r.add_argument("--data", required=True, help="dataset CSV")
    r.add_argument("--config", help="training config JSON (flags override it)")
    r.add_argument("--truth", help="system name or model JSON to score the support against")
    for flag, typ in (("epochs", int), ("hidden", int), ("window", int), ("batch-size", int), ("tau", float),
                      ("lr", float), ("substeps", int), ("order", int), ("steps-per-batch", int)):
        r.add_argument(f"--{flag}", type=typ, default=None)
    common(r, "output directory")

    e = sub.add_parser("eval", help="re-solve a model against a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizon", type=float, default=None, help="seconds from the first sample to score")
    e.add_argument("--substeps", type=int, default=10)
    e.add_argument("--truth")
    common(e, "output directory")

    s = sub.add_parser("select", help="choose platform/task/hyperparameters from surrogates")
    s.add_argument("--table", help="measurement table CSV (default: bundled performance table)")
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--eps-max", type=float, default=math.inf)
    s.add_argument("--R", type=float, default=math.inf, help="training-time threshold")
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--degree", type=int, default=3)
    s.add_argument("--goal", choices=("energy", "error"), default="energy", help="surrogate used as P")
    s.add_argument("--refine", type=float, nargs=2, metavar=("LO", "HI"),
                   help="refine the error budget on [LO, HI] against the memory formula")
    common(s, "output directory")

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--config", help="JSON with hidden, window, seed, delta, tol, gru_tol")
    common(c, "output directory")

    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="write to this path instead of the recorded one")
    return p


def _manifest_path(command: str, out: str) -> Path:
    return Path(out + ".manifest.json") if command == "generate" else Path(out) / "manifest.json"


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    if args.command == "replay":
        m = _read_json(args.manifest, "manifest")
        try:
            argv2 = list(m["argv"])
        except KeyError:
            print("flowrecover: manifest has no argv", file=sys.stderr)
            return EXIT_USAGE
        if args.out:
            i = argv2.index("--out")
            argv2[i + 1] = os.path.abspath(args.out)
        cwd = m.get("cwd")
        if cwd and os.path.isdir(cwd):
            os.chdir(cwd)
        return run(argv2)

    fn = COMMANDS[args.command]
    start = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    status, outputs, extra, error = EXIT_FAIL, [], {}, None
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        status, outputs, extra = fn(args)
    except UsageError as exc:
        parser.error(str(exc))
    except CommandError as exc:
        error = str(exc)
        print(f"flowrecover {args.command}: error: {error}", file=sys.stderr)
    inputs = {}
    for key in ("spec", "data", "config", "model", "table"):
        path = getattr(args, key, None)
        if path and os.path.exists(path):
            inputs[key] = {"path": os.path.abspath(path), "sha256": _sha256(path)}
    manifest = {
        "command": args.command,
        "argv": argv,
        "cwd": os.getcwd(),
        "args": {k: (v if not isinstance(v, float) or math.isfinite(v) else repr(v)) for k, v in vars(args).items()},
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": {str(p): _sha256(p) for p in outputs},
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
        "started": start.isoformat(),
        "wall_seconds": time.perf_counter() - t0,
        "exit_status": status,
        "error": error,
        **{k: v for k, v in extra.items()},
    }
    mpath = _manifest_path(args.command, args.out)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return status


def main(argv=None) -> int:
    return run(list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())

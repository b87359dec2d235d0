"""Command-line entry point: synth, train, eval, infer, gradcheck, bench.

Every command resolves its settings from built-in defaults, an optional JSON
config file (``--config``) and ``--set key=value`` overrides, in that order,
and writes the resolved settings to ``<out>/config.json``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import audit, bench
from .data import DataFormatError, _atomic_write, load_dataset, load_landmarks, save_landmarks, synth_generate
from .landmarks import LandmarkSet
from .losses import LossWeights
from .metrics import EvalReport
from .network import CheckpointError, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import ShapeError
from .train import TrainConfig, predict_landmarks, train

log = logging.getLogger("volmark")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
VARIANTS = ("anchor_free", "anchor_based")
MAX_SEED = 2 ** 64 - 1

DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {"count": 5, "dims": [32, 32, 16], "landmarks": 2, "sigma_blob": 2.0, "noise_level": 0.1,
              "missing_prob": 0.0, "spacing": [1.0, 1.0, 1.0]},
    "train": {"data": None, "variant": "anchor_free", "steps": 500, "lr": 1e-3, "optimizer": "adam",
              "clip_norm": 1.0, "adam_eps": 1e-12, "head_prior": 0.01, "sigma": 2.0,
              "channels": [8, 16, 32, 64], "heads": 2, "region_size": [4, 4, 4], "top_k": 4, "mlp_ratio": 2.0,
              "aux_heatmap": False, "dtype": "float32", "weights": {"reg": 1.0, "cls": 1.0, "heatmap": 1.0},
              "log_every": 50},
    "eval": {"data": None, "checkpoint": None, "predictions": None, "presence_threshold": 0.25, "tau": 0.5},
    "infer": {"data": None, "checkpoint": None, "presence_threshold": 0.25, "tau": 0.5},
    "gradcheck": {"suite": "all", "corrupt": False, "eps": 1e-6},
    "bench": {"dims": [list(d) for d in bench.DEFAULT_SWEEP["dims"]],
              "regions": [list(r) for r in bench.DEFAULT_SWEEP["regions"]],
              "ks": list(bench.DEFAULT_SWEEP["ks"]), "channels": 16, "heads": 2, "repeats": 5, "timing": True},
}
PATH_FLAGS = {"synth": (), "train": ("data",), "eval": ("data", "checkpoint", "predictions"),
              "infer": ("data", "checkpoint"), "gradcheck": (), "bench": ()}


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volmark", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"synth": "generate a seeded synthetic dataset", "train": "train a model on a dataset",
             "eval": "score predictions or a checkpoint against ground truth",
             "infer": "write predicted landmark files", "gradcheck": "run finite-difference gradient audits",
             "bench": "routed vs dense attention cost and timing"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="JSON settings file (flat, or with per-command sections)")
        p.add_argument("--seed", type=_seed, default=0, help="master seed (u64)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--variant", choices=VARIANTS, help="model variant (train)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a setting; VALUE is parsed as JSON when possible")
        for flag in PATH_FLAGS[name]:
            p.add_argument(f"--{flag}", type=str, help=f"path to {flag}")
        if name == "gradcheck":
            p.add_argument("--suite", choices=audit.SUITES + ("all",))
            p.add_argument("--corrupt", action="store_true", help="perturb tape gradients (harness self-test)")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    known = set(cfg)
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as e:
            raise FileNotFoundError(f"config file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        section = raw.get(command, {})
        flat = {k: v for k, v in raw.items() if k not in DEFAULTS}
        for source in (flat, section):
            for k, v in source.items():
                if k not in known:
                    raise UsageError(f"unknown setting {k!r} for {command}; known: {sorted(known)}")
                cfg[k] = v
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        if key not in known:
            raise UsageError(f"unknown setting {key!r} for {command}; known: {sorted(known)}")
        cfg[key] = _parse_value(value)
    for flag in PATH_FLAGS[command]:
        if getattr(args, flag, None) is not None:
            cfg[flag] = getattr(args, flag)
    if command == "train" and args.variant:
        cfg["variant"] = args.variant
    if command == "gradcheck":
        if args.suite:
            cfg["suite"] = args.suite
        if args.corrupt:
            cfg["corrupt"] = True
    cfg["command"] = command
    cfg["seed"] = args.seed
    return cfg


def _write_text(path: Path, text: str) -> None:
    _atomic_write(path, text.encode())


def _echo_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _require(cfg: dict, key: str, hint: str) -> str:
    if not cfg.get(key):
        raise UsageError(f"missing setting {key!r}: {hint}")
    return cfg[key]


def cmd_synth(cfg: dict, out: Path) -> int:
    names = synth_generate(out, int(cfg["count"]), cfg["dims"], int(cfg["landmarks"]), float(cfg["sigma_blob"]),
                           float(cfg["noise_level"]), float(cfg["missing_prob"]), cfg["seed"], cfg["spacing"])
    print(f"wrote {len(names)} cases to {out}")
    return EXIT_OK


def _dataset(cfg: dict):
    data = _require(cfg, "data", "pass --data <dir> (a directory written by `volmark synth`)")
    cases = load_dataset(data)
    dims = {v.dims for _, v, _ in cases}
    if len(dims) != 1:
        raise DataFormatError(f"volumes in {data} have mixed dims {sorted(dims)}; crop them to one size first")
    counts = {lm.count for _, _, lm in cases}
    if len(counts) != 1:
        raise DataFormatError(f"cases in {data} have different landmark counts {sorted(counts)}")
    return cases


def model_config(cfg: dict, dims, landmarks: int) -> ModelConfig:
    return ModelConfig(input_dims=tuple(dims), landmarks=landmarks, channels=tuple(cfg["channels"]),
                       variant=cfg["variant"], heads=int(cfg["heads"]), region_size=tuple(cfg["region_size"]),
                       top_k=int(cfg["top_k"]), mlp_ratio=float(cfg["mlp_ratio"]),
                       aux_heatmap=bool(cfg["aux_heatmap"]), dtype=cfg["dtype"],
                       head_prior=None if cfg["head_prior"] is None else float(cfg["head_prior"]))


def cmd_train(cfg: dict, out: Path) -> int:
    cases = _dataset(cfg)
    _, vol0, lm0 = cases[0]
    mcfg = model_config(cfg, vol0.dims, lm0.count)
    tcfg = TrainConfig(steps=int(cfg["steps"]), lr=float(cfg["lr"]), optimizer=cfg["optimizer"],
                       clip_norm=None if cfg["clip_norm"] is None else float(cfg["clip_norm"]),
                       adam_eps=float(cfg["adam_eps"]), sigma=float(cfg["sigma"]),
                       weights=LossWeights(**cfg["weights"]),
                       log_every=int(cfg["log_every"]))
    model = build_model(mcfg, cfg["seed"])
    result = train(model, [(v, lm) for _, v, lm in cases], tcfg,
                   callback=lambda row: log.info("step %d loss %.6g", row["step"], row["total"]))
    save_checkpoint(out / "model.ckpt", result.model)
    _write_text(out / "loss_curve.csv", result.curve_records())
    print(f"loss {result.initial_loss:.6g} -> {result.final_loss:.6g} "
          f"({result.initial_loss / result.final_loss:.1f}x) over {tcfg.steps} steps; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _load_model(cfg: dict, dims, landmarks: int):
    path = _require(cfg, "checkpoint", "pass --checkpoint <file> written by `volmark train`")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path} (run `volmark train` first)")
    model = load_checkpoint(path)
    if model.config.input_dims != tuple(dims) or model.config.landmarks != landmarks:
        raise CheckpointError(
            f"checkpoint expects {model.config.input_dims} volumes with {model.config.landmarks} landmarks, "
            f"data has {tuple(dims)} with {landmarks}; retrain on this data or pass the matching checkpoint")
    return model


def _predict_all(cfg: dict, cases) -> dict[str, LandmarkSet]:
    _, vol0, lm0 = cases[0]
    model = _load_model(cfg, vol0.dims, lm0.count)
    return {name: predict_landmarks(model, vol, float(cfg["presence_threshold"]), float(cfg["tau"]), lm.names)
            for name, vol, lm in cases}


def cmd_eval(cfg: dict, out: Path) -> int:
    cases = _dataset(cfg)
    if cfg.get("predictions"):
        pred_dir = Path(cfg["predictions"])
        preds = {}
        for name, vol, _ in cases:
            path = pred_dir / f"{name}.landmarks"
            if not path.is_file():
                raise FileNotFoundError(f"missing prediction {path} (run `volmark infer` into {pred_dir})")
            preds[name] = load_landmarks(path, vol.dims)
    else:
        preds = _predict_all(cfg, cases)
    report = EvalReport()
    for name, _, gt in cases:
        report.add_case(name, preds[name], gt)
    table = report.to_table()
    _write_text(out / "report.txt", table)
    _write_text(out / "report.csv", report.to_records())
    print(table, end="")
    return EXIT_OK


def cmd_infer(cfg: dict, out: Path) -> int:
    cases = _dataset(cfg)
    preds = _predict_all(cfg, cases)
    for name, lm in preds.items():
        save_landmarks(out / f"{name}.landmarks", lm)
    print(f"wrote {len(preds)} prediction files to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    suites = audit.SUITES if cfg["suite"] == "all" else (cfg["suite"],)
    for s in suites:
        if s not in audit.SUITES:
            raise UsageError(f"unknown suite {s!r}; choose from {audit.SUITES + ('all',)}")
    results = [r for s in suites for r in audit.run_suite(s, cfg["seed"], bool(cfg["corrupt"]), float(cfg["eps"]))]
    lines = [f"{'suite':<8} {'check':<26} {'worst rel err':>14} {'tolerance':>10}  status"]
    for r in results:
        lines.append(f"{r.suite:<8} {r.name:<26} {r.error:>14.3e} {r.tolerance:>10.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    text = "\n".join(lines) + "\n"
    _write_text(out / "gradcheck.txt", text)
    print(text, end="")
    if failed:
        raise VerificationError(f"{len(failed)} gradient checks exceeded tolerance: "
                                + ", ".join(f"{r.suite}/{r.name}" for r in failed))
    return EXIT_OK


def cmd_bench(cfg: dict, out: Path) -> int:
    records = bench.run_bench(cfg["dims"], cfg["regions"], cfg["ks"], int(cfg["channels"]), int(cfg["heads"]),
                              int(cfg["repeats"]), bool(cfg["timing"]), cfg["seed"])
    if not records:
        raise UsageError("bench sweep is empty: no region tiles any of the volumes")
    table = bench.format_table(records)
    _write_text(out / "bench.txt", table)
    _write_text(out / "bench.csv", bench.format_records(records, timing=True))
    _write_text(out / "bench_analytic.csv", bench.format_records(records, timing=False))
    print(table, end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args.command, args)
        _echo_config(args.out, cfg)
        return COMMANDS[args.command](cfg, args.out)
    except UsageError as e:
        print(f"volmark {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataFormatError, CheckpointError, ShapeError) as e:
        print(f"volmark {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except VerificationError as e:
        print(f"volmark {args.command}: verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except (ValueError, TypeError, KeyError) as e:
        print(f"volmark {args.command}: invalid setting: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

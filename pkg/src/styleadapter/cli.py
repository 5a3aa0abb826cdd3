"""Command-line entry point: train / finetune / sample / mix / eval / make-toy.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Failures print one
JSON line ``{"error": <kind>, "message": ...}`` on stderr.  Option values
resolve flag > ``--config`` file > built-in default, and every command prints
its resolved options as one JSON line before running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

DEFAULTS: dict[str, dict[str, Any]] = {
    "train": {"seed": None, "max_steps": None, "pretrain_steps": None, "preset": None, "base": None},
    "finetune": {"steps": 25, "lr": 0.02, "seed": 0, "batch_size": 4, "caption": ""},
    "sample": {"steps": 50, "cfg": 9.0, "seed": 0, "alpha_scale": 1.0, "eta": 0.0, "threads": 1, "residual": None},
    "mix": {"steps": 50, "cfg": 9.0, "seed": 0, "alpha_scale": 1.0, "eta": 0.0, "threads": 1, "residual": None,
            "force_residual": False},
    "eval": {"steps": 50, "cfg": 9.0, "seed": 0, "alpha_scale": 1.0, "eta": 0.0, "threads": 1, "embedder_cmd": None},
    "make-toy": {"n": 240, "seed": 0, "size": 64},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _paths(values: Sequence[str] | None) -> list[str]:
    out: list[str] = []
    for v in values or []:
        out.extend(p for p in v.split(",") if p)
    return out


def build_parser() -> _Parser:
    p = _Parser(prog="styleadapter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_help="JSON file of option values"):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--seed", type=int, default=None)

    def sampling(sp):
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--cfg", type=float, default=None, help="classifier-free guidance scale")
        sp.add_argument("--alpha-scale", type=float, default=None)
        sp.add_argument("--eta", type=float, default=None)
        sp.add_argument("--threads", type=int, default=None,
                        help="intra-op threads while sampling (fixed for reproducibility)")

    sp = sub.add_parser("train", help="pretrain the base stack and train the adapters")
    common(sp, "training config JSON (TrainConfig keys)")
    sp.add_argument("--data", required=True, help="manifest (.jsonl)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--max-steps", type=int, default=None)
    sp.add_argument("--pretrain-steps", type=int, default=None)
    sp.add_argument("--preset", default=None, help="model preset: default, smoke, tiny")
    sp.add_argument("--base", default=None, help="checkpoint whose base stack is reused (skips pretraining)")

    sp = sub.add_parser("finetune", help="optimize per-style residual vectors")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--style", action="append", required=True, help="reference image(s), comma-separated or repeated")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--caption", default=None)
    sp.add_argument("--out", required=True, help="residual sidecar path")

    sp = sub.add_parser("sample", help="generate one image")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--style", action="append", default=None, help="reference image(s); omit for plain T2I")
    sp.add_argument("--residual", default=None, help="finetune sidecar")
    sampling(sp)
    sp.add_argument("--out", required=True, help="output PNG")

    sp = sub.add_parser("mix", help="generate with per-level style sources")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--low", required=True)
    sp.add_argument("--mid", required=True)
    sp.add_argument("--high", required=True)
    sp.add_argument("--residual", default=None)
    sp.add_argument("--force-residual", action="store_true", default=None)
    sampling(sp)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="score a prompts x styles test set")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--testset", required=True, help='JSON {"prompts": [...], "styles": [...]}')
    sp.add_argument("--embedder-cmd", default=None, help="external scorer: CMD IMAGE PROMPT -> score on stdout")
    sampling(sp)
    sp.add_argument("--out", required=True, help="report directory")

    sp = sub.add_parser("make-toy", help="write a procedural captioned toy corpus")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--size", type=int, default=None)
    return p


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """flag > config file (top level or a section named after the command) > default."""
    file_values: dict[str, Any] = {}
    if args.config and args.command != "train":
        data = json.loads(Path(args.config).read_text())
        file_values = {k: v for k, v in data.items() if not isinstance(v, dict)}
        file_values.update(data.get(args.command, {}))
        file_values = {k.replace("-", "_"): v for k, v in file_values.items()}
    resolved = dict(DEFAULTS[args.command])
    for k, v in vars(args).items():
        if k in ("command", "verbose"):
            continue
        if v is not None:
            resolved[k] = v
        elif k in file_values:
            resolved[k] = file_values[k]
        else:
            resolved.setdefault(k, None)
    return resolved


def _sample_options(r: dict):
    from .sampler import SampleOptions

    return SampleOptions(steps=int(r["steps"]), cfg_scale=float(r["cfg"]), seed=int(r["seed"]),
                         alpha_scale=float(r["alpha_scale"]), eta=float(r.get("eta") or 0.0),
                         threads=None if r.get("threads") is None else int(r["threads"]))


def _residual(path):
    from .checkpoint import FinetuneResidual

    return None if not path else FinetuneResidual.load(path)


def cmd_train(r: dict) -> dict:
    from .checkpoint import load_checkpoint
    from .plots import plot_loss_curves
    from .trainer import TrainConfig, train

    overrides = {"seed": r["seed"], "max_steps": r["max_steps"], "pretrain_steps": r["pretrain_steps"],
                 "preset": r["preset"]}
    cfg = TrainConfig.from_file(r["config"], **overrides)
    print(json.dumps({"train_config": cfg.to_dict()}, default=str), flush=True)
    base = load_checkpoint(r["base"])[0] if r["base"] else None
    _, summary = train(cfg, r["data"], r["out"], base=base)
    out = Path(r["out"])
    curves = {"adapter training": summary["curve"]}
    if summary["pretrain_curve"]:
        curves = {"base pretraining": summary["pretrain_curve"], **curves}
    plot_loss_curves(curves, out / "loss.png")
    return {"checkpoint": str(out / "final.ckpt"), "loss_csv": str(out / "loss.csv"),
            "figure": str(out / "loss.png")}


def cmd_finetune(r: dict) -> dict:
    from .checkpoint import load_checkpoint
    from .sampler import image_id
    from .trainer import fast_finetune
    from .utils import load_image

    model, _ = load_checkpoint(r["ckpt"])
    paths = _paths(r["style"])
    if not paths:
        raise UsageError("--style needs at least one image")
    images = [load_image(p) for p in paths]
    residual = fast_finetune(model, images, steps=int(r["steps"]), lr=float(r["lr"]), seed=int(r["seed"]),
                             batch_size=int(r["batch_size"]), caption=r["caption"] or "",
                             sources=[image_id(p) for p in paths])
    residual.save(r["out"])
    return {"residual": r["out"], "steps": residual.meta["optimizer_steps"], "lr": r["lr"],
            "parameters": residual.num_parameters}


def cmd_sample(r: dict) -> dict:
    from .checkpoint import load_checkpoint
    from .sampler import generate

    model, _ = load_checkpoint(r["ckpt"])
    _, meta = generate(model, r["prompt"], _paths(r["style"]), _residual(r["residual"]), _sample_options(r),
                       out_path=r["out"])
    return {"image": r["out"], **meta}


def cmd_mix(r: dict) -> dict:
    from .checkpoint import load_checkpoint
    from .sampler import generate_mixed

    model, _ = load_checkpoint(r["ckpt"])
    _, meta = generate_mixed(model, r["prompt"], r["low"], r["mid"], r["high"], _sample_options(r),
                             _residual(r["residual"]), bool(r["force_residual"]), out_path=r["out"])
    return {"image": r["out"], **meta}


def cmd_eval(r: dict) -> dict:
    from .checkpoint import load_checkpoint
    from .evaluation import evaluate_testset, read_testset
    from .plots import plot_eval_report

    model, _ = load_checkpoint(r["ckpt"])
    prompts, styles = read_testset(r["testset"])
    report = evaluate_testset(model, prompts, styles, r["out"], _sample_options(r), r["embedder_cmd"])
    plot_eval_report(report, Path(r["out"]) / "scores.png")
    return {"report": str(Path(r["out"]) / "report.json"), **report.aggregates}


def cmd_make_toy(r: dict) -> dict:
    from .toydata import make_toy_corpus

    manifest = make_toy_corpus(r["out"], n=int(r["n"]), size=int(r["size"]), seed=int(r["seed"]))
    return {"manifest": str(manifest)}


COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "sample": cmd_sample, "mix": cmd_mix,
            "eval": cmd_eval, "make-toy": cmd_make_toy}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 1)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        resolved = resolve(args)
        print(json.dumps({"command": args.command, "resolved": resolved}, default=str), flush=True)
        result = COMMANDS[args.command](resolved)
    except UsageError as exc:
        return _fail("usage", str(exc), 1)
    except Exception as exc:  # noqa: BLE001 - reported via exit code contract
        return _fail(type(exc).__name__, str(exc).replace("\n", " "), 2)
    print(json.dumps({"result": result}, default=str), flush=True)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

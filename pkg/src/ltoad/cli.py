"""Command-line entry point for scripted experiments.

Every subcommand reads one flat configuration: built-in defaults, then an
optional JSON file, then individual flags, in that order. The resolved
configuration is echoed (and written into run directories) so any output
can be reproduced from the artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .archive import read_archive, synth_generate, validate, write_archive, SynthConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .concepts import build_prompt_bank, concepts_to_json, init_concepts
from .fusion import EvalReport, class_report
from .model import AnomalyModel, ModelConfig
from .stream import (
    StreamPlan,
    emit_report,
    longtail_counts,
    make_stream,
    run_protocol,
)
from .train import OfflineTrainer, OnlineConfig, TrainConfig, group_by_class

# One flat key space: (default, kind). Kind drives both flag parsing and
# JSON coercion. Model and learner defaults match the published profile.
_SPEC = OrderedDict([
    ("seed", (None, "int")),
    ("threads", (1, "int")),
    # model
    ("concepts", (10, "int")),
    ("codes", (16, "int")),
    ("gen_hidden", (256, "int")),
    ("nearest", ("l2", "str")),
    ("alpha", (0.3, "float")),
    ("margin", (0.1, "float")),
    ("temperature", (1.0, "float")),
    # offline optimisation
    ("lr", (1e-4, "float")),
    ("epochs", (20, "int")),
    ("batch_size", (8, "int")),
    ("steps_per_epoch", (None, "int")),
    ("grad_clip", (0.1, "float")),
    ("weight_decay", (0.0, "float")),
    ("lam_vq", (1.0, "float")),
    ("lam_rec", (1.0, "float")),
    ("lam_gen", (1.0, "float")),
    ("lam_sem", (1.0, "float")),
    # online adaptation
    ("algo", ("anomaly_adaptive", "str")),
    ("gamma", (0.3, "float")),
    ("beta", (5.0, "float")),
    ("tau", (0.2, "float")),
    ("fraction", (0.95, "float")),
    ("online_clip", (1e-3, "float")),
    ("pseudo_mask", (True, "bool")),
    # stream benchmark
    ("stream", ("B", "str")),
    ("delta", (16, "int")),
    ("steps", (33, "int")),
    ("head_classes", ([], "json")),
    ("imbalance_type", ("exp", "str")),
    ("imbalance_factor", (100.0, "float")),
    # synthetic archives
    ("classes", (["alpha", "beta", "gamma", "delta"], "json")),
    ("n_max", (40, "int")),
    ("test_normals", (8, "int")),
    ("test_anomalies", (8, "int")),
    ("d_final", (640, "int")),
    ("layer_shapes", ([[8, 8, 640], [4, 4, 648], [2, 2, 656], [1, 1, 664]],
                      "json")),
    ("mask_size", ([32, 32], "json")),
    ("patch_range", ([2, 4], "json")),
    ("distractors", (20, "int")),
])

_ALGO_ALIASES = {"aa": "anomaly_adaptive", "adaptive": "anomaly_adaptive"}


class ConfigError(ValueError):
    """Unknown keys, bad value types, or unusable environment overrides."""


def _coerce(key: str, value, kind: str):
    try:
        if kind == "int":
            if value is None:
                return None
            out = int(value)
            if isinstance(value, float) and value != out:
                raise ValueError
            return out
        if kind == "float":
            return float(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise ValueError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        return value  # "json": lists pass through as given
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} got unusable value {value!r}")


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    """Defaults <- JSON file <- flags, with unknown keys rejected."""
    cfg = {key: default for key, (default, _) in _SPEC.items()}
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path}: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {config_path} must hold an object")
        unknown = sorted(set(raw) - set(_SPEC))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for key, value in raw.items():
            cfg[key] = _coerce(key, value, _SPEC[key][1])
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = _coerce(key, value, _SPEC[key][1])
    if cfg["seed"] is None:
        env = os.environ.get("LTOAD_SEED", "")
        if env:
            try:
                cfg["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"LTOAD_SEED must be an integer, got {env!r}")
        else:
            cfg["seed"] = 0
    cfg["algo"] = _ALGO_ALIASES.get(cfg["algo"], cfg["algo"])
    if cfg["threads"] < 1:
        raise ConfigError("threads must be at least 1")
    return cfg


def _echo(cfg: dict) -> None:
    print("config:", json.dumps(cfg, sort_keys=True, separators=(",", ":")))


def _load_archive(path: str):
    archive = read_archive(path)
    problems = validate(archive)
    if problems:
        raise ValueError(f"archive {path} failed validation: "
                         + "; ".join(problems[:3]))
    return archive


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(n_codes=cfg["codes"], gen_hidden=cfg["gen_hidden"],
                       nearest=cfg["nearest"], alpha=cfg["alpha"],
                       delta=cfg["margin"], temperature=cfg["temperature"],
                       seed=cfg["seed"]).validated()


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(lam_vq=cfg["lam_vq"], lam_rec=cfg["lam_rec"],
                       lam_gen=cfg["lam_gen"], lam_sem=cfg["lam_sem"],
                       lr=cfg["lr"], epochs=cfg["epochs"],
                       batch_size=cfg["batch_size"],
                       grad_clip=cfg["grad_clip"],
                       weight_decay=cfg["weight_decay"],
                       seed=cfg["seed"]).validated()


def _online_config(cfg: dict) -> OnlineConfig:
    return OnlineConfig(delta=cfg["delta"], gamma=cfg["gamma"],
                        beta=cfg["beta"], tau=cfg["tau"],
                        mask_fraction=cfg["fraction"],
                        use_pseudo_mask=cfg["pseudo_mask"],
                        grad_clip=cfg["online_clip"],
                        algorithm=cfg["algo"]).validated()


def _build_model(cfg: dict, archive, ckpt: str | None = None) -> AnomalyModel:
    concepts = init_concepts(archive, k=cfg["concepts"])
    bank = build_prompt_bank(archive, concepts)
    model = AnomalyModel.build(_model_config(cfg), archive, concepts, bank)
    if ckpt is not None:
        model.load_state(load_checkpoint(ckpt))
    return model


def _mask_size(archive) -> tuple[int, int] | None:
    return next((r.mask.shape for r in archive.test_records()
                 if r.mask is not None), None)


def _predict_all(model: AnomalyModel, records, out_size, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda r: model.predict(r, out_size), records))
    return [model.predict(r, out_size) for r in records]


def _summary_line(report: EvalReport) -> str:
    def fmt(value):
        return "n/a" if value is None else f"{value:.4f}"

    overall = report.aggregates["overall"]
    return (f"step {report.step}: image AUROC {fmt(overall['image_auroc'])}, "
            f"pixel AUROC {fmt(overall['pixel_auroc'])}")


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args, cfg: dict) -> int:
    counts = longtail_counts(cfg["classes"], cfg["imbalance_type"],
                             cfg["imbalance_factor"], cfg["n_max"],
                             head=set(cfg["head_classes"]) or None)
    synth = SynthConfig(class_names=list(cfg["classes"]), train_counts=counts,
                        test_normals=cfg["test_normals"],
                        test_anomalies=cfg["test_anomalies"],
                        d_final=cfg["d_final"],
                        layer_shapes=tuple(tuple(s) for s in cfg["layer_shapes"]),
                        mask_size=tuple(cfg["mask_size"]),
                        patch_range=tuple(cfg["patch_range"]),
                        n_distractors=cfg["distractors"])
    archive = synth_generate(synth, seed=cfg["seed"])
    n_bytes = write_archive(archive, args.out)
    print(f"wrote {args.out}: {len(archive.records)} records, "
          f"train counts {counts}, {n_bytes} bytes")
    return 0


def cmd_init_concepts(args, cfg: dict) -> int:
    archive = _load_archive(args.archive)
    concepts = init_concepts(archive, k=cfg["concepts"])
    text = concepts_to_json(concepts) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}: {concepts.k} concepts")
    else:
        print(text, end="")
    return 0


def cmd_train(args, cfg: dict) -> int:
    archive = _load_archive(args.archive)
    model = _build_model(cfg, archive)
    trainer = OfflineTrainer(model, _train_config(cfg))
    history = trainer.run(group_by_class(archive.train_records()),
                          cfg["steps_per_epoch"])
    save_checkpoint(args.out, model.state())
    print(f"wrote {args.out}: {len(history)} optimisation steps, "
          f"final loss {history[-1].total:.6f}")
    return 0


def cmd_stream(args, cfg: dict) -> int:
    archive = _load_archive(args.archive)
    plan, evaluate = make_stream(archive.test_records(), cfg["stream"],
                                 cfg["head_classes"], cfg["seed"],
                                 delta=cfg["delta"], max_steps=cfg["steps"])
    Path(args.out).write_text(plan.to_json() + "\n")
    print(f"wrote {args.out}: {len(plan.order)} stream records, "
          f"{plan.steps} steps of {plan.delta}, {len(evaluate)} held out")
    return 0


def cmd_online(args, cfg: dict) -> int:
    archive = _load_archive(args.archive)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    if args.plan:
        plan = StreamPlan.from_json(Path(args.plan).read_text())
    else:
        plan, _ = make_stream(archive.test_records(), cfg["stream"],
                              cfg["head_classes"], cfg["seed"],
                              delta=cfg["delta"], max_steps=cfg["steps"])
    (run_dir / "plan.json").write_text(plan.to_json() + "\n")
    model = _build_model(cfg, archive, args.ckpt)

    def snapshot(step: int, report: EvalReport, published: AnomalyModel):
        save_checkpoint(run_dir / f"step_{step:03d}.ltck", published.state())
        (run_dir / f"step_{step:03d}.report.json").write_text(
            report.to_json() + "\n")

    reports = run_protocol(model, plan, archive, _online_config(cfg),
                           _train_config(cfg), workers=cfg["threads"],
                           on_report=snapshot)
    emit_report(reports, run_dir)
    print(f"run {run_dir}: {len(reports)} reports")
    print(_summary_line(reports[0]))
    print(_summary_line(reports[-1]))
    return 0


def cmd_eval(args, cfg: dict) -> int:
    archive = _load_archive(args.archive)
    model = _build_model(cfg, archive, args.ckpt)
    preds = _predict_all(model, archive.test_records(),
                         _mask_size(archive), cfg["threads"])
    report = class_report(preds, archive, set(cfg["head_classes"]), step=0)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
        print(f"wrote {args.out}")
    print(_summary_line(report))
    return 0


def cmd_report(args, cfg: dict) -> int:
    run_dir = Path(args.run)
    files = sorted(run_dir.glob("step_*.report.json"))
    if not files:
        raise FileNotFoundError(f"no step_*.report.json under {run_dir}")
    reports = [EvalReport.from_json(f.read_text()) for f in files]
    paths = emit_report(reports, args.out or run_dir)
    print("wrote " + ", ".join(paths))
    return 0


# --------------------------------------------------------------------------
# argument surface


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="JSON",
                        help="configuration file merged under the flags")
    for key, (default, kind) in _SPEC.items():
        flag = "--" + key.replace("_", "-")
        if kind == "bool":
            parser.add_argument(flag, dest=key, default=None,
                                action=argparse.BooleanOptionalAction,
                                help=f"(default {default})")
        else:
            parser.add_argument(flag, dest=key, default=None,
                                type={"int": int, "float": float,
                                      "str": str, "json": json.loads}[kind],
                                help=f"(default {default})")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltoad",
        description="long-tailed online anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(func=func)
        return p

    p = command("gen-synth", cmd_gen_synth, "write a synthetic archive")
    p.add_argument("--out", required=True, help="archive path")

    p = command("init-concepts", cmd_init_concepts,
                "select concepts from an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", help="concepts JSON path (default stdout)")

    p = command("train", cmd_train, "offline training to a checkpoint")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = command("stream", cmd_stream, "build a stream plan from the test set")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", required=True, help="plan JSON path")

    p = command("online", cmd_online, "run the step-wise adaptation protocol")
    p.add_argument("--archive", required=True)
    p.add_argument("--ckpt", help="starting checkpoint (default fresh model)")
    p.add_argument("--plan", help="stream plan JSON (default built here)")
    p.add_argument("--out", required=True, help="run directory")

    p = command("eval", cmd_eval, "score the whole test set once")
    p.add_argument("--archive", required=True)
    p.add_argument("--ckpt", help="checkpoint to score (default fresh model)")
    p.add_argument("--out", help="report JSON path (default stdout summary)")

    p = command("report", cmd_report, "merge per-step reports into CSV/SVG")
    p.add_argument("--run", required=True, help="run directory to read")
    p.add_argument("--out", help="output directory (default the run dir)")
    return parser


def dispatch(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        overrides = {key: getattr(args, key) for key in _SPEC}
        cfg = resolve_config(args.config, overrides)
        _echo(cfg)
        return args.func(args, cfg)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"ltoad: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())

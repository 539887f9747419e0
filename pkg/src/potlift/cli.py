"""Command-line entry point: ``potlift {synth,train,eval,ablate,inspect}``.

Run configuration is JSON with four sections (``model``, ``train``, ``synth``,
``data``) on top of a named preset. Precedence is flag > file > preset. Every
command writes the fully resolved configuration next to its outputs, and that
file can be fed back with ``--config`` to reproduce the run.

Outputs go to ``$POTLIFT_OUTPUT_ROOT/<run>`` (default ``./runs/<command>``)
unless ``--out-dir`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthConfig, load_dataset, save_dataset, synth_generate, to_arrays
from .errors import CheckpointMismatch, ConfigError, EmptyDataset, JointCountMismatch, PotliftError
from .metrics import EvalReport
from .model import ModelConfig, PotModel, UgrnModel, build_models, infer, param_count
from .training import LOG_HEADER, LogRow, StageResult, TrainConfig, train_stage1, train_stage2

logger = logging.getLogger("potlift")

OUTPUT_ROOT_ENV = "POTLIFT_OUTPUT_ROOT"

PRESETS = {
    # desk scale: small enough for CI, 200 optimizer steps per stage
    "desk": (ModelConfig.desk, dict(batch_size=32, max_steps_per_stage=200, checkpoint_every=5), dict(count=256)),
    "our_s": (ModelConfig.our_s, {}, {}),
    "our_l": (ModelConfig.our_l, {}, {}),
    # synthetic data is always the 17-joint tree, so the CLI tiny preset keeps J=17
    "tiny": (lambda: ModelConfig.tiny(num_joints=17), dict(batch_size=8, max_steps_per_stage=20), dict(count=32)),
}


@dataclass
class RunConfig:
    preset: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: dict = field(default_factory=lambda: {"train": None, "test": None})

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "data": dict(self.data),
        }

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        return self


def resolve_config(source: str | Path | dict | None = None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge preset defaults, a JSON file (or dict) and dotted ``section.key`` overrides."""
    file_cfg: dict = {}
    if isinstance(source, dict):
        file_cfg = source
    elif source:
        try:
            file_cfg = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON ({exc})") from exc
    unknown = set(file_cfg) - {"preset", "model", "train", "synth", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    name = preset or file_cfg.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    model_fn, train_kw, synth_kw = PRESETS[name]
    sections = {
        "model": model_fn().to_dict(),
        "train": TrainConfig(**train_kw).to_dict(),
        "synth": SynthConfig(**synth_kw).to_dict(),
        "data": {"train": None, "test": None},
    }
    for sec in sections:
        sections[sec].update(file_cfg.get(sec, {}))
    for key, value in (overrides or {}).items():
        sec, _, leaf = key.partition(".")
        if sec not in sections or not leaf:
            raise ConfigError(f"override {key!r} must look like section.key")
        sections[sec][leaf] = value
    data = sections["data"]
    if set(data) - {"train", "test"}:
        raise ConfigError("data section takes only 'train' and 'test'")
    return RunConfig(
        preset=name,
        model=ModelConfig.from_dict(sections["model"]),
        train=TrainConfig.from_dict(sections["train"]),
        synth=SynthConfig.from_dict(sections["synth"]),
        data=data,
    ).validate()


def parse_set(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def output_dir(args, default_run: str) -> Path:
    if getattr(args, "out_dir", None):
        out = Path(args.out_dir)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / (getattr(args, "run", None) or default_run)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved(cfg: RunConfig, out: Path) -> Path:
    path = out / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_split(cfg: RunConfig, which: str):
    """(x, y_mm) for ``train``/``test``: from the data file if set, else synthesized."""
    path = cfg.data.get(which)
    if path:
        samples = load_dataset(path, cfg.model.num_joints)
    else:
        train, test = synth_generate(cfg.synth)
        samples = train if which == "train" else test
    if not samples:
        raise EmptyDataset(f"{which} split is empty")
    x, y = to_arrays(samples)
    if x.shape[1] != cfg.model.num_joints:
        raise JointCountMismatch(f"{which} split has {x.shape[1]} joints, model expects {cfg.model.num_joints}")
    return x, y


def _common_overrides(args) -> dict:
    ov = parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        ov["train.seed"] = args.seed
        ov.setdefault("synth.seed", args.seed)
    if getattr(args, "steps", None) is not None:
        ov["train.max_steps_per_stage"] = args.steps
    if getattr(args, "data", None):
        ov["data.train"] = args.data
    if getattr(args, "test_data", None):
        ov["data.test"] = args.test_data
    return ov


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    ov = parse_set(args.set)
    if args.count is not None:
        ov["synth.count"] = args.count
    if args.seed is not None:
        ov["synth.seed"] = args.seed
    if args.noise_px is not None:
        ov["synth.noise_px"] = args.noise_px
    cfg = resolve_config(args.config, args.preset, ov)
    out = output_dir(args, "synth")
    train, test = synth_generate(cfg.synth)
    tr_path, te_path = out / f"{args.name}.train.jsonl", out / f"{args.name}.test.jsonl"
    save_dataset(train, tr_path)
    save_dataset(test, te_path)
    write_resolved(cfg, out)
    print(f"wrote {len(train)} samples to {tr_path}")
    print(f"wrote {len(test)} samples to {te_path}")
    return 0


def _stage_done(res: StageResult, epoch: int, cfg: TrainConfig) -> bool:
    if cfg.max_steps_per_stage is not None:
        return res.steps_done >= cfg.max_steps_per_stage
    return epoch >= cfg.epochs_per_stage


def run_training(cfg: RunConfig, out: Path, stages: list[int], resume: str | None = None) -> tuple[PotModel, UgrnModel]:
    """Train the requested stages, logging every step and checkpointing per epoch."""
    tcfg = cfg.train
    x, y = load_split(cfg, "train")
    state = {}
    if resume:
        ck = load_checkpoint(resume)
        ck.check_config(cfg.model)
        pot, ugrn = ck.build_models()
        m = ck.manifest
        state = {
            "stage": m["stage"], "epoch": m["epoch"], "step": m["step"],
            "done": m.get("stage_done", False), "opt": ck.optimizer_state(), "rng": ck.rng(),
        }  # fmt: skip
    else:
        pot, ugrn = build_models(cfg.model, tcfg.seed)
    ckpt_dir = out / "checkpoints"
    log_path = out / "train_log.csv"
    fresh_log = not (resume and log_path.exists())
    run_dict = cfg.to_dict()
    with open(log_path, "w" if fresh_log else "a") as log:
        if fresh_log:
            log.write(LOG_HEADER + "\n")

        def on_row(row: LogRow) -> None:
            log.write(row.csv() + "\n")

        last, last_res = None, None
        for stage in stages:
            kw: dict = {}
            if state and stage < state["stage"] or state and stage == state["stage"] and state["done"]:
                logger.info("stage %d already complete in checkpoint; skipping", stage)
                continue
            if state and stage == state["stage"]:
                kw = dict(start_epoch=state["epoch"], start_step=state["step"], opt_state=state["opt"], rng=state["rng"])

            def on_epoch_end(epoch: int, res: StageResult, stage=stage) -> None:
                log.flush()
                done = _stage_done(res, epoch, tcfg)
                if epoch % tcfg.checkpoint_every and not done:
                    return
                save_checkpoint(
                    ckpt_dir / f"stage{stage}_epoch{epoch:04d}", pot, ugrn,
                    train_config=tcfg.to_dict(), stage=stage, epoch=epoch, step=res.steps_done,
                    rng=res.rng, opt_state=res.opt_state, extra={"stage_done": done, "run": run_dict},
                )  # fmt: skip

            fn = train_stage1 if stage == 1 else train_stage2
            models = (pot,) if stage == 1 else (pot, ugrn)
            res = fn(*models, x, y, tcfg, on_row=on_row, on_epoch_end=on_epoch_end, **kw)
            logger.info("stage %d finished after %d steps", stage, res.steps_done)
            last, last_res = stage, res
        if last_res is not None:
            save_checkpoint(
                out / "final", pot, ugrn, train_config=tcfg.to_dict(), stage=last,
                epoch=last_res.epochs_done, step=last_res.steps_done, rng=last_res.rng,
                opt_state=last_res.opt_state, extra={"stage_done": True, "run": run_dict},
            )  # fmt: skip
    return pot, ugrn


def cmd_train(args) -> int:
    ov = _common_overrides(args)
    if args.epochs is not None:
        ov["train.epochs_per_stage"] = args.epochs
        ov.setdefault("train.max_steps_per_stage", None)
    source = args.config
    if args.resume and not source:
        # fall back to the run configuration stored in the checkpoint
        source = load_checkpoint(args.resume).manifest.get("run")
    cfg = resolve_config(source, args.preset, ov)
    out = output_dir(args, "train")
    write_resolved(cfg, out)
    stages = {"1": [1], "2": [2], "both": [1, 2]}[args.stage]
    run_training(cfg, out, stages, args.resume)
    print(f"training output in {out}")
    return 0


def evaluate(pot: PotModel, ugrn: UgrnModel, x: np.ndarray, y: np.ndarray, first_stage_only: bool = False) -> EvalReport:
    unit = pot.cfg.unit_mm
    y_tilde, _, y_hat = infer(pot, None if first_stage_only else ugrn, x)
    pred = (y_tilde if first_stage_only else y_hat) * unit
    return EvalReport.compute(pred, y, pot.groups, pot.cfg.num_groups, pot.skeleton.root)


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = resolve_config(args.config, args.preset, _common_overrides(args))
        ck.check_config(cfg.model)
    else:
        run = ck.manifest.get("run") or {"model": ck.manifest["config"]["model"]}
        cfg = RunConfig(model=ck.model_config)
        if "synth" in run:
            cfg.synth = SynthConfig.from_dict(run["synth"])
            cfg.data = dict(run.get("data", cfg.data))
        if args.test_data or args.data:
            cfg.data["test"] = args.test_data or args.data
    path = cfg.data.get("test")
    j = ck.model_config.num_joints
    if path:
        samples = load_dataset(path)
        if samples and samples[0].joints_2d.shape[0] != j:
            raise CheckpointMismatch(f"dataset has {samples[0].joints_2d.shape[0]} joints, checkpoint expects {j}")
        x, y = to_arrays(samples)
    else:
        x, y = load_split(cfg, "test")
    if len(x) == 0:
        raise EmptyDataset("evaluation set is empty")
    pot, ugrn = ck.build_models()
    report = evaluate(pot, ugrn, x, y, args.first_stage_only)
    out = output_dir(args, "eval")
    report.write(out / "report.json", out / "per_group.csv")
    write_resolved(cfg, out)
    label = "first stage" if args.first_stage_only else "refined"
    print(f"{label}: MPJPE {report.mpjpe_mm:.2f} mm  PCK {report.pck:.1f}  AUC {report.auc:.3f}  (n={len(x)})")
    return 0


ABLATION_GRID = [
    # (table, variant, model overrides, train overrides, stages)
    ("pose_design", "keypoint", dict(group_embedding=False, pot_attention="mhsa"), {}, [1]),
    ("pose_design", "keypoint+group", dict(group_embedding=True, pot_attention="mhsa"), {}, [1]),
    ("pose_design", "keypoint+po_sa", dict(group_embedding=False, pot_attention="posa"), {}, [1]),
    ("pose_design", "keypoint+group+po_sa", {}, {}, [1]),
    ("refinement", "pot", {}, {}, [1]),
    ("refinement", "pot+ugrn", {}, dict(ug_sampling=False), [1, 2]),
    ("refinement", "pot+ugrn+ug_sampling", {}, dict(ug_sampling=True), [1, 2]),
    ("ugrn_attention", "mh_sa", dict(ugrn_attention="mhsa"), dict(ug_sampling=False), [1, 2]),
    ("ugrn_attention", "po_sa", dict(ugrn_attention="posa"), dict(ug_sampling=False), [1, 2]),
    ("ugrn_attention", "ug_sa", dict(ugrn_attention="ugsa"), dict(ug_sampling=False), [1, 2]),
]


def ablation_rows(cfg: RunConfig) -> list[dict]:
    """Train every grid cell at ``cfg`` scale; params also reported at full (Our-L) scale."""
    x, y = load_split(cfg, "train")
    xt, yt = load_split(cfg, "test")
    rows = []
    stage1_cache: dict[str, dict] = {}
    for table, variant, m_kw, t_kw, stages in ABLATION_GRID:
        mcfg = replace(cfg.model, **m_kw).validate()
        tcfg = replace(cfg.train, **t_kw).validate()
        pot, ugrn = build_models(mcfg, tcfg.seed)
        key = replace(mcfg, ugrn_attention=cfg.model.ugrn_attention).digest()
        if key in stage1_cache:
            for n, p in pot.named_parameters():
                p.data[...] = stage1_cache[key][n]
        else:
            train_stage1(pot, x, y, tcfg)
            stage1_cache[key] = {n: p.data.copy() for n, p in pot.named_parameters()}
        if 2 in stages:
            train_stage2(pot, ugrn, x, y, tcfg)
        report = evaluate(pot, ugrn, xt, yt, first_stage_only=2 not in stages)
        full_pot, full_ugrn = build_models(replace(ModelConfig.our_l(), **m_kw), 0)
        with_ugrn = table != "refinement" or 2 in stages
        rows.append({
            "table": table,
            "variant": variant,
            "mpjpe_mm": report.mpjpe_mm,
            "params": param_count(pot, ugrn if with_ugrn else None)["total"],
            "params_full_scale": param_count(full_pot, full_ugrn if with_ugrn else None)["total"],
        })  # fmt: skip
        logger.info("%s/%s: %.2f mm", table, variant, report.mpjpe_mm)
    return rows


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, args.preset, _common_overrides(args))
    out = output_dir(args, "ablate")
    write_resolved(cfg, out)
    rows = ablation_rows(cfg)
    path = out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mpjpe_mm": repr(r["mpjpe_mm"])})
    for r in rows:
        print(f"{r['table']:<15} {r['variant']:<22} {r['mpjpe_mm']:8.2f} mm  {r['params']:>8d}  {r['params_full_scale']:>8d}")
    print(f"wrote {path}")
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        pot, ugrn = load_checkpoint(args.checkpoint).build_models()
    else:
        cfg = resolve_config(args.config, args.preset, parse_set(args.set))
        pot, ugrn = build_models(cfg.model, cfg.train.seed)
    counts = param_count(pot, ugrn)
    if args.json:
        print(json.dumps(counts, indent=2))
        return 0
    width = max(len(k) for k in counts)
    for name, n in counts.items():
        print(f"{name:<{width}}  {n:>9d}")
    print(f"{'':<{width}}  {counts['total'] / 1e6:>8.3f}M")
    return 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="potlift", description="Two-stage 2D-to-3D pose lifting.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        sp.add_argument("--out-dir")
        sp.add_argument("--run", help=f"run name under ${OUTPUT_ROOT_ENV}")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data", help="training JSONL (default: synthesize)")
            sp.add_argument("--test-data", help="test JSONL (default: synthesize)")
            sp.add_argument("--steps", type=int, help="optimizer steps per stage")

    sp = sub.add_parser("synth", help="write synthetic train/test JSONL")
    common(sp, data=False)
    sp.add_argument("--name", default="synth")
    sp.add_argument("--count", type=int)
    sp.add_argument("--noise-px", type=float)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train stage I, stage II or both")
    common(sp)
    sp.add_argument("--stage", choices=["1", "2", "both"], default="both")
    sp.add_argument("--resume", help="checkpoint manifest to continue from")
    sp.add_argument("--epochs", type=int, help="epochs per stage (disables the step cap)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="MPJPE / PCK / AUC of a checkpoint")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--first-stage-only", action="store_true", help="score Y~ instead of the refined pose")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run the ablation grid and write ablation.csv")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("inspect", help="parameter counts per submodule")
    common(sp, data=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PotliftError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

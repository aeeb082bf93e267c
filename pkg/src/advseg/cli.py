"""Command-line entry point: gen-data, train, eval, attack-eval, infer, ablate."""
from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adversarial import AttackConfig, attack_eval
from .cascade import PLANS, MONOLITHIC, oracle_trace
from .dataio import (
    FormatError,
    PhantomConfig,
    Sample,
    generate_phantom,
    kfold_split,
    read_dataset,
    read_params,
    write_dataset,
    write_params,
)
from .evaluation import CascadeModel, MonolithicModel, evaluate
from .labels import N_LABELS, NAMES, PALETTE
from .metrics import EvalReport, append_rows
from .segnet import Params
from .autodiff import Tensor
from .training import LR_SCHEDULES, ModelConfig, TrainConfig, TrainingDivergedError, train_model

DEFAULTS: dict[str, object] = {
    "seed": 42,
    "epochs": 20,
    "batch_size": 8,
    "lr": 0.05,
    "momentum": 0.9,
    "clip_norm": 5.0,
    "lr_schedule": "cosine",
    "lambda_cls": 1.0,
    "epsilon": 0.1,
    "mix_ratio": 0.5,
    "bbox_margin": 4,
    "stage": "all",
    "defense": "off",
    "class_head": "off",
    "cascade": "off",
    "folds": 5,
    "folds_run": 0,
    "data_path": "data/phantom.segv",
    "out_dir": "runs/default",
    "n_samples": 200,
    "size": 64,
    "noise_sigma": 0.05,
    "lesion_probability": 0.3,
    "base_width": 16,
    "depth": 2,
}
_CHOICES = {
    "stage": ("1", "2", "3", "all"),
    "lr_schedule": LR_SCHEDULES,
    "defense": ("on", "off"),
    "class_head": ("on", "off"),
    "cascade": ("on", "off"),
}

ABLATION_EPSILONS = (0.05, 0.1, 0.2)


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            raise TypeError
        if isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"{key}: expected one of {_CHOICES[key]}, got {raw!r}")
    return value


def parse_config(text: str) -> dict:
    cfg = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if not raw:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        cfg[key] = _coerce(key, raw)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["epochs"] < 0 or cfg["batch_size"] < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    if cfg["lr"] <= 0 or not 0 <= cfg["momentum"] < 1:
        raise ConfigError("lr must be positive and momentum in [0, 1)")
    if cfg["clip_norm"] < 0:
        raise ConfigError("clip_norm must be non-negative (0 disables clipping)")
    if cfg["lambda_cls"] < 0 or cfg["bbox_margin"] < 0:
        raise ConfigError("lambda_cls and bbox_margin must be non-negative")
    if not 0 <= cfg["mix_ratio"] <= 1 or not 0 <= cfg["epsilon"] <= 1:
        raise ConfigError("mix_ratio and epsilon must lie in [0, 1]")
    if cfg["folds"] < 2 or not 0 <= cfg["folds_run"] <= cfg["folds"]:
        raise ConfigError("folds must be >= 2 and folds_run in [0, folds]")
    if cfg["cascade"] == "off" and cfg["stage"] != "all":
        raise ConfigError("stage selection requires cascade=on")
    if cfg["size"] % (2 ** cfg["depth"]):
        raise ConfigError("phantom size must be divisible by 2**depth")


def resolved_text(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in DEFAULTS)


def load_config(args) -> dict:
    text = Path(args.config).read_text() if args.config else ""
    cfg = parse_config(text)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    if getattr(args, "data", None) is not None:
        cfg["data_path"] = args.data
    validate(cfg)
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(resolved_text(cfg))
    return out


def _model_cfg(cfg) -> ModelConfig:
    return ModelConfig(
        class_head=cfg["class_head"] == "on",
        cascade=cfg["cascade"] == "on",
        bbox_margin=cfg["bbox_margin"],
        base_width=cfg["base_width"],
        depth=cfg["depth"],
    )


def _attack_cfg(cfg, epsilon=None) -> AttackConfig:
    return AttackConfig(epsilon=cfg["epsilon"] if epsilon is None else epsilon, mix_ratio=cfg["mix_ratio"])


def _train_cfg(cfg, defense=None, epsilon=None) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        clip_norm=cfg["clip_norm"] or None,
        lr_schedule=cfg["lr_schedule"],
        lambda_cls=cfg["lambda_cls"],
        defense=(cfg["defense"] == "on") if defense is None else defense,
        attack=_attack_cfg(cfg, epsilon),
        seed=cfg["seed"],
    )


def config_label(cfg) -> str:
    return _model_cfg(cfg).label(cfg["defense"] == "on")


def _attack_lambda(cfg) -> float:
    return cfg["lambda_cls"] if cfg["class_head"] == "on" else 0.0


def _folds(cfg, n):
    folds = kfold_split(n, cfg["folds"], cfg["seed"])
    run = cfg["folds_run"] or cfg["folds"]
    return folds, list(range(run))


def _split(samples, folds, f):
    val_idx = set(folds[f])
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [samples[i] for i in folds[f]]
    return train, val


def _log(out: Path, msg: str) -> None:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    with (out / "train.log").open("a") as fh:
        fh.write(f"{stamp} {msg}\n")


def _to_params(tensors: dict) -> Params:
    return Params((k, Tensor(v, requires_grad=True, name=k)) for k, v in tensors.items())


def _save(params: Params, path: Path) -> None:
    write_params({k: v.data for k, v in params.items()}, path)


def _load_model(cfg, fold_dir: Path):
    if cfg["cascade"] == "on":
        paths = [fold_dir / f"stage{k}.segp" for k in (1, 2, 3)]
        for p in paths:
            if not p.exists():
                raise FileNotFoundError(f"missing checkpoint {p}")
        stages = [_to_params(read_params(p)) for p in paths]
        return CascadeModel(*stages, margin=cfg["bbox_margin"])
    path = fold_dir / "model.segp"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return MonolithicModel(_to_params(read_params(path)))


def _evaluate(model, samples, workers: int, oracle=False, presence=True) -> EvalReport:
    if workers <= 1 or len(samples) < 2:
        return evaluate(model, samples, oracle=oracle, presence=presence)
    chunks = [list(c) for c in np.array_split(np.arange(len(samples)), workers) if len(c)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_eval_chunk, [(model, [samples[i] for i in c], oracle, presence) for c in chunks]))
    merged = EvalReport()
    for p in parts:
        merged.per_sample_dice += p.per_sample_dice
        merged.presence_pred += p.presence_pred
        merged.presence_truth += p.presence_truth
    return merged


def _eval_chunk(job):
    model, samples, oracle, presence = job
    return evaluate(model, samples, oracle=oracle, presence=presence)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, args) -> int:
    out = _out_dir(cfg)
    pcfg = PhantomConfig(
        seed=cfg["seed"],
        size=cfg["size"],
        n_samples=cfg["n_samples"],
        noise_sigma=cfg["noise_sigma"],
        lesion_probability=cfg["lesion_probability"],
    )
    samples = generate_phantom(pcfg)
    path = Path(cfg["data_path"])
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, path)
    totals = np.zeros(N_LABELS, dtype=np.int64)
    for s in samples:
        totals += np.bincount(s.labels.ravel(), minlength=N_LABELS)
    manifest = {
        "seed": cfg["seed"],
        "n_samples": len(samples),
        "size": cfg["size"],
        "pixel_totals": {NAMES[k]: int(totals[k]) for k in range(N_LABELS)},
        "presence_counts": {
            NAMES[k]: int(sum(bool((s.labels == k).any()) for s in samples)) for k in range(1, N_LABELS)
        },
    }
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(samples)} samples to {path}")
    del out
    return 0


def _stages(cfg):
    return (1, 2, 3) if cfg["stage"] == "all" else (int(cfg["stage"]),)


def cmd_train(cfg, args) -> int:
    out = _out_dir(cfg)
    samples = read_dataset(cfg["data_path"])
    folds, run = _folds(cfg, len(samples))
    mcfg, tcfg = _model_cfg(cfg), _train_cfg(cfg)
    label = config_label(cfg)
    for f in run:
        train, val = _split(samples, folds, f)
        fold_dir = out / f"fold{f}"
        fold_dir.mkdir(exist_ok=True)

        def record(r, f=f):
            _log(out, f"config={label} fold={f} stage={r['stage']} epoch={r['epoch']} "
                      f"loss={r['loss']:.6f} val_dice={r['val_dice']:.6f}")

        _, ckpts, _ = train_model(mcfg, tcfg, train, val, stages=_stages(cfg), on_epoch=record)
        for name, params in ckpts.items():
            _save(params, fold_dir / f"{name}.segp")
        print(f"fold {f}: saved {', '.join(sorted(ckpts))}")
    return 0


def cmd_eval(cfg, args) -> int:
    out = _out_dir(cfg)
    samples = read_dataset(cfg["data_path"])
    folds, run = _folds(cfg, len(samples))
    label = config_label(cfg)
    rows = []
    for f in run:
        train, val = _split(samples, folds, f)
        subset = train if args.split == "train" else val
        model = None if args.oracle else _load_model(cfg, out / f"fold{f}")
        report = _evaluate(model, subset, args.workers, oracle=args.oracle,
                           presence=cfg["class_head"] == "on" or args.oracle)
        rows.append(report.row(label, f, cfg["seed"], args.split))
        print(f"fold {f} {args.split}: mean Dice {rows[-1]['dice_mean']} ({report.n_samples} samples)")
    append_rows(out / "metrics.csv", rows)
    return 0


def _parse_eps(text, default):
    if text is None:
        return [default]
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad epsilon list {text!r}") from None


def cmd_attack_eval(cfg, args) -> int:
    out = _out_dir(cfg)
    samples = read_dataset(cfg["data_path"])
    folds, run = _folds(cfg, len(samples))
    label = config_label(cfg)
    epsilons = _parse_eps(args.epsilon, cfg["epsilon"])
    rows = []
    for f in run:
        _, val = _split(samples, folds, f)
        model = _load_model(cfg, out / f"fold{f}")
        presence = cfg["class_head"] == "on"
        clean_row = None
        for eps in epsilons:
            c, a = attack_eval(model, val, _attack_cfg(cfg, eps), _attack_lambda(cfg))
            if clean_row is None:
                clean_row = _maybe_presence(c, presence).row(label, f, cfg["seed"], "clean")
                rows.append(clean_row)
            rows.append(_maybe_presence(a, presence).row(label, f, cfg["seed"], f"fgsm_eps={eps:g}"))
            print(f"fold {f} eps {eps:g}: clean mean Dice {clean_row['dice_mean']}, "
                  f"attacked {rows[-1]['dice_mean']}")
    append_rows(out / "attack.csv", rows)
    return 0


def _maybe_presence(report: EvalReport, keep: bool) -> EvalReport:
    if keep:
        return report
    return EvalReport(report.per_sample_dice)


def render_ppm(labels: np.ndarray) -> bytes:
    h, w = labels.shape
    rgb = np.asarray(PALETTE, dtype=np.uint8)[labels]
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def cmd_infer(cfg, args) -> int:
    out = _out_dir(cfg)
    if args.input:
        sample = read_dataset(args.input)[0]
    else:
        sample = read_dataset(cfg["data_path"])[args.index]
    if args.oracle:
        labels = _oracle_cascade(sample, cfg) if cfg["cascade"] == "on" else sample.labels.copy()
    else:
        model = _load_model(cfg, out / f"fold{args.fold}")
        labels = model.predict([sample.image])[0][0]
    write_dataset([Sample(sample.image, labels)], out / "prediction.segv")
    (out / "prediction.ppm").write_bytes(render_ppm(labels))
    (out / "truth.ppm").write_bytes(render_ppm(sample.labels))
    print(f"wrote {out / 'prediction.segv'} and {out / 'prediction.ppm'}")
    return 0


def _oracle_cascade(sample, cfg) -> np.ndarray:
    return oracle_trace(sample.labels, cfg["bbox_margin"], 2 ** cfg["depth"]).labels


def cmd_ablate(cfg, args) -> int:
    out = _out_dir(cfg)
    samples = read_dataset(cfg["data_path"])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    eps0 = cfg["epsilon"]
    variants = [
        ("base", dict(class_head="off", defense="off", cascade="off"), eps0),
        ("base+class", dict(class_head="on", defense="off", cascade="off"), eps0),
        ("base+class+defense", dict(class_head="on", defense="on", cascade="off"), eps0),
        ("base+class+defense+coarse2fine", dict(class_head="on", defense="on", cascade="on"), eps0),
    ] + [
        (f"base+class+defense(eps={e:g})", dict(class_head="on", defense="on", cascade="off"), e)
        for e in ABLATION_EPSILONS
    ]
    for seed in seeds:
        scfg = dict(cfg, seed=seed)
        folds, run = _folds(scfg, len(samples))
        fold_tag = ";".join(str(f) for f in run)
        cache: dict[tuple, EvalReport] = {}
        for name, flags, eps in variants:
            vcfg = dict(scfg, **flags, epsilon=eps)
            key = (flags["class_head"], flags["defense"], flags["cascade"], eps)
            if key not in cache:
                pooled = EvalReport()
                for f in run:
                    train, val = _split(samples, folds, f)

                    def record(r, f=f, name=name):
                        _log(out, f"ablate seed={seed} config={name} fold={f} stage={r['stage']} "
                                  f"epoch={r['epoch']} loss={r['loss']:.6f} val_dice={r['val_dice']:.6f}")

                    model, _, _ = train_model(_model_cfg(vcfg), _train_cfg(vcfg), train, val, on_epoch=record)
                    rep = evaluate(model, val, presence=flags["class_head"] == "on")
                    pooled.per_sample_dice += rep.per_sample_dice
                    pooled.presence_pred += rep.presence_pred
                    pooled.presence_truth += rep.presence_truth
                cache[key] = pooled
            row = cache[key].row(name, fold_tag, seed, "val")
            append_rows(out / "ablation.csv", [row])
            print(f"seed {seed} {name}: mean Dice {row['dice_mean']}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack-eval": cmd_attack_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advseg", description=__doc__)
    parser.add_argument("--dump-plans", action="store_true", help="print the cascade stage tables and exit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="override out_dir")
    common.add_argument("--data", help="override data_path")
    common.add_argument("--workers", type=int, default=1, help="evaluation worker processes")
    sub = parser.add_subparsers(dest="command")
    sub.add_parser("gen-data", parents=[common], help="write a phantom dataset")
    sub.add_parser("train", parents=[common], help="train every fold")
    p = sub.add_parser("eval", parents=[common], help="score checkpoints per fold")
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--oracle", action="store_true", help="use ground truth as the prediction")
    p = sub.add_parser("attack-eval", parents=[common], help="clean vs FGSM-attacked scores")
    p.add_argument("--epsilon", help="comma-separated epsilon list")
    p = sub.add_parser("infer", parents=[common], help="predict one sample")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--input", help="SEGV file whose first sample is used")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--oracle", action="store_true", help="use ground-truth stage predictors")
    p = sub.add_parser("ablate", parents=[common], help="ablation matrix over model ingredients")
    p.add_argument("--seeds", help="comma-separated seed list (default: the configured seed)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.dump_plans:
        print("\n\n".join(plan.table() for plan in (MONOLITHIC,) + PLANS))
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, TrainingDivergedError, ad.AutodiffError, FileNotFoundError, IndexError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

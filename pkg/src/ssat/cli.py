"""``ssat`` command line: gen-data, pretrain, attack, eval, sweep, render.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

import argparse
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import _kernels
from ._io import write_bytes_atomic, write_text_atomic
from .attack import (
    AttackSpec,
    AttackTrainConfig,
    PretrainConfig,
    clean_logits_labels,
    pretrain_target,
    train_attack,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import (
    DEFAULT_PALETTE,
    ExperimentGrid,
    attack_batch,
    cross_evaluate,
    evaluate_attack,
    image_to_ppm,
    perturbation_to_ppm,
    render_labelmap,
    write_report_csv,
)
from .nets import GENERATOR_UNET, ModelConfig, build_generator_unet
from .pnm import PnmError, read_pnm
from .scenes import DatasetError, SceneConfig, generate_dataset, load_split

log = logging.getLogger("ssat")


class ConfigError(Exception):
    """Bad configuration or usage; maps to exit code 2."""


# --------------------------------------------------------------------------
# run config
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    scene_config: SceneConfig = field(default_factory=SceneConfig)
    n_train: int = 1000
    n_test: int = 200
    pretrain_config: PretrainConfig = field(default_factory=PretrainConfig)
    generator_config: ModelConfig = field(default_factory=lambda: ModelConfig(kind=GENERATOR_UNET))
    attack_spec: AttackSpec = field(default_factory=lambda: AttackSpec("Vanish", [5, 6]))
    train_config: AttackTrainConfig = field(default_factory=AttackTrainConfig)
    eval: dict = field(default_factory=dict)
    output_dir: str = "."
    seed: int = 0

    def __post_init__(self):
        # one run seed drives every random stream
        s = int(self.seed)
        self.scene_config = replace(self.scene_config, seed=s)
        self.pretrain_config = replace(self.pretrain_config, seed=s)
        self.generator_config = replace(self.generator_config, seed=s)
        self.train_config = replace(self.train_config, seed=s)


_EVAL_KEYS = {"xi", "samples", "split", "palette", "batch"}


def _parse(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    try:
        return cls.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def run_config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("run config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
    kw = {}
    if "scene_config" in d:
        kw["scene_config"] = _parse(SceneConfig, d["scene_config"], "scene_config")
    if "pretrain_config" in d:
        kw["pretrain_config"] = _parse(PretrainConfig, d["pretrain_config"], "pretrain_config")
    if "generator_config" in d:
        g = dict(d["generator_config"])
        g.setdefault("kind", GENERATOR_UNET)
        kw["generator_config"] = _parse(ModelConfig, g, "generator_config")
        if kw["generator_config"].kind != GENERATOR_UNET:
            raise ConfigError("generator_config.kind must be GeneratorUNet")
    if "attack_spec" in d:
        kw["attack_spec"] = _parse(AttackSpec, d["attack_spec"], "attack_spec")
    if "train_config" in d:
        kw["train_config"] = _parse(AttackTrainConfig, d["train_config"], "train_config")
    if "eval" in d:
        if not isinstance(d["eval"], dict) or set(d["eval"]) - _EVAL_KEYS:
            raise ConfigError(f"eval: unknown fields {sorted(set(d['eval']) - _EVAL_KEYS)}")
        kw["eval"] = dict(d["eval"])
    for k in ("n_train", "n_test", "seed"):
        if k in d:
            if not isinstance(d[k], int) or d[k] < 0:
                raise ConfigError(f"{k} must be a non-negative integer")
            kw[k] = d[k]
    if "output_dir" in d:
        kw["output_dir"] = str(d["output_dir"])
    try:
        return RunConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None


def load_run_config(path):
    if path is None:
        return RunConfig()
    return run_config_from_dict(read_json(path))


def _resolve(base, p):
    return p if os.path.isabs(p) else os.path.join(base, p)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    rc = load_run_config(args.config)
    scene = rc.scene_config
    if args.style:
        scene = replace(scene, style=args.style)
    out = args.out or os.path.join(rc.output_dir, "data")
    manifest = generate_dataset(scene, rc.n_train, rc.n_test, out)
    print(f"wrote {len(manifest['samples'])} samples to {out}")


def cmd_pretrain(args):
    rc = load_run_config(args.config)
    cfg = rc.pretrain_config
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    train = load_split(args.data, "train")
    test = load_split(args.data, "test")
    model, acc = pretrain_target(train, test, cfg)
    out = args.out or os.path.join(rc.output_dir, "target.ssat")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_checkpoint(model, out)
    print(f"test_pixel_acc={acc:.4f}")


def _history_csv(history):
    cols = ["epoch", "adv_loss", "reg_loss", "total_loss", "manipulated_rate", "preserved_rate"]
    lines = [",".join(cols)]
    for row in history:
        vals = []
        for c in cols:
            v = row[c]
            vals.append("" if v is None else (str(v) if c == "epoch" else f"{v:.6f}"))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def cmd_attack(args):
    rc = load_run_config(args.config)
    overrides = {k: getattr(args, k) for k in ("lambda0", "xi", "epochs", "lr", "batch") if getattr(args, k) is not None}
    try:
        tcfg = replace(rc.train_config, **overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    spec = rc.attack_spec
    if args.spec:
        spec = _parse(AttackSpec, read_json(args.spec), args.spec)
    gcfg = rc.generator_config
    if args.width is not None:
        gcfg = replace(gcfg, width_multiplier=args.width)
    if tcfg.lambda0 == 0 and args.lambda0 is not None:
        # ablation arm: no regularizer head at all
        tcfg = replace(tcfg, regularizer_enabled=False)
        gcfg = replace(gcfg, regularizer_head=False)
    target = load_checkpoint(args.target_ckpt, frozen=True)
    train = load_split(args.data, "train")
    out = args.out or os.path.join(rc.output_dir, "generator.ssat")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    gen = build_generator_unet(gcfg)
    history = []

    def on_epoch(row):
        history.append(row)
        save_checkpoint(gen, out)
        write_text_atomic(out + ".history.csv", _history_csv(history))

    train_attack(gen, target, train, spec, tcfg, progress=on_epoch)
    save_checkpoint(gen, out)
    write_text_atomic(out + ".history.csv", _history_csv(history))
    # sample perturbation of the first training image, for inspection
    p, _, _ = attack_batch(gen, target, train.images[:1], tcfg.xi)
    buf = _npy_bytes(p[0])
    write_bytes_atomic(out + ".sample_perturbation.npy", buf)
    print(f"saved generator to {out}")


def _npy_bytes(arr):
    bio = io.BytesIO()
    np.save(bio, np.asarray(arr, dtype=np.float32))
    return bio.getvalue()


def _palette(path):
    if path is None:
        return DEFAULT_PALETTE
    pal = read_json(path)
    if not isinstance(pal, list) or not all(isinstance(c, list) and len(c) == 3 for c in pal):
        raise ConfigError(f"{path}: palette must be a list of [r, g, b] triples")
    return [tuple(int(v) for v in c) for c in pal]


def cmd_eval(args):
    spec = _parse(AttackSpec, read_json(args.spec), args.spec)
    gen = load_checkpoint(args.generator_ckpt)
    target = load_checkpoint(args.target_ckpt, frozen=True)
    data = load_split(args.data, args.split)
    xi = args.xi
    os.makedirs(args.out, exist_ok=True)
    report = evaluate_attack(
        gen,
        target,
        data,
        spec,
        xi,
        experiment_id="eval",
        generator_ckpt=os.path.basename(args.generator_ckpt),
        target_ckpt=os.path.basename(args.target_ckpt),
        seed=args.seed,
    )
    write_report_csv([report], os.path.join(args.out, "metrics.csv"))
    write_text_atomic(
        os.path.join(args.out, "report.json"), json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"
    )
    palette = _palette(args.palette)
    for idx in args.samples:
        if not 0 <= idx < len(data):
            raise ConfigError(f"sample index {idx} out of range for split of {len(data)}")
        img = data.images[idx : idx + 1]
        p, x_adv, l_hat = attack_batch(gen, target, img, xi)
        clean = clean_logits_labels(target, img)[0]
        adv = np.argmax(l_hat, axis=1)[0]
        stem = os.path.join(args.out, f"sample_{idx:06d}")
        write_bytes_atomic(stem + "_image.ppm", image_to_ppm(img[0]))
        write_bytes_atomic(stem + "_perturbation.ppm", perturbation_to_ppm(p[0], xi))
        write_bytes_atomic(stem + "_adversarial.ppm", image_to_ppm(x_adv[0]))
        write_bytes_atomic(stem + "_clean_pred.ppm", render_labelmap(clean, palette))
        write_bytes_atomic(stem + "_adv_pred.ppm", render_labelmap(adv, palette))
    m = "n/a" if report.manipulated_rate is None else f"{report.manipulated_rate:.4f}"
    print(f"manipulated_rate={m} preserved_rate={report.preserved_rate:.4f}")


_GRID_KEYS = {"generators", "targets", "datasets", "xis", "attack_spec", "seed", "lambda0", "train"}
_TRAIN_KEYS = {"data", "target", "generator_config", "train_config", "widths"}


def cmd_sweep(args):
    grid = read_json(args.grid)
    if not isinstance(grid, dict) or set(grid) - _GRID_KEYS:
        raise ConfigError(f"{args.grid}: unknown grid fields {sorted(set(grid) - _GRID_KEYS)}")
    base = os.path.dirname(os.path.abspath(args.grid))
    spec = _parse(AttackSpec, grid.get("attack_spec", {"attack_type": "Vanish", "target_classes": [5, 6]}), "attack_spec")
    xis = [float(x) for x in grid.get("xis", [10.0])]
    seed = int(grid.get("seed", 0))
    if "train" in grid:
        rows = _sweep_train(grid["train"], base, spec, xis, seed)
    else:
        gens = [(p, load_checkpoint(_resolve(base, p))) for p in grid.get("generators", [])]
        tpaths, dpaths = grid.get("targets", []), grid.get("datasets", [])
        if len(tpaths) != len(dpaths):
            raise ConfigError("grid: targets and datasets must have equal length (dataset i pairs with target i)")
        targets = [
            (t, load_checkpoint(_resolve(base, t), frozen=True), load_split(_resolve(base, d), "test"))
            for t, d in zip(tpaths, dpaths)
        ]
        eg = ExperimentGrid(gens, targets, xis, spec, seed=seed, lambda0=grid.get("lambda0"))
        results = cross_evaluate(eg)
        rows = []
        for key in sorted(results):
            rep = results[key]
            if hasattr(rep, "error"):
                log.error("cell %s -> %s @ xi=%g failed: %s", *key, rep.error)
                continue
            rep.dataset = dpaths[tpaths.index(key[1])]
            rows.append(rep)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_report_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")


def _sweep_train(t, base, spec, xis, seed):
    if not isinstance(t, dict) or set(t) - _TRAIN_KEYS:
        raise ConfigError(f"grid.train: unknown fields {sorted(set(t) - _TRAIN_KEYS)}")
    data = _resolve(base, t["data"])
    target_path = _resolve(base, t["target"])
    target = load_checkpoint(target_path, frozen=True)
    train, test = load_split(data, "train"), load_split(data, "test")
    g = dict(t.get("generator_config", {}))
    g.setdefault("kind", GENERATOR_UNET)
    gcfg = replace(_parse(ModelConfig, g, "grid.train.generator_config"), seed=seed)
    tcfg = replace(_parse(AttackTrainConfig, t.get("train_config", {}), "grid.train.train_config"), seed=seed)
    rows = []
    for width in t.get("widths", [gcfg.width_multiplier]):
        for xi in xis:
            gen = build_generator_unet(replace(gcfg, width_multiplier=float(width)))
            cfg = replace(tcfg, xi=xi)
            train_attack(gen, target, train, spec, cfg)
            rep = evaluate_attack(
                gen,
                target,
                test,
                spec,
                xi,
                experiment_id=f"width={float(width):g}/xi={xi:g}",
                generator_ckpt=f"trained(width={float(width):g})",
                target_ckpt=t["target"],
                lambda0=cfg.lambda0,
                seed=seed,
            )
            rep.dataset = t["data"]
            rows.append(rep)
    return rows


def cmd_render(args):
    labels = read_pnm(args.labels)
    if labels.ndim != 2:
        raise ConfigError(f"{args.labels}: expected a P5 label map")
    write_bytes_atomic(args.out, render_labelmap(labels, _palette(args.palette)))
    print(f"wrote {args.out}")


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _sample_list(s):
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser():
    ap = argparse.ArgumentParser(prog="ssat", description="Semantically stealthy segmentation attacks, desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic scene dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--style", choices=["A", "B", "C"], help="override scene_config.style")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the target segmentation model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("attack", help="train a perturbation generator against a frozen target")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--target-ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--spec", help="attack spec JSON (overrides the config's attack_spec)")
    p.add_argument("--lambda0", type=float)
    p.add_argument("--xi", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--width", type=float, help="generator width multiplier")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="score a generator and render sample panels")
    p.add_argument("--generator-ckpt", required=True)
    p.add_argument("--target-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--xi", type=float, default=10.0)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--samples", type=_sample_list, default=[0])
    p.add_argument("--palette")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate or train over an experiment grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render", help="colour a PGM label map")
    p.add_argument("--labels", required=True)
    p.add_argument("--palette")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = os.environ.get("SSAT_THREADS")
    if threads:
        try:
            _kernels.set_threads(int(threads))
        except ValueError:
            print(f"ssat: SSAT_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 2
    try:
        args.func(args)
    except ConfigError as e:
        print(f"ssat: config error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, PnmError, ValueError, OSError, RuntimeError) as e:
        print(f"ssat: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

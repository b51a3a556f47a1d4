"""Command-line surface tying the library together.

Configuration comes from an optional flat key=value file plus flag overrides;
every run prints its resolved configuration (seed included) before doing any
work, so runs are reproducible from their own output. Exit codes: 0 success,
2 usage error, 1 runtime failure (with a one-line diagnostic category).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import analysis, training
from .checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint, save_checkpoint
from .data import Dataset, gen_synthetic, load_cifar_binary, load_dataset
from .errors import (
    ContractError, CorruptionError, DimensionError, DistributionError,
    FormatError, IncompatibleError,
)
from .model import VisionTransformer, deit_small_config, toy_config
from .rng import Rng
from .sparsify import PruneConfig
from .training import TrainConfig, train
from .viz import visualize_mask

PRESETS = {"toy": toy_config, "deit-s": deit_small_config}

_ERROR_CATEGORIES = (
    (FormatError, "format"),
    (CorruptionError, "corruption"),
    (IncompatibleError, "incompatible"),
    (DistributionError, "distribution"),
    (DimensionError, "dimension"),
    (ContractError, "contract"),
    (FileNotFoundError, "io"),
    (IndexError, "index"),
)


def _read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _resolve(args: argparse.Namespace, file_cfg: dict[str, str]) -> dict:
    """Flag value if given, else config-file value, else the parser default."""
    resolved = {}
    for key, value in sorted(vars(args).items()):
        if key in ("command", "func", "config"):
            continue
        if value is None and key in file_cfg:
            value = file_cfg[key]
        resolved[key] = value
    return resolved


def _print_resolved(resolved: dict) -> None:
    print("resolved config:")
    for key, value in sorted(resolved.items()):
        print(f"  {key}={value}")


def _load_any_dataset(path: str) -> Dataset:
    if path.endswith(".npz"):
        return load_dataset(path)
    return load_cifar_binary(path)


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x != ""]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x != ""]


def _frange(text: str) -> list[float]:
    """Either a comma list or start:stop:step (inclusive stop)."""
    if ":" in str(text):
        start, stop, step = (float(x) for x in str(text).split(":"))
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return _floats(text)


def _prune_from(resolved: dict, default_layer: int = 1) -> PruneConfig | None:
    mass_th = resolved.get("mass_th")
    density = resolved.get("density")
    layer = int(resolved.get("prune_layer") or default_layer)
    mode = resolved.get("exec_mode") or "masked"
    kind = resolved.get("score_kind") or "column_sum"
    if mass_th is not None:
        return PruneConfig(strategy="mass", mass_threshold=float(mass_th),
                           prune_layer=layer, exec_mode=mode, score_kind=kind)
    if density is not None:
        return PruneConfig(strategy="value", density=float(density),
                           prune_layer=layer, exec_mode=mode, score_kind=kind)
    return None


def _model_from(resolved: dict, need_weights: bool) -> VisionTransformer:
    ckpt_path = resolved.get("checkpoint")
    if ckpt_path:
        return model_from_checkpoint(load_checkpoint(ckpt_path))
    preset = resolved.get("preset")
    if preset is None or preset not in PRESETS:
        raise ContractError(f"need --checkpoint or --preset from {sorted(PRESETS)}")
    if need_weights:
        raise ContractError("this command needs trained weights; pass --checkpoint")
    return VisionTransformer(PRESETS[preset](), rng=Rng(int(resolved.get("seed") or 0)))


# -- subcommands ---------------------------------------------------------


def _cmd_gen_data(resolved: dict) -> int:
    mix = tuple(_floats(resolved.get("mix") or "0.34,0.33,0.33"))
    ds = gen_synthetic(
        count=int(resolved["count"]), image_size=int(resolved.get("image_size") or 32),
        seed=int(resolved.get("seed") or 0), difficulty_mix=mix,
        split=resolved.get("split") or "train",
    )
    ds.save(resolved["out"])
    print(f"wrote {len(ds)} images to {resolved['out']}")
    return 0


def _train_common(resolved: dict, prune: PruneConfig | None, beta: float) -> int:
    train_ds = _load_any_dataset(resolved["data"])
    eval_ds = _load_any_dataset(resolved["eval_data"]) if resolved.get("eval_data") else None
    seed = int(resolved.get("seed") or 0)
    model_cfg = PRESETS[resolved.get("preset") or "toy"](
        num_classes=int(np.max(train_ds.labels)) + 1,
        image_size=int(train_ds.images.shape[-1]),
    )
    model = VisionTransformer(model_cfg, rng=Rng(seed))

    teacher = None
    if beta > 0:
        if not resolved.get("teacher"):
            raise ContractError("--beta > 0 requires --teacher checkpoint")
        teacher = model_from_checkpoint(load_checkpoint(resolved["teacher"]))

    cfg = TrainConfig(
        epochs=int(resolved["epochs"]),
        batch_size=int(resolved.get("batch_size") or 128),
        lr=float(resolved.get("lr") or 1e-3),
        weight_decay=float(resolved.get("weight_decay") or 0.05),
        distill_weight=beta,
        prune=prune,
        seed=seed,
        dense_first=bool(int(resolved.get("dense_first") or 0)),
        eval_every=int(resolved.get("eval_every") or 1),
    )
    x_train = train_ds.normalized()
    y_train = train_ds.labels
    if eval_ds is None:
        split = max(1, len(train_ds) // 10)
        x_eval, y_eval = x_train[:split], y_train[:split]
        x_train, y_train = x_train[split:], y_train[split:]
    else:
        x_eval, y_eval = eval_ds.normalized(), eval_ds.labels

    log_fh = open(resolved["log"], "w") if resolved.get("log") else None

    def log_fn(entry):
        print(entry.line())
        if log_fh:
            log_fh.write(entry.line() + "\n")
            log_fh.flush()

    try:
        train(model, x_train, y_train, x_eval, y_eval, cfg, teacher=teacher,
              log_fn=log_fn, checkpoint_path=resolved.get("out"))
    finally:
        if log_fh:
            log_fh.close()
    if resolved.get("out"):
        print(f"checkpoint written to {resolved['out']}")
    return 0


def _cmd_train_teacher(resolved: dict) -> int:
    return _train_common(resolved, prune=None, beta=0.0)


def _cmd_train(resolved: dict) -> int:
    prune = _prune_from(resolved)
    if prune is None:
        prune = PruneConfig(strategy="mass", mass_threshold=0.7,
                            prune_layer=int(resolved.get("prune_layer") or 1))
    return _train_common(resolved, prune=prune, beta=float(resolved.get("beta") or 0.0))


def _cmd_eval(resolved: dict) -> int:
    model = _model_from(resolved, need_weights=True)
    ds = _load_any_dataset(resolved["data"])
    images, labels = ds.normalized(), ds.labels
    layer = int(resolved.get("prune_layer") or 1)
    mode = resolved.get("exec_mode") or "masked"
    kind = resolved.get("score_kind") or "column_sum"
    rows: list[tuple[str, float, PruneConfig | None]] = []
    if resolved.get("mass_th"):
        for th in _floats(resolved["mass_th"]):
            pc = None if th >= 1.0 else PruneConfig(
                strategy="mass", mass_threshold=th, prune_layer=layer, exec_mode=mode, score_kind=kind)
            rows.append(("mass_th", th, pc))
    elif resolved.get("density"):
        for rho in _floats(resolved["density"]):
            pc = None if rho >= 1.0 else PruneConfig(
                strategy="value", density=rho, prune_layer=layer, exec_mode=mode, score_kind=kind)
            rows.append(("density", rho, pc))
    else:
        rows.append(("dense", 1.0, None))
    print("setting,value,accuracy,mean_density")
    for name, value, pc in rows:
        acc, dens = training.evaluate(model, images, labels, prune=pc,
                                      batch_size=int(resolved.get("batch_size") or 256))
        print(f"{name},{value:g},{acc:.4f},{dens:.4f}")
    return 0


def _cmd_sweep(resolved: dict) -> int:
    model = _model_from(resolved, need_weights=True)
    ds = _load_any_dataset(resolved["data"])
    p_list = _ints(resolved.get("p_list") or ",".join(str(i) for i in range(model.config.num_layers - 1)))
    thresholds = _frange(resolved.get("mass_th") or "0.4:0.95:0.05")
    result = analysis.sensitivity_sweep(
        model, ds.normalized(), ds.labels, p_list, thresholds,
        strategy=resolved.get("strategy") or "mass",
        batch_size=int(resolved.get("batch_size") or 256),
    )
    csv = result.csv()
    if resolved.get("out"):
        with open(resolved["out"], "w") as fh:
            fh.write(csv)
        print(f"sweep written to {resolved['out']}")
    else:
        print(csv, end="")
    return 0


def _cmd_flops(resolved: dict) -> int:
    if resolved.get("checkpoint"):
        config = load_checkpoint(resolved["checkpoint"]).config
    else:
        preset = resolved.get("preset") or "deit-s"
        if preset not in PRESETS:
            raise ContractError(f"unknown preset {preset!r}")
        config = PRESETS[preset]()
    density = float(resolved.get("density") or 1.0)
    layer = int(resolved.get("prune_layer") or 0)
    dense = analysis.flops(config, analysis.dense_schedule(config))
    print(f"dense: {dense.total:,} FLOPs ({dense.total / 1e9:.3f} GFLOPs) [{dense.convention}]")
    if density < 1.0:
        sparse = analysis.flops(config, analysis.uniform_schedule(config, layer, density))
        red = sparse.reduction_vs(dense)
        print(
            f"pruned at layer {layer}, density {density:g}: {sparse.total:,} FLOPs "
            f"({sparse.total / 1e9:.3f} GFLOPs, -{red:.1f}%)"
        )
        if bool(int(resolved.get("verbose") or 0)):
            print(sparse.table())
    elif bool(int(resolved.get("verbose") or 0)):
        print(dense.table())
    return 0


def _cmd_density_stats(resolved: dict) -> int:
    model = _model_from(resolved, need_weights=True)
    ds = _load_any_dataset(resolved["data"])
    pc = _prune_from(resolved)
    if pc is None:
        raise ContractError("density-stats needs --mass-th or --density")
    stats = analysis.density_stats(model, ds.normalized(), pc,
                                   batch_size=int(resolved.get("batch_size") or 256))
    print(f"samples={stats.densities.size} mean={stats.mean:.4f} std={stats.std:.4f}")
    print("histogram (bucket,count):")
    for lo, hi, c in zip(stats.hist_edges[:-1], stats.hist_edges[1:], stats.hist_counts):
        print(f"  [{lo:.1f},{hi:.1f}) {c}")
    if resolved.get("out"):
        with open(resolved["out"], "w") as fh:
            fh.write(stats.csv())
        print(f"per-sample densities written to {resolved['out']}")
    return 0


def _cmd_benchmark(resolved: dict) -> int:
    model = _model_from(resolved, need_weights=False)
    pc = _prune_from(resolved, default_layer=3)
    if pc is None:
        pc = PruneConfig(strategy="value", density=0.42, prune_layer=3)
    result = analysis.benchmark(
        model, pc,
        batch_size=int(resolved.get("batch") or 4),
        repetitions=int(resolved.get("reps") or 20),
    )
    for mode in ("dense", "masked", "compacted"):
        print(f"{mode:>10}: {result.stats[mode]}")
    print(f"compacted speedup over dense: {result.speedup('compacted'):.2f}x")
    print(f"masked speedup over dense:    {result.speedup('masked'):.2f}x")
    return 0


def _cmd_visualize(resolved: dict) -> int:
    model = _model_from(resolved, need_weights=True)
    ds = _load_any_dataset(resolved["data"])
    index = int(resolved.get("index") or 0)
    pc = _prune_from(resolved) or PruneConfig(strategy="mass", mass_threshold=0.7, prune_layer=1)
    images = ds.normalized()[index:index + 1]
    masks, dens = model.plan_only(images, pc)
    density = visualize_mask(ds.images[index], masks[0], model.config.patch_size, resolved["out"])
    print(f"wrote {resolved['out']} (kept density {density:.3f})")
    return 0


# -- parser ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tokenprune")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        for flag, required in flags.items():
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, required=required)
        p.set_defaults(func=fn)
        return p

    add("gen-data", _cmd_gen_data, out=True, count=True, image_size=False, mix=False, split=False)
    add("train-teacher", _cmd_train_teacher, data=True, eval_data=False, out=False, log=False,
        epochs=True, batch_size=False, lr=False, weight_decay=False, eval_every=False, preset=False)
    add("train", _cmd_train, data=True, eval_data=False, out=False, log=False, teacher=False,
        epochs=True, batch_size=False, lr=False, weight_decay=False, eval_every=False, preset=False,
        beta=False, mass_th=False, density=False, prune_layer=False, score_kind=False, dense_first=False)
    add("eval", _cmd_eval, checkpoint=True, data=True, mass_th=False, density=False,
        prune_layer=False, exec_mode=False, score_kind=False, batch_size=False)
    add("sweep", _cmd_sweep, checkpoint=True, data=True, p_list=False, mass_th=False,
        strategy=False, out=False, batch_size=False)
    add("flops", _cmd_flops, preset=False, checkpoint=False, density=False, prune_layer=False, verbose=False)
    add("density-stats", _cmd_density_stats, checkpoint=True, data=True, mass_th=False,
        density=False, prune_layer=False, out=False, batch_size=False)
    add("benchmark", _cmd_benchmark, preset=False, checkpoint=False, density=False,
        prune_layer=False, batch=False, reps=False)
    add("visualize", _cmd_visualize, checkpoint=True, data=True, out=True, index=False,
        mass_th=False, density=False, prune_layer=False)
    return ap


def cli(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        file_cfg = _read_config_file(args.config) if args.config else {}
        resolved = _resolve(args, file_cfg)
        if resolved.get("seed") is None:
            resolved["seed"] = 0
        _print_resolved(resolved)
        return args.func(resolved)
    except Exception as e:  # noqa: BLE001 - single reporting point for the CLI
        for exc_type, category in _ERROR_CATEGORIES:
            if isinstance(e, exc_type):
                break
        else:
            category = "runtime"
        print(f"error: {category}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()

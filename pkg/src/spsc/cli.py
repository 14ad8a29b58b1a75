"""Command line surface: synth | train | eval | infer | ablate | bench-scan | plot.

Every subcommand echoes its effective configuration into the output directory
so a run is reproducible from that file alone. Exit codes: 0 ok, 2 config
error, 3 data error, 4 numeric failure. Artifact schemas live in
docs/formats.md.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .errors import ConfigError, DataError, NumericError, SpscError
from .model import (
    INSERTION_STAGES,
    DualStreamSegmenter,
    ModelConfig,
    TrainConfig,
    load_checkpoint,
    predict_mask,
    train,
)
from .ssm import DiscreteSsm, scan_parallel, scan_sequential
from .tensor import Tensor, no_grad

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


# -- config plumbing -----------------------------------------------------------


def _read_json(path, kind: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        err = ConfigError if kind == "config" else DataError
        raise err(f"{path}: not found") from None
    except json.JSONDecodeError as e:
        err = ConfigError if kind == "config" else DataError
        raise err(f"{path}: invalid JSON ({e})") from None


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _check_schema(d: dict, path):
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}"
        )


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_insertion(text: str) -> list[str]:
    if text == "none":
        return []
    if text == "all":
        return list(INSERTION_STAGES)
    stages = [s.strip() for s in text.replace("+", ",").split(",") if s.strip()]
    for s in stages:
        if s not in INSERTION_STAGES:
            raise ConfigError(f"unknown insertion stage {s!r}")
    return stages


def _run_config(args) -> dict:
    """File config (if any) merged with command line overrides."""
    cfg = {"schema_version": SCHEMA_VERSION, "model": {}, "train": {}}
    if getattr(args, "config", None):
        file_cfg = _read_json(args.config, "config")
        _check_schema(file_cfg, args.config)
        cfg = _deep_merge(cfg, file_cfg)

    train_over = {}
    for key in ("epochs", "batch", "lr", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            train_over[key] = val
    if getattr(args, "augment", None) is not None:
        train_over["augment"] = args.augment
    model_over: dict = {}
    if getattr(args, "insertion", None) is not None:
        stages = _parse_insertion(args.insertion)
        model_over["insertion"] = stages
        model_over["enable_spectral"] = bool(stages)
    for key, path in (
        ("scan_mode", ("spectral", "scan_mode")),
        ("embed_dim", ("spectral", "embed_dim")),
        ("spectral_state", ("spectral", "state_size")),
        ("base_channels", ("spatial", "base_channels")),
        ("vss_per_stage", ("spatial", "vss_per_stage")),
        ("patch_size", ("spatial", "patch_size")),
        ("spatial_state", ("spatial", "state_size")),
    ):
        val = getattr(args, key, None)
        if val is not None:
            model_over.setdefault(path[0], {})[path[1]] = val
    cfg = _deep_merge(cfg, {"model": model_over, "train": train_over})
    return cfg


def _build_model_config(cfg: dict, bands: int) -> ModelConfig:
    model_d = dict(cfg.get("model", {}))
    stated = model_d.pop("in_bands", None)
    if stated is not None and stated != bands:
        raise ConfigError(f"config says in_bands={stated} but data has {bands} bands")
    if "insertion" in model_d:
        model_d["insertion"] = tuple(model_d["insertion"])
    return ModelConfig(in_bands=bands, **model_d)


# -- dataset directory ---------------------------------------------------------


def _load_manifest(data_dir) -> dict:
    manifest = _read_json(Path(data_dir) / MANIFEST_NAME, "data")
    _check_schema(manifest, Path(data_dir) / MANIFEST_NAME)
    return manifest


def _load_split(data_dir, manifest: dict, split: str) -> list[data_mod.HsiCube]:
    if split not in manifest["splits"]:
        raise ConfigError(f"unknown split {split!r}")
    entries = manifest["cubes"]
    cubes = []
    for idx in manifest["splits"][split]:
        cubes.append(data_mod.read_cube(Path(data_dir) / entries[idx]["file"]))
    if not cubes:
        raise DataError(f"split {split!r} is empty")
    return cubes


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    if bool(args.preset) == bool(args.spec):
        raise ConfigError("give exactly one of --preset or --spec")
    if args.spec:
        spec = data_mod.SyntheticSpec.from_json(_read_json(args.spec, "config"))
    else:
        spec = data_mod.preset_spec(args.preset, bands=args.bands, size=args.size)
    cubes = data_mod.generate_synthetic(spec, args.n, args.seed)
    splits = data_mod.make_splits([c.group for c in cubes], seed=args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, cube in enumerate(cubes):
        name = f"cube_{i:04d}.hsi"
        data_mod.write_cube(out / name, cube)
        entries.append({"file": name, "group": cube.group})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "spec": spec.to_json(),
        "n": args.n,
        "seed": args.seed,
        "cubes": entries,
        "splits": splits,
        "oracles": {
            "best_single_band_accuracy": data_mod.best_single_band_accuracy(cubes),
            "nearest_signature_accuracy": data_mod.nearest_signature_accuracy(cubes, spec),
        },
    }
    _write_json(out / MANIFEST_NAME, manifest)
    o = manifest["oracles"]
    print(
        f"wrote {args.n} cubes ({spec.height}x{spec.width}x{spec.bands}) to {out}; "
        f"single-band acc {o['best_single_band_accuracy']:.3f}, "
        f"nearest-signature acc {o['nearest_signature_accuracy']:.3f}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest = _load_manifest(args.data)
    cubes = _load_split(args.data, manifest, "train")
    model_cfg = _build_model_config(cfg, cubes[0].bands)
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))

    out = Path(args.out)
    echo = {
        "schema_version": SCHEMA_VERSION,
        "command": "train",
        "data": str(args.data),
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
    }
    _write_json(out / "config.json", echo)
    result = train(cubes, model_cfg, train_cfg, out_dir=out)
    last = result.history[-1]
    wall = sum(h["wall_s"] for h in result.history)
    print(
        f"trained {train_cfg.epochs} epochs on {len(cubes)} cubes in {wall:.1f}s; "
        f"final loss {last['total']:.4f} (dice {last['dice']:.4f}, ce {last['ce']:.4f}); "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def _predict_cube(model, cube) -> np.ndarray:
    with no_grad():
        logits = model(Tensor(cube.data[None]))
    return predict_mask(logits)[0]


def _eval_reports(model, cubes, oracle: bool):
    reports = []
    for cube in cubes:
        if cube.mask is None:
            raise DataError("eval cubes need ground-truth masks")
        pred = cube.mask if oracle else _predict_cube(model, cube)
        reports.append(metrics_mod.evaluate_pair(pred, cube.mask))
    return reports


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def cmd_eval(args) -> int:
    if not args.oracle and not args.checkpoint:
        raise ConfigError("need --checkpoint unless --oracle is set")
    manifest = _load_manifest(args.data)
    cubes = _load_split(args.data, manifest, args.split)
    model = None if args.oracle else load_checkpoint(args.checkpoint)
    reports = _eval_reports(model, cubes, args.oracle)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_image.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "dsc", "hausdorff", "specificity", "sensitivity"])
        for i, r in enumerate(reports):
            writer.writerow([i, _fmt(r.dsc), _fmt(r.hausdorff),
                             _fmt(r.specificity), _fmt(r.sensitivity)])
    agg = metrics_mod.aggregate_reports(reports)
    _write_json(out / "report.json", {
        "schema_version": SCHEMA_VERSION,
        "command": "eval",
        "split": args.split,
        "oracle": bool(args.oracle),
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
        "aggregate": agg,
    })
    hd = "n/a" if agg["hausdorff"] is None else f"{agg['hausdorff']:.2f}"
    print(f"eval {args.split} n={agg['n']}: DSC {agg['dsc']:.4f}, HD {hd}")
    return 0


def cmd_infer(args) -> int:
    from PIL import Image

    model = load_checkpoint(args.checkpoint)
    cube = data_mod.read_cube(args.cube)
    pred = _predict_cube(model, cube)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "mask.npy", pred.astype(np.uint8))
    Image.fromarray((pred * 255).astype(np.uint8), mode="L").save(out / "mask.png")
    if args.overlay:
        gray = cube.data.mean(axis=0)
        lo, hi = np.percentile(gray, (1, 99))
        gray = np.clip((gray - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
        rgb = np.repeat((gray * 255.0)[..., None], 3, axis=2)
        # foreground red at 50% alpha
        rgb[pred == 1] = 0.5 * rgb[pred == 1] + 0.5 * np.array([255.0, 0.0, 0.0])
        Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(out / "overlay.png")
    _write_json(out / "config.json", {
        "schema_version": SCHEMA_VERSION,
        "command": "infer",
        "checkpoint": str(args.checkpoint),
        "cube": str(args.cube),
        "overlay": bool(args.overlay),
    })
    print(f"inferred mask ({int(pred.sum())} fg pixels) to {out}")
    return 0


def _median_or_none(values):
    usable = [v for v in values if v is not None]
    return statistics.median(usable) if usable else None


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    manifest = _load_manifest(args.data)
    train_cubes = _load_split(args.data, manifest, "train")
    val_cubes = _load_split(args.data, manifest, "val")
    bands = train_cubes[0].bands

    insertion_sets = [s.strip() for s in args.insertions.split(";" if ";" in args.insertions else ",")]
    insertion_sets = [s for s in insertion_sets if s]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not insertion_sets or not seeds:
        raise ConfigError("need at least one insertion set and one seed")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {
        "schema_version": SCHEMA_VERSION,
        "command": "ablate",
        "data": str(args.data),
        "insertions": insertion_sets,
        "seeds": seeds,
        "model": cfg.get("model", {}),
        "train": cfg.get("train", {}),
    }
    _write_json(out / "config.json", echo)

    run_rows = []
    table_rows = []
    for label in insertion_sets:
        stages = _parse_insertion(label)
        model_d = _deep_merge(cfg.get("model", {}),
                              {"insertion": stages, "enable_spectral": bool(stages)})
        per_seed = {"dsc": [], "hausdorff": [], "specificity": [], "sensitivity": []}
        for seed in seeds:
            run_cfg = _deep_merge(cfg, {"model": model_d, "train": {"seed": seed}})
            model_cfg = _build_model_config(run_cfg, bands)
            train_cfg = TrainConfig.from_dict(run_cfg.get("train", {}))
            run_dir = out / "runs" / f"{label.replace(',', '+')}_seed{seed}"
            t0 = time.perf_counter()
            result = train(train_cubes, model_cfg, train_cfg, out_dir=run_dir)
            wall = time.perf_counter() - t0
            agg = metrics_mod.aggregate_reports(
                _eval_reports(result.model, val_cubes, oracle=False)
            )
            run_rows.append({
                "insertion": label, "seed": seed,
                "dsc": agg["dsc"], "hausdorff": agg["hausdorff"],
                "specificity": agg["specificity"], "sensitivity": agg["sensitivity"],
                "train_s": round(wall, 2),
            })
            for key in per_seed:
                per_seed[key].append(agg[key])
            print(f"  [{label} seed {seed}] val DSC {agg['dsc']:.4f} ({wall:.0f}s)")
        table_rows.append({
            "insertion": label,
            "dsc": _median_or_none(per_seed["dsc"]),
            "hausdorff": _median_or_none(per_seed["hausdorff"]),
            "specificity": _median_or_none(per_seed["specificity"]),
            "sensitivity": _median_or_none(per_seed["sensitivity"]),
        })

    with open(out / "runs.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["insertion", "seed", "dsc", "hausdorff",
                         "specificity", "sensitivity", "train_s"])
        for r in run_rows:
            writer.writerow([r["insertion"], r["seed"], _fmt(r["dsc"]), _fmt(r["hausdorff"]),
                             _fmt(r["specificity"]), _fmt(r["sensitivity"]), r["train_s"]])
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["insertion", "dsc", "hausdorff", "specificity", "sensitivity"])
        for r in table_rows:
            writer.writerow([r["insertion"], _fmt(r["dsc"]), _fmt(r["hausdorff"]),
                             _fmt(r["specificity"]), _fmt(r["sensitivity"])])
    best = max(table_rows, key=lambda r: r["dsc"])
    print(f"ablation table written to {out / 'ablation.csv'}; "
          f"best insertion {best['insertion']} (DSC {best['dsc']:.4f})")
    return 0


def cmd_bench_scan(args) -> int:
    lengths = [int(v) for v in args.L.split(",") if v.strip()]
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    runners = {"sequential": scan_sequential, "parallel": scan_parallel}
    for v in variants:
        if v not in runners:
            raise ConfigError(f"unknown scan variant {v!r} (choose from {sorted(runners)})")
    if not lengths or any(n < 1 for n in lengths):
        raise ConfigError("need positive sequence lengths")

    rng = np.random.default_rng(args.seed)
    rows = []
    for L in lengths:
        a_bar = Tensor(rng.uniform(0.5, 0.95, size=(args.D, args.N)).astype(np.float32))
        b_bar = Tensor(rng.uniform(-0.5, 0.5, size=(args.D, args.N)).astype(np.float32))
        c = Tensor(rng.uniform(-0.5, 0.5, size=(args.D, args.N)).astype(np.float32))
        d = DiscreteSsm(A_bar=a_bar, B_bar=b_bar, C=c)
        x = Tensor(rng.standard_normal((args.batch, L, args.D)).astype(np.float32))
        for variant in variants:
            fn = runners[variant]
            with no_grad():
                fn(d, x)  # warmup
                walls = []
                for _ in range(args.repeats):
                    t0 = time.perf_counter_ns()
                    fn(d, x)
                    walls.append(time.perf_counter_ns() - t0)
            wall_ns = int(min(walls))
            rows.append({
                "L": L, "D": args.D, "N": args.N, "variant": variant,
                "wall_ns": wall_ns,
                "tokens_per_s": args.batch * L / (wall_ns * 1e-9),
            })

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench_scan.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["L", "D", "N", "variant", "wall_ns", "tokens_per_s"])
        writer.writeheader()
        writer.writerows(rows)
    _write_json(out / "config.json", {
        "schema_version": SCHEMA_VERSION, "command": "bench-scan",
        "L": lengths, "D": args.D, "N": args.N, "batch": args.batch,
        "variants": variants, "repeats": args.repeats, "seed": args.seed,
    })
    for r in rows:
        print(f"  L={r['L']:>6} {r['variant']:<10} {r['wall_ns']/1e6:9.3f} ms "
              f"{r['tokens_per_s']:12.0f} tokens/s")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not (args.loss or args.ablation or args.signatures):
        raise ConfigError("nothing to plot: give --loss, --ablation or --signatures")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if args.loss:
        with open(args.loss, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise DataError(f"{args.loss}: empty CSV")
        epochs = [int(r["epoch"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ("total", "dice", "ce"):
            ax.plot(epochs, [float(r[key]) for r in rows], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss.png", dpi=120)
        plt.close(fig)
        written.append("loss.png")

    if args.ablation:
        with open(args.ablation, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise DataError(f"{args.ablation}: empty CSV")
        labels = [r["insertion"] for r in rows]
        dscs = [float(r["dsc"]) if r["dsc"] else np.nan for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(labels, dscs)
        ax.set_xlabel("insertion")
        ax.set_ylabel("val DSC (median)")
        fig.tight_layout()
        fig.savefig(out / "ablation.png", dpi=120)
        plt.close(fig)
        written.append("ablation.png")

    if args.signatures:
        doc = _read_json(args.signatures, "data")
        spec_d = doc.get("spec", doc)  # accept a manifest or a bare spec
        spec = data_mod.SyntheticSpec.from_json(spec_d)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(spec.wavelengths, spec.signatures[0], label="background")
        ax.plot(spec.wavelengths, spec.signatures[1], label="foreground")
        ax.set_xlabel("wavelength (nm)")
        ax.set_ylabel("reflectance")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "signatures.png", dpi=120)
        plt.close(fig)
        written.append("signatures.png")

    print(f"wrote {', '.join(written)} to {out}")
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spsc",
        description="Dual-stream state-space segmentation for hyperspectral cubes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--preset", choices=("separable", "spectral-only"),
                   help="built-in generator recipe")
    p.add_argument("--spec", help="JSON file with a full generator spec")
    p.add_argument("--n", type=int, default=32, help="number of cubes")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--bands", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def add_train_flags(p):
        p.add_argument("--config", help="run config JSON (flags override it)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--augment", action=argparse.BooleanOptionalAction)
        p.add_argument("--scan-mode", dest="scan_mode",
                       choices=("unidirectional", "circular", "bidirectional", "identity"))
        p.add_argument("--embed-dim", dest="embed_dim", type=int)
        p.add_argument("--spectral-state", dest="spectral_state", type=int)
        p.add_argument("--spatial-state", dest="spatial_state", type=int)
        p.add_argument("--base-channels", dest="base_channels", type=int)
        p.add_argument("--vss-per-stage", dest="vss_per_stage", type=int)
        p.add_argument("--patch-size", dest="patch_size", type=int)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--insertion", help="comma list of stages, or 'none'/'all'")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (pipeline sanity)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a mask for one cube")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--overlay", action="store_true", help="write overlay.png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train/eval a grid of insertion sets")
    p.add_argument("--data", required=True)
    p.add_argument("--insertions", default="none,L1,L2,L3,L4,all",
                   help="comma list; each entry 'none', 'all' or stages joined with '+'")
    p.add_argument("--seeds", default="0,1,2", help="comma list of training seeds")
    p.add_argument("--out", required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-scan", help="time scan variants over sequence lengths")
    p.add_argument("--L", default="64,256,1024", help="comma list of sequence lengths")
    p.add_argument("--D", type=int, default=8)
    p.add_argument("--N", type=int, default=8)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--variants", default="sequential,parallel")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser("plot", help="render PNGs from numeric artifacts (read-only)")
    p.add_argument("--loss", help="loss.csv from train")
    p.add_argument("--ablation", help="ablation.csv from ablate")
    p.add_argument("--signatures", help="manifest.json or generator spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        # config files are mapped to ConfigError before they can get here, so
        # anything left is a missing data artifact
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except SpscError as e:  # pragma: no cover - safety net
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

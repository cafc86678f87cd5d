"""Command line entry point: simulate | train | despeckle | eval.

Every run resolves its options (flags override a ``--config`` JSON file,
which overrides built-in defaults) and writes the resolved configuration
next to its outputs, so any run can be replayed exactly with
``--config <that file>``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoints import load_checkpoint, save_checkpoint
from .cyclespin import CycleSpinPlan, despeckle_cs
from .diffusion import TrainConfig, make_schedule, train
from .images import load_image, save_image
from .metrics import RegionSpec, enl, psnr, ssim
from .predictor import PredictorConfig, as_noise_fn, init_params
from .speckle import ImagePair, SpeckleParams, make_dataset

_DEFAULTS: dict[str, dict] = {
    "simulate": {
        "images": None,
        "out": None,
        "looks": 1.0,
        "patch": 32,
        "count": 100,
        "seed": 0,
    },
    "train": {
        "data": None,
        "out": None,
        "steps": 3000,
        "batch": 4,
        "lr": 3e-4,
        "T": 100,
        "beta_start": None,
        "beta_end": None,
        "seed": 0,
        "checkpoint_interval": 1000,
        "base_channels": 32,
        "channel_mults": "1,2,4",
        "blocks": 2,
        "time_dim": 128,
        "attention": "",
    },
    "despeckle": {
        "images": None,
        "out": None,
        "checkpoint": None,
        "shifts": "0,0",
        "seed": 0,
        "resize": False,
    },
    "eval": {
        "clean": None,
        "test": None,
        "out": None,
        "enl_region": [],
        "seed": 0,
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specklediff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write paired clean/speckled patches")
    p.add_argument("--images", help="directory of 8-bit grayscale source images")
    p.add_argument("--out", help="output directory")
    p.add_argument("--looks", type=float, help="number of looks L (default 1)")
    p.add_argument("--patch", type=int, help="patch size in pixels")
    p.add_argument("--count", type=int, help="number of pairs")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON config supplying defaults")

    p = sub.add_parser("train", help="train the noise predictor on a simulated dataset")
    p.add_argument("--data", help="dataset directory produced by 'simulate'")
    p.add_argument("--out", help="output directory")
    p.add_argument("--steps", type=int, help="optimizer iterations")
    p.add_argument("--batch", type=int, help="batch size")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--T", type=int, dest="T", help="diffusion steps")
    p.add_argument("--beta-start", type=float, dest="beta_start")
    p.add_argument("--beta-end", type=float, dest="beta_end")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval")
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--channel-mults", dest="channel_mults", help="e.g. '1,2,4'")
    p.add_argument("--blocks", type=int, help="residual blocks per level")
    p.add_argument("--time-dim", type=int, dest="time_dim")
    p.add_argument("--attention", help="attention feature-map sizes, e.g. '8' (empty = coarsest)")
    p.add_argument("--config", help="JSON config supplying defaults")

    p = sub.add_parser("despeckle", help="run the reverse chain on speckled images")
    p.add_argument("--images", nargs="+", help="speckled image files")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="trained checkpoint file")
    p.add_argument("--shifts", help="cycle-spin shifts 'u1,v1;u2,v2;...'")
    p.add_argument("--seed", type=int)
    p.add_argument("--resize", action="store_true", default=None,
                   help="resize inputs to the model's native size and back")
    p.add_argument("--config", help="JSON config supplying defaults")

    p = sub.add_parser("eval", help="metric report of test images against references")
    p.add_argument("--clean", help="directory of reference images")
    p.add_argument("--test", help="directory of images to score")
    p.add_argument("--out", help="report file (line-delimited JSON)")
    p.add_argument("--enl-region", action="append", dest="enl_region",
                   help="named region 'name=top,left,height,width'; repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON config supplying defaults")
    return parser


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge CLI flags over config-file values over built-in defaults."""
    resolved = dict(_DEFAULTS[command])
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        file_cmd = loaded.pop("command", command)
        if file_cmd != command:
            raise ValueError(f"config file is for {file_cmd!r}, not {command!r}")
        unknown = set(loaded) - set(resolved)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    for key in resolved:
        val = getattr(args, key, None)
        if val is not None and val != []:
            resolved[key] = val
    missing = [k for k, v in resolved.items() if v is None and k in _REQUIRED[command]]
    if missing:
        raise ValueError(f"{command}: missing required options: {', '.join('--' + m for m in missing)}")
    return resolved


_REQUIRED = {
    "simulate": ("images", "out"),
    "train": ("data", "out"),
    "despeckle": ("images", "out", "checkpoint"),
    "eval": ("clean", "test", "out"),
}


def _write_config(out_dir: Path, command: str, resolved: dict) -> None:
    record = {"command": command, **resolved}
    with open(out_dir / f"{command}-config.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if str(v).strip())


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".pgm"))
    if not files:
        raise FileNotFoundError(f"no .png/.pgm images in {directory}")
    return files


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(resolved: dict) -> int:
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    sources = [load_image(p) for p in _list_images(Path(resolved["images"]))]
    params = SpeckleParams(looks=float(resolved["looks"]), seed=int(resolved["seed"]))
    pairs = make_dataset(
        sources, params, int(resolved["patch"]), int(resolved["count"]), int(resolved["seed"])
    )
    entries = []
    for i, pair in enumerate(pairs):
        clean_name = f"clean_{i:05d}.png"
        speckled_name = f"speckled_{i:05d}.png"
        save_image(pair.clean, out / clean_name)
        save_image(pair.speckled, out / speckled_name)
        entries.append(
            {"index": i, "clean": clean_name, "speckled": speckled_name, "rng_key": list(pair.rng_key)}
        )
    manifest = {
        "seed": int(resolved["seed"]),
        "looks": float(resolved["looks"]),
        "patch_size": int(resolved["patch"]),
        "count": int(resolved["count"]),
        "pairs": entries,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    _write_config(out, "simulate", resolved)
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def _load_dataset(data_dir: Path) -> tuple[list[ImagePair], int]:
    with open(data_dir / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    pairs = []
    for entry in manifest["pairs"]:
        pairs.append(
            ImagePair(
                clean=load_image(data_dir / entry["clean"]),
                speckled=load_image(data_dir / entry["speckled"]),
                looks=manifest["looks"],
                rng_key=tuple(entry["rng_key"]),
            )
        )
    return pairs, int(manifest["patch_size"])


def _cmd_train(resolved: dict) -> int:
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    pairs, patch_size = _load_dataset(Path(resolved["data"]))
    attention = _int_tuple(resolved["attention"]) or None
    config = PredictorConfig(
        input_size=patch_size,
        base_channels=int(resolved["base_channels"]),
        channel_mults=_int_tuple(resolved["channel_mults"]),
        blocks_per_level=int(resolved["blocks"]),
        attention_resolutions=attention,
        time_embed_dim=int(resolved["time_dim"]),
    )
    train_config = TrainConfig(
        iterations=int(resolved["steps"]),
        batch_size=int(resolved["batch"]),
        learning_rate=float(resolved["lr"]),
        T=int(resolved["T"]),
        beta_start=resolved["beta_start"],
        beta_end=resolved["beta_end"],
        seed=int(resolved["seed"]),
        checkpoint_interval=int(resolved["checkpoint_interval"]),
    )
    schedule_info = {
        "T": train_config.T,
        "beta_start": train_config.beta_start,
        "beta_end": train_config.beta_end,
    }

    def checkpoint_fn(iteration, params, _state):
        save_checkpoint(out / f"checkpoint_{iteration:06d}.ckpt", params, config, schedule_info, iteration)

    params = init_params(config, seed=train_config.seed)
    result = train(
        pairs, params, config, train_config,
        log_path=out / "train-log.jsonl", checkpoint_fn=checkpoint_fn,
    )
    save_checkpoint(out / "checkpoint.ckpt", result.params, config, schedule_info, train_config.iterations)
    _write_config(out, "train", resolved)
    print(f"trained {train_config.iterations} steps; final loss {result.losses[-1]:.4f}")
    return 0


def _cmd_despeckle(resolved: dict) -> int:
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    params, config, schedule_info, _ = load_checkpoint(resolved["checkpoint"])
    sched = make_schedule(
        int(schedule_info["T"]), schedule_info.get("beta_start"), schedule_info.get("beta_end")
    )
    plan = CycleSpinPlan.parse(resolved["shifts"])
    fn = as_noise_fn(params, config)
    native = config.input_size
    for idx, name in enumerate(resolved["images"]):
        img = load_image(name)
        orig_shape = img.shape
        if img.shape != (native, native):
            if not resolved["resize"]:
                raise ValueError(
                    f"{name}: size {img.shape} does not match the model's native "
                    f"{native}x{native}; pass --resize to allow resampling"
                )
            img = _resize(img, (native, native))
        seed = int(np.random.SeedSequence(int(resolved["seed"]), spawn_key=(idx,)).generate_state(1)[0])
        restored = despeckle_cs(img, plan, fn, sched, seed=seed)
        if restored.shape != orig_shape:
            restored = _resize(restored, orig_shape)
        save_image(restored, out / (Path(name).stem + ".png"))
    _write_config(out, "despeckle", resolved)
    print(f"despeckled {len(resolved['images'])} images to {out}")
    return 0


def _resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    pil = Image.fromarray(np.clip(img, 0.0, 1.0).astype(np.float32), mode="F")
    resized = pil.resize((shape[1], shape[0]), resample=Image.BILINEAR)
    return np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0)


def _parse_regions(specs: list[str]) -> dict[str, RegionSpec]:
    regions = {}
    for spec in specs:
        name, _, rest = spec.partition("=")
        vals = [int(v) for v in rest.split(",")]
        if not name or len(vals) != 4:
            raise ValueError(f"bad --enl-region {spec!r}, expected 'name=top,left,height,width'")
        regions[name] = RegionSpec(*vals)
    return regions


def _cmd_eval(resolved: dict) -> int:
    out = Path(resolved["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    regions = _parse_regions(list(resolved["enl_region"]))
    clean_dir = Path(resolved["clean"])
    records = []
    for test_path in _list_images(Path(resolved["test"])):
        ref_path = clean_dir / test_path.name
        reference = load_image(ref_path)
        test = load_image(test_path)
        rec = {
            "image": test_path.name,
            "psnr_db": psnr(reference, test),
            "ssim": ssim(reference, test),
        }
        if regions:
            rec["enl"] = {name: enl(test, region) for name, region in regions.items()}
        records.append(rec)
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    _write_config(out.parent, "eval", resolved)
    print(f"wrote {len(records)} records to {out}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "despeckle": _cmd_despeckle,
    "eval": _cmd_eval,
}


def run_command(argv: list[str]) -> int:
    """Parse and execute one subcommand; returns the process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    try:
        resolved = _resolve(args.command, args)
        return _COMMANDS[args.command](resolved)
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()

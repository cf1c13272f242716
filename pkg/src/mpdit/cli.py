"""Command line: ``mpdit {train,sample,probe,ema-fit}``."""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .config import LADDER_STEPS, config_from_text, default_train_config, load_config, preset, save_config
from .diffusion import sample_cfg
from .ema import SnapshotStore, gamma_from_sigma_rel, posthoc_fit, posthoc_reconstruct
from .probe import probe_magnitudes, write_probe_csv
from .train import Trainer, load_model, save_checkpoint


class CliError(Exception):
    pass


def resolve_config(spec: str):
    path = Path(spec)
    if path.is_file():
        return load_config(path)
    if spec.upper() in LADDER_STEPS:
        cfg = preset(spec)
        return cfg, default_train_config(cfg)
    raise CliError(f"--config {spec!r} is neither a readable file nor one of {'/'.join(LADDER_STEPS)}")


# image output


def to_uint8(images: np.ndarray, lo: float = -2.0, hi: float = 2.0) -> np.ndarray:
    return np.clip(np.round((images - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def image_grid(images: np.ndarray, pad: int = 1) -> np.ndarray:
    """``[N, C, H, W]`` -> ``[rows*H', cols*W', C]`` tiled with ``pad`` pixel gutters."""
    n, c, h, w = images.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad, c), dtype=images.dtype)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        y0, x0 = pad + r * (h + pad), pad + q * (w + pad)
        grid[y0 : y0 + h, x0 : x0 + w] = np.moveaxis(img, 0, -1)
    return grid


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    """Write ``[H, W, C]`` uint8 as PNG (needs Pillow) or binary PGM/PPM."""
    path = Path(path)
    if pixels.shape[-1] not in (1, 3):
        pixels = pixels[..., :1]
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise CliError("PNG output needs Pillow; use a .pgm path instead") from exc
        mode = "L" if pixels.shape[-1] == 1 else "RGB"
        Image.fromarray(pixels[..., 0] if mode == "L" else pixels, mode=mode).save(path)
        return
    magic = b"P5" if pixels.shape[-1] == 1 else b"P6"
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    magic, w, h, maxval, body = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    c = 1 if magic == b"P5" else 3
    if maxval != 255 or len(body) != w * h * c:
        raise ValueError(f"{path}: unsupported or truncated image")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)


# subcommands


def cmd_train(args) -> int:
    model_cfg, train_cfg = resolve_config(args.config)
    overrides = {
        k: v
        for k, v in dict(
            steps=args.steps, seed=args.seed, batch_size=args.batch_size, lr=args.lr, dtype=args.dtype,
            snapshot_interval=args.snapshot_interval, checkpoint_interval=args.checkpoint_interval,
        ).items()
        if v is not None
    }
    train_cfg = train_cfg.replace(**overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.txt", model_cfg, train_cfg)
    trainer = Trainer(model_cfg, train_cfg, snapshot_dir=out / "snapshots")
    save_checkpoint(out / "init.npz", model_cfg, trainer.model.state_dict(), train_cfg)
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "lr"])
        for _ in range(train_cfg.steps):
            loss, lr = trainer.training_step()
            writer.writerow([trainer.step, repr(loss), repr(lr)])
            if args.log_every and trainer.step % args.log_every == 0:
                print(f"step {trainer.step} loss {loss:.5f} lr {lr:.3g}", file=sys.stderr)
            ci = train_cfg.checkpoint_interval
            if ci and trainer.step % ci == 0:
                save_checkpoint(out / f"checkpoint-{trainer.step:07d}.npz", model_cfg, trainer.model.state_dict(), train_cfg)
    save_checkpoint(out / "checkpoint.npz", model_cfg, trainer.model.state_dict(), train_cfg)
    for sigma, ema in zip(train_cfg.ema_sigma_rels, trainer.emas):
        if ema.params:
            save_checkpoint(out / f"ema-{sigma:.3f}.npz", model_cfg, ema.params, train_cfg)
    return 0


def cmd_sample(args) -> int:
    model = load_model(args.checkpoint)
    images = sample_cfg(model, args.label, args.guidance, steps=args.steps, seed=args.seed, num_images=args.num)
    write_image(args.out, image_grid(to_uint8(images)))
    return 0


def cmd_probe(args) -> int:
    model = load_model(args.checkpoint)
    records = probe_magnitudes(model, args.samples, args.seed, verbose=args.verbose)
    write_probe_csv(records, args.out)
    return 0


def cmd_ema_fit(args) -> int:
    store = SnapshotStore.load(args.snapshots)
    if not len(store):
        raise CliError(f"{args.snapshots} holds no snapshots")
    if "config" not in store.meta:
        raise CliError(f"{args.snapshots} layout has no model config")
    cfg, train_cfg = config_from_text(store.meta["config"])
    gamma = gamma_from_sigma_rel(args.sigma_rel)
    weights = posthoc_fit(store, gamma, args.step)
    params = posthoc_reconstruct(store, weights)
    save_checkpoint(args.out, cfg, params, train_cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpdit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, metavar="{train,sample,probe,ema-fit}")

    t = sub.add_parser("train", help="train on synthetic data")
    t.add_argument("--config", required=True, help="config file or preset A-E")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--snapshot-interval", type=int)
    t.add_argument("--checkpoint-interval", type=int)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write a grid of guided samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--label", type=int, required=True)
    s.add_argument("--guidance", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=None, help="sampler steps (default: full schedule)")
    s.add_argument("--num", type=int, default=16, help="number of images in the grid")
    s.add_argument("--out", required=True, help=".pgm/.ppm, or .png with Pillow")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("probe", help="per-block activation magnitudes as CSV")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--samples", type=int, default=256)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--verbose", action="store_true", help="add branch-output columns")
    r.set_defaults(func=cmd_probe)

    e = sub.add_parser("ema-fit", help="post-hoc EMA reconstruction")
    e.add_argument("--snapshots", required=True)
    e.add_argument("--sigma-rel", type=float, required=True)
    e.add_argument("--step", type=int, default=None, help="target step (default: last snapshot)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_ema_fit)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0; usage errors exit 2
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        print(f"mpdit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

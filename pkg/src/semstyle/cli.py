"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage error, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from semstyle import __version__
from semstyle.adain import class_stats_table
from semstyle.diffusion import analytic_denoiser, invert, make_schedule, toy_attention_denoiser
from semstyle.errors import SemstyleError
from semstyle.evalkit import PALETTES, frechet_distance_sets, gen_scene, per_class_stat_error, psnr
from semstyle.fileio import (
    ImageIOError,
    dumps_json,
    load_feature,
    load_mask,
    read_json,
    save_image,
    save_mask,
    save_output,
    sha256_file,
    write_json,
    write_tensor,
)
from semstyle.pipeline import TransferConfig, transfer
from semstyle.selftest import run_selftest
from semstyle.tensor_core import resize_mask_nearest

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
THREADS_ENV = "SEMSTYLE_THREADS"

MODE_FLAGS = {
    "adain": "global-adain-diffusion",
    "cross": "cross-image-attention",
    "cacti": "cacti",
    "cactif": "cactif",
}
FALLBACK_FLAGS = {"global": "global-style-stats", "identity": "identity"}
ENGINE_DEFAULTS = {"model_seed": 0, "site_sizes": "16,32"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_transfer_flags(p: argparse.ArgumentParser) -> None:
    # defaults are None so values from --config are only overridden by explicit flags
    p.add_argument("--mode", choices=sorted(MODE_FLAGS))
    p.add_argument("--p", type=float, help="filtered fraction for cactif (default 0.25)")
    p.add_argument("--steps", type=int, help="diffusion steps T (default 50)")
    p.add_argument("--skip", type=int, help="skipped initial steps (default 30)")
    p.add_argument("--seed", type=int)
    p.add_argument("--sites", help="comma-separated attention site names (default: all)")
    p.add_argument("--fallback", choices=sorted(FALLBACK_FLAGS))
    p.add_argument("--query-source", choices=["output-stream", "content-replay"])
    p.add_argument("--adain-scope", choices=["class-wise", "global"])
    p.add_argument("--model-seed", type=int, help="seed of the toy denoiser weights (default 0)")
    p.add_argument("--site-sizes", help="square site resolutions of the toy denoiser (default 16,32)")
    p.add_argument("--config", help="JSON config or a previous run manifest to start from")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semstyle", description="Class-aware diffusion style transfer engine.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scenes", help="write procedural scenes with label masks")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--palette", choices=sorted(PALETTES), default="day")
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--objects", type=int, default=4)

    i = sub.add_parser("invert", help="invert an image and store its trajectory")
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--steps", type=int, default=50)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--denoiser", choices=["toy", "analytic"], default="toy")
    i.add_argument("--model-seed", type=int, default=0)
    i.add_argument("--site-sizes", default="16,32")

    t = sub.add_parser("transfer", help="stylise one content image")
    t.add_argument("--content")
    t.add_argument("--style")
    t.add_argument("--content-mask")
    t.add_argument("--style-mask")
    t.add_argument("--out")
    t.add_argument("--manifest")
    _add_transfer_flags(t)

    b = sub.add_parser("batch", help="stylise a directory of content images with one style reference")
    b.add_argument("--content-dir", required=True, help="holds NAME.png and NAME_mask.png pairs")
    b.add_argument("--style", required=True)
    b.add_argument("--style-mask")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--workers", type=int)
    b.add_argument("--resume", action="store_true", help="keep outputs that already exist")
    _add_transfer_flags(b)

    m = sub.add_parser("metrics", help="report quality metrics as JSON")
    m.add_argument("--generated", required=True, help="directory or image of generated outputs")
    m.add_argument("--content", help="directory of content images (paired by file name)")
    m.add_argument("--style", help="style reference image for per-class statistic error")
    m.add_argument("--style-mask")
    m.add_argument("--reference", help="directory of target-domain images for the Fréchet distance")
    m.add_argument("--out", help="write JSON here instead of stdout")

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.add_argument("--seed", type=int, default=0)
    return parser


# --------------------------------------------------------------------------- helpers


def _make_denoiser(kind: str, model_seed: int, site_sizes: str):
    if kind == "analytic":
        return analytic_denoiser()
    return toy_attention_denoiser(model_seed, sites=_int_list(site_sizes))


def _file_record(path) -> dict:
    return {"path": str(path), "sha256": sha256_file(path)}


def _load_config_source(path) -> dict:
    data = read_json(path)
    return data.get("config", data) if isinstance(data, dict) else {}


def _resolve_config(args) -> tuple[TransferConfig, dict]:
    base = _load_config_source(args.config) if args.config else {}
    base = dict(base)
    engine = base.pop("engine", {})
    overrides = {
        "mode": MODE_FLAGS[args.mode] if args.mode else None,
        "p": args.p,
        "T": args.steps,
        "skip": args.skip,
        "seed": args.seed,
        "sites": [s for s in args.sites.split(",") if s] if args.sites else None,
        "fallback": FALLBACK_FLAGS[args.fallback] if args.fallback else None,
        "query_source": args.query_source,
        "adain_scope": args.adain_scope,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TransferConfig.from_dict(base)
    engine = {**ENGINE_DEFAULTS, **engine}
    if args.model_seed is not None:
        engine["model_seed"] = args.model_seed
    if args.site_sizes is not None:
        engine["site_sizes"] = args.site_sizes
    return cfg, engine


def _config_echo(cfg: TransferConfig, engine: dict) -> dict:
    d = cfg.to_dict()
    d["engine"] = engine
    return d


def _run_one(content_path, style_img, style_mask, mask_path, cfg, denoiser):
    content = load_feature(content_path)
    content_mask = load_mask(mask_path) if mask_path else None
    out = transfer(content, style_img, content_mask, style_mask, cfg, denoiser)
    metrics = {"psnr_vs_content": psnr(out, content)}
    if content_mask is not None and style_mask is not None:
        cm = resize_mask_nearest(content_mask, *content.shape[1:])
        table = class_stats_table(content, cm, style_img, resize_mask_nearest(style_mask, *style_img.shape[1:]))
        try:
            metrics["per_class_stat_error"] = per_class_stat_error(out, table, cm)
        except SemstyleError:
            metrics["per_class_stat_error"] = None
    return out, metrics


# --------------------------------------------------------------------------- commands


def cmd_gen_scenes(args) -> int:
    out = Path(args.out)
    for k in range(args.count):
        img, mask = gen_scene(args.seed + k, args.palette, args.height, args.width, args.objects)
        save_image(out / f"scene_{k:03d}.png", img)
        save_mask(out / f"scene_{k:03d}_mask.png", mask)
    print(f"wrote {args.count} scene(s) to {out}")
    return EXIT_OK


def cmd_invert(args) -> int:
    out = Path(args.out)
    z0 = load_feature(args.image)
    d = _make_denoiser(args.denoiser, args.model_seed, args.site_sizes)
    sched = make_schedule(args.steps, 0)
    traj = invert(z0, d, sched, args.seed)
    write_tensor(out / "latents.fmap", np.stack(traj.latents))
    write_tensor(out / "residuals.fmap", np.stack([traj.noise_residuals[t] for t in range(1, sched.T + 1)]))
    manifest = {
        "command": "invert",
        "engine_version": __version__,
        "seed": args.seed,
        "config": {"steps": args.steps, "denoiser": args.denoiser, "model_seed": args.model_seed,
                   "site_sizes": args.site_sizes},
        "inputs": {"image": _file_record(args.image)},
        "outputs": {name: _file_record(out / name) for name in ("latents.fmap", "residuals.fmap")},
    }
    write_json(out / "manifest.json", manifest)
    return EXIT_OK


def cmd_transfer(args) -> int:
    previous = read_json(args.config) if args.config else {}
    prev_inputs = previous.get("inputs", {}) if isinstance(previous, dict) else {}

    def pick(flag, key):
        if flag:
            return flag
        return prev_inputs.get(key, {}).get("path")

    content_path = pick(args.content, "content")
    style_path = pick(args.style, "style")
    content_mask_path = pick(args.content_mask, "content_mask")
    style_mask_path = pick(args.style_mask, "style_mask")
    out_path = args.out or previous.get("outputs", {}).get("image", {}).get("path")
    if not (content_path and style_path and out_path):
        raise UsageError("transfer needs --content, --style and --out (or a manifest providing them)")

    cfg, engine = _resolve_config(args)
    denoiser = _make_denoiser("toy", engine["model_seed"], engine["site_sizes"])
    style_img = load_feature(style_path)
    style_mask = load_mask(style_mask_path) if style_mask_path else None
    out, metrics = _run_one(content_path, style_img, style_mask, content_mask_path, cfg, denoiser)
    save_output(out_path, out)

    inputs = {"content": _file_record(content_path), "style": _file_record(style_path)}
    if content_mask_path:
        inputs["content_mask"] = _file_record(content_mask_path)
    if style_mask_path:
        inputs["style_mask"] = _file_record(style_mask_path)
    manifest = {
        "command": "transfer",
        "engine_version": __version__,
        "seed": cfg.seed,
        "config": _config_echo(cfg, engine),
        "inputs": inputs,
        "outputs": {"image": _file_record(out_path)},
        "metrics": metrics,
    }
    if args.manifest:
        write_json(args.manifest, manifest)
    return EXIT_OK


def _content_pairs(directory: Path) -> list[tuple[Path, Path | None]]:
    if not directory.is_dir():
        raise ImageIOError(f"{directory}: not a directory")
    pairs = []
    for img in sorted(directory.glob("*.png")):
        if img.stem.endswith("_mask"):
            continue
        mask = img.with_name(f"{img.stem}_mask.png")
        pairs.append((img, mask if mask.exists() else None))
    return pairs


def _previous_metrics(path: Path) -> dict:
    """Metrics of an earlier batch run keyed by (output path, sha256)."""
    if not path.exists():
        return {}
    try:
        items = read_json(path).get("items", [])
        return {(it["output"]["path"], it["output"]["sha256"]): it.get("metrics") for it in items}
    except (SemstyleError, KeyError, TypeError, AttributeError):
        return {}


def cmd_batch(args) -> int:
    cfg, engine = _resolve_config(args)
    out_dir = Path(args.out)
    pairs = _content_pairs(Path(args.content_dir))
    style_img = load_feature(args.style)
    style_mask = load_mask(args.style_mask) if args.style_mask else None
    denoiser = _make_denoiser("toy", engine["model_seed"], engine["site_sizes"])
    workers = args.workers or int(os.environ.get(THREADS_ENV, "1"))
    previous = _previous_metrics(out_dir / "manifest.json") if args.resume else {}

    def job(pair):
        img_path, mask_path = pair
        target = out_dir / img_path.name
        if args.resume and target.exists():
            return img_path, target, previous.get((str(target), sha256_file(target)))
        out, metrics = _run_one(img_path, style_img, style_mask, mask_path, cfg, denoiser)
        save_output(target, out)
        return img_path, target, metrics

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, pairs))
    else:
        results = [job(p) for p in pairs]

    items = []
    for (img_path, target, metrics), (_, mask_path) in zip(results, pairs):
        item = {"content": _file_record(img_path), "output": _file_record(target), "metrics": metrics}
        if mask_path is not None:
            item["content_mask"] = _file_record(mask_path)
        items.append(item)
    inputs = {"style": _file_record(args.style)}
    if args.style_mask:
        inputs["style_mask"] = _file_record(args.style_mask)
    manifest = {
        "command": "batch",
        "engine_version": __version__,
        "seed": cfg.seed,
        "config": _config_echo(cfg, engine),
        "inputs": inputs,
        "items": items,
    }
    write_json(out_dir / "manifest.json", manifest)
    print(f"wrote {len(items)} output(s) to {out_dir}")
    return EXIT_OK


def _image_paths(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        return [q for q in sorted(p.glob("*.png")) if not q.stem.endswith("_mask")] + sorted(p.glob("*.fmap"))
    if not p.exists():
        raise ImageIOError(f"{p}: no such file or directory")
    return [p]


def cmd_metrics(args) -> int:
    generated = _image_paths(args.generated)
    images = {p.name: load_feature(p) for p in generated}
    style_img = load_feature(args.style) if args.style else None
    style_mask = load_mask(args.style_mask) if args.style_mask else None
    per_image = []
    for name, img in images.items():
        rec = {"name": name}
        if args.content:
            cpath = Path(args.content) / name
            content = load_feature(cpath)
            rec["psnr_vs_content"] = psnr(img, content)
            mpath = cpath.with_name(f"{cpath.stem}_mask.png")
            if style_img is not None and style_mask is not None and mpath.exists():
                cm = resize_mask_nearest(load_mask(mpath), *img.shape[1:])
                sm = resize_mask_nearest(style_mask, *style_img.shape[1:])
                table = class_stats_table(img, cm, style_img, sm)
                try:
                    rec["per_class_stat_error"] = per_class_stat_error(img, table, cm)
                except SemstyleError:
                    rec["per_class_stat_error"] = None
        per_image.append(rec)

    def mean_of(key):
        vals = [r[key] for r in per_image if r.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    report = {
        "count": len(per_image),
        "per_image": per_image,
        "mean_psnr_vs_content": mean_of("psnr_vs_content"),
        "mean_per_class_stat_error": mean_of("per_class_stat_error"),
        "frechet": None,
    }
    if args.reference:
        refs = [load_feature(p) for p in _image_paths(args.reference)]
        if len(refs) >= 2 and len(images) >= 2:
            report["frechet"] = frechet_distance_sets(list(images.values()), refs)
    if args.out:
        write_json(args.out, report)
    else:
        sys.stdout.write(dumps_json(report))
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest(args.seed)
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if all(ok for _, ok in results) else EXIT_INVALID


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "invert": cmd_invert,
    "transfer": cmd_transfer,
    "batch": cmd_batch,
    "metrics": cmd_metrics,
    "selftest": cmd_selftest,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (ImageIOError, OSError) as exc:
        print(f"semstyle: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SemstyleError, ValueError) as exc:
        print(f"semstyle: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

"""Command line surface: synth, train, eval, match, infer-viewpoint,
export-maps.

Every subcommand is reproducible from its config plus seed; reports embed
the fully resolved config. Exit codes: 0 success, 1 runtime failure,
2 usage error (argparse's own convention).
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import dataio, evaluate, models, trainer
from .geometry import azimuth_to_bin, mean_direction
from .matcher import match_combined

PRESETS = ("paper", "desk")


def _load_config(path: str | None) -> trainer.TrainConfig:
    if path is None:
        path = "desk"
    if path in PRESETS:
        ref = resources.files("spherecorr") / "configs" / f"{path}.toml"
        with resources.as_file(ref) as p:
            return trainer.load_train_config(p)
    return trainer.load_train_config(path)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise trainer.ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key] = value
    return out


def cmd_synth(args) -> int:
    world = dataio.generate_world(
        channels=args.channels,
        seed=args.seed,
        symmetric=args.symmetric,
        keypoint_count=args.keypoints,
    )
    azimuths = 2.0 * np.pi * np.arange(args.views) / args.views
    out = dataio.write_dataset(world, azimuths, args.size, args.size,
                               bins=args.bins, out_dir=args.out)
    print(f"wrote {args.views} views to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    overrides = _parse_overrides(args.override)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.bins is not None:
        overrides["bins"] = str(args.bins)
    if args.ablate:
        overrides["ablate"] = ",".join(args.ablate)
    if overrides:
        config = trainer.apply_overrides(config, overrides)
    records = dataio.load_dataset(args.data)
    result = trainer.fit(config, records, out_dir=args.out, log=print)
    report_path = Path(args.out) / "train_report.json"
    report_path.write_text(json.dumps({
        "config": result.report.config,
        "wall_time": result.report.wall_time,
        "checkpoint": result.report.checkpoint_path,
        "epochs": [vars(e) for e in result.report.epochs],
    }, indent=1, sort_keys=True))
    print(f"final checkpoint: {result.report.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model_cfg, mapper, _proto, epoch = models.load_checkpoint(args.checkpoint)
    records = dataio.load_dataset(args.data)
    kappa = args.kappa
    alpha = args.alpha
    result = evaluate.evaluate_dataset(records, model_cfg, mapper,
                                       kappa=kappa, alpha=alpha,
                                       max_pairs=args.max_pairs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "checkpoint": str(args.checkpoint),
        "checkpoint_epoch": epoch,
        "kappa": kappa,
        "alpha": alpha,
        "reports": {name: rep.to_dict() for name, rep in result.reports.items()},
        "mirror_confusion": {
            name: {"cases": st.cases, "confusions": st.confusions, "rate": st.rate}
            for name, st in result.mirror.items()
        },
    }
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=1,
                                                     sort_keys=True))
    tables = []
    for name in sorted(result.reports):
        tables.append(result.reports[name].format_table())
    table_text = "\n\n".join(tables) + "\n"
    (out_dir / "metrics.txt").write_text(table_text)
    print(table_text, end="")
    return 0


def cmd_match(args) -> int:
    model_cfg, mapper, _proto, _epoch = models.load_checkpoint(args.checkpoint)
    records = {r.image_id: r for r in dataio.load_dataset(args.data)}
    try:
        src = records[args.source]
        tgt = records[args.target]
    except KeyError as exc:
        raise SystemExit(f"error: unknown image id {exc}") from None
    maps = evaluate.compute_sphere_maps(model_cfg, mapper, [src, tgt])
    col, row = (int(v) for v in args.query.split(","))
    p = match_combined((col, row), src.features, tgt.features,
                       maps[src.image_id], maps[tgt.image_id], args.alpha)
    print(f"{src.image_id}[{col},{row}] -> {tgt.image_id}[{p[0]},{p[1]}]")
    return 0


def cmd_infer_viewpoint(args) -> int:
    model_cfg, mapper, _proto, epoch = models.load_checkpoint(args.checkpoint)
    records = dataio.load_dataset(args.data)
    maps = evaluate.compute_sphere_maps(model_cfg, mapper, records)
    flag = "  [untrained checkpoint]" if epoch == 0 else ""
    bins = records[0].bin_count if records else 8
    for rec in records:
        if rec.mask is None or not rec.mask.any():
            raise SystemExit(f"error: {rec.image_id} has an empty mask")
        mu = mean_direction(maps[rec.image_id], rec.mask)
        azimuth = float(np.arctan2(mu[1], mu[0])) % (2.0 * np.pi)
        bin_idx = azimuth_to_bin(azimuth, bins)
        print(f"{rec.image_id}  azimuth {azimuth:7.4f} rad  bin {bin_idx}{flag}")
    return 0


def sphere_map_to_rgb(sphere_map: np.ndarray,
                      mask: np.ndarray | None = None) -> np.ndarray:
    """Fixed affine visualization (s + 1) / 2 per channel, uint8.

    Background pixels (mask zero) come out exactly black.
    """
    rgb = np.floor((np.asarray(sphere_map) + 1.0) / 2.0 * 255.0)
    rgb = np.clip(rgb, 0, 255).astype(np.uint8)
    if mask is not None:
        rgb[~np.asarray(mask).astype(bool)] = 0
    return rgb


def cmd_export_maps(args) -> int:
    from PIL import Image

    model_cfg, mapper, _proto, _epoch = models.load_checkpoint(args.checkpoint)
    records = dataio.load_dataset(args.data)
    maps = evaluate.compute_sphere_maps(model_cfg, mapper, records)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        rgb = sphere_map_to_rgb(maps[rec.image_id],
                                rec.mask if args.mask else None)
        path = out_dir / f"{rec.image_id}.png"
        Image.fromarray(rgb, mode="RGB").save(path)
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spherecorr",
        description="viewpoint-guided spherical maps for keypoint correspondence",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--keypoints", type=int, default=12)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--size", type=int, default=32, help="grid height and width")
    p.add_argument("--bins", type=int, default=8, help="viewpoint bins K")
    p.add_argument("--symmetric", action=argparse.BooleanOptionalAction,
                   default=True, help="make features mirror-symmetric")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the sphere mapper and prototype")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default="desk",
                   help="preset name (paper, desk) or path to a TOML/JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--ablate", action="append", choices=trainer.ABLATABLE,
                   default=[], help="drop a loss term (repeatable)")
    p.add_argument("-o", "--override", action="append", default=[],
                   metavar="KEY=VALUE", help="config override (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute PCK and KAP reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kappa", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--max-pairs", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="match one query pixel across two images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--source", required=True, help="source image id")
    p.add_argument("--target", required=True, help="target image id")
    p.add_argument("--query", required=True, metavar="COL,ROW")
    p.add_argument("--alpha", type=float, default=0.2)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("infer-viewpoint",
                       help="estimate per-image azimuth from the sphere map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_infer_viewpoint)

    p = sub.add_parser("export-maps", help="write sphere maps as RGB images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", action=argparse.BooleanOptionalAction, default=True,
                   help="black out background pixels")
    p.set_defaults(func=cmd_export_maps)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (trainer.ConfigError,) as exc:
        parser.exit(2, f"usage error: {exc}\n")
    except SystemExit:
        raise
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

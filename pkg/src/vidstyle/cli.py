"""Command line: gen-data, train, stylize, long-video, eval, ablate.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen, metrics, net, pipeline
from .codec import CodecError, export_frames, read_ppm, read_vtf, write_vtf
from .config import ConfigError, RunConfig
from .infer import INFER_MODES, Conditions, InferError, long_video, stylize
from .trainer import NumericError

log = logging.getLogger("vidstyle")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _kv(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vidstyle", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="run config JSON (sections: geometry, model, flow, datagen, "
                                    "trainer, metrics, paths, seeds)")
    p.add_argument("--set", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set trainer.ct.lr=0.001 (repeatable)")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="build a filtered CT or SFT dataset")
    g.add_argument("--profile", required=True, help="CT or SFT")
    g.add_argument("--n", type=int, help="number of accepted samples")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="base pretraining and the CT / SFT stages")
    t.add_argument("--stage", default="full", choices=["base", "CT", "SFT", "full"])
    t.add_argument("--lora", choices=list(net.LORA_MODES), help="adapter mode (standard = ablation arm)")
    t.add_argument("--data", help="directory holding CT/ and SFT/ datasets")
    t.add_argument("--out", required=True)

    s = sub.add_parser("stylize", help="stylize one video")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", help="input video (.vtf); omit for t2v")
    s.add_argument("--mode", required=True, choices=INFER_MODES, type=lambda x: x.replace("-", "_"),
                   help="text, style-image, first-frame, t2v or fuse")
    s.add_argument("--style-tag", type=int)
    s.add_argument("--style-image", help=".vtf or .ppm image")
    s.add_argument("--first-frame", help=".vtf or .ppm image")
    s.add_argument("--tags", type=_csv_ints, help="content tag ids (default: tags.json next to input)")
    s.add_argument("--frames", type=int, help="t2v frame count (default: config geometry)")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    lv = sub.add_parser("long-video", help="chain segments via the last generated frame")
    lv.add_argument("--checkpoint", required=True)
    lv.add_argument("--input", nargs="+", required=True,
                    help="segment files, or one long video split with --segment-frames")
    lv.add_argument("--segment-frames", type=int, help="split a single input into segments of this length")
    lv.add_argument("--overlap", type=int, default=1, help="raw frames shared by neighbouring segments")
    lv.add_argument("--style-tag", type=int)
    lv.add_argument("--style-image")
    lv.add_argument("--tags", type=_csv_ints)
    lv.add_argument("--steps", type=int)
    lv.add_argument("--seed", type=int)
    lv.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="metric report over a test dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test", required=True, help="test dataset directory")
    e.add_argument("--modes", default=",".join(pipeline.EVAL_MODES))
    e.add_argument("--limit", type=int, help="evaluate the first N samples only")
    e.add_argument("--steps", type=int)
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="train and compare the ablation arms")
    a.add_argument("--arm", action="append", choices=list(pipeline.ARMS) + ["all"], default=None)
    a.add_argument("--data", help="directory holding CT/ and SFT/ datasets")
    a.add_argument("--test", required=True)
    a.add_argument("--limit", type=int)
    a.add_argument("--out", required=True)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = dict(args.set)
    if getattr(args, "data", None):
        over["paths.data"] = args.data
    if getattr(args, "steps", None):
        over["flow.steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        over["seeds.data" if args.command == "gen-data" else "seeds.sample"] = args.seed
    if getattr(args, "lora", None):
        over["model.lora_mode"] = args.lora
    return cfg.override(over) if over else cfg


def write_run_json(out_dir, args, cfg: RunConfig, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": args.command,
           "args": {k: v for k, v in vars(args).items() if k not in ("set",)},
           "overrides": dict(args.set), "config": cfg.to_dict()}
    doc.update(extra or {})
    path = out_dir / "run.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
    return path


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    v = read_vtf(path)
    return v[0]


def _read_video(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"video not found: {path}")
    return read_vtf(path)


def _content_tags(args, video_path) -> list[int]:
    if args.tags is not None:
        return args.tags
    if video_path:
        side = Path(video_path).parent / "tags.json"
        if side.exists():
            return list(json.loads(side.read_text())["t_ns"])
    return []


def _histogram_text(values, bins=8) -> str:
    if not values:
        return "(none)"
    counts, edges = np.histogram(values, bins=bins)
    return "  ".join(f"[{edges[i]:.2f},{edges[i + 1]:.2f}):{c}" for i, c in enumerate(counts))


def cmd_gen_data(args, cfg: RunConfig) -> int:
    if args.profile not in ("CT", "SFT"):
        raise UsageError(f"invalid profile {args.profile!r}; expected CT or SFT")
    n = args.n or (cfg.datagen.ct_samples if args.profile == "CT" else cfg.datagen.sft_samples)
    manifest, _, stats = datagen.build_dataset(
        args.profile, n, cfg.seeds.data, args.out, cfg.geometry.__dict__,
        cfg.datagen.thresholds[args.profile], cfg.datagen.max_retries,
    )
    problems = datagen.validate_dataset(args.out)
    if problems:
        raise datagen.DataError("dataset failed validation: " + "; ".join(problems[:5]))
    digest = hashlib.sha256((Path(args.out) / "manifest.json").read_bytes()).hexdigest()
    print(f"{args.profile}: accepted {stats['accepted']}, rejected {stats['rejected']} {stats['rejected_by_op']}")
    print("style scores:     " + _histogram_text([s["style"] for s in stats["scores"]]))
    if args.profile == "SFT":
        print("structure scores: " + _histogram_text([s["structure"] for s in stats["scores"]]))
    print(f"manifest sha256 {digest}")
    write_run_json(args.out, args, cfg, {"manifest_sha256": digest, "accepted": stats["accepted"],
                                         "rejected": stats["rejected"]})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    write_run_json(out, args, cfg)
    lora = cfg.model.lora_mode if cfg.model.lora_mode != "off" else "token_specific"
    ct = pipeline.load_profile(cfg, "CT") if args.stage in ("base", "CT", "full") else None
    base = pipeline.ensure_base(cfg, out, ct)
    if args.stage == "base":
        print(f"base checkpoint {base}")
        return EXIT_OK
    stages = ["CT", "SFT"] if args.stage == "full" else [args.stage]
    data = {"CT": ct} if ct is not None else {}
    summaries = pipeline.run_lora_stages(cfg, out, stages, lora, base, data)
    for st, sm in summaries.items():
        hist = sm.get("val_history") or []
        if hist:
            print(f"{st}: validation loss {hist[0][1]:.5f} -> {hist[-1][1]:.5f}")
    print(f"final checkpoint {out / 'final.json'}")
    write_run_json(out, args, cfg, {"summaries": summaries, "lora_mode": lora})
    return EXIT_OK


def cmd_stylize(args, cfg: RunConfig) -> int:
    m, _, _ = net.load_checkpoint(args.checkpoint)
    raw = _read_video(args.input) if args.input else None
    c = Conditions(raw=raw, content_tags=_content_tags(args, args.input), style_tag=args.style_tag,
                   style_image=_read_image(args.style_image) if args.style_image else None,
                   first_frame=_read_image(args.first_frame) if args.first_frame else None)
    geo = dict(cfg.geometry.__dict__)
    if args.frames:
        geo["frames"] = args.frames
    try:
        out = stylize(m, args.mode, c, cfg.flow.steps, cfg.seeds.sample, geometry=geo)
    except InferError as e:
        raise UsageError(str(e)) from None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_vtf(out_dir / "stylized.vtf", out)
    export_frames(out_dir / "frames", out)
    write_run_json(out_dir, args, cfg, {"frames": int(out.shape[0])})
    print(f"wrote {out_dir / 'stylized.vtf'} ({out.shape[0]} frames)")
    return EXIT_OK


def split_segments(v: np.ndarray, length: int, overlap: int) -> list[np.ndarray]:
    if length < 1 or not 0 <= overlap < length:
        raise UsageError("need segment length >= 1 and 0 <= overlap < length")
    step = length - overlap
    segs = [v[i:i + length] for i in range(0, len(v) - length + 1, step)]
    if len(segs) < 2:
        raise UsageError(f"video of {len(v)} frames gives fewer than two segments of {length}")
    return segs


def cmd_long_video(args, cfg: RunConfig) -> int:
    m, _, _ = net.load_checkpoint(args.checkpoint)
    vids = [_read_video(p) for p in args.input]
    if len(vids) == 1:
        if not args.segment_frames:
            raise UsageError("a single input needs --segment-frames")
        segs = split_segments(vids[0], args.segment_frames, args.overlap)
    else:
        segs = vids
    style = Conditions(content_tags=_content_tags(args, args.input[0]), style_tag=args.style_tag,
                       style_image=_read_image(args.style_image) if args.style_image else None)
    try:
        video, parts = long_video(m, segs, style, cfg.flow.steps, cfg.seeds.sample)
    except InferError as e:
        raise UsageError(str(e)) from None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_vtf(out_dir / "long.vtf", video)
    export_frames(out_dir / "frames", video)
    seams = [float(np.abs(parts[k][0] - parts[k - 1][-1]).max()) for k in range(1, len(parts))]
    write_run_json(out_dir, args, cfg, {"segments": len(parts), "frames": int(video.shape[0]),
                                        "seam_max_abs": seams})
    print(f"wrote {out_dir / 'long.vtf'}: {len(parts)} segments, {video.shape[0]} frames, seams {seams}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    m, _, _ = net.load_checkpoint(args.checkpoint)
    samples = pipeline.load_profile(cfg, "test", args.test)
    if args.limit:
        samples = samples[: args.limit]
    modes = tuple(x for x in args.modes.split(",") if x)
    bad = set(modes) - set(pipeline.EVAL_MODES)
    if bad:
        raise UsageError(f"unknown eval modes {sorted(bad)}")
    rows, table, summary = pipeline.evaluate(m, samples, cfg, modes)
    out_dir = Path(args.out)
    metrics.write_report(out_dir, rows, summary)
    pipeline.write_table(out_dir / "table.csv", table)
    write_run_json(out_dir, args, cfg, {"summary": summary, "rows": len(table)})
    for mode, d in summary.items():
        print(f"{mode:12s} " + "  ".join(f"{k} {v:.3f}" for k, v in d.items()))
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    arms = args.arm or ["all"]
    if "all" in arms:
        arms = list(pipeline.ARMS)
    out = Path(args.out)
    test = pipeline.load_profile(cfg, "test", args.test)
    if args.limit:
        test = test[: args.limit]
    data = {"CT": pipeline.load_profile(cfg, "CT"), "SFT": pipeline.load_profile(cfg, "SFT")}
    base = pipeline.ensure_base(cfg, out / "base", data["CT"])
    centroids = pipeline.centroid_table(cfg)
    rows = []
    for arm in arms:
        res = pipeline.run_arm(cfg, arm, out, base, test, data, centroids)
        arm_cfg = cfg.override({"model.lora_mode": res["declaration"]["lora_mode"]})
        write_run_json(out / arm, args, arm_cfg, {"arm": arm, "declaration": res["declaration"],
                                                  "base_checkpoint": str(base), "result": res["row"]})
        rows.append(res["row"])
    note = pipeline.direction_note(rows)
    cols = ["arm", metrics.COLUMNS["style"], metrics.COLUMNS["structure"]]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join([r["arm"]] + [f"{r[c]:.6f}" for c in cols[1:]]) + "\n")
    (out / "ablation.json").write_text(json.dumps({"rows": rows, "note": note}, indent=1))
    write_run_json(out, args, cfg, {"arms": arms, "note": note})
    for r in rows:
        print(f"{r['arm']:14s} " + "  ".join(f"{c} {r[c]:.3f}" for c in cols[1:]))
    print(note["expected"])
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "stylize": cmd_stylize,
    "long-video": cmd_long_video,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (datagen.DataError, CodecError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Unified command line: synth, train, eval, segment, serve."""

import argparse
import glob
import json
import os
import sys

import numpy as np

from .data import SceneConfig, generate_scene, load_scene, save_scene
from .errors import ClickSegError, InputError
from .evaluation import (
    POLICIES,
    evaluate_dataset,
    write_records_csv,
    write_summary_json,
)
from .model import ModelConfig, SegModel, load_model, save_model
from .queries import clicks_from_json
from .train import TrainConfig, save_history_csv, train


def _load_scenes_dir(path):
    files = sorted(glob.glob(os.path.join(path, "*.ply")))
    if not files:
        raise InputError(f"no .ply scenes found in {path}")
    return {os.path.splitext(os.path.basename(f))[0]: load_scene(f) for f in files}


def cmd_synth(args):
    cfg = SceneConfig(**json.load(open(args.config))) if args.config else SceneConfig()
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.scenes):
        scene = generate_scene(cfg, seed=args.seed + i)
        save_scene(os.path.join(args.out, f"scene_{i:05d}.ply"), scene)
    print(f"wrote {args.scenes} scenes to {args.out}")
    return 0


def cmd_train(args):
    with open(args.config) as fh:
        cfg = json.load(fh)
    model_cfg = ModelConfig(**cfg.get("model", {}))
    train_cfg = TrainConfig(**cfg.get("train", {}))
    data_cfg = cfg.get("data", {})
    if "scenes_dir" in data_cfg:
        scenes = list(_load_scenes_dir(data_cfg["scenes_dir"]).values())
    else:
        gen = SceneConfig(**data_cfg.get("generator", {}))
        n = int(data_cfg.get("n_scenes", 200))
        seed = int(data_cfg.get("seed", 0))
        scenes = [generate_scene(gen, seed=seed + i) for i in range(n)]
    model = SegModel.init(model_cfg, seed=train_cfg.seed)
    model, history = train(scenes, model, train_cfg, log_every=args.log_every)
    save_model(model, args.out)
    if args.history:
        save_history_csv(args.history, history)
    print(f"trained {len(history)} steps; checkpoint at {args.out}")
    return 0


def cmd_eval(args):
    model = load_model(args.checkpoint)
    scenes = list(_load_scenes_dir(args.data).values())
    k_values = [int(k) for k in args.clicks.split(",") if k]
    if not k_values:
        raise InputError("--clicks must name at least one click count")
    records = evaluate_dataset(model, scenes, k_values, policy=args.policy,
                               seed=args.seed)
    if args.csv:
        write_records_csv(args.csv, records)
    summary = write_summary_json(args.report, records, k_values, args.policy)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_segment(args):
    model = load_model(args.checkpoint)
    scene = load_scene(args.scene)
    with open(args.clicks) as fh:
        clicks = clicks_from_json(fh.read())
    result = model.segment(scene.cloud, clicks)
    out = {
        "n_points": scene.cloud.n_points,
        "n_clicks": len(clicks),
        "mask": [int(b) for b in result.binary_mask],
    }
    with open(args.out, "w") as fh:
        json.dump(out, fh)
    print(f"wrote mask of length {scene.cloud.n_points} to {args.out}")
    return 0


def cmd_serve(args):
    import uvicorn

    from .serve import create_app

    model = load_model(args.checkpoint)
    scenes = _load_scenes_dir(args.scenes)
    app = create_app(model, scenes)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="clickseg",
                                description="Interactive point cloud segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="JSON file with SceneConfig overrides")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True, help="JSON: {model, train, data}")
    s.add_argument("--out", required=True, help="output checkpoint path")
    s.add_argument("--history", help="optional loss history CSV")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate IoU@k on scenes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="directory of scene .ply files")
    s.add_argument("--clicks", default="1,3,5,10")
    s.add_argument("--policy", default="largest-error-center", choices=POLICIES)
    s.add_argument("--report", required=True, help="summary JSON path")
    s.add_argument("--csv", help="optional per-instance CSV")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", help="segment one scene with a click file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--clicks", required=True, help="JSON click list")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("serve", help="run the segmentation service")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--host", default="127.0.0.1")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ClickSegError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFound", "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

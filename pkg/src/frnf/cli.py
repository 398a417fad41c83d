"""Command-line interface: dataset generation, runs, evaluation, serving.

Every flag falls back to an FRNF_-prefixed environment variable, e.g.
``--dataset`` reads FRNF_DATASET when the flag is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _env(flag: str, default=None):
    return os.environ.get("FRNF_" + flag.upper().replace("-", "_"), default)


def _add(parser: argparse.ArgumentParser, flag: str, required: bool = False, **kw):
    env_default = _env(flag, kw.pop("default", None))
    parser.add_argument(f"--{flag}", default=env_default,
                        required=required and env_default is None, **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frnf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="generate a synthetic fixture dataset")
    _add(g, "fixture", required=True, help="single_frame|tabletop5|exploration|specialization")
    _add(g, "out", required=True, help="output directory")
    _add(g, "seed", type=int, default="0")

    r = sub.add_parser("run", help="train a scene network over a dataset")
    _add(r, "dataset", required=True)
    _add(r, "clicks", help="click script JSON (default <dataset>/clicks.json if present)")
    _add(r, "steps-per-frame", type=int, default="10")
    _add(r, "mode", choices=["fused", "no_feature"], default="fused")
    _add(r, "checkpoint", help="checkpoint output path")
    _add(r, "metrics", help="JSON-lines metrics output path")
    _add(r, "seed", type=int, default="0")
    _add(r, "lr", type=float, default="1e-3")

    e = sub.add_parser("eval", help="evaluate a checkpoint's segmentation mIoU")
    _add(e, "checkpoint", required=True)
    _add(e, "dataset", required=True)
    _add(e, "report", required=True)
    _add(e, "clicks")
    _add(e, "stride", type=int, default="2")

    b = sub.add_parser("baseline", help="1-NN cosine feature baseline mIoU")
    _add(b, "dataset", required=True)
    _add(b, "clicks")
    _add(b, "report", required=True)
    b.add_argument("--frontend-only", action="store_true", default=True,
                   help="classify with raw front-end features only (always on)")
    _add(b, "stride", type=int, default="2")

    s = sub.add_parser("serve", help="serve a live session over HTTP")
    _add(s, "dataset", required=True)
    _add(s, "port", type=int, default="8000")
    _add(s, "host", default="127.0.0.1")
    _add(s, "mode", choices=["fused", "no_feature"], default="fused")
    _add(s, "steps-per-frame", type=int, default="10")
    _add(s, "clicks")
    _add(s, "seed", type=int, default="0")
    return p


def _default_clicks(dataset) -> str | None:
    path = Path(dataset) / "clicks.json"
    return str(path) if path.exists() else None


def cmd_gen_dataset(args) -> int:
    from . import simio

    scene, spec = simio.standard_fixtures(args.fixture, seed=int(args.seed))
    manifest = simio.generate_sequence(spec, scene, args.out)
    gt0 = simio.render_ground_truth(scene, spec.trajectory[0], spec.cam)
    clicks = simio.default_clicks(scene, spec, gt0)
    (Path(args.out) / "clicks.json").write_text(json.dumps(clicks, indent=2))
    print(f"wrote {manifest['n_frames']} frames and {len(clicks)} clicks to {args.out}")
    return 0


def cmd_run(args) -> int:
    from .diffcore import AdamConfig
    from .runner import run_session

    result = run_session(
        args.dataset,
        clicks_path=args.clicks or _default_clicks(args.dataset),
        steps_per_frame=int(args.steps_per_frame),
        mode=args.mode,
        checkpoint_path=args.checkpoint,
        metrics_path=args.metrics,
        seed=int(args.seed),
        adam=AdamConfig(learning_rate=float(args.lr)),
        progress=True,
    )
    last = result.metrics[-1] if result.metrics else {}
    print(f"finished: {len(result.metrics)} steps, {result.n_keyframes} keyframes, "
          f"{result.seconds:.1f}s, final L_total={last.get('L_total', float('nan')):.4f}")
    return 0


def cmd_eval(args) -> int:
    from .runner import evaluate_checkpoint

    report = evaluate_checkpoint(args.checkpoint, args.dataset,
                                 clicks_path=args.clicks or _default_clicks(args.dataset),
                                 report_path=args.report, stride=int(args.stride))
    print(json.dumps(report, indent=2))
    return 0


def cmd_baseline(args) -> int:
    from .runner import baseline_report

    report = baseline_report(args.dataset,
                             clicks_path=args.clicks or _default_clicks(args.dataset),
                             report_path=args.report, stride=int(args.stride))
    print(json.dumps(report, indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import LiveSession, create_app

    session = LiveSession(args.dataset, mode=args.mode,
                          steps_per_frame=int(args.steps_per_frame),
                          seed=int(args.seed),
                          clicks_path=args.clicks or _default_clicks(args.dataset))
    app = create_app(session)
    uvicorn.run(app, host=args.host, port=int(args.port), log_level="warning")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "gen-dataset": cmd_gen_dataset,
        "run": cmd_run,
        "eval": cmd_eval,
        "baseline": cmd_baseline,
        "serve": cmd_serve,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

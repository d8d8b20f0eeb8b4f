"""Command-line interface.

Subcommands cover the full loop: synthesize frames, train and persist a
bundle, evaluate it (with optional flips), run the online harness, tune
hyperparameters, and the in-situ modes (classify with exit codes, the daemon,
the workflow driver).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipelines, sentinel, tuner
from .errors import RaywatchError, RewindLimitExceeded
from .imagery import CropRegion, SynthConfig, generate_dataset
from .pipelines import OnlineConfig, PipelineConfig

logger = logging.getLogger(__name__)


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


def main(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "classify":
        return cmd_classify(args)
    try:
        return args.handler(args)
    except RewindLimitExceeded as exc:
        for line in sentinel.drive_log_jsonl(exc.log).splitlines():
            print(line)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RaywatchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raywatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic frame dataset plus manifest")
    p.add_argument("--count-valid", type=int, required=True)
    p.add_argument("--count-anomalous", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--drift", type=float, default=0.06, help="relative shell growth across the run")
    p.add_argument("--anomalous-at", type=str, default=None, help="comma list of 1-based anomalous positions")
    p.add_argument("--static-texture", action="store_true", help="freeze the convective texture across frames")
    p.add_argument("--shell", type=float, default=None, help="shell radius as a fraction of the short side")
    p.add_argument("--lobe", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--ray-length", type=float, default=None)
    p.add_argument("--ray-width", type=float, default=None)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train an offline bundle from a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model", choices=("iforest", "ocsvm"), default="iforest")
    p.add_argument("--no-pca", action="store_true")
    p.add_argument("--components", type=int, default=512)
    p.add_argument("--trees", type=int, default=125)
    p.add_argument("--max-samples", type=float, default=1.0)
    p.add_argument("--contamination", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.001)
    p.add_argument("--nu", type=float, default=0.01)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int, nargs=4, metavar=("X_LO", "X_HI", "Y_LO", "Y_HI"), default=None)
    p.add_argument("--resize", type=int, nargs=2, metavar=("H", "W"), default=None)
    p.add_argument("--external-features", type=Path, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a bundle on a manifest")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--pool", type=str, default=None, metavar="V,A", help="draw a fixed-seed pool instead of the full manifest")
    p.add_argument("--pool-seed", type=int, default=0)
    p.add_argument("--jsonl", type=Path, default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("flips", help="evaluate a bundle on mirrored frames")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--axes", type=str, default="horizontal,vertical,both")
    p.set_defaults(handler=cmd_flips)

    p = sub.add_parser("online", help="retrain-per-frame harness over an ordered manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--start", type=int, default=10)
    p.add_argument("--trees", type=int, default=125)
    p.add_argument("--max-samples", type=float, default=1.0)
    p.add_argument("--warmup", type=int, default=300)
    p.add_argument("--lookahead", type=int, default=9)
    p.add_argument("--pca", action="store_true", help="online default is raw features; this re-enables PCA")
    p.add_argument("--components", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jsonl", type=Path, default=None)
    p.add_argument("--plot-data", type=Path, default=None)
    p.set_defaults(handler=cmd_online)

    p = sub.add_parser("tune", help="random-search hyperparameters against an eval pool")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--model", choices=("iforest", "ocsvm"), default="iforest")
    p.add_argument("--budget", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-pca", action="store_true")
    p.add_argument("--components", type=int, default=512)
    p.add_argument("--pool", type=str, default="40,20", metavar="V,A")
    p.add_argument("--jsonl", type=Path, default=None)
    p.set_defaults(handler=cmd_tune)

    p = sub.add_parser("classify", help="classify one frame; exit 0 valid, 1 anomalous, 2 error")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("image", type=Path)
    p.set_defaults(handler=None)

    p = sub.add_parser("serve", help="persistent classification daemon (newline-delimited JSON)")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--listen", type=str, default=None, help="host:port or socket path (default $SENTINEL_ENDPOINT)")
    p.set_defaults(handler=cmd_serve)

    p = sub.add_parser("drive", help="simulate the step/classify/rewind workflow")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--inject-at", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.add_argument("--rewind-limit", type=int, default=3)
    p.add_argument("--policy", choices=("trust", "ignore-negative"), default="trust")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--detector", type=str, default=None, help="bundle:PATH or endpoint:ADDR (default $SENTINEL_ENDPOINT)")
    p.add_argument("--workdir", type=Path, default=Path("drive-frames"))
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--static-texture", action="store_true",
                   help="freeze the convective texture (pair with --texture-seed of the training set)")
    p.add_argument("--texture-seed", type=int, default=0)
    p.add_argument("--shell", type=float, default=None)
    p.add_argument("--lobe", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--ray-length", type=float, default=None)
    p.add_argument("--ray-width", type=float, default=None)
    p.set_defaults(handler=cmd_drive)

    return parser


def _synth_config_from(args) -> SynthConfig:
    cfg = SynthConfig(canvas=(args.height, args.width))
    overrides = {}
    if getattr(args, "shell", None) is not None:
        overrides["shell_radius_frac"] = args.shell
    if getattr(args, "lobe", None) is not None:
        overrides["lobe_amp"] = args.lobe
    if getattr(args, "noise", None) is not None:
        overrides["noise_amp"] = args.noise
    if getattr(args, "ray_length", None) is not None:
        overrides["ray_length_px"] = args.ray_length
    if getattr(args, "ray_width", None) is not None:
        overrides["ray_width_px"] = args.ray_width
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return cfg


def cmd_synth(args) -> int:
    positions = None
    if args.anomalous_at:
        positions = [int(tok) for tok in args.anomalous_at.split(",") if tok]
    manifest = generate_dataset(
        args.out,
        n_valid=args.count_valid,
        n_anomalous=args.count_anomalous,
        seed=args.seed,
        base=_synth_config_from(args),
        drift=args.drift,
        anomalous_positions=positions,
        evolve_texture=not args.static_texture,
    )
    print(manifest)
    return 0


def cmd_train(args) -> int:
    config = PipelineConfig(
        model=args.model,
        pca=not args.no_pca,
        components=args.components,
        n_trees=args.trees,
        max_samples=args.max_samples,
        contamination=args.contamination,
        gamma=args.gamma,
        nu=args.nu,
        tol=args.tol,
        seed=args.seed,
        crop=CropRegion(*args.crop) if args.crop else None,
        resize_to=tuple(args.resize) if args.resize else None,
    )
    bundle = pipelines.train_offline(args.manifest, config, external_features_path=args.external_features)
    digest = pipelines.save_bundle(bundle, args.out)
    print(f"{args.out} {digest}")
    return 0


def cmd_eval(args) -> int:
    bundle = pipelines.load_bundle(args.bundle)
    manifest = args.manifest
    if args.pool:
        n_valid, n_anomalous = (int(tok) for tok in args.pool.split(","))
        manifest = pipelines.sample_eval_pool(args.manifest, n_valid, n_anomalous, seed=args.pool_seed)
    report = pipelines.evaluate(bundle, manifest)
    print(report.table(), end="")
    if args.jsonl:
        args.jsonl.write_text(report.to_jsonl(), encoding="utf-8")
    return 0


def cmd_flips(args) -> int:
    bundle = pipelines.load_bundle(args.bundle)
    axes = [tok for tok in args.axes.split(",") if tok]
    reports = pipelines.flip_experiment(bundle, args.manifest, axes)
    for axis in axes:
        print(f"[{axis}]")
        print(reports[axis].table(), end="")
    return 0


def cmd_online(args) -> int:
    config = OnlineConfig(
        start=args.start,
        n_trees=args.trees,
        max_samples=args.max_samples,
        warmup=args.warmup,
        lookahead=args.lookahead,
        pca=args.pca,
        components=args.components,
        seed=args.seed,
    )
    records, summary = pipelines.run_online(args.manifest, config)
    if args.jsonl:
        args.jsonl.write_text(pipelines.online_records_jsonl(records), encoding="utf-8")
    if args.plot_data:
        args.plot_data.write_text(pipelines.emit_prediction_plot_data(records), encoding="utf-8")

    def pct(x):
        return "n/a" if x is None else f"{100.0 * x:.1f}%"

    print(f"steps: {summary.steps} (warm-up {summary.warmup_steps}, threshold {summary.warmup_threshold})")
    print(f"first-unseen accuracy: {pct(summary.first_unseen_accuracy)}")
    print(f"  warm-up: {pct(summary.warmup_first_unseen_accuracy)}  steady: {pct(summary.steady_first_unseen_accuracy)}")
    return 0


def cmd_tune(args) -> int:
    n_valid, n_anomalous = (int(tok) for tok in args.pool.split(","))
    best, history = pipelines.tune_model(
        args.manifest,
        model=args.model,
        budget=args.budget,
        seed=args.seed,
        pca=not args.no_pca,
        components=args.components,
        pool_valid=n_valid,
        pool_anomalous=n_anomalous,
    )
    print(tuner.history_table(history, best), end="")
    if args.jsonl:
        args.jsonl.write_text(tuner.history_jsonl(history), encoding="utf-8")
    return 0


def cmd_classify(args) -> int:
    try:
        bundle = pipelines.load_bundle(args.bundle)
        verdict = sentinel.classify_path(bundle, args.image)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return sentinel.EXIT_ERROR
    print(verdict.to_json())
    return sentinel.exit_code_for(verdict)


def cmd_serve(args) -> int:
    endpoint = args.listen or os.environ.get(sentinel.ENDPOINT_ENV_VAR)
    if not endpoint:
        print(f"error: no endpoint; pass --listen or set {sentinel.ENDPOINT_ENV_VAR}", file=sys.stderr)
        return 1
    server = sentinel.SentinelServer(args.bundle, endpoint)
    print(server.endpoint, flush=True)
    server.serve_forever()
    return 0


def cmd_drive(args) -> int:
    detector_spec = args.detector
    if detector_spec is None:
        endpoint = os.environ.get(sentinel.ENDPOINT_ENV_VAR)
        if not endpoint:
            print(f"error: no detector; pass --detector or set {sentinel.ENDPOINT_ENV_VAR}", file=sys.stderr)
            return 1
        detector_spec = f"endpoint:{endpoint}"

    kind, _, value = detector_spec.partition(":")
    if kind == "bundle" and value:
        detector = sentinel.detector_from_bundle(pipelines.load_bundle(value))
    elif kind == "endpoint" and value:
        detector = sentinel.detector_from_endpoint(value)
    else:
        print("error: --detector must be bundle:PATH or endpoint:ADDR", file=sys.stderr)
        return 1

    synth = _synth_config_from(args)
    if args.static_texture:
        from dataclasses import replace

        synth = replace(synth, texture_seed=args.texture_seed)
    config = sentinel.DriveConfig(
        steps=args.steps,
        inject_at=args.inject_at,
        checkpoint_every=args.checkpoint_every,
        rewind_limit=args.rewind_limit,
        policy=args.policy,
        seed=args.seed,
        synth=synth,
        evolve_texture=not args.static_texture,
    )
    log = sentinel.workflow_driver(config, detector, args.workdir)
    print(sentinel.drive_log_jsonl(log), end="")
    rewinds = sum(1 for e in log if e.action == "rewind")
    print(f"completed {args.steps} steps with {rewinds} rewind(s)", file=sys.stderr)
    return 0

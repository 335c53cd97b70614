"""Command-line workflows: gen-data, train, eval, infer, inspect.

Exit codes: 0 ok, 2 bad flags, 3 data/IO error, 4 numeric failure.
Every command writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import analysis, dataio, evalx
from . import skeleton as sk
from .errors import NonFiniteError, SparseBodyError
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .rotmath import matrix_to_axis_angle, rot6d_to_matrix
from .training import TrainConfig, train, write_loss_log

log = logging.getLogger("sparsebody")

EXIT_OK, EXIT_FLAGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MOTION_SUFFIX = {"atmo": ".atmo", "json": ".json"}


class BadFlag(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, outputs, started: str) -> Path:
    outputs = sorted(Path(p) for p in outputs)
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "outputs": [{"path": p.name if p.parent == out_dir else str(p), "sha256": _sha256(p)} for p in outputs],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _list_motion_files(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"{data_dir} is not a directory")
    files = sorted(p for p in data_dir.iterdir() if p.suffix in (".atmo", ".json") and p.name != "manifest.json")
    if not files:
        raise FileNotFoundError(f"no motion files in {data_dir}")
    return files


def load_dataset(data_dir) -> list[dataio.MotionSequence]:
    return [dataio.load_motion_file(p) for p in _list_motion_files(data_dir)]


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise BadFlag("config file must hold a JSON object")
    return doc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise BadFlag("--n must be at least 1")
    if args.frames < 2:
        raise BadFlag("--frames must be at least 2")
    if args.fps <= 0:
        raise BadFlag("--fps must be positive")
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seqs = dataio.synth_dataset(args.seed, args.n, args.frames, args.fps)
    paths = []
    for i, seq in enumerate(seqs):
        p = out / f"seq_{i:04d}{MOTION_SUFFIX[args.format]}"
        dataio.save_motion_file(seq, p, format=args.format)
        paths.append(p)
    config = {"n": args.n, "frames": args.frames, "fps": args.fps, "format": args.format}
    write_manifest(out, "gen-data", config, args.seed, paths, started)
    print(f"wrote {len(paths)} sequences to {out}")
    return EXIT_OK


def _train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    doc = _load_config_file(args.config)
    model_kw = dict(doc.get("model", doc.get("config", {})))
    train_kw = dict(doc.get("train", {}))
    flag_model = {"window": args.window, "n_blocks": args.blocks, "embed_dim": args.embed_dim,
                  "n_heads": args.heads, "dropout": args.dropout}
    flag_train = {"steps": args.steps, "batch_size": args.batch, "lr": args.lr, "curriculum": args.curriculum,
                  "curriculum_steps": args.curriculum_steps, "sensors": args.sensors, "seed": args.seed,
                  "weight_decay": args.weight_decay}
    model_kw.update({k: v for k, v in flag_model.items() if v is not None})
    train_kw.update({k: v for k, v in flag_train.items() if v is not None})
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise BadFlag(str(exc)) from exc


def cmd_train(args) -> int:
    started = _now()
    mcfg, tcfg = _train_configs(args)
    seqs = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = init_params(mcfg, seed=tcfg.seed)

    def progress(row):
        if row["step"] % max(1, args.log_every) == 0:
            log.info("step %d total %.5f masked %.3f", row["step"], row["total"], row["masked_fraction"])

    result = train(seqs, mcfg, tcfg, model=model, progress=progress)
    ckpt, loss_csv = out / "checkpoint.atmo", out / "loss_log.csv"
    save_checkpoint(ckpt, result.model, {"train": tcfg.to_dict()})
    write_loss_log(result.log, loss_csv)
    config = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": str(args.data)}
    write_manifest(out, "train", config, tcfg.seed, [ckpt, loss_csv], started)
    print(f"trained {tcfg.steps} steps -> {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    if args.oracle == (args.ckpt is not None):
        raise BadFlag("give exactly one of --ckpt or --oracle")
    seqs = load_dataset(args.data)
    model = evalx.GroundTruthPoser() if args.oracle else load_checkpoint(args.ckpt)[0]
    sensors = sk.SENSOR_LABELS if args.sensors == "all" else (args.sensors,)
    modes = evalx.MODES if args.mode == "all" else (args.mode,)
    reports = [evalx.evaluate(model, seqs, mode, s, fov_degrees=args.fov) for s in sensors for mode in modes]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_csv = out / "report.csv"
    evalx.write_report_csv(reports, report_csv)
    print(evalx.format_table(reports))
    config = {"ckpt": args.ckpt, "oracle": args.oracle, "data": str(args.data), "mode": args.mode,
              "sensors": args.sensors, "fov": args.fov}
    write_manifest(out, "eval", config, None, [report_csv], started)
    return EXIT_OK


def cmd_infer(args) -> int:
    started = _now()
    model, _ = load_checkpoint(args.ckpt)
    kind = dataio.file_kind(args.input)
    if kind == "sparse":
        X, _, fps = dataio.load_sparse_file(args.input)
    else:
        seq = dataio.load_motion_file(args.input)
        X, fps = evalx.sparse_features(seq, args.mode, args.sensors, fov_degrees=args.fov), seq.fps
    est = evalx.sliding_window_infer(model, X)
    head = X[:, sk.HEAD, dataio.POS]
    pos = evalx.reconstruct_positions(est, head, anchor=args.anchor)
    rot = matrix_to_axis_angle(rot6d_to_matrix(est.rot6d, check=False)).numpy()
    out_seq = dataio.MotionSequence(rot, pos[:, sk.PELVIS].numpy(), est.beta.mean(0).numpy(), fps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_motion_file(out_seq, out, format=args.format)
    config = {"ckpt": str(args.ckpt), "input": str(args.input), "anchor": args.anchor, "format": args.format,
              "sensors": args.sensors, "mode": args.mode}
    write_manifest(out.parent, "infer", config, None, [out], started)
    print(f"wrote {out_seq.n_frames} frames to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    started = _now()
    if not (args.topo or args.magnitudes):
        raise BadFlag("choose at least one of --topo, --magnitudes")
    model, _ = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    if args.topo:
        stats = analysis.topo_stats(model, per_layer=args.per_layer)
        for s in stats if isinstance(stats, list) else [stats]:
            paths += analysis.export_heatmaps(s, out, render=args.png)
    if args.magnitudes:
        window = model.config.window
        seqs = dataio.synth_dataset(args.probe_seed, 4, max(2 * window, 2), 60.0)
        X, aux = analysis.probe_batch(seqs, window, n=args.probe_size, seed=args.probe_seed)
        rows = analysis.branch_magnitudes(model, X, aux)
        paths.append(analysis.write_magnitudes_csv(rows, out / "magnitudes.csv"))
    config = {"ckpt": str(args.ckpt), "topo": args.topo, "magnitudes": args.magnitudes,
              "per_layer": args.per_layer, "probe_size": args.probe_size}
    write_manifest(out, "inspect", config, args.probe_seed, paths, started)
    print(f"wrote {len(paths)} files to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsebody", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic motion dataset")
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--fps", type=float, default=60.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=("atmo", "json"), default="atmo")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a motion directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with 'model' and 'train' sections; flags override it")
    t.add_argument("--window", type=int, choices=(40, 80))
    t.add_argument("--curriculum", choices=dataio.CURRICULUM_MODES)
    t.add_argument("--curriculum-steps", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--blocks", type=int)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--sensors", choices=sk.SENSOR_LABELS)
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or the ground truth) on a motion directory")
    e.add_argument("--ckpt")
    e.add_argument("--oracle", action="store_true", help="evaluate the ground truth against itself")
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=evalx.MODES + ("all",), default="standard")
    e.add_argument("--sensors", choices=sk.SENSOR_LABELS + ("all",), default="hmd")
    e.add_argument("--fov", type=float, default=120.0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="reconstruct full-body motion from a motion or sparse file")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--format", choices=("atmo", "json"), default="atmo")
    i.add_argument("--mode", choices=evalx.MODES, default="standard")
    i.add_argument("--sensors", choices=sk.SENSOR_LABELS, default="hmd")
    i.add_argument("--fov", type=float, default=120.0)
    i.add_argument("--no-anchor", dest="anchor", action="store_false")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("inspect", help="export partition-graph statistics and branch magnitudes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--topo", action="store_true")
    s.add_argument("--magnitudes", action="store_true")
    s.add_argument("--per-layer", action="store_true")
    s.add_argument("--png", action="store_true")
    s.add_argument("--probe-size", type=int, default=32)
    s.add_argument("--probe-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("ATMO_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except BadFlag as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SparseBodyError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

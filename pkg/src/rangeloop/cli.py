"""Command line interface.

One binary with subcommands covering the full workflow: generate a synthetic
dataset, project scans to range images, label overlaps, train, embed, search,
evaluate, benchmark, and run the built-in invariant suite.

Exit codes: 0 success, 1 failed selfcheck, 2 contract violation (bad
arguments, malformed files, mismatched shapes), 3 degenerate input detected
during processing.
"""

from __future__ import annotations

import argparse
import csv
import os
import re
import sys
from typing import List, Tuple

import numpy as np

from . import io
from . import pipeline as pl
from . import rangeview as rvw
from . import retrieval as rt
from . import synthworld as sw
from . import training as tr
from .errors import ContractError, DegenerateInputError
from .selfcheck import run_selfcheck


def _indexed_files(dir_path: str, suffix: str) -> List[Tuple[int, str]]:
    """(index, path) pairs for files ending in suffix, indexed by the last
    integer in the file name, sorted by index."""
    if not os.path.isdir(dir_path):
        raise ContractError(f"not a directory: {dir_path}")
    out = []
    for name in sorted(os.listdir(dir_path)):
        if not name.endswith(suffix):
            continue
        nums = re.findall(r"\d+", name)
        if not nums:
            raise ContractError(f"cannot infer a scan index from {name!r}")
        out.append((int(nums[-1]), os.path.join(dir_path, name)))
    if not out:
        raise ContractError(f"no *{suffix} files under {dir_path}")
    ids = [i for i, _ in out]
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate scan indices under {dir_path}")
    return sorted(out)


def _load_images(dir_path: str) -> Tuple[List[int], List[rvw.RangeImage]]:
    files = _indexed_files(dir_path, ".omrv")
    ids = [i for i, _ in files]
    return ids, [io.load_range_image(p) for _, p in files]


def _split_config(path: str):
    """One config file holds both the model geometry and the training
    schedule; keys are disjoint, so they partition cleanly."""
    model_pairs, train_entries = [], {}
    for key, val in io.load_kv_pairs(path):
        if key in tr.TRAIN_KEYS:
            train_entries[key] = val
        else:
            model_pairs.append((key, val))
    return pl.model_config_from_pairs(model_pairs), \
        tr.train_config_from_kv(train_entries)


def _model_config_near(ckpt: str, explicit: str | None) -> pl.ModelConfig:
    path = explicit or os.path.join(os.path.dirname(ckpt) or ".", "model.kv")
    if not os.path.isfile(path):
        raise ContractError(
            f"no model geometry at {path}; pass --config or keep model.kv "
            "next to the checkpoint"
        )
    return pl.load_model_config(path)


def _csv_out(rows) -> None:
    w = csv.writer(sys.stdout)
    for row in rows:
        w.writerow(row)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = sw.spec_from_kv(io.load_kv(args.spec))
    world = sw.generate_world(spec)
    sw.save_world(args.out, world)
    io.save_kv(os.path.join(args.out, "sensor.kv"),
               rvw.projection_pairs(spec.projection_config()))
    print(f"wrote {len(world.scans)} scans "
          f"({spec.n_places} places x {spec.visits_per_place} visits) to {args.out}")
    return 0


def cmd_project(args) -> int:
    cfg = rvw.projection_from_kv(io.load_kv(args.config))
    os.makedirs(args.out, exist_ok=True)
    files = _indexed_files(args.scans, ".bin")
    for idx, path in files:
        ri = rvw.build_range_image(io.load_scan(path), cfg)
        io.save_range_image(os.path.join(args.out, f"range_{idx:04d}.omrv"), ri)
    print(f"projected {len(files)} scans to {args.out}")
    return 0


def cmd_overlaps(args) -> int:
    cfg = rvw.projection_from_kv(io.load_kv(args.config))
    files = _indexed_files(args.scans, ".bin")
    poses = io.load_poses(args.poses)
    if len(poses) != len(files):
        raise ContractError(f"{len(poses)} poses for {len(files)} scans")
    scans = [io.load_scan(p) for _, p in files]
    images = [rvw.build_range_image(s, cfg) for s in scans]
    ids = [i for i, _ in files]
    labels = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            ov = rvw.compute_overlap(images[a], poses[a], scans[b], poses[b])
            labels.append(rvw.OverlapLabel(query=ids[a], cand=ids[b], overlap=ov))
    io.save_labels(args.out, labels)
    print(f"labeled {len(labels)} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _split_config(args.config)
    ids, images_list = _load_images(args.data)
    images = dict(zip(ids, images_list))
    labels = io.load_labels(args.labels)
    tuples = rvw.build_tuples(labels, train_cfg.overlap_threshold,
                              train_cfg.k_p, train_cfg.k_n, train_cfg.seed)
    if not tuples:
        raise ContractError("no training tuples survive the overlap threshold")
    params = pl.init_model(model_cfg, seed=train_cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    pl.save_model_config(os.path.join(args.out, "model.kv"), model_cfg)
    tr.train(tuples, images, params, model_cfg, train_cfg, args.out, log=print)
    print(f"checkpoints and report.csv written to {args.out}")
    return 0


def cmd_embed(args) -> int:
    cfg = _model_config_near(args.ckpt, args.config)
    params = pl.load_model(args.ckpt, cfg)
    ids, images = _load_images(args.ranges)
    descriptors = pl.describe_images(images, params, cfg)
    io.save_descriptor_db(args.out, ids, descriptors)
    print(f"embedded {len(ids)} scans ({cfg.out_dim}-dim) to {args.out}")
    return 0


def cmd_search(args) -> int:
    db = rt.DescriptorDb.load(args.db)
    queries = rt.DescriptorDb.load(args.query)
    if queries.dim != db.dim:
        raise ContractError(f"query dim {queries.dim} != database dim {db.dim}")
    rows = [("query_id", "rank", "candidate_id", "distance")]
    for qid, desc in zip(queries.ids, queries.descriptors):
        for rank, (cid, dist) in enumerate(rt.db_search(db, desc, args.k), start=1):
            rows.append((qid, rank, cid, repr(dist)))
    _csv_out(rows)
    return 0


def cmd_eval_loop(args) -> int:
    db = rt.DescriptorDb.load(args.db)
    poses = io.load_poses(args.poses)
    if len(poses) != len(db):
        raise ContractError(f"{len(poses)} poses for {len(db)} descriptors")
    labels = io.load_labels(args.labels)
    protocol = rt.protocol_from_kv(io.load_kv(args.protocol))
    if protocol.kind != "loop_closure":
        raise ContractError(f"protocol kind {protocol.kind!r} is not loop_closure")
    report = rt.eval_loop_closure(db, labels, protocol)
    _csv_out([("metric", "value"), *report.rows()])
    return 0


def cmd_eval_place(args) -> int:
    db = rt.DescriptorDb.load(args.db)
    query_db = rt.DescriptorDb.load(args.query_db)
    pos_a = np.stack([p.translation[:2] for p in io.load_poses(args.poses_a)])
    pos_b = np.stack([p.translation[:2] for p in io.load_poses(args.poses_b)])
    protocol = rt.protocol_from_kv(io.load_kv(args.protocol))
    if protocol.kind != "place_recognition":
        raise ContractError(
            f"protocol kind {protocol.kind!r} is not place_recognition"
        )
    report = rt.eval_place_recognition(db, query_db, pos_a, pos_b, protocol)
    _csv_out([("metric", "value"), *report.rows()])
    return 0


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(log=print)
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    cfg = _model_config_near(args.ckpt, args.config)
    params = pl.load_model(args.ckpt, cfg)
    rows = rt.bench(params, cfg, reps=args.reps)
    sys.stdout.write(rt.bench_to_csv(rows))
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rangeloop",
        description="LiDAR place recognition: range images, state-space "
                    "descriptors, retrieval, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scan dataset")
    p.add_argument("--spec", required=True, help="world spec (key=value file)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("project", help="project raw scans to range images")
    p.add_argument("--scans", required=True, help="directory of scan_*.bin")
    p.add_argument("--config", required=True, help="sensor geometry (key=value)")
    p.add_argument("--out", required=True, help="output directory for .omrv")
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("overlaps", help="compute pairwise overlap labels")
    p.add_argument("--scans", required=True, help="directory of scan_*.bin")
    p.add_argument("--poses", required=True, help="pose file (one 3x4 per line)")
    p.add_argument("--config", required=True, help="sensor geometry (key=value)")
    p.add_argument("--out", required=True, help="output label file")
    p.set_defaults(fn=cmd_overlaps)

    p = sub.add_parser("train", help="train the descriptor model")
    p.add_argument("--config", required=True,
                   help="model geometry + training schedule (key=value)")
    p.add_argument("--data", required=True, help="directory of .omrv images")
    p.add_argument("--labels", required=True, help="overlap label file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="embed range images into a descriptor db")
    p.add_argument("--ckpt", required=True, help="checkpoint file (.omck)")
    p.add_argument("--ranges", required=True, help="directory of .omrv images")
    p.add_argument("--out", required=True, help="output database (.omdb)")
    p.add_argument("--config", help="model geometry (defaults to model.kv "
                                    "next to the checkpoint)")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("search", help="k nearest neighbors for each query")
    p.add_argument("--db", required=True, help="database (.omdb)")
    p.add_argument("--query", required=True, help="query descriptors (.omdb)")
    p.add_argument("--k", required=True, type=int, help="neighbors per query")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("eval-loop", help="loop-closure evaluation")
    p.add_argument("--db", required=True, help="trajectory descriptors (.omdb)")
    p.add_argument("--poses", required=True,
                   help="trajectory poses (consistency check)")
    p.add_argument("--labels", required=True, help="overlap label file")
    p.add_argument("--protocol", required=True, help="protocol (key=value)")
    p.set_defaults(fn=cmd_eval_loop)

    p = sub.add_parser("eval-place", help="cross-session place recognition")
    p.add_argument("--db", required=True, help="database session (.omdb)")
    p.add_argument("--query-db", required=True, help="query session (.omdb)")
    p.add_argument("--poses-a", required=True, help="database session poses")
    p.add_argument("--poses-b", required=True, help="query session poses")
    p.add_argument("--protocol", required=True, help="protocol (key=value)")
    p.set_defaults(fn=cmd_eval_place)

    p = sub.add_parser("selfcheck", help="run the built-in invariant suite")
    p.set_defaults(fn=cmd_selfcheck)

    p = sub.add_parser("bench", help="wall-time report (informational)")
    p.add_argument("--ckpt", required=True, help="checkpoint file (.omck)")
    p.add_argument("--reps", type=int, default=10, help="repetitions per row")
    p.add_argument("--config", help="model geometry (defaults to model.kv "
                                    "next to the checkpoint)")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DegenerateInputError as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

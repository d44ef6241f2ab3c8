"""Command line entry point: ``jointflow {gen-data,train,sample,eval,export-mesh}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np
import torch

from . import __version__
from .data import DataConfig, SampleArchive, drop_parts, generate_samples, sample_rng, write_archive
from .evaluation import PROTOCOLS, evaluate, write_report
from .manifold import matrix_to_quaternion
from .model import JointModel
from .sampler import DEFAULT_GUIDANCE, DEFAULT_STEPS, joint_sample, problem_from_sample
from .training import TrainConfig, train_stage1, train_stage2

log = logging.getLogger("jointflow")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load(ckpt):
    model, meta, _ = JointModel.load(ckpt)
    mode = "assembly" if meta.get("stage") == 1 else "joint"
    return model.eval(), meta, mode


def _pose_table(poses, ids) -> str:
    lines = ["# fragment qw qx qy qz tx ty tz"]
    quats = matrix_to_quaternion(poses.rotation)
    for fid, q, a in zip(ids, quats, poses.translation):
        lines.append(" ".join([str(int(fid))] + [f"{v:.9f}" for v in (*q, *a)]))
    return "\n".join(lines) + "\n"


# -- subcommands ----------------------------------------------------------------
def cmd_gen_data(args):
    cfg = DataConfig(family=args.family, min_parts=args.min_parts, max_parts=args.max_parts,
                     min_fragment_fraction=args.min_fragment_fraction)
    meta = {"family": args.family, "seed": args.seed, "min_parts": args.min_parts, "max_parts": args.max_parts,
            "min_fragment_fraction": args.min_fragment_fraction}
    n = write_archive(generate_samples(cfg, args.n, args.seed), args.out, meta)
    log.info("wrote %d samples to %s", n, args.out)


def cmd_train(args):
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    with SampleArchive(args.data) as ds:
        if args.stage == 1:
            path = train_stage1(cfg, ds, args.out, resume=args.resume)
        else:
            if not (args.init or args.resume):
                raise SystemExit("stage 2 needs --init STAGE1_CKPT or --resume CKPT")
            path = train_stage2(cfg, args.init, ds, args.out, resume=args.resume)
    print(path)


def cmd_sample(args):
    model, meta, mode = _load(args.ckpt)
    with SampleArchive(args.input) as ds:
        sample = ds[args.index]
    rng = sample_rng(args.seed, args.index)
    if args.protocol == "missing":
        sample = drop_parts(sample, 0.0, rng, count=args.drop)
    problem = problem_from_sample(sample, rng)
    result = joint_sample(model, [problem], args.steps, args.guidance, np.random.default_rng(args.seed),
                          decode=True, grid_resolution=args.grid, mode=mode)
    os.makedirs(args.out, exist_ok=True)
    ids = [sample.fragments[i].id for i in sample.observed]
    with open(os.path.join(args.out, "poses.txt"), "w") as f:
        f.write(_pose_table(result.poses[0], ids))
    np.savez(os.path.join(args.out, "fragments.npz"), *problem.fragments, ids=np.asarray(ids))
    mesh_file = None
    if result.meshes and result.meshes[0] is not None:
        mesh_file = f"mesh.{args.mesh_format}"
        result.meshes[0].write(os.path.join(args.out, mesh_file))
    manifest = {
        "version": __version__,
        "checkpoint": os.path.abspath(args.ckpt),
        "checkpoint_sha256": _sha256(args.ckpt),
        "checkpoint_stage": meta.get("stage"),
        "input": os.path.abspath(args.input),
        "index": args.index,
        "protocol": args.protocol,
        "steps": args.steps,
        "guidance": args.guidance,
        "seed": args.seed,
        "mode": mode,
        "anchor_fragment": int(ids[problem.anchor]),
        "poses": "poses.txt (maps the recentred points in fragments.npz into the assembled frame)",
        "mesh": mesh_file,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print(args.out)


def cmd_eval(args):
    model, meta, mode = (None, {}, "joint") if args.oracle else _load(args.ckpt)
    with SampleArchive(args.data) as ds:
        n = len(ds) if args.limit is None else min(args.limit, len(ds))
        samples = [ds[i] for i in range(n)]
    report, records = evaluate(model, samples, args.protocol, args.steps, args.guidance, args.seed,
                               mode=mode, oracle=args.oracle, grid_resolution=args.grid, checkpoint=args.ckpt)
    write_report(args.out, report, records)
    print(json.dumps({k: getattr(report, k) for k in ("RE", "TE", "PA", "CD", "num_samples")}))


def cmd_export_mesh(args):
    model, _, mode = _load(args.ckpt)
    if mode != "joint":
        raise SystemExit("export-mesh needs a stage-2 checkpoint (stage 1 has no generation branch)")
    os.makedirs(args.out, exist_ok=True)
    with SampleArchive(args.data) as ds:
        for index in args.indices:
            sample = ds[index]
            rng = sample_rng(args.seed, index)
            if args.protocol == "missing":
                sample = drop_parts(sample, 0.0, rng, count=1)
            problem = problem_from_sample(sample, rng)
            result = joint_sample(model, [problem], args.steps, args.guidance, np.random.default_rng([args.seed, index]),
                                  grid_resolution=args.grid)
            mesh = result.meshes[0]
            if mesh is None:
                log.warning("sample %d: generated latent has no surface", index)
                continue
            path = os.path.join(args.out, f"{index:05d}_generated.{args.format}")
            mesh.write(path)
            with torch.no_grad():
                pts = torch.from_numpy(sample.whole_points[None].astype(np.float32))
                qs = torch.from_numpy(sample.whole_queries[None, : model.config.generation.latent_tokens].astype(np.float32))
                z = model.encode_shapes(pts, qs)[0]
            try:
                model.decode_mesh(z, args.grid).write(os.path.join(args.out, f"{index:05d}_reconstruction.{args.format}"))
            except Exception as exc:  # reconstruction is a reference only
                log.warning("sample %d: reconstruction failed: %s", index, exc)
            print(path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointflow")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic sample archive")
    g.add_argument("--family", choices=("parts", "fracture"), default="fracture")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--min-parts", type=int, default=2)
    g.add_argument("--max-parts", type=int, default=20)
    g.add_argument("--min-fragment-fraction", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--init", help="stage-1 checkpoint to start stage 2 from")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="assemble one sample and decode its shape")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True, help="sample archive")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    s.add_argument("--guidance", type=float, default=DEFAULT_GUIDANCE)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--protocol", choices=PROTOCOLS, default="complete")
    s.add_argument("--drop", type=int, default=1, help="parts withheld under --protocol missing")
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--mesh-format", choices=("obj", "ply"), default="obj")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="benchmark a checkpoint")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", choices=PROTOCOLS, default="complete")
    e.add_argument("--out", required=True)
    e.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    e.add_argument("--guidance", type=float, default=DEFAULT_GUIDANCE)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int)
    e.add_argument("--grid", type=int, default=64)
    e.add_argument("--oracle", action="store_true", help="score ground-truth velocities instead of a model")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-mesh", help="write generated and reconstructed meshes for inspection")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--indices", type=int, nargs="+", default=[0])
    x.add_argument("--protocol", choices=PROTOCOLS, default="complete")
    x.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    x.add_argument("--guidance", type=float, default=DEFAULT_GUIDANCE)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--grid", type=int, default=64)
    x.add_argument("--format", choices=("obj", "ply"), default="obj")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_mesh)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.oracle and not args.ckpt:
        raise SystemExit("eval needs --ckpt (or --oracle)")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())

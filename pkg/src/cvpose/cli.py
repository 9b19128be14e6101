"""Command line interface.

Exit codes: 0 success, 1 domain or file errors (reported without a
traceback), 2 usage errors (argparse).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import CvposeError
from .experiments import (ABLATION_VARIANTS, ablation_study, format_table,
                          noise_robustness, unseen_pair_study)
from .geometry import Pose2D, load_rig, save_rig, triangulate_pose
from .graph import default_topology, load_topology, save_topology
from .metrics import evaluate
from .network import CVUGCN, load_checkpoint
from .syndata import (SyntheticConfig, default_rig, file_sha256,
                      generate_dataset, load_dataset, save_dataset,
                      save_manifest)
from .training import (TrainConfig, fit, load_train_config, precompute_coarse,
                       save_train_config)


def _topo(args):
    if getattr(args, "topology", None):
        return load_topology(args.topology)
    return default_topology()


def _model(args, topo):
    ckpt = load_checkpoint(args.checkpoint, topo)
    return CVUGCN(topo, ckpt.config, weights=ckpt.weights)


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args):
    cfg = SyntheticConfig(
        n_samples=args.n_samples, seed=args.seed, sigma_px=args.sigma_px,
        perturb_rot_deg=args.perturb_rot_deg,
        perturb_trans_mm=args.perturb_trans_mm,
        include_gt=not args.no_gt)
    cameras = default_rig(n_cameras=args.cameras,
                          separation_deg=args.separation_deg)
    pairs = None
    if args.pairs:
        pairs = [tuple(p.split(":")) for p in args.pairs.split(",")]
        for p in pairs:
            if len(p) != 2:
                raise CvposeError(f"bad pair spec {':'.join(p)!r}")
    topo = _topo(args)
    samples, true_rig, assumed = generate_dataset(cfg, topo, cameras, pairs)
    os.makedirs(args.out, exist_ok=True)
    paths = {
        "dataset": os.path.join(args.out, "dataset.jsonl"),
        "rig_true": os.path.join(args.out, "rig_true.jsonl"),
        "rig_assumed": os.path.join(args.out, "rig_assumed.jsonl"),
        "topology": os.path.join(args.out, "topology.jsonl"),
    }
    save_dataset(paths["dataset"], samples, topo)
    save_rig(paths["rig_true"], true_rig)
    save_rig(paths["rig_assumed"], assumed)
    save_topology(paths["topology"], topo)
    hashes = {name: file_sha256(p) for name, p in paths.items()}
    save_manifest(os.path.join(args.out, "manifest.json"), cfg, hashes,
                  len(samples))
    print(f"wrote {len(samples)} samples to {paths['dataset']}")
    for name, p in paths.items():
        print(f"  {name}: {p}")
    return 0


def cmd_triangulate(args):
    topo = _topo(args)
    samples = load_dataset(args.data, topo)
    cameras = load_rig(args.rig)
    coarse, skipped = precompute_coarse(samples, cameras, topo,
                                        mode=args.mode)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(json.dumps({"schema": "coarse-v1",
                                 "n_joints": topo.n_joints}) + "\n")
            for s in samples:
                if s.sample_id not in coarse:
                    continue
                x1, x2 = coarse[s.sample_id]
                fh.write(json.dumps({
                    "id": s.sample_id, "views": list(s.pair),
                    "joints_3d": {s.pair[0]: x1.tolist(),
                                  s.pair[1]: x2.tolist()}},
                    sort_keys=True) + "\n")
    have_gt = all(s.joints_3d_gt for s in samples)
    print(f"triangulated {len(coarse)} of {len(samples)} samples "
          f"({len(skipped)} skipped, mode={args.mode})")
    if have_gt and coarse:
        errs = []
        for s in samples:
            if s.sample_id not in coarse:
                continue
            for v, x in zip(s.pair, coarse[s.sample_id]):
                errs.append(np.linalg.norm(
                    x - s.joints_3d_gt[v], axis=1).mean())
        print(f"MPJPE vs ground truth: {np.mean(errs):.4f} mm")
    return 0


def cmd_train(args):
    topo = _topo(args)
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    train_samples = load_dataset(args.data, topo)
    val_samples = load_dataset(args.val_data, topo) if args.val_data else []
    cameras = load_rig(args.rig)

    def progress(epoch, stats, lr, monitor):
        print(f"epoch {epoch:4d}  loss {stats['loss']:.4f}  "
              f"monitor {monitor:.4f}  lr {lr:.3e}", flush=True)

    result = fit(train_samples, val_samples, cameras, cfg, topo=topo,
                 out_dir=args.out_dir, resume_from=args.resume,
                 progress=progress if not args.quiet else None)
    os.makedirs(args.out_dir, exist_ok=True)
    save_train_config(os.path.join(args.out_dir, "train.cfg"), cfg)
    print(f"finished {cfg.epochs} epochs; best monitored loss "
          f"{result.best_val:.6f}")
    for name, path in sorted(result.checkpoints.items()):
        print(f"  {name}: {path}")
    if result.skipped_train:
        print(f"  skipped {len(result.skipped_train)} untriangulatable samples")
    return 0


def cmd_eval(args):
    topo = _topo(args)
    samples = load_dataset(args.data, topo)
    cameras = load_rig(args.rig)
    model = _model(args, topo)
    report = evaluate(samples, cameras, model, topo, tri_mode=args.mode)
    print(f"samples evaluated: {report.n_samples} "
          f"(skipped {len(report.skipped)})")
    print(f"MPJPE  triangulated: {report.mpjpe_tri_mm:.4f} mm")
    print(f"MPJPE  refined:      {report.mpjpe_refined_mm:.4f} mm")
    print(f"P-MPJPE triangulated: {report.pmpjpe_tri_mm:.4f} mm")
    print(f"P-MPJPE refined:      {report.pmpjpe_refined_mm:.4f} mm")
    if args.report:
        report.save(args.report)
        print(f"report written to {args.report}")
    return 0


def cmd_ablate(args):
    topo = _topo(args)
    train_samples = load_dataset(args.train_data, topo)
    test_samples = load_dataset(args.test_data, topo)
    cameras = load_rig(args.rig)
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg.epochs = args.epochs
    variants = tuple(args.variants.split(",")) if args.variants \
        else ABLATION_VARIANTS
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise CvposeError(f"unknown variant {v!r}; choose from "
                              f"{', '.join(ABLATION_VARIANTS)}")

    def progress(name, epoch, stats, lr):
        print(f"[{name}] epoch {epoch:4d} loss {stats['loss']:.4f}",
              flush=True)

    rows = ablation_study(train_samples, test_samples, cameras, cfg, topo,
                          variants=variants,
                          progress=progress if not args.quiet else None)
    print(format_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
        print(f"rows written to {args.out}")
    return 0


def cmd_noise(args):
    topo = _topo(args)
    samples = load_dataset(args.data, topo)
    cameras = load_rig(args.rig)
    model = _model(args, topo)
    sigmas = tuple(float(s) for s in args.sigmas.split(","))
    rows = noise_robustness(samples, cameras, model, topo, sigmas_mm=sigmas,
                            seed=args.seed)
    print(format_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
        print(f"rows written to {args.out}")
    return 0


def cmd_unseen(args):
    topo = _topo(args)
    cameras = default_rig(n_cameras=3, separation_deg=args.separation_deg)
    ids = [c.cam_id for c in cameras]
    seen_pair = [(ids[0], ids[1])]
    unseen_pair = [(ids[0], ids[2])]
    base = dict(sigma_px=args.sigma_px, perturb_rot_deg=args.perturb_rot_deg,
                perturb_trans_mm=args.perturb_trans_mm)
    train_samples, _, assumed = generate_dataset(
        SyntheticConfig(n_samples=args.n_train, seed=args.seed, **base),
        topo, cameras, seen_pair)
    seen_test, _, _ = generate_dataset(
        SyntheticConfig(n_samples=args.n_test, seed=args.seed + 1, **base),
        topo, cameras, seen_pair)
    unseen_test, _, _ = generate_dataset(
        SyntheticConfig(n_samples=args.n_test, seed=args.seed + 2, **base),
        topo, cameras, unseen_pair)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed,
                      batch_size=args.batch_size)
    rows, _ = unseen_pair_study(train_samples, seen_test, unseen_test,
                                assumed, cfg, topo)
    print(format_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
        print(f"rows written to {args.out}")
    return 0


def cmd_render(args):
    from .render import render_sample, save_svg
    topo = _topo(args)
    samples = load_dataset(args.data, topo)
    cameras = load_rig(args.rig)
    wanted = None
    if args.sample_id:
        for s in samples:
            if s.sample_id == args.sample_id:
                wanted = s
                break
        if wanted is None:
            raise CvposeError(f"sample {args.sample_id!r} not in {args.data}")
    else:
        if not (0 <= args.index < len(samples)):
            raise CvposeError(f"index {args.index} out of range "
                              f"(dataset has {len(samples)} samples)")
        wanted = samples[args.index]
    coarse_map, skipped = precompute_coarse([wanted], cameras, topo,
                                            mode=args.mode)
    coarse = coarse_map.get(wanted.sample_id)
    if coarse is None:
        raise CvposeError(f"sample {wanted.sample_id} cannot be triangulated")
    refined = None
    if args.checkpoint:
        model = _model(args, topo)
        p1, p2 = model.refine(
            _as_pose3d(coarse[0], wanted.pair[0]),
            _as_pose3d(coarse[1], wanted.pair[1]))
        refined = (p1.joints, p2.joints)
    svg = render_sample(wanted, cameras, topo, coarse=coarse, refined=refined)
    save_svg(args.out, svg)
    print(f"wrote {args.out}")
    return 0


def _as_pose3d(arr, frame):
    from .geometry import Pose3D
    return Pose3D(arr, frame_id=frame)


# -- parser ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cvpose",
                                description="Weakly supervised cross-view "
                                            "3D pose estimation at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-samples", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sigma-px", type=float, default=0.0)
    sp.add_argument("--perturb-rot-deg", type=float, default=0.0)
    sp.add_argument("--perturb-trans-mm", type=float, default=0.0)
    sp.add_argument("--cameras", type=int, default=2)
    sp.add_argument("--separation-deg", type=float, default=60.0)
    sp.add_argument("--pairs", help="comma list like cam1:cam2,cam2:cam3")
    sp.add_argument("--no-gt", action="store_true")
    sp.add_argument("--topology")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("triangulate", help="coarse poses from 2D detections")
    sp.add_argument("--data", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--mode", choices=("dual", "single"), default="dual")
    sp.add_argument("--out")
    sp.add_argument("--topology")
    sp.set_defaults(func=cmd_triangulate)

    sp = sub.add_parser("train", help="train the refinement network")
    sp.add_argument("--data", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--val-data")
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--resume")
    sp.add_argument("--quiet", action="store_true")
    sp.add_argument("--topology")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint against ground truth")
    sp.add_argument("--data", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("dual", "single"), default="dual")
    sp.add_argument("--report")
    sp.add_argument("--topology")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and score model variants")
    sp.add_argument("--train-data", required=True)
    sp.add_argument("--test-data", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--variants")
    sp.add_argument("--out")
    sp.add_argument("--quiet", action="store_true")
    sp.add_argument("--topology")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("noise", help="robustness to 3D input noise")
    sp.add_argument("--data", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sigmas", default="5,10,15,20")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.add_argument("--topology")
    sp.set_defaults(func=cmd_noise)

    sp = sub.add_parser("unseen", help="generalization to an unseen camera pair")
    sp.add_argument("--n-train", type=int, default=2000)
    sp.add_argument("--n-test", type=int, default=500)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sigma-px", type=float, default=5.0)
    sp.add_argument("--perturb-rot-deg", type=float, default=0.0)
    sp.add_argument("--perturb-trans-mm", type=float, default=0.0)
    sp.add_argument("--separation-deg", type=float, default=40.0)
    sp.add_argument("--out")
    sp.add_argument("--topology")
    sp.set_defaults(func=cmd_unseen)

    sp = sub.add_parser("render", help="SVG figure for one sample")
    sp.add_argument("--data", required=True)
    sp.add_argument("--rig", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sample-id")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--checkpoint")
    sp.add_argument("--mode", choices=("dual", "single"), default="dual")
    sp.add_argument("--topology")
    sp.set_defaults(func=cmd_render)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CvposeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc.strerror or exc}: "
              f"{getattr(exc, 'filename', '')}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

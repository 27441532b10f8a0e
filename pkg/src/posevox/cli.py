"""Command-line driver wiring the library into reproducible runs.

Subcommands::

    synth    render a synthetic multi-view dataset
    train    fit the score and pose networks on a dataset
    infer    run volumetric inference over a dataset
    eval     score a results file against dataset ground truth
    ablate   sweep camera count or coarse resolution

Each invocation writes into one directory (--out, resolved against
$POSEVOX_OUT_ROOT when relative) along with a copy of the resolved
config and a run.log.  Timestamps are confined to the log, so reruns
with identical config, seed, and inputs reproduce every other output
byte for byte.  Exit codes: 0 success, 1 usage or config error,
2 runtime failure; failures print one "ERROR: ..." line to stderr.
"""

import argparse
import contextlib
import csv
import logging
import os
import sys

from .camera import load_rig
from .config import load_config
from .metrics import ap_k, evaluate
from .net3d import (
    TrainConfig,
    TrainScene,
    load_weights,
    save_weights,
    train_joint,
)
from .proposal import (
    analytic_score_volume,
    net_score_volume,
    nms_3d,
    read_proposals,
    write_proposals,
)
from .regress import estimate_pose, read_results, write_results
from .synth import default_skeleton, load_dataset, make_dataset
from .volume import build_feature_volume, make_coarse_grid

OUT_ROOT_ENV = "POSEVOX_OUT_ROOT"


class _ArgParser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract here reserves 2 for
    # runtime failures and uses 1 for anything the caller got wrong.
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"ERROR: {message}\n")
        raise SystemExit(1)


def resolve_out_dir(path):
    """Resolve --out against $POSEVOX_OUT_ROOT when relative."""
    root = os.environ.get(OUT_ROOT_ENV, "")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


@contextlib.contextmanager
def _run_log(out_dir):
    # A fresh unregistered Logger per run: repeated main() calls in one
    # process must not stack handlers on a shared global logger.
    logger = logging.Logger("posevox.run")
    handler = logging.FileHandler(
        os.path.join(out_dir, "run.log"), encoding="utf-8"
    )
    handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    )
    logger.addHandler(handler)
    try:
        yield logger
    finally:
        handler.close()


def _load_rig_from(cfg):
    if not cfg.rig:
        raise ValueError("config sets no rig path")
    return load_rig(cfg.rig)


def _load_mode_weights(cfg, args):
    """Weight files for net mode; analytic mode needs none."""
    if cfg.mode != "net":
        return None, None
    if not args.cpn or not args.prn:
        raise ValueError(
            "net mode needs --cpn and --prn weight files"
        )
    return load_weights(args.cpn), load_weights(args.prn)


def _check_root(cfg, ds):
    if cfg.root_joint >= len(ds.joint_names):
        raise ValueError(
            f"root_joint {cfg.root_joint} out of range for "
            f"{len(ds.joint_names)}-joint dataset"
        )


def _infer_frames(ds, cfg, grid, n_views, cpn_w, prn_w, threshold):
    """Run the volumetric pipeline over every frame.

    Frames are independent read-only work items, so any execution
    order is valid; outputs are listed by ascending frame index.
    Returns ([(frame, [Pose3D])], [(frame, [Proposal])]).
    """
    pose_frames, prop_frames = [], []
    sk = default_skeleton()
    if tuple(ds.joint_names) != tuple(sk.joint_names):
        sk = None  # unknown joint set: fall back to whole-cube decoding
    for i in range(len(ds.scenes)):
        views = ds.views(i)[:n_views]
        fv = build_feature_volume(grid, views)
        if cfg.mode == "net":
            sv = net_score_volume(fv, cpn_w)
        else:
            sv = analytic_score_volume(fv, cfg.root_joint)
        props = nms_3d(
            sv,
            threshold=threshold,
            max_keep=cfg.nms.max_keep,
            cuboid_edge_mm=cfg.fine.edge_mm,
        )
        poses = [
            estimate_pose(
                p,
                views,
                mode=cfg.mode,
                fine_resolution=cfg.fine.resolution,
                beta=cfg.fine.beta,
                skeleton=sk,
                root_window_mm=cfg.fine.root_window_mm,
                limb_slack_mm=cfg.fine.limb_slack_mm,
                weights=prn_w,
                skeleton_id=ds.skeleton_id,
            )
            for p in props
        ]
        pose_frames.append((i, poses))
        prop_frames.append((i, props))
    return pose_frames, prop_frames


def _dataset_limbs(ds):
    sk = default_skeleton()
    if tuple(ds.joint_names) == tuple(sk.joint_names):
        return sk.limbs
    return None


def _report_for(cfg, ds, poses_by_frame, props_by_frame=None):
    """Evaluate per-frame poses (and optional proposals) against GT."""
    frames = []
    proposal_frames = [] if props_by_frame is not None else None
    for i, rec in enumerate(ds.scenes):
        gts = [rec.gt_joints[p] for p in range(rec.gt_joints.shape[0])]
        frames.append((poses_by_frame.get(i, []), gts))
        if props_by_frame is not None:
            roots = [g[cfg.root_joint] for g in gts]
            centers = [p.center for p in props_by_frame.get(i, [])]
            proposal_frames.append((centers, roots))
    return evaluate(
        frames,
        limbs=_dataset_limbs(ds),
        ap_thresholds=cfg.eval.ap_thresholds,
        recall_thresholds=cfg.eval.recall_thresholds,
        proposal_frames=proposal_frames,
        align_root=cfg.eval.align_root,
        root_index=cfg.root_joint,
        pcp_alpha=cfg.eval.pcp_alpha,
    )


# --- plotting (hand-rolled SVG keeps the suite dependency-free) ---

_SVG_W, _SVG_H, _SVG_M = 480, 320, 50
_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _svg_xy(x, y, x_max, y_max):
    px = _SVG_M + (x / x_max) * (_SVG_W - 2 * _SVG_M)
    py = _SVG_H - _SVG_M - (y / y_max) * (_SVG_H - 2 * _SVG_M)
    return f"{px:.2f},{py:.2f}"


def _write_svg_curves(path, title, x_label, y_label, curves, x_max, y_max):
    """Write labeled polylines as a standalone SVG (deterministic)."""
    left, bottom = _SVG_M, _SVG_H - _SVG_M
    right, top = _SVG_W - _SVG_M, _SVG_M
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
        f'height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W // 2}" y="20" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" '
        f'stroke="black"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{left}" y2="{top}" '
        f'stroke="black"/>',
        f'<text x="{_SVG_W // 2}" y="{_SVG_H - 10}" text-anchor="middle" '
        f'font-size="12">{x_label}</text>',
        f'<text x="14" y="{_SVG_H // 2}" text-anchor="middle" '
        f'font-size="12" transform="rotate(-90 14 {_SVG_H // 2})">'
        f'{y_label}</text>',
        f'<text x="{left}" y="{bottom + 14}" font-size="10">0</text>',
        f'<text x="{right}" y="{bottom + 14}" text-anchor="end" '
        f'font-size="10">{x_max:g}</text>',
        f'<text x="{left - 4}" y="{top}" text-anchor="end" '
        f'font-size="10">{y_max:g}</text>',
    ]
    for ci, (label, xs, ys) in enumerate(curves):
        color = _SVG_COLORS[ci % len(_SVG_COLORS)]
        pts = " ".join(
            _svg_xy(x, y, x_max, y_max) for x, y in zip(xs, ys)
        )
        if pts:
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" '
                f'stroke-width="1.5"/>'
            )
        parts.append(
            f'<text x="{right - 4}" y="{top + 14 + 14 * ci}" '
            f'text-anchor="end" font-size="10" fill="{color}">'
            f'{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")


def _write_plots(out_dir, cfg, report, frames):
    ts = sorted(report.recall)
    _write_svg_curves(
        os.path.join(out_dir, "recall_curve.svg"),
        "Proposal recall vs. distance threshold",
        "threshold (mm)",
        "recall",
        [("recall", ts, [report.recall[t] for t in ts])],
        x_max=max(ts),
        y_max=1.0,
    )
    curves = []
    for k in cfg.eval.ap_thresholds:
        ap, recalls, precisions = ap_k(
            frames,
            k,
            align_root=cfg.eval.align_root,
            root_index=cfg.root_joint,
            return_curve=True,
        )
        curves.append((f"{k:g} mm (AP {ap:.2f})", recalls, precisions))
    _write_svg_curves(
        os.path.join(out_dir, "pr_curve.svg"),
        "Precision vs. recall by match threshold",
        "recall",
        "precision",
        curves,
        x_max=1.0,
        y_max=1.0,
    )


# --- subcommands ---


def cmd_synth(args, cfg, out_dir, log):
    rig = _load_rig_from(cfg)
    log.info(
        "rendering %d scenes with %d cameras, seed %d",
        cfg.data.n_scenes,
        len(rig),
        cfg.seed,
    )
    manifest = make_dataset(
        out_dir,
        cfg.data.n_scenes,
        rig,
        bounds=cfg.space.extent,
        people=(cfg.data.people_min, cfg.data.people_max),
        noise=cfg.noise.to_model(),
        sigma_px=cfg.heatmap.sigma_px,
        seed=cfg.seed,
    )
    ds = load_dataset(manifest)
    n_poses = sum(r.gt_joints.shape[0] for r in ds.scenes)
    log.info("wrote %s", manifest)
    print(
        f"synth: {len(ds.scenes)} scenes, {n_poses} poses, "
        f"{len(rig)} cameras -> {out_dir}"
    )


def cmd_train(args, cfg, out_dir, log):
    ds = load_dataset(args.dataset)
    _check_root(cfg, ds)
    scenes = [
        TrainScene(views=ds.views(i), gt_joints=rec.gt_joints)
        for i, rec in enumerate(ds.scenes)
    ]
    t = cfg.train
    tc = TrainConfig(
        coarse_grid=make_coarse_grid(cfg.space.extent, t.coarse_resolution),
        epochs=t.epochs,
        batch_size=t.batch_size,
        lr_schedule=t.lr_schedule,
        seed=cfg.seed,
        cpn_weight=t.cpn_weight,
        prn_weight=t.prn_weight,
        optimizer=t.optimizer,
        cpn_width=t.cpn_width,
        prn_width=t.prn_width,
        fine_resolution=t.fine_resolution,
        fine_edge_mm=cfg.fine.edge_mm,
        root_joint=cfg.root_joint,
        teacher_forcing_epochs=t.teacher_forcing_epochs,
        nms_threshold=cfg.nms.net_threshold,
        nms_max_keep=cfg.nms.max_keep,
    )
    log.info(
        "lr schedule: %s",
        "; ".join(f"epoch {e}: {r:g}" for e, r in sorted(tc.lr_schedule)),
    )
    log.info("training on %d scenes from %s", len(scenes), args.dataset)
    cpn_w, prn_w, curve = train_joint(scenes, tc, joint_names=ds.joint_names)
    save_weights(os.path.join(out_dir, "cpn.pxw"), cpn_w)
    save_weights(os.path.join(out_dir, "prn.pxw"), prn_w)
    with open(
        os.path.join(out_dir, "loss_curve.csv"), "w", encoding="utf-8",
        newline="",
    ) as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "cpn_loss", "prn_loss", "total_loss"])
        for row in curve:
            w.writerow(
                [
                    row["epoch"],
                    repr(float(row["lr"])),
                    repr(float(row["cpn_loss"])),
                    repr(float(row["prn_loss"])),
                    repr(float(row["total_loss"])),
                ]
            )
    last = curve[-1]
    log.info(
        "final losses: cpn %g, prn %g, total %g",
        last["cpn_loss"],
        last["prn_loss"],
        last["total_loss"],
    )
    print(
        f"train: {len(curve)} epochs on {len(scenes)} scenes, "
        f"final total loss {last['total_loss']:.6g} -> {out_dir}"
    )


def cmd_infer(args, cfg, out_dir, log):
    ds = load_dataset(args.dataset)
    _check_root(cfg, ds)
    cpn_w, prn_w = _load_mode_weights(cfg, args)
    grid = make_coarse_grid(cfg.space.extent, cfg.space.coarse_resolution)
    threshold = (
        cfg.nms.net_threshold if cfg.mode == "net" else cfg.nms.threshold
    )
    log.info(
        "inferring %d frames in %s mode, NMS threshold %g",
        len(ds.scenes),
        cfg.mode,
        threshold,
    )
    pose_frames, prop_frames = _infer_frames(
        ds, cfg, grid, len(ds.rig), cpn_w, prn_w, threshold
    )
    write_results(
        os.path.join(out_dir, "results.json"), pose_frames, ds.joint_names
    )
    write_proposals(os.path.join(out_dir, "proposals.csv"), prop_frames)
    n_poses = sum(len(ps) for _, ps in pose_frames)
    log.info("wrote %d poses over %d frames", n_poses, len(pose_frames))
    print(
        f"infer: {len(pose_frames)} frames, {n_poses} poses "
        f"({cfg.mode} mode) -> {out_dir}"
    )


def cmd_eval(args, cfg, out_dir, log):
    joint_names, res_frames = read_results(args.results)
    ds = load_dataset(args.dataset)
    _check_root(cfg, ds)
    if tuple(joint_names) != tuple(ds.joint_names):
        raise ValueError(
            "results joint names do not match the dataset's skeleton"
        )
    props_by_frame = (
        read_proposals(args.proposals) if args.proposals else None
    )
    report = _report_for(cfg, ds, res_frames, props_by_frame)
    report.save_json(os.path.join(out_dir, "report.json"))
    report.save_csv(os.path.join(out_dir, "report.csv"))
    if args.plots:
        frames = [
            (
                res_frames.get(i, []),
                [r.gt_joints[p] for p in range(r.gt_joints.shape[0])],
            )
            for i, r in enumerate(ds.scenes)
        ]
        _write_plots(out_dir, cfg, report, frames)
    log.info(
        "evaluated %d predictions against %d GT poses",
        report.n_pred,
        report.n_gt,
    )
    ap_str = ", ".join(
        f"AP@{k:g} {report.ap[k]:.3f}" for k in sorted(report.ap)
    )
    print(
        f"eval: mpjpe {report.mpjpe_mm:.2f} mm over {report.n_matched} "
        f"matches; {ap_str} -> {out_dir}"
    )


def cmd_ablate(args, cfg, out_dir, log):
    ds = load_dataset(args.dataset)
    _check_root(cfg, ds)
    cpn_w, prn_w = _load_mode_weights(cfg, args)
    threshold = (
        cfg.nms.net_threshold if cfg.mode == "net" else cfg.nms.threshold
    )
    if args.axis == "views":
        settings = []
        for n in cfg.ablate.views:
            if not 1 <= n <= len(ds.rig):
                raise ValueError(
                    f"ablation wants {n} views, dataset has {len(ds.rig)}"
                )
            settings.append((f"views_{n}", n, cfg.space.coarse_resolution))
    else:
        settings = [
            (f"grid_{gx}x{gy}x{gz}", len(ds.rig), (gx, gy, gz))
            for gx, gy, gz in cfg.ablate.grids
        ]
    rows = []
    for tag, n_views, resolution in settings:
        log.info(
            "setting %s: %d views, coarse grid %s", tag, n_views, resolution
        )
        grid = make_coarse_grid(cfg.space.extent, resolution)
        pose_frames, prop_frames = _infer_frames(
            ds, cfg, grid, n_views, cpn_w, prn_w, threshold
        )
        sub = os.path.join(out_dir, tag)
        os.makedirs(sub, exist_ok=True)
        write_results(
            os.path.join(sub, "results.json"), pose_frames, ds.joint_names
        )
        write_proposals(os.path.join(sub, "proposals.csv"), prop_frames)
        report = _report_for(
            cfg, ds, dict(pose_frames), dict(prop_frames)
        )
        report.save_json(os.path.join(sub, "report.json"))
        report.save_csv(os.path.join(sub, "report.csv"))
        rows.append((tag, n_views, resolution, report))
    with open(
        os.path.join(out_dir, "ablation.csv"), "w", encoding="utf-8",
        newline="",
    ) as f:
        w = csv.writer(f)
        w.writerow(
            ["setting", "views", "grid_x", "grid_y", "grid_z", "mpjpe_mm"]
            + [f"ap{k:g}" for k in cfg.eval.ap_thresholds]
            + [f"recall{t:g}" for t in cfg.eval.recall_thresholds]
        )
        for tag, n_views, resolution, report in rows:
            w.writerow(
                [tag, n_views, *resolution, repr(float(report.mpjpe_mm))]
                + [repr(float(report.ap[k])) for k in cfg.eval.ap_thresholds]
                + [
                    repr(float(report.recall[t]))
                    for t in cfg.eval.recall_thresholds
                ]
            )
    log.info("wrote %d-row ablation table", len(rows))
    print(f"ablate: {len(rows)} settings over axis {args.axis} -> {out_dir}")


def build_parser():
    parser = _ArgParser(
        prog="posevox",
        description="Multi-camera volumetric 3D pose pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    def add(name, help_, func):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", required=True,
                        help="experiment config JSON")
        sp.add_argument(
            "--out",
            required=True,
            help=f"output directory (relative paths resolve against "
            f"${OUT_ROOT_ENV})",
        )
        sp.set_defaults(func=func)
        return sp

    add("synth", "render a synthetic multi-view dataset", cmd_synth)

    sp = add("train", "train the score and pose networks", cmd_train)
    sp.add_argument("--dataset", required=True,
                    help="dataset directory or manifest")

    sp = add("infer", "run volumetric inference over a dataset", cmd_infer)
    sp.add_argument("--dataset", required=True,
                    help="dataset directory or manifest")
    sp.add_argument("--cpn", help="score-network weights (net mode)")
    sp.add_argument("--prn", help="pose-network weights (net mode)")

    sp = add("eval", "score a results file against ground truth", cmd_eval)
    sp.add_argument("--results", required=True, help="results JSON file")
    sp.add_argument("--dataset", required=True,
                    help="dataset directory or manifest")
    sp.add_argument(
        "--proposals",
        help="proposals CSV for the recall curve (default: pose roots)",
    )
    sp.add_argument(
        "--plots",
        action="store_true",
        help="also write SVG recall and precision-recall curves",
    )

    sp = add("ablate", "sweep camera count or coarse resolution", cmd_ablate)
    sp.add_argument(
        "--axis",
        required=True,
        choices=("views", "grid"),
        help="ablation axis",
    )
    sp.add_argument("--dataset", required=True,
                    help="dataset directory or manifest")
    sp.add_argument("--cpn", help="score-network weights (net mode)")
    sp.add_argument("--prn", help="pose-network weights (net mode)")
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse help/usage paths
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        out_dir = resolve_out_dir(args.out)
        os.makedirs(out_dir, exist_ok=True)
        cfg.save(os.path.join(out_dir, "config.json"))
        with _run_log(out_dir) as log:
            log.info("command %s, config %s", args.command, args.config)
            args.func(args, cfg, out_dir, log)
        return 0
    except ValueError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 — anything else is a runtime failure
        print(f"ERROR: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: phantom-gen, train, segment, eval, hist.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datapipe, evaluator, postproc, segmenter
from .errors import (
    EmptyResultError,
    GenerationError,
    InvalidDataError,
    InvalidManifestError,
    MissingROIError,
    NoThresholdError,
    NumericalFailureError,
)
from .netgraph import NetworkConfig, init_model, predict
from .trainer import TrainConfig, load_state, run_training, save_state

log = logging.getLogger("selcut")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


def mask_name(subject_id: str, index: int) -> str:
    return f"{subject_id}_{index:04d}.png"


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- phantom-gen ------------------------------------------------------------------


def cmd_phantom_gen(args: argparse.Namespace) -> int:
    from .experiment import ExperimentConfig, phantom_corpus

    if args.n < 1:
        raise UsageError("--n must be at least 1")
    spec = datapipe.PhantomSpec(
        image_size=args.size,
        anomaly_brightness=args.anomaly_brightness,
        noise_std=args.noise_std,
        organ_intensity=args.organ_intensity,
        lesion_polarity=args.lesion_polarity,
    )
    cfg = ExperimentConfig(n_anomalous=args.n, n_normal=args.n, n_heldout=0, phantom=spec, seed=args.seed)
    anomalous, masks, normal = phantom_corpus(cfg)

    out = Path(args.out)
    for sub in ("normal", "anomalous", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    normal_paths, anomalous_paths, mask_paths = [], [], []
    for s in normal:
        rel = f"normal/{mask_name(s.subject_id, s.index)}"
        datapipe.save_png(out / rel, s.pixels)
        normal_paths.append(rel)
    for s, m in zip(anomalous, masks):
        rel = f"anomalous/{mask_name(s.subject_id, s.index)}"
        mrel = f"masks/{mask_name(s.subject_id, s.index)}"
        datapipe.save_png(out / rel, s.pixels)
        datapipe.save_mask_png(out / mrel, m)
        anomalous_paths.append(rel)
        mask_paths.append(mrel)
    datapipe.write_manifest(out / "normal.json", "normal", normal_paths, modality="phantom")
    datapipe.write_manifest(out / "anomalous.json", "anomalous", anomalous_paths, mask_paths, modality="phantom")
    _dump(out / "phantom_config.json", {"n": args.n, "seed": args.seed, "phantom": asdict(spec)})
    print(f"wrote {len(normal)} normal and {len(anomalous)} anomalous phantoms to {out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: {e}") from e
    # manifest paths in a config file are relative to the file
    for key in ("inputs", "reference"):
        if key in doc:
            doc[key] = [str((p.parent / m)) if not Path(m).is_absolute() else m for m in doc[key]]
    return doc


_TRAIN_FLAGS = {
    "stage1_cycles": "stage1_cycles",
    "stage2_cycles": "stage2_cycles",
    "epochs_d": "epochs_per_D_step",
    "epochs_m": "epochs_per_M_step",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "disc_lr": "disc_learning_rate",
}


def resolve_train_config(args: argparse.Namespace) -> dict:
    """Config file merged with command line overrides; every problem is reported at once."""
    doc = _load_config(args.config)
    train = dict(doc.get("train", {}))
    network = dict(doc.get("network", {}))
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            train[key] = v
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    train["seed"] = seed
    if args.size is not None:
        network["input_size"] = [args.size, args.size]
    resolved = {
        "name": args.name or doc.get("name", "run"),
        "out": args.out or doc.get("out", "runs"),
        "inputs": list(args.inputs or doc.get("inputs", [])),
        "reference": list(args.reference or doc.get("reference", [])),
        "seed": seed,
        "network": network,
        "train": train,
    }

    problems = []
    if not resolved["inputs"]:
        problems.append("no input manifests given (--inputs or 'inputs' in the config)")
    if not resolved["reference"]:
        problems.append("no reference manifests given (--reference or 'reference' in the config)")
    unknown = set(doc) - {"name", "out", "inputs", "reference", "seed", "network", "train"}
    if unknown:
        problems.append(f"unknown config keys: {sorted(unknown)}")
    try:
        resolved["network"] = NetworkConfig.from_dict(network).to_dict()
    except (TypeError, ValueError) as e:
        problems.append(f"network: {e}")
    try:
        resolved["train"] = TrainConfig.from_dict(train).to_dict()
    except (TypeError, ValueError) as e:
        problems.append(f"train: {e}")
    if problems:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
    return resolved


def _slices_from(manifests: Sequence[str], size: tuple[int, int]) -> list[datapipe.Slice]:
    out = []
    for m in manifests:
        for s in datapipe.load_slices(datapipe.load_subject(m)):
            if s.shape != tuple(size):
                raise UsageError(f"{m}: slice {s.index} is {s.shape}, network expects {tuple(size)}")
            out.append(s)
    return out


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_train_config(args)
    network = NetworkConfig.from_dict(cfg["network"])
    train = TrainConfig.from_dict(cfg["train"])
    inputs = _slices_from(cfg["inputs"], network.input_size)
    reference = datapipe.ReferenceSet(_slices_from(cfg["reference"], network.input_size))
    if not inputs:
        raise EmptyResultError("input manifests contain no slices")
    inputs, reference = datapipe.balance_sets(inputs, reference, seed=cfg["seed"])

    run_dir = Path(cfg["out"]) / cfg["name"]
    run_dir.mkdir(parents=True, exist_ok=True)
    _dump(run_dir / "config.json", cfg)

    state = init_model(network, cfg["seed"])
    save_state(run_dir / "ckpt_cycle0.bin", state, meta={"train": train.to_dict(), "position": None})
    result = run_training(state, inputs, reference, train, run_dir=run_dir)
    print(f"trained {result.cycles_run} cycle(s); run directory {run_dir}")
    return EXIT_OK


# --- segment / hist ---------------------------------------------------------------


def _roi_masks(path: str, expected: int) -> list[np.ndarray]:
    rec = datapipe.load_subject(path)
    masks = datapipe.load_masks(rec) if rec.mask_paths is not None else [
        s.pixels >= 0.5 for s in datapipe.load_slices(rec)
    ]
    if len(masks) != expected:
        raise UsageError(f"ROI manifest {path} has {len(masks)} masks for {expected} slices")
    return masks


def _reconstruct(checkpoint: str, manifests: Sequence[str]):
    state, _, _ = load_state(checkpoint)
    slices = _slices_from(manifests, state.config.input_size)
    if not slices:
        raise EmptyResultError("manifests contain no slices")
    ro = predict(state, slices).numpy()[2]
    return slices, ro


def save_histogram_plot(path: Path, hist: segmenter.Histogram256, peaks, threshold: int | None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.2), dpi=100)
    ax.bar(np.arange(segmenter.NBINS), hist.counts, width=1.0, color="0.4")
    for p in peaks:
        ax.axvline(p.bin, color="tab:blue", lw=0.8, ls=":")
    if threshold is not None:
        ax.axvline(threshold, color="tab:red", lw=1.2, label=f"threshold {threshold}")
        ax.legend(loc="upper left", fontsize=8)
    ax.set_xlim(-1, 256)
    ax.set_xlabel("intensity bin")
    ax.set_ylabel("pixels")
    ax.set_yscale("symlog")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _peaks_doc(peaks) -> list[dict]:
    return [asdict(p) for p in peaks]


def cmd_segment(args: argparse.Namespace) -> int:
    rule = segmenter.ThresholdRule(args.polarity, args.threshold, roi_required=args.polarity == "dark")
    if args.roi and len(args.roi) != len(args.manifest):
        raise UsageError("give one --roi manifest per --manifest")
    if rule.roi_required and not args.roi:
        raise MissingROIError("dark polarity needs --roi masks")
    if (args.gate is None) != (args.gate_threshold is None):
        raise UsageError("--gate and --gate-threshold go together")

    slices, ro = _reconstruct(args.checkpoint, args.manifest)
    rois = None
    if args.roi:
        rois = []
        for m, r in zip(args.manifest, args.roi):
            rois += _roi_masks(r, len(datapipe.load_subject(m).slice_paths))
    gates = None
    if args.gate:
        gates = [s.pixels for s in _slices_from(args.gate, ro.shape[1:])]
        if len(gates) != len(slices):
            raise UsageError(f"{len(gates)} gate slices for {len(slices)} inputs")

    # group indices: one group for the dataset, or one per subject
    groups: OrderedDict[str, list[int]] = OrderedDict()
    for i, s in enumerate(slices):
        groups.setdefault(s.subject_id if args.per_subject else "all", []).append(i)

    out = Path(args.out)
    mask_dir = out / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    post_dir = None
    if args.open or gates is not None:
        post_dir = out / "masks_post"
        post_dir.mkdir(exist_ok=True)

    report: dict = {"polarity": args.polarity, "groups": {}}
    for key, idx in groups.items():
        g_rois = None if rois is None else [rois[i] for i in idx]
        try:
            choice = segmenter.dataset_threshold([ro[i] for i in idx], rule, g_rois)
        except NoThresholdError as e:
            raise NoThresholdError(f"{e} (group {key!r})") from e
        tag = "" if key == "all" else f"_{key}"
        choice.histogram.to_csv(out / f"histogram{tag}.csv")
        save_histogram_plot(out / f"histogram{tag}.png", choice.histogram, choice.peaks, choice.threshold)
        entry = {"threshold": choice.threshold, "peaks": _peaks_doc(choice.peaks)}
        if args.flip_diagnostics and choice.peaks:
            entry["flip_candidates"] = segmenter.flip_candidates(choice.peaks)
        report["groups"][key] = entry
        print(f"{key}: threshold {choice.threshold} (peaks {[p.bin for p in choice.peaks]})")

        for j, i in enumerate(idx):
            s = slices[i]
            roi = None if g_rois is None else g_rois[j]
            m = segmenter.apply_threshold(ro[i], choice.threshold, rule, roi)
            datapipe.save_mask_png(mask_dir / mask_name(s.subject_id, s.index), m)
            if post_dir is not None:
                q = m
                if gates is not None:
                    q = postproc.modality_gate(q, gates[i], args.gate_threshold)
                if args.open:
                    q = postproc.morphological_open(q, args.open)
                datapipe.save_mask_png(post_dir / mask_name(s.subject_id, s.index), q)
            if args.flip_diagnostics and choice.peaks:
                # the two extreme clusters as masks, on the oriented scale
                v = segmenter.to_bins(segmenter.oriented([ro[i]], rule, None if roi is None else [roi])[0])
                cands = entry["flip_candidates"]
                for name, cm in (("leftmost", v <= cands["leftmost"]), ("rightmost", v >= cands["rightmost"])):
                    if roi is not None:
                        cm &= roi
                    d = out / f"masks_{name}"
                    d.mkdir(exist_ok=True)
                    datapipe.save_mask_png(d / mask_name(s.subject_id, s.index), cm)

    report["args"] = {k: v for k, v in vars(args).items() if k != "func"}
    _dump(out / "segment.json", report)
    return EXIT_OK


def cmd_hist(args: argparse.Namespace) -> int:
    if (args.csv is None) == (args.checkpoint is None):
        raise UsageError("give either --csv or --checkpoint with --manifest")
    if args.csv is not None:
        hist = segmenter.Histogram256.from_csv(args.csv)
    else:
        if not args.manifest:
            raise UsageError("--checkpoint needs --manifest")
        _, ro = _reconstruct(args.checkpoint, args.manifest)
        hist = segmenter.compute_histogram(list(ro))
    peaks = segmenter.detect_peaks(hist, args.smooth_window, args.min_prominence, args.min_separation)
    threshold = peaks[-1].bin if peaks else None
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        hist.to_csv(out / "histogram.csv")
        save_histogram_plot(out / "histogram.png", hist, peaks, threshold)
    for p in peaks:
        print(f"peak bin={p.bin} count={p.count} prominence={p.prominence:.1f}")
    print(f"rightmost peak: {threshold}")
    return EXIT_OK


# --- eval -------------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    preds = {p.name: p for p in sorted(pred_dir.glob("*.png"))}
    if not preds:
        raise EmptyResultError(f"no prediction PNGs in {pred_dir}")

    table = evaluator.ScoreTable()
    expected = set()
    pairs = []
    for m in args.gt:
        rec = datapipe.load_subject(m)
        for i, (gt_path) in enumerate(rec.mask_paths or []):
            name = mask_name(rec.subject_id, i)
            expected.add(name)
            pairs.append((rec.subject_id, i, name, gt_path))
        if rec.mask_paths is None:
            raise InvalidManifestError(f"{m} lists no ground-truth masks")
    missing = sorted(expected - set(preds))
    extra = sorted(set(preds) - expected)
    if missing or extra:
        lines = [f"missing prediction: {n}" for n in missing] + [f"no ground truth for: {n}" for n in extra]
        raise UsageError("predictions and ground truth do not align:\n  " + "\n  ".join(lines))

    for sid, i, name, gt_path in pairs:
        table.add(sid, i, datapipe.load_mask_png(preds[name]), datapipe.load_mask_png(gt_path))
    level = evaluator.SUBJECT if args.level == "subject" else evaluator.SLICE
    out = Path(args.out) if args.out else pred_dir.parent
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "scores.csv")
    table.write_slice_csv(out / "scores_slices.csv")
    doc = evaluator.write_summary(out / "summary.json", table, level)
    print(f"{doc['level']} dice {doc['mean']:.4f}±{doc['std']:.4f} (n={doc['n']})")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selcut", description="Selective-cut anomaly segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="write a synthetic normal/anomalous phantom corpus")
    g.add_argument("--n", type=int, required=True, help="phantoms per class")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--size", type=int, default=64, help="image side in pixels (multiple of 16)")
    g.add_argument("--noise-std", type=float, default=0.05)
    g.add_argument("--organ-intensity", type=float, default=0.45)
    g.add_argument("--anomaly-brightness", type=float, default=0.9)
    g.add_argument("--lesion-polarity", choices=("bright", "dark"), default="bright")
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train the main module and discriminator in cycles")
    t.add_argument("--config", help="JSON run config (name, out, inputs, reference, seed, network, train)")
    t.add_argument("--inputs", nargs="+", help="manifests of images that may hold anomalies")
    t.add_argument("--reference", nargs="+", help="manifests of normal reference images")
    t.add_argument("--name", help="run name; outputs go to <out>/<name>")
    t.add_argument("--out", help="parent directory for runs (default runs)")
    t.add_argument("--seed", type=int)
    t.add_argument("--size", type=int, help="square network input size")
    t.add_argument("--stage1-cycles", type=int)
    t.add_argument("--stage2-cycles", type=int)
    t.add_argument("--epochs-d", type=int, help="discriminator epochs per cycle")
    t.add_argument("--epochs-m", type=int, help="main-module epochs per cycle")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--disc-lr", type=float, help="discriminator learning rate (default: --lr)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="threshold reconstructions into anomaly masks")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--polarity", choices=("bright", "dark"), default="bright")
    s.add_argument("--threshold", type=int, help="fixed threshold 0-255, skips peak detection")
    s.add_argument("--roi", nargs="+", help="ROI manifests, one per --manifest (required for dark)")
    s.add_argument("--open", type=int, default=0, metavar="K", help="morphological opening with a KxK square")
    s.add_argument("--gate", nargs="+", help="manifests of gate images, aligned with --manifest")
    s.add_argument("--gate-threshold", type=int, help="keep mask pixels whose gate bin is >= this")
    s.add_argument("--per-subject", action="store_true", help="one threshold per subject instead of per dataset")
    s.add_argument("--flip-diagnostics", action="store_true", help="also write leftmost/rightmost cluster masks")
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("eval", help="Dice of predicted masks against ground truth")
    e.add_argument("--pred", required=True, help="directory of <subject>_<index>.png masks")
    e.add_argument("--gt", nargs="+", required=True, help="manifests listing ground-truth masks")
    e.add_argument("--level", choices=("subject", "slice"), default="subject")
    e.add_argument("--out", help="directory for scores.csv and summary.json (default: next to --pred)")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("hist", help="histogram peaks of reconstructions or of a saved histogram")
    h.add_argument("--csv", help="histogram CSV (bin,count)")
    h.add_argument("--checkpoint")
    h.add_argument("--manifest", nargs="+")
    h.add_argument("--out", help="write histogram.csv and histogram.png here")
    h.add_argument("--smooth-window", type=int, default=segmenter.SMOOTH_WINDOW)
    h.add_argument("--min-prominence", type=float, default=segmenter.MIN_PROMINENCE_FRACTION)
    h.add_argument("--min-separation", type=int, default=segmenter.MIN_SEPARATION)
    h.set_defaults(func=cmd_hist)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, MissingROIError, NoThresholdError, InvalidManifestError, GenerationError) as e:
        msg = str(e)
        if isinstance(e, NoThresholdError):
            msg += "; rerun with --threshold"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailureError, InvalidDataError, EmptyResultError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Two-stage cycle training of the discriminator and the main module."""

from __future__ import annotations

import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import segmenter
from .checkpoint import read_checkpoint, write_checkpoint
from .datapipe import ReferenceSet, Slice
from .errors import NumericalFailureError
from .losses import LossReport, loss_disjoincy, loss_fence, loss_reconstruction
from .netgraph import (
    FROZEN,
    TRAIN,
    ModelState,
    NetworkConfig,
    as_batch,
    backward,
    dropout_generator,
    frozen,
    init_model,
    predict,
)

log = logging.getLogger(__name__)

D_PHASE, M_PHASE = "D", "M"


@dataclass(frozen=True)
class TrainConfig:
    stage1_cycles: int = 2
    stage2_cycles: int = 1
    epochs_per_D_step: int = 1
    epochs_per_M_step: int = 1
    batch_size: int = 8
    learning_rate: float = 5e-5
    # discriminator Adam rate; None means learning_rate
    disc_learning_rate: float | None = None
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    early_stop_on_peaks: bool = False
    # recompute I_fc(R_d) at every stage-2 cycle instead of once
    refresh_augmentation: bool = False
    # termination check: number of inputs whose reconstructions are pooled
    eval_subset: int = 64
    min_peaks: int = 3
    min_peak_distance: int = 20
    smooth_window: int = segmenter.SMOOTH_WINDOW
    min_prominence_fraction: float = segmenter.MIN_PROMINENCE_FRACTION
    min_separation: int = segmenter.MIN_SEPARATION

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.stage1_cycles < 0 or self.stage2_cycles < 0:
            problems.append("cycle counts must be >= 0")
        if self.epochs_per_D_step < 1 or self.epochs_per_M_step < 1:
            problems.append("epochs per step must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            problems.append("learning_rate must be >= 0")
        if self.disc_learning_rate is not None and not self.disc_learning_rate >= 0:
            problems.append("disc_learning_rate must be >= 0")
        if len(self.loss_weights) != 3:
            problems.append("loss_weights needs three entries")
        if self.eval_subset < 1:
            problems.append("eval_subset must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class CyclePosition:
    stage: int
    cycle_index: int
    phase: str

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")


class Adam:
    """Adam over a fixed, named parameter set; moments persist across phases."""

    def __init__(self, params: dict[str, torch.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}
        self.step = 0

    @torch.no_grad()
    def update(self, grads: dict[str, torch.Tensor]) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.step, 1 - b2**self.step
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            step = self.lr * (m / c1) / ((v / c2).sqrt() + self.eps)
            self.params[k].sub_(step)

    def tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load(self, prefix: str, tensors: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.m[k].copy_(torch.from_numpy(tensors[f"{prefix}.m.{k}"]))
            self.v[k].copy_(torch.from_numpy(tensors[f"{prefix}.v.{k}"]))
        self.step = step


@dataclass
class Optimizers:
    main: Adam
    disc: Adam

    @classmethod
    def create(cls, state: ModelState, lr: float, disc_lr: float | None = None) -> "Optimizers":
        return cls(Adam(state.main_weights(), lr), Adam(state.disc_weights(), lr if disc_lr is None else disc_lr))


def _seed_parts(*parts: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence([int(p) for p in parts])
    rng = np.random.default_rng(ss)
    return rng, int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _images(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items.astype(np.float32, copy=False)
    if isinstance(items, ReferenceSet):
        items = items.slices
    return np.stack([np.asarray(getattr(s, "pixels", s), dtype=np.float32) for s in items])


def _finite(x: torch.Tensor, what: str, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericalFailureError(f"non-finite {what} at {where}")


@contextmanager
def _located(where: str, batch: int):
    """Prefix numerical failures raised inside a batch with its position."""
    try:
        yield
    except NumericalFailureError as e:
        if where in str(e):
            raise
        raise NumericalFailureError(f"{e} at {where} batch {batch}") from e


def train_discriminator_step(
    state: ModelState,
    fakes,
    reals,
    opt: Adam,
    seed: int,
    batch_size: int = 8,
    where: str = "",
) -> tuple[ModelState, LossReport]:
    """One epoch of D over the shuffled union: reference images target +1, fence cuts -1."""
    f, r = _images(fakes), _images(reals)
    if len(f) == 0 or len(r) == 0:
        raise ValueError("discriminator step needs fakes and reals")
    x = torch.from_numpy(np.concatenate([f, r]))
    y = torch.cat([-torch.ones(len(f)), torch.ones(len(r))])
    rng, tseed = _seed_parts(seed, 0)
    order = torch.from_numpy(rng.permutation(len(x)))
    gen = dropout_generator(tseed)
    params = state.disc_weights()

    abs_sum = fence_sum = 0.0
    for bi, start in enumerate(range(0, len(x), batch_size)):
        idx = order[start : start + batch_size]
        xb, yb = as_batch(x[idx], state.config), y[idx]
        with _located(where, bi):
            scores = state.disc(xb, TRAIN, gen)
            # mean |score - target| over a mixed batch is Loss_D with that batch's n and m
            loss = (scores - yb).abs().mean()
            _finite(loss, "discriminator loss", f"{where} batch {bi}")
            opt.update(backward(params, loss))
        state.step_counter += 1
        with torch.no_grad():
            abs_sum += float((scores - yb).abs().sum())
            fence_sum += float((scores[yb < 0] - 1).abs().sum())

    report = LossReport(
        loss_fence=fence_sum / len(f),
        loss_disjoincy=None,
        loss_reconstruction=None,
        loss_discriminator=abs_sum / len(x),
        n=len(f),
        m=len(r),
    )
    return state, report


def train_main_step(
    state: ModelState,
    inputs,
    opt: Adam,
    seed: int,
    batch_size: int = 8,
    weights: Sequence[float] = (1.0, 1.0, 1.0),
    where: str = "",
    reals=None,
) -> tuple[ModelState, LossReport]:
    """One epoch of the main module against a frozen discriminator.

    The frozen D normalizes with batch statistics. When ``reals`` is given,
    each batch of fence cuts is scored alongside as many randomly drawn
    reference images, so D sees the same fake/real mix it was trained on;
    only the fence-cut scores enter the loss.
    """
    x_all = torch.from_numpy(_images(inputs))
    if len(x_all) == 0:
        raise ValueError("main step needs inputs")
    r_all = None if reals is None else torch.from_numpy(_images(reals))
    rng, tseed = _seed_parts(seed, 1)
    order = torch.from_numpy(rng.permutation(len(x_all)))
    gen = dropout_generator(tseed)
    params = state.main_weights()
    wf, wd, wr = weights

    sums = np.zeros(3)
    with frozen(state.disc):
        for bi, start in enumerate(range(0, len(x_all), batch_size)):
            xb = as_batch(x_all[order[start : start + batch_size]], state.config)
            with _located(where, bi):
                fc, wc, ro = state.main(xb, TRAIN, gen)
                d_in = fc
                if r_all is not None:
                    pick = torch.from_numpy(rng.choice(len(r_all), size=len(xb), replace=len(r_all) < len(xb)))
                    d_in = torch.cat([fc, as_batch(r_all[pick])])
                scores = state.disc(d_in, FROZEN, None)[: len(xb)]
                lf, ld, lr = loss_fence(scores), loss_disjoincy(fc, wc), loss_reconstruction(xb, ro)
                total = wf * lf + wd * ld + wr * lr
                _finite(total, "main loss", f"{where} batch {bi}")
                opt.update(backward(params, total))
            state.step_counter += 1
            sums += len(xb) * np.array([lf.item(), ld.item(), lr.item()])

    s = sums / len(x_all)
    report = LossReport(float(s[0]), float(s[1]), float(s[2]), None, n=len(x_all), m=0 if r_all is None else len(r_all))
    return state, report


@torch.no_grad()
def fence_cuts(state: ModelState, inputs, batch_size: int = 8) -> np.ndarray:
    """Fence cuts for the discriminator phase.

    Computed with batch statistics and no dropout, in ``batch_size`` chunks,
    so D is shown what the main module produces while it trains rather than
    what its running estimates would give.
    """
    x = torch.from_numpy(_images(inputs))
    parts = [state.main(as_batch(x[i : i + batch_size]), FROZEN, None)[0] for i in range(0, len(x), batch_size)]
    return torch.cat(parts).numpy()[:, 0]


def augment_reference(state: ModelState, reference: ReferenceSet) -> ReferenceSet:
    """Reference members followed by their fence cuts (inference mode)."""
    fc = predict(state, list(reference.slices)).fence.numpy()[:, 0].astype(np.float64)
    generated = [Slice(img, s.subject_id, s.index) for img, s in zip(fc, reference.slices)]
    return ReferenceSet(list(reference.slices) + generated)


def peaks_separated(peaks: Sequence[segmenter.Peak], min_peaks: int, min_distance: int) -> bool:
    bins = [p.bin for p in peaks]
    return len(bins) >= min_peaks and all(b - a >= min_distance for a, b in zip(bins, bins[1:]))


def histogram_terminates(hist: segmenter.Histogram256, config: TrainConfig) -> bool:
    if hist.total == 0:
        return False
    peaks = segmenter.detect_peaks(hist, config.smooth_window, config.min_prominence_fraction, config.min_separation)
    return peaks_separated(peaks, config.min_peaks, config.min_peak_distance)


def check_termination(state: ModelState, inputs, config: TrainConfig) -> tuple[bool, segmenter.Histogram256]:
    """Pooled reconstruction histogram over the first ``eval_subset`` inputs and its verdict."""
    x = _images(inputs)[: config.eval_subset]
    ro = predict(state, x).recon.numpy()[:, 0]
    hist = segmenter.compute_histogram(list(ro))
    return histogram_terminates(hist, config), hist


# --- checkpoints ----------------------------------------------------------------


def save_state(path: Path | str, state: ModelState, opts: Optimizers | None = None, meta: dict | None = None) -> None:
    tensors = dict(state.tensors())
    if opts is not None:
        tensors.update(opts.main.tensors("opt.main"))
        tensors.update(opts.disc.tensors("opt.disc"))
    doc = {
        "network": state.config.to_dict(),
        "step_counter": state.step_counter,
        "opt_steps": None if opts is None else {"main": opts.main.step, "disc": opts.disc.step},
    }
    doc.update(meta or {})
    write_checkpoint(path, tensors, doc)


def load_state(path: Path | str, lr: float | None = None) -> tuple[ModelState, Optimizers | None, dict]:
    tensors, meta = read_checkpoint(path)
    config = NetworkConfig.from_dict(meta["network"])
    state = init_model(config, 0)
    with torch.no_grad():
        for prefix, mod in (("main", state.main), ("disc", state.disc)):
            sd = mod.state_dict()
            for name, t in sd.items():
                t.copy_(torch.from_numpy(tensors[f"{prefix}.{name}"]))
    state.step_counter = int(meta["step_counter"])
    opts = None
    if meta.get("opt_steps") is not None:
        train = meta.get("train", {})
        rate = lr if lr is not None else float(train.get("learning_rate", 5e-5))
        disc_rate = train.get("disc_learning_rate") if lr is None else None
        opts = Optimizers.create(state, rate, disc_rate)
        opts.main.load("opt.main", tensors, meta["opt_steps"]["main"])
        opts.disc.load("opt.disc", tensors, meta["opt_steps"]["disc"])
    return state, opts, meta


def weights_digest(params: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --- schedule -------------------------------------------------------------------


@dataclass
class RunResult:
    state: ModelState
    history: list[LossReport] = field(default_factory=list)
    histograms: list[segmenter.Histogram256] = field(default_factory=list)
    cycles_run: int = 0
    stopped_early: bool = False
    reference: ReferenceSet | None = None


def run_training(
    state: ModelState,
    inputs: Sequence[Slice],
    reference: ReferenceSet,
    config: TrainConfig,
    run_dir: Path | str | None = None,
    opts: Optimizers | None = None,
) -> RunResult:
    """Stage 1 cycles against R_d, one augmentation, stage 2 cycles against R_d + I_fc(R_d).

    A cycle is ``epochs_per_D_step`` discriminator epochs then
    ``epochs_per_M_step`` main-module epochs. After every cycle the
    termination histogram is computed and, with ``run_dir``, a checkpoint,
    the histogram CSV and the loss records are written.
    """
    config.validate()
    opts = opts or Optimizers.create(state, config.learning_rate, config.disc_learning_rate)
    x_in = _images(inputs)
    base_ref = reference
    result = RunResult(state, reference=reference)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "losses.jsonl", "w")

    schedule = [(1, c) for c in range(config.stage1_cycles)] + [(2, c) for c in range(config.stage2_cycles)]
    try:
        ref = base_ref
        for k, (stage, cycle) in enumerate(schedule, 1):
            if stage == 2 and (cycle == 0 or config.refresh_augmentation):
                ref = augment_reference(state, base_ref)
                result.reference = ref
            x_ref = _images(ref)

            fakes = fence_cuts(state, x_in, config.batch_size)
            for epoch in range(config.epochs_per_D_step):
                where = f"stage {stage} cycle {cycle} D epoch {epoch}"
                _, rep = train_discriminator_step(
                    state, fakes, x_ref, opts.disc, _seed_of(config.seed, stage, cycle, 0, epoch),
                    config.batch_size, where,
                )
                _record(result, rep, stage, cycle, D_PHASE, epoch, log_file)
            for epoch in range(config.epochs_per_M_step):
                where = f"stage {stage} cycle {cycle} M epoch {epoch}"
                _, rep = train_main_step(
                    state, x_in, opts.main, _seed_of(config.seed, stage, cycle, 1, epoch),
                    config.batch_size, config.loss_weights, where, reals=x_ref,
                )
                _record(result, rep, stage, cycle, M_PHASE, epoch, log_file)

            done, hist = check_termination(state, x_in, config)
            result.histograms.append(hist)
            result.cycles_run = k
            if run_dir is not None:
                hist.to_csv(run_dir / f"histogram_cycle{k}.csv")
                meta = {
                    "train": config.to_dict(),
                    "position": {"stage": stage, "cycle_index": cycle, "phase": M_PHASE, "cycles_done": k},
                }
                save_state(run_dir / f"ckpt_cycle{k}.bin", state, opts, meta)
            log.info("cycle %d (stage %d) done, peaks separated: %s", k, stage, done)
            if config.early_stop_on_peaks and done:
                result.stopped_early = True
                break
    finally:
        if log_file is not None:
            log_file.close()
    return result


def _seed_of(seed: int, stage: int, cycle: int, phase: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, stage, cycle, phase, epoch]).generate_state(1)[0])


def _record(result: RunResult, rep: LossReport, stage: int, cycle: int, phase: str, epoch: int, fh) -> None:
    rep.stage, rep.cycle, rep.phase, rep.epoch = stage, cycle, phase, epoch
    result.history.append(rep)
    if fh is not None:
        fh.write(rep.to_json() + "\n")
        fh.flush()

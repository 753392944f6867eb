"""Overall distillation loss and the training loop."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import config_digest, get
from .data import make_toy_corpus, sample_batch, synth_pair, to_numpy, to_tensor
from .dcr import (EMAState, dynamic_contrastive_loss, generate_negatives, init_ema_state, maybe_ema_update)
from .degradation import DegradationRanges
from .dmm import dmm_loss
from .encoder import default_codebook, default_encoder, load_codebook, load_external_encoder
from .errors import NonFiniteLossError, StructureError
from .metrics import evaluate
from .models import (ArchSpec, RestorationModel, extract_params, freeze, inject_params, load_checkpoint,
                     save_checkpoint)

log = logging.getLogger(__name__)

CSV_FIELDS = ("iter", "rec", "kd", "dcl", "ce", "total", "lr", "ema_step_s")
RUNS_ENV = "DCKD_RUNS"


@dataclass(frozen=True)
class LossWeights:
    lambda_dcl: float = 0.1
    lambda_ce: float = 0.001
    lambda_kd: float = 1.0


@dataclass
class LossReport:
    rec: float
    kd: float
    dcl: float
    ce: float
    total: float

    def recomposed(self, weights: LossWeights) -> float:
        return self.rec + weights.lambda_kd * self.kd + weights.lambda_dcl * self.dcl + weights.lambda_ce * self.ce

    def is_finite(self):
        return all(np.isfinite(v) for v in asdict(self).values())


@dataclass
class DCROptions:
    num_negatives: int = 5
    policy: str = "noise"
    ranges: DegradationRanges = DegradationRanges()
    eps: float = 1e-8


@dataclass
class DMMOptions:
    distance_sign: str = "negated"
    temperature: float = 1.0


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise StructureError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(student_out: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_shapes(student_out, gt)
    return (student_out - gt).abs().mean()


def kd_loss(student_out: torch.Tensor, teacher_out: torch.Tensor) -> torch.Tensor:
    _check_shapes(student_out, teacher_out)
    return (student_out - teacher_out.detach()).abs().mean()


def total_loss(batch, student, teacher, history, encoder, codebook, weights: LossWeights = LossWeights(),
               rng=None, dcr: DCROptions = DCROptions(), dmm: DMMOptions = DMMOptions(), negatives=None):
    """Returns ``(total, report, student_out)``.

    Terms whose weight is zero are neither computed nor reported (their
    component is 0.0). ``negatives`` may be passed to replay a fixed batch.
    """
    lq, gt = batch
    student_out = student(lq)
    zero = student_out.new_zeros(())
    rec = reconstruction_loss(student_out, gt)
    need_teacher = weights.lambda_kd > 0 or weights.lambda_dcl > 0 or weights.lambda_ce > 0
    teacher_out = None
    if need_teacher:
        with torch.no_grad():
            teacher_out = teacher(lq)
    kd = kd_loss(student_out, teacher_out) if weights.lambda_kd > 0 else zero
    dcl = zero
    if weights.lambda_dcl > 0:
        if negatives is None:
            negatives = generate_negatives(history, lq, dcr.num_negatives, dcr.policy, rng, dcr.ranges)
        dcl = dynamic_contrastive_loss(student_out, teacher_out, negatives, encoder, dcr.eps)
    ce = zero
    if weights.lambda_ce > 0:
        ce = dmm_loss(teacher_out, student_out, encoder, codebook, dmm.distance_sign, dmm.temperature)
    total = rec + weights.lambda_kd * kd + weights.lambda_dcl * dcl + weights.lambda_ce * ce
    report = LossReport(rec.item(), kd.item(), dcl.item(), ce.item(), total.item())
    return total, report, student_out


# ---------------------------------------------------------------------------
# setup helpers

def student_arch(cfg) -> ArchSpec:
    return ArchSpec(width=get(cfg, "model.student_width"), depth=get(cfg, "model.student_depth"),
                    upscale=get(cfg, "data.scale"), residual=get(cfg, "model.residual"))


def teacher_arch(cfg) -> ArchSpec:
    return ArchSpec(width=get(cfg, "model.teacher_width"), depth=get(cfg, "model.teacher_depth"),
                    upscale=get(cfg, "data.scale"), residual=get(cfg, "model.residual"))


def _dtype(cfg):
    return getattr(torch, get(cfg, "train.dtype"))


def build_dataset(cfg, split="train"):
    """GT images of the toy corpus for ``split`` (train or eval)."""
    count = get(cfg, f"data.{split}_count")
    return make_toy_corpus(get(cfg, f"data.{split}_seed"), count, get(cfg, "data.image_size"))


def load_encoder_and_codebook(cfg, dtype=torch.float32):
    enc_path, cb_path = get(cfg, "dmm.encoder_path"), get(cfg, "dmm.codebook_path")
    encoder = load_external_encoder(enc_path, dtype=dtype) if enc_path else default_encoder(dtype)
    codebook = load_codebook(cb_path, expected_dim=encoder.dim).to(dtype) if cb_path else default_codebook(dtype)
    if codebook.d != encoder.dim:
        raise StructureError(f"codebook dim {codebook.d} does not match encoder dim {encoder.dim}")
    return encoder, codebook


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def teacher_digest(cfg) -> str:
    keys = ["seed", "data", "model.teacher_width", "model.teacher_depth", "model.residual",
            "teacher.pretrain_iterations", "teacher.lr", "train.batch_size", "train.patch_size", "train.dtype"]
    sub = {k: get(cfg, k) for k in keys}
    return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]


def pretrain_teacher(cfg, pairs) -> RestorationModel:
    """Fit the large model to GT with plain L1, then freeze it."""
    seed = get(cfg, "seed")
    dtype = _dtype(cfg)
    teacher = RestorationModel(teacher_arch(cfg), seed=seed + 7, dtype=dtype)
    iters = get(cfg, "teacher.pretrain_iterations")
    opt = torch.optim.Adam(teacher.parameters(), lr=get(cfg, "teacher.lr"), betas=(0.9, 0.99), eps=1e-8)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [int(0.6 * iters), int(0.8 * iters)], 0.5)
    rng = np.random.default_rng(seed + 7)
    bs, patch = get(cfg, "train.batch_size"), get(cfg, "train.patch_size")
    for _ in range(iters):
        lq, gt = sample_batch(pairs, bs, patch, rng, dtype=dtype)
        loss = reconstruction_loss(teacher(lq), gt)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    return freeze(teacher)


def get_teacher(cfg, pairs, cache_dir=None) -> RestorationModel:
    path = get(cfg, "teacher.checkpoint")
    if path:
        model, _ = load_checkpoint(path)
        return freeze(model.to(_dtype(cfg)))
    cache_dir = Path(cache_dir) if cache_dir is not None else runs_root() / "teacher_cache"
    cached = cache_dir / f"teacher-{teacher_digest(cfg)}.npz"
    if cached.exists():
        model, _ = load_checkpoint(cached)
        return freeze(model)
    log.info("pretraining teacher (%d iterations)", get(cfg, "teacher.pretrain_iterations"))
    teacher = pretrain_teacher(cfg, pairs)
    save_checkpoint(cached, teacher, {"role": "teacher", "seed": get(cfg, "seed"), "digest": teacher_digest(cfg)})
    return teacher


def state_checksum(module_or_codebook) -> str:
    h = hashlib.sha256()
    if hasattr(module_or_codebook, "named_parameters"):
        for n, p in module_or_codebook.named_parameters():
            h.update(n.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    else:
        h.update(module_or_codebook.entries.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def environment_info() -> dict:
    info = {"dckd": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__, "platform": platform.platform()}
    try:
        info["git"] = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                                     cwd=Path(__file__).parent).stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        info["git"] = None
    info["digest"] = hashlib.sha256(json.dumps(info, sort_keys=True).encode()).hexdigest()[:16]
    return info


@torch.no_grad()
def evaluate_model(model, pairs, channel_mode="Y") -> dict:
    """Mean PSNR (capped for reporting) and SSIM over full images."""
    dtype = next(model.parameters()).dtype if list(model.parameters()) else torch.float32
    ps, ss = [], []
    for p in pairs:
        out = to_numpy(model(to_tensor(p.lq, dtype)))[0]
        m = evaluate(out, p.gt, channel_mode)
        ps.append(m.psnr_report)
        ss.append(m.ssim)
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    student: RestorationModel
    teacher: RestorationModel
    manifest: dict
    reports: list = field(default_factory=list)
    ema: EMAState | None = None
    run_dir: Path | None = None


def _dump_nonfinite(run_dir, t, lq, gt, out, report):
    run_dir = Path(run_dir) if run_dir is not None else runs_root() / "nonfinite"
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / f"nonfinite-iter{t}.npz"
    np.savez(path, lq=lq.numpy(), gt=gt.numpy(), student_out=out.detach().numpy(),
             report=np.array(json.dumps(asdict(report))))
    return path


def train(cfg, dataset=None, run_dir=None, teacher=None, encoder=None, codebook=None, log_every=0,
          callback=None) -> TrainResult:
    """Distil the toy student from the frozen teacher.

    ``dataset`` is a list of GT images (defaults to the config's toy corpus).
    When ``run_dir`` is given, ``losses.csv``, checkpoints and ``manifest.json``
    are written there. ``callback(t, lq, gt, student_out, report)`` is called
    after the loss of iteration ``t`` is computed, before the update.
    """
    seed = get(cfg, "seed")
    dtype = _dtype(cfg)
    torch.manual_seed(seed)
    dataset = dataset if dataset is not None else build_dataset(cfg, "train")
    pairs = [synth_pair(img, get(cfg, "data.scale")) for img in dataset]
    if not pairs:
        raise ValueError("dataset is empty")
    if teacher is None:
        teacher = get_teacher(cfg, pairs)
    teacher = freeze(teacher.to(dtype))
    if encoder is None or codebook is None:
        encoder, codebook = load_encoder_and_codebook(cfg, dtype)
    student = RestorationModel(student_arch(cfg), seed=seed + 1, dtype=dtype)

    weights = LossWeights(get(cfg, "loss.lambda_dcl"), get(cfg, "loss.lambda_ce"), get(cfg, "loss.lambda_kd"))
    ranges = DegradationRanges(tuple(get(cfg, "degradation.blur_sigma")), tuple(get(cfg, "degradation.noise_sigma")),
                               tuple(get(cfg, "degradation.resize_scale")))
    dcr_opts = DCROptions(get(cfg, "dcr.num_negatives"), get(cfg, "dcr.degradation_policy"), ranges, get(cfg, "dcr.eps"))
    dmm_opts = DMMOptions(get(cfg, "dmm.distance_sign"), get(cfg, "dmm.temperature"))

    total_iters = get(cfg, "train.total_iterations")
    cap = get(cfg, "dcr.step_cap") or max(1, total_iters // 4)
    ema = init_ema_state(student, get(cfg, "dcr.alpha"), get(cfg, "dcr.initial_step"), get(cfg, "dcr.step_growth"), cap)
    history = freeze(RestorationModel(student.spec, dtype=dtype))
    inject_params(history, ema.history_params)

    opt = torch.optim.Adam(student.parameters(), lr=get(cfg, "train.lr"), betas=(0.9, 0.99), eps=1e-8)
    milestones = [int(m * total_iters) for m in get(cfg, "train.lr_milestones")]
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones, get(cfg, "train.lr_decay"))

    checksums_before = {"teacher": state_checksum(teacher), "encoder": state_checksum(encoder),
                        "codebook": state_checksum(codebook)}
    data_rng = np.random.default_rng(seed)
    neg_rng = np.random.default_rng(seed + 3)
    bs, patch = get(cfg, "train.batch_size"), get(cfg, "train.patch_size")
    ckpt_every = get(cfg, "train.checkpoint_every")
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        csv_fh = open(run_dir / "losses.csv", "w", newline="")
        writer = csv.writer(csv_fh)
        writer.writerow(CSV_FIELDS)
    reports = []
    started = time.perf_counter()
    try:
        for t in range(1, total_iters + 1):
            lq, gt = sample_batch(pairs, bs, patch, data_rng, dtype=dtype)
            lr = opt.param_groups[0]["lr"]
            loss, report, out = total_loss((lq, gt), student, teacher, history, encoder, codebook, weights,
                                           neg_rng, dcr_opts, dmm_opts)
            if not report.is_finite():
                dump = _dump_nonfinite(run_dir, t, lq, gt, out, report)
                raise NonFiniteLossError(f"non-finite loss at iteration {t}: {report}; batch dumped to {dump}", dump)
            if callback is not None:
                callback(t, lq, gt, out.detach(), report)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step_s = ema.step
            ema = maybe_ema_update(ema, extract_params(student), t)
            if ema.last_update_iter == t:
                inject_params(history, ema.history_params)
            reports.append(report)
            if run_dir is not None:
                writer.writerow([t, repr(report.rec), repr(report.kd), repr(report.dcl), repr(report.ce),
                                 repr(report.total), repr(lr), step_s])
                if ckpt_every and t % ckpt_every == 0:
                    save_checkpoint(run_dir / "checkpoints" / f"student-{t:07d}.npz", student,
                                    {"iteration": t, "seed": seed, "role": "student"})
            if log_every and t % log_every == 0:
                log.info("iter %d total %.5f rec %.5f kd %.5f dcl %.5f ce %.5f", t, report.total, report.rec,
                         report.kd, report.dcl, report.ce)
    finally:
        if run_dir is not None:
            csv_fh.close()

    freeze(student)
    manifest = {
        "config": cfg,
        "config_digest": config_digest(cfg),
        "seed": seed,
        "environment": environment_info(),
        "iterations": total_iters,
        "ema_refresh_iters": ema.refresh_iters,
        "final_ema_step": ema.step,
        "checksums_before": checksums_before,
        "checksums_after": {"teacher": state_checksum(teacher), "encoder": state_checksum(encoder),
                            "codebook": state_checksum(codebook)},
        "student_checksum": extract_params(student).checksum(),
        "train_seconds": time.perf_counter() - started,
    }
    if run_dir is not None:
        meta = {"iteration": total_iters, "seed": seed}
        save_checkpoint(run_dir / "checkpoints" / "student.npz", student, dict(meta, role="student"))
        save_checkpoint(run_dir / "checkpoints" / "teacher.npz", teacher, dict(meta, role="teacher"))
        save_checkpoint(run_dir / "checkpoints" / "history.npz", history, dict(meta, role="history"))
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return TrainResult(student, teacher, manifest, reports, ema, run_dir)

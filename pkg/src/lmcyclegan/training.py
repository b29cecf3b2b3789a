"""Regressor pretraining and the two GAN training stages.

Randomness is drawn from per-iteration streams
``default_rng([seed, phase, purpose, ..., t])`` so a run resumed from a
checkpoint at iteration k replays exactly what an uninterrupted run would.

Run directory layout::

    config.toml
    logs/<phase>.tsv                iter<TAB>term<TAB>value
    checkpoints/<phase>.lmcg        final checkpoint of a phase
    checkpoints/<phase>.latest.lmcg periodic checkpoint for --resume
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import ops
from .checkpoint import Checkpoint, bundle_checkpoint, load_checkpoint, restore_bundle, save_checkpoint
from .data import Sample, augment, load_dataset, split_holdout
from .errors import CheckpointError, DataError, NonFiniteError, NumericError
from .geometry import decode_landmarks, default_sigma, encode_heatmaps, extract_patches, make_unmatched_pair
from .losses import (
    LossReport,
    LossWeights,
    adversarial_loss,
    conditional_adversarial_loss,
    cycle_loss,
    landmark_consistency_loss,
    local_adversarial_loss,
    total_losses,
)
from .nets import (
    DOMAINS,
    PARTS,
    ModelBundle,
    generator_forward,
    global_disc_forward,
    local_disc_forward,
    patch_sizes,
    regressor_forward,
)
from .optim import AdamState, adam_step, polynomial_decay
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

PHASE_IDS = {"regressor_X": 1, "regressor_Y": 2, "stage1": 3, "stage2": 4}
DOMAIN_IDS = {"X": 1, "Y": 2}
OTHER = {"X": "Y", "Y": "X"}
GEN_GROUP = "G_XY+G_YX"
GAN_NETS = ["G_XY", "G_YX", "D_X", "D_Y", "Dgc_X", "Dgc_Y"] + [f"Dl_{d}_{p}" for d in DOMAINS for p in PARTS]


@dataclass
class TrainConfig:
    size: int = 64
    ngf: int = 16
    ndf: int = 64
    ndf_local: int = 32
    n_res: int | None = None
    iters_regressor: int = 2000
    iters_stage1: int = 3000
    iters_stage2: int = 2000
    lr: float = 2e-4
    lr_regressor: float = 2e-4
    decay_power: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    gan_mode: str = "bce"
    sigma: float | None = None
    max_shift: int | None = None
    seed: int = 0
    checkpoint_interval: int = 500
    holdout: float = 0.1
    data_root: str = "data"
    weights: LossWeights = field(default_factory=LossWeights)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(size=128, ngf=64, ndf_local=64, iters_regressor=80_000, iters_stage1=100_000,
                    iters_stage2=100_000)
        base.update(overrides)
        return cls(**base)

    @property
    def heatmap_sigma(self) -> float:
        return self.sigma if self.sigma is not None else default_sigma(self.size)

    def model_hash(self) -> str:
        """Hash of everything that changes parameter shapes or initial values."""
        key = {"size": self.size, "ngf": self.ngf, "ndf": self.ndf, "ndf_local": self.ndf_local,
               "n_res": self.n_res, "seed": self.seed, "sigma": self.heatmap_sigma}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return asdict(self)


def new_bundle(config: TrainConfig) -> ModelBundle:
    return ModelBundle(config.size, config.ngf, config.ndf, config.ndf_local, config.n_res, config.seed)


def load_run_data(config: TrainConfig) -> tuple[dict[str, list[Sample]], dict[str, list[Sample]]]:
    """(train, held-out) samples per domain from ``config.data_root``."""
    train, test = {}, {}
    for d in DOMAINS:
        samples = load_dataset(config.data_root, d, config.size)
        train[d], test[d] = split_holdout(samples, config.holdout, config.seed)
        if not train[d]:
            raise DataError(f"domain {d}: no training samples")
    return train, test


class Batch(NamedTuple):
    x: Sample
    y: Sample
    X: Tensor
    Y: Tensor
    LX: Tensor
    LY: Tensor
    unmatched_X: tuple[Tensor, Tensor]  # shifted real X image, its original heatmaps
    unmatched_Y: tuple[Tensor, Tensor]


def _t(a: np.ndarray) -> Tensor:
    return Tensor(a[None])


def _stack(*arrays: np.ndarray) -> Tensor:
    """Constant batch from (1, ...) arrays; no gradient reaches the sources."""
    return Tensor(np.concatenate(arrays, axis=0))


class Trainer:
    """Owns the model bundle, data and run directory for one seed."""

    def __init__(self, config: TrainConfig, run_dir: str | os.PathLike, train_data: dict[str, list[Sample]],
                 bundle: ModelBundle | None = None, allow_hash_mismatch: bool = False):
        self.cfg = config
        self.run_dir = Path(run_dir)
        self.data = train_data
        self.bundle = bundle if bundle is not None else new_bundle(config)
        self.sizes = patch_sizes(config.size)
        self.allow_hash_mismatch = allow_hash_mismatch
        self._perm_cache: dict = {}
        for d in ("X", "Y"):
            self.bundle.set_trainable(f"R_{d}", False)

    # ------------------------------------------------------------ plumbing

    def ckpt_path(self, phase: str, latest: bool = False) -> Path:
        return self.run_dir / "checkpoints" / (f"{phase}.latest.lmcg" if latest else f"{phase}.lmcg")

    def log_path(self, phase: str) -> Path:
        return self.run_dir / "logs" / f"{phase}.tsv"

    def _rng(self, phase: str, *purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, PHASE_IDS[phase], *purpose])

    def sample(self, domain: str, phase: str, t: int) -> Sample:
        pool = self.data.get(domain) or []
        if not pool:
            raise DataError(f"no training samples for domain {domain}")
        epoch, pos = divmod(t, len(pool))
        key = (domain, phase, epoch)
        if key not in self._perm_cache:
            self._perm_cache = {k: v for k, v in self._perm_cache.items() if k[:2] != key[:2]}
            self._perm_cache[key] = self._rng(phase, 10, DOMAIN_IDS[domain], epoch).permutation(len(pool))
        s = pool[self._perm_cache[key][pos]]
        return augment(s, self._rng(phase, 11, DOMAIN_IDS[domain], t))

    def _step(self, group: str, nets: list[str], grads: dict, lr: float):
        params = {k: v for n in nets for k, v in self.bundle.group(n).items()}
        st = self.bundle.opt.setdefault(group, AdamState())
        adam_step(params, grads, st, lr, self.cfg.beta1, self.cfg.beta2)

    def _checkpoint(self, phase: str, t: int, nets: list[str], optimizer: bool = True) -> Checkpoint:
        return bundle_checkpoint(self.bundle, nets, phase, t, self.cfg.model_hash(),
                                 rng_state={"seed": self.cfg.seed, "next_iteration": t}, optimizer=optimizer)

    def load(self, path: str | os.PathLike) -> Checkpoint:
        ckpt = load_checkpoint(path)
        restore_bundle(self.bundle, ckpt, self.cfg.model_hash(), self.allow_hash_mismatch)
        return ckpt

    def _run_phase(self, phase: str, total: int, nets: list[str], step_fn, resume: bool,
                   stop_at: int | None) -> Checkpoint | None:
        final, latest = self.ckpt_path(phase), self.ckpt_path(phase, latest=True)
        start = 0
        if resume and final.is_file():
            ckpt = self.load(final)
            if ckpt.iteration >= total:
                log.info("%s already complete (%d iterations)", phase, ckpt.iteration)
                return ckpt
        if resume and latest.is_file():
            start = self.load(latest).iteration
            log.info("resuming %s at iteration %d", phase, start)
        logp = self.log_path(phase)
        logp.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if start and logp.is_file():
            kept = [ln for ln in logp.read_text().splitlines(True) if int(ln.split("\t", 1)[0]) < start]
        logp.write_text("".join(kept))
        t0 = time.time()
        with open(logp, "a") as logf:
            for t in range(start, total):
                try:
                    report = step_fn(t)
                except NonFiniteError as e:
                    raise NumericError(f"{phase} aborted at iteration {t}: {e}; last good checkpoint: "
                                       f"{latest if latest.is_file() else 'none'}") from e
                for k, v in report.items():
                    if not math.isfinite(v):
                        raise NumericError(f"{phase}: non-finite {k} at iteration {t}")
                    if v < 0 and not k.startswith("skip"):
                        raise NumericError(f"{phase}: negative loss {k}={v} at iteration {t}")
                logf.write("".join(f"{t}\t{k}\t{v!r}\n" for k, v in report.items()))
                done = t + 1
                if done % 100 == 0:
                    logf.flush()
                    log.info("%s %d/%d  %.2fs/it", phase, done, total, (time.time() - t0) / (done - start))
                if stop_at is not None and done >= stop_at and done < total:
                    logf.flush()
                    save_checkpoint(latest, self._checkpoint(phase, done, nets))
                    return None
                if self.cfg.checkpoint_interval and done % self.cfg.checkpoint_interval == 0 and done < total:
                    logf.flush()
                    save_checkpoint(latest, self._checkpoint(phase, done, nets))
        ckpt = self._checkpoint(phase, total, nets)
        save_checkpoint(final, ckpt)
        if latest.is_file():
            latest.unlink()
        return ckpt

    # ------------------------------------------------------------ regressor

    def regressor_step(self, domain: str, t: int, total: int) -> dict[str, float]:
        phase = f"regressor_{domain}"
        s = self.sample(domain, phase, t)
        hm = encode_heatmaps(s.landmarks, self.cfg.size, self.cfg.heatmap_sigma)
        net = f"R_{domain}"
        params = self.bundle.group(net)
        out = regressor_forward(self.bundle, domain, _t(s.image))
        loss = ops.mse_mean(out, _t(hm))
        grads = backward(loss, params)
        lr = polynomial_decay(self.cfg.lr_regressor, t, total, self.cfg.decay_power)
        self._step(net, [net], grads, lr)
        return {"mse": loss.item()}

    def pretrain_regressor(self, domain: str, resume: bool = False, stop_at: int | None = None):
        net = f"R_{domain}"
        total = self.cfg.iters_regressor
        self.bundle.set_trainable(net, True)
        try:
            return self._run_phase(f"regressor_{domain}", total, [net],
                                   lambda t: self.regressor_step(domain, t, total), resume, stop_at)
        finally:
            self.bundle.set_trainable(net, False)

    def load_regressors(self, paths: dict[str, str | os.PathLike] | None = None):
        for d in DOMAINS:
            p = Path(paths[d]) if paths else self.ckpt_path(f"regressor_{d}")
            if not p.is_file():
                raise CheckpointError(CheckpointError.MISSING, f"regressor checkpoint for domain {d} not found: {p}")
            ckpt = load_checkpoint(p)
            # regressors are frozen from here on; their optimizer state is not needed
            ckpt.tensors = {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")}
            ckpt.meta = {k: v for k, v in ckpt.meta.items() if k != "adam_steps"}
            restore_bundle(self.bundle, ckpt, self.cfg.model_hash(), self.allow_hash_mismatch)
            self.bundle.set_trainable(f"R_{d}", False)

    # ------------------------------------------------------------ GAN stages

    def make_batch(self, phase: str, t: int) -> Batch:
        S, sig = self.cfg.size, self.cfg.heatmap_sigma
        x = self.sample("X", phase, t)
        y = self.sample("Y", phase, t)
        rng = self._rng(phase, 12, t)
        ux = make_unmatched_pair(x.image, x.landmarks, rng, self.cfg.max_shift, sig)
        uy = make_unmatched_pair(y.image, y.landmarks, rng, self.cfg.max_shift, sig)
        return Batch(x, y, _t(x.image), _t(y.image),
                     _t(encode_heatmaps(x.landmarks, S, sig)), _t(encode_heatmaps(y.landmarks, S, sig)),
                     (_t(ux.image), _t(ux.heatmaps)), (_t(uy.image), _t(uy.heatmaps)))

    def generator_pass(self, b: Batch, stage: int) -> dict:
        """Translations, reconstructions, regressor maps and (stage 2) patches."""
        bd = self.bundle
        f = {}
        f["fake_Y"] = generator_forward(bd, "XY", b.X, b.LX)
        f["rec_X"] = generator_forward(bd, "YX", f["fake_Y"], b.LX)
        f["fake_X"] = generator_forward(bd, "YX", b.Y, b.LY)
        f["rec_Y"] = generator_forward(bd, "XY", f["fake_X"], b.LY)
        f["reg_Y"] = regressor_forward(bd, "Y", f["fake_Y"])
        f["reg_X"] = regressor_forward(bd, "X", f["fake_X"])
        if stage == 2:
            for dom, real_img, real_lm in (("Y", b.Y, b.y.landmarks), ("X", b.X, b.x.landmarks)):
                fake = f[f"fake_{dom}"]
                pred = decode_landmarks(f[f"reg_{dom}"])
                try:
                    f[f"patches_fake_{dom}"] = extract_patches(fake, pred, self.sizes)
                except ValueError:
                    f[f"patches_fake_{dom}"] = None
                f[f"patches_real_{dom}"] = extract_patches(real_img, real_lm, self.sizes)
                f[f"pred_lm_{dom}"] = pred
        return f

    def update_discriminators(self, b: Batch, f: dict, stage: int, lr: float) -> dict[str, float]:
        """One step for every discriminator. Real, fake (and unmatched) inputs
        share one batched pass; instance norm is per sample, so this only
        changes floating-point summation order."""
        bd, mode = self.bundle, self.cfg.gan_mode
        out = {}
        real = {"X": b.X, "Y": b.Y}
        real_hm = {"X": b.LX, "Y": b.LY}
        # fake of domain d was generated from the other domain's landmarks
        fake_hm = {"Y": b.LX, "X": b.LY}
        unmatched = {"X": b.unmatched_X, "Y": b.unmatched_Y}
        for d in ("Y", "X"):
            fake = f[f"fake_{d}"].data
            net = f"D_{d}"
            logits = global_disc_forward(bd, "unconditional", d, _stack(real[d].data, fake))
            loss = adversarial_loss(ops.take_rows(logits, 0, 1), ops.take_rows(logits, 1, 2), "discriminator", mode)
            self._step(net, [net], backward(loss, bd.group(net)), lr)
            out[net] = loss.item()

            net = f"Dgc_{d}"
            ui, uh = unmatched[d]
            logits = global_disc_forward(bd, "conditional", d, _stack(real[d].data, fake, ui.data),
                                         _stack(real_hm[d].data, fake_hm[d].data, uh.data))
            loss = conditional_adversarial_loss(ops.take_rows(logits, 0, 1), ops.take_rows(logits, 1, 2),
                                                ops.take_rows(logits, 2, 3), "discriminator", mode)
            self._step(net, [net], backward(loss, bd.group(net)), lr)
            out[net] = loss.item()

            if stage == 2 and f[f"patches_fake_{d}"] is not None:
                pr, pf = f[f"patches_real_{d}"], f[f"patches_fake_{d}"]
                for part in PARTS:
                    net = f"Dl_{d}_{part}"
                    w = self.cfg.weights.lambda_li[part]
                    logits = local_disc_forward(bd, part, d, _stack(pr[part].data, pf[part].data))
                    loss = adversarial_loss(ops.take_rows(logits, 0, 1), ops.take_rows(logits, 1, 2),
                                            "discriminator", mode)
                    self._step(net, [net], backward(ops.mul_scalar(loss, w), bd.group(net)), lr)
                    out[net] = loss.item()
        return out

    def generator_objective(self, b: Batch, f: dict, stage: int):
        bd, mode, w = self.bundle, self.cfg.gan_mode, self.cfg.weights
        terms: dict[str, Tensor] = {}
        extra: dict[str, Tensor | float] = {}
        fake_hm = {"Y": b.LX, "X": b.LY}
        for d in ("X", "Y"):
            fake = f[f"fake_{d}"]
            terms[f"adv_{d}"] = adversarial_loss(None, global_disc_forward(bd, "unconditional", d, fake), "generator",
                                                 mode)
            terms[f"cond_{d}"] = conditional_adversarial_loss(
                None, global_disc_forward(bd, "conditional", d, fake, fake_hm[d]), None, "generator", mode)
        terms["lm_XY"] = landmark_consistency_loss(f["reg_Y"], b.LX)
        terms["lm_YX"] = landmark_consistency_loss(f["reg_X"], b.LY)
        terms["cycle"] = cycle_loss(b.X, f["rec_X"], b.Y, f["rec_Y"])
        if stage == 2:
            for d in ("X", "Y"):
                pf = f[f"patches_fake_{d}"]
                if pf is None:
                    zero = Tensor(np.zeros(()))
                    terms[f"local_{d}"] = zero
                    for part in PARTS:
                        extra[f"local_{d}_{part}"] = 0.0
                    extra[f"skipped_{d}"] = 1.0
                    continue
                logits = {p: (None, local_disc_forward(bd, p, d, pf[p])) for p in PARTS}
                total, parts = local_adversarial_loss(logits, w.lambda_li, "generator", mode)
                terms[f"local_{d}"] = total
                for part in PARTS:
                    extra[f"local_{d}_{part}"] = parts[part]
                extra[f"skipped_{d}"] = 0.0
        return total_losses(terms, w, stage, extra=extra)

    def generator_gradients(self, b: Batch, stage: int):
        """Generator-group gradients for one batch, with no parameter updates."""
        f = self.generator_pass(b, stage)
        g_total, _, report = self.generator_objective(b, f, stage)
        params = {**self.bundle.group("G_XY"), **self.bundle.group("G_YX")}
        return backward(g_total, params), report

    def gan_step(self, t: int, stage: int, total: int) -> dict[str, float]:
        phase = f"stage{stage}"
        lr = polynomial_decay(self.cfg.lr, t, total, self.cfg.decay_power)
        b = self.make_batch(phase, t)
        f = self.generator_pass(b, stage)
        d_report = self.update_discriminators(b, f, stage, lr)
        g_total, _, report = self.generator_objective(b, f, stage)
        params = {**self.bundle.group("G_XY"), **self.bundle.group("G_YX")}
        self._step(GEN_GROUP, ["G_XY", "G_YX"], backward(g_total, params), lr)
        for k, v in d_report.items():
            report.terms[f"d_{k}"] = v
        return dict(report.items())

    def train_stage(self, stage: int, resume: bool = False, stop_at: int | None = None):
        total = self.cfg.iters_stage1 if stage == 1 else self.cfg.iters_stage2
        return self._run_phase(f"stage{stage}", total, GAN_NETS, lambda t: self.gan_step(t, stage, total), resume,
                               stop_at)


# ---------------------------------------------------------------- entry points

def pretrain_regressor(config: TrainConfig, domain: str, run_dir, train_data=None, resume=False, stop_at=None):
    if train_data is None:
        train_data, _ = load_run_data(config)
    if not train_data.get(domain):
        raise DataError(f"empty dataset for domain {domain}")
    tr = Trainer(config, run_dir, train_data)
    return tr.pretrain_regressor(domain, resume, stop_at)


def train_stage1(config: TrainConfig, run_dir, train_data=None, regressors=None, resume=False, stop_at=None,
                 allow_hash_mismatch=False):
    if train_data is None:
        train_data, _ = load_run_data(config)
    tr = Trainer(config, run_dir, train_data, allow_hash_mismatch=allow_hash_mismatch)
    tr.load_regressors(regressors)
    return tr.train_stage(1, resume, stop_at)


def train_stage2(config: TrainConfig, run_dir, train_data=None, stage1_checkpoint=None, regressors=None,
                 resume=False, stop_at=None, allow_hash_mismatch=False):
    if train_data is None:
        train_data, _ = load_run_data(config)
    tr = Trainer(config, run_dir, train_data, allow_hash_mismatch=allow_hash_mismatch)
    tr.load_regressors(regressors)
    latest = tr.ckpt_path("stage2", latest=True)
    final = tr.ckpt_path("stage2")
    if not (resume and (latest.is_file() or final.is_file())):
        src = Path(stage1_checkpoint) if stage1_checkpoint else tr.ckpt_path("stage1")
        if not src.is_file():
            raise CheckpointError(CheckpointError.MISSING, f"stage 2 needs a stage 1 checkpoint: {src}")
        ck = tr.load(src)
        if ck.phase != "stage1":
            raise CheckpointError(CheckpointError.MISSING, f"{src} is a {ck.phase!r} checkpoint, not stage1")
    return tr.train_stage(2, resume, stop_at)


def final_stage_checkpoint(run_dir) -> Path | None:
    """The most advanced finished stage checkpoint in ``run_dir``, if any."""
    for phase in ("stage2", "stage1"):
        p = Path(run_dir) / "checkpoints" / f"{phase}.lmcg"
        if p.is_file():
            return p
    return None


def inference_bundle(config: TrainConfig, run_dir, checkpoint=None, need_generators: bool = True,
                     allow_hash_mismatch: bool = False) -> ModelBundle:
    """Bundle with both regressors and (optionally) the trained GAN networks."""
    tr = Trainer(config, run_dir, {}, allow_hash_mismatch=allow_hash_mismatch)
    tr.load_regressors()
    if need_generators:
        src = Path(checkpoint) if checkpoint else final_stage_checkpoint(run_dir)
        if src is None:
            raise CheckpointError(CheckpointError.MISSING, f"no finished stage checkpoint in {run_dir}/checkpoints")
        tr.load(src)
    return tr.bundle

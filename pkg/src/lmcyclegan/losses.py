"""Objective terms and their weighted composition."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import ops
from .errors import ShapeError
from .nets import PARTS
from .tensor import Tensor


@dataclass
class LossWeights:
    lambda_g: float = 0.5
    lambda_gc: float = 0.5
    lambda_local: float = 0.3
    lambda_lm: float = 100.0
    lambda_cyc: float = 10.0
    lambda_li: dict = field(default_factory=lambda: {p: 1.0 for p in PARTS})

    def __post_init__(self):
        for k, v in asdict(self).items():
            vals = v.values() if isinstance(v, dict) else [v]
            if any(x < 0 for x in vals):
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")
        if set(self.lambda_li) != set(PARTS):
            raise ValueError(f"lambda_li needs exactly {PARTS}, got {sorted(self.lambda_li)}")


GAN_MODES = ("bce", "lsgan")


def _gan_term(logits: Tensor, target: float, mode: str) -> Tensor:
    if logits.data.size == 0:
        raise ShapeError("empty logit batch")
    if mode == "bce":
        return ops.bce_with_logits_mean(logits, target)
    if mode == "lsgan":
        return ops.mse_mean(logits, Tensor(np.full(logits.shape, target)))
    raise ValueError(f"unknown GAN mode {mode!r}")


def adversarial_loss(d_real_logits: Tensor | None, d_fake_logits: Tensor, side: str, mode: str = "bce") -> Tensor:
    """Discriminator side: real -> 1 plus fake -> 0. Generator side: the
    non-saturating fake -> 1 (``d_real_logits`` is ignored)."""
    if side == "discriminator":
        if d_real_logits is None:
            raise ValueError("discriminator side needs real logits")
        return ops.add(_gan_term(d_real_logits, 1.0, mode), _gan_term(d_fake_logits, 0.0, mode))
    if side == "generator":
        return _gan_term(d_fake_logits, 1.0, mode)
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def cycle_loss(x: Tensor, x_rec: Tensor, y: Tensor, y_rec: Tensor) -> Tensor:
    return ops.add(ops.l1_mean(x, x_rec), ops.l1_mean(y, y_rec))


def landmark_consistency_loss(regressor_output: Tensor, target_heatmaps: Tensor) -> Tensor:
    """Root-mean-square heatmap error, so the weight does not depend on S."""
    return ops.sqrt(ops.mse_mean(regressor_output, target_heatmaps))


def conditional_adversarial_loss(real_matched: Tensor | None, fake_generated: Tensor,
                                 fake_unmatched: Tensor | None, side: str, mode: str = "bce") -> Tensor:
    if side == "generator":
        if fake_unmatched is not None:
            raise ValueError("unmatched pairs are a discriminator-only signal")
        return _gan_term(fake_generated, 1.0, mode)
    if side != "discriminator":
        raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")
    if real_matched is None:
        raise ValueError("discriminator side needs real matched logits")
    real = _gan_term(real_matched, 1.0, mode)
    if fake_unmatched is None or fake_unmatched.data.size == 0:
        return ops.add(real, _gan_term(fake_generated, 0.0, mode))
    return ops.sum_scalars([real, _gan_term(fake_generated, 0.0, mode), _gan_term(fake_unmatched, 0.0, mode)],
                           [1.0, 0.5, 0.5])


def local_adversarial_loss(logits: Mapping[str, tuple[Tensor | None, Tensor]], weights: Mapping[str, float],
                           side: str, mode: str = "bce") -> tuple[Tensor, dict[str, Tensor]]:
    """``logits`` maps part -> (real, fake). Returns the weighted sum and the
    unweighted per-part terms."""
    missing = [p for p in PARTS if p not in logits]
    if missing:
        raise ValueError(f"local adversarial loss missing parts {missing}")
    parts = {p: adversarial_loss(logits[p][0], logits[p][1], side, mode) for p in PARTS}
    total = ops.sum_scalars([parts[p] for p in PARTS], [weights[p] for p in PARTS])
    return total, parts


# ---------------------------------------------------------------- composition

GEN_TERMS_STAGE1 = ("adv_X", "adv_Y", "cond_X", "cond_Y", "lm_XY", "lm_YX", "cycle")
LOCAL_TERMS = ("local_X", "local_Y")


def generator_weights(weights: LossWeights, stage: int) -> dict[str, float]:
    w = {
        "adv_X": weights.lambda_g, "adv_Y": weights.lambda_g,
        "cond_X": weights.lambda_gc, "cond_Y": weights.lambda_gc,
        "lm_XY": weights.lambda_lm, "lm_YX": weights.lambda_lm,
        "cycle": weights.lambda_cyc,
    }
    if stage == 2:
        w["local_X"] = weights.lambda_local
        w["local_Y"] = weights.lambda_local
    return w


@dataclass
class LossReport:
    """Named scalar values of one iteration plus the composed totals."""

    terms: dict[str, float] = field(default_factory=dict)
    totals: dict[str, float] = field(default_factory=dict)
    stage: int = 1

    def recompute_generator_total(self, weights: LossWeights) -> float:
        w = generator_weights(weights, self.stage)
        return math.fsum(w[k] * self.terms[k] for k in w)

    def items(self):
        yield from self.terms.items()
        for k, v in self.totals.items():
            yield f"total_{k}", v

    def to_tsv(self, iteration: int) -> str:
        return "".join(f"{iteration}\t{k}\t{v!r}\n" for k, v in self.items())


def total_losses(terms: Mapping[str, Tensor], weights: LossWeights, stage: int,
                 disc_terms: Mapping[str, Tensor] | None = None,
                 extra: Mapping[str, Tensor | float] | None = None) -> tuple[Tensor, dict[str, Tensor], LossReport]:
    """Compose the generator objective for ``stage`` (1 or 2).

    ``terms`` holds the generator-side scalars named as in
    :data:`GEN_TERMS_STAGE1` plus ``local_X``/``local_Y`` at stage 2.
    ``disc_terms`` (one per discriminator) pass through unchanged, since each
    discriminator minimises only its own loss. ``extra`` values are logged but
    not weighted.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 1 and any(k.startswith("local") for k in terms):
        raise ValueError("stage 1 takes no local discriminator terms")
    w = generator_weights(weights, stage)
    missing = [k for k in w if k not in terms]
    if missing:
        raise ValueError(f"missing loss terms {missing}")
    names = list(w)
    g_total = ops.sum_scalars([terms[k] for k in names], [w[k] for k in names])
    disc_terms = dict(disc_terms or {})
    report = LossReport(stage=stage)
    for k in names:
        report.terms[k] = terms[k].item()
    for k, v in (extra or {}).items():
        report.terms[k] = v.item() if isinstance(v, Tensor) else float(v)
    for k, v in disc_terms.items():
        report.terms[f"d_{k}"] = v.item()
    report.totals["G"] = g_total.item()
    for k, v in disc_terms.items():
        report.totals[k] = v.item()
    return g_total, disc_terms, report

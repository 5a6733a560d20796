"""Stage 1: train the pointwise Human Factor extractor under the FJ loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeMismatch, VersionMismatch
from .fj import FjConfig, InfluenceMatrix, build_influence_matrix, fj_terms
from .grad import SGD, ParamModule, load_tensors, save_tensors, uniform_init
from .seeding import stage_rng

logger = logging.getLogger(__name__)


class ExtractorModel(ParamModule):
    """Scalar affine map ``H = a * R + b`` applied to every residual entry.

    With ``per_variable`` each variable has its own ``(a, b)``; otherwise one
    pair is shared. ``n_vars`` records the dimensionality the model was
    trained for.
    """

    def __init__(self, n_vars: int, per_variable: bool = False, flat=None):
        p = n_vars if per_variable else 1
        super().__init__([("weight", (p,)), ("bias", (p,))], flat)
        self.n_vars = n_vars
        self.per_variable = per_variable

    @classmethod
    def initialize(cls, n_vars: int, per_variable: bool, rng: np.random.Generator) -> "ExtractorModel":
        m = cls(n_vars, per_variable)
        p = m["weight"].shape
        return m.with_params(weight=uniform_init(rng, p, fan_in=1), bias=np.zeros(p))

    @classmethod
    def identity(cls, n_vars: int = 1, per_variable: bool = False) -> "ExtractorModel":
        m = cls(n_vars, per_variable)
        p = m["weight"].shape
        return m.with_params(weight=np.ones(p), bias=np.zeros(p))


def extract(model: ExtractorModel, R: np.ndarray) -> np.ndarray:
    """Apply the extractor elementwise; works on ``[D, T]`` or ``[N, D, T]``."""
    R = np.asarray(R, dtype=np.float64)
    a, b = model["weight"], model["bias"]
    if model.per_variable:
        if R.shape[-2] != a.shape[0]:
            raise ShapeMismatch("residual variables", a.shape[0], R.shape[-2])
        return a[:, None] * R + b[:, None]
    return a[0] * R + b[0]


@dataclass(frozen=True)
class Stage1Config:
    fj: FjConfig = FjConfig()
    lr: float = 1e-2
    epochs: int = 200
    momentum: float = 0.9
    seed: int = 0
    target_detached: bool = True
    per_variable: bool = False
    reduction: str = "mean"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")


def fj_loss(Hhat, R, w: InfluenceMatrix, cfg: FjConfig, reduction: str = "mean") -> float:
    """Squared gap between the extracted factor and its FJ-expected value over ``t = 1 .. T-1``."""
    Hhat = np.asarray(Hhat, dtype=np.float64)
    H = fj_terms(R, Hhat, w, cfg).total
    diff = Hhat[:, 1:] - H
    sq = float(np.sum(diff * diff))
    return sq / diff.size if reduction == "mean" else sq


def fj_loss_and_grad(model: ExtractorModel, R, w: InfluenceMatrix, cfg: FjConfig, detached: bool = True, reduction: str = "mean"):
    """Loss and gradient with respect to the extractor parameters.

    With ``detached`` the expected factor is a constant target; otherwise the
    gradient also flows through its dependence on ``Hhat(t-1)``.
    """
    R = np.asarray(R, dtype=np.float64)
    Hhat = extract(model, R)
    H = fj_terms(R, Hhat, w, cfg).total
    diff = Hhat[:, 1:] - H
    scale = 1.0 / diff.size if reduction == "mean" else 1.0
    loss = scale * float(np.sum(diff * diff))

    g_hat = np.zeros_like(Hhat)
    g_hat[:, 1:] = 2.0 * scale * diff
    if not detached:
        # H[:, t] depends on Hhat[:, t-1] through (1 - lam) * (beta * W + delta * I)
        g_target = -2.0 * scale * diff
        g_hat[:, :-1] += (1.0 - cfg.lam) * (cfg.beta * (w.w.T @ g_target) + cfg.delta * g_target)

    if model.per_variable:
        g_a = np.sum(g_hat * R, axis=1)
        g_b = np.sum(g_hat, axis=1)
    else:
        g_a = np.array([np.sum(g_hat * R)])
        g_b = np.array([np.sum(g_hat)])
    return loss, model.pack({"weight": g_a, "bias": g_b})


@dataclass
class Stage1Result:
    model: ExtractorModel
    influence: InfluenceMatrix
    losses: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def train_stage1(R_train, cfg: Stage1Config, influence: InfluenceMatrix | None = None) -> Stage1Result:
    """Full-batch gradient descent on the FJ loss over the training residuals.

    ``losses[k]`` is the loss before update ``k``; the last entry is the loss
    of the returned model.
    """
    R = np.asarray(R_train, dtype=np.float64)
    D, T = R.shape
    if T < max(3, cfg.fj.window + 1):
        raise ValueError(f"stage 1 needs T >= max(3, W+1) = {max(3, cfg.fj.window + 1)}, got {T}")
    w = influence if influence is not None else build_influence_matrix(R)
    model = ExtractorModel.initialize(D, cfg.per_variable, stage_rng(cfg.seed, "stage1-init"))
    opt = SGD(cfg.lr, cfg.momentum)
    losses = []
    for _ in range(cfg.epochs):
        loss, grad = fj_loss_and_grad(model, R, w, cfg.fj, cfg.target_detached, cfg.reduction)
        if not np.isfinite(loss):
            raise NumericalError(f"stage 1 loss became non-finite at epoch {len(losses)}")
        losses.append(loss)
        model = opt.step(model, grad)
    losses.append(fj_loss(extract(model, R), R, w, cfg.fj, cfg.reduction))
    _warn_if_not_decreasing(losses)
    return Stage1Result(model, w, losses)


def _warn_if_not_decreasing(losses, width: int = 5):
    n = len(losses) // width
    if n < 2:
        return
    means = np.asarray(losses[: n * width]).reshape(n, width).mean(axis=1)
    if np.any(np.diff(means) > 1e-12 * max(1.0, abs(means[0]))):
        logger.warning("stage 1 loss is not monotone over %d-epoch windows", width)


def freeze_and_save(model: ExtractorModel, path) -> str:
    """Write the extractor checkpoint; returns the parameter digest."""
    meta = {"kind": "extractor", "n_vars": model.n_vars, "per_variable": model.per_variable, "digest": model.digest()}
    save_tensors(path, model.tensors(), meta)
    return meta["digest"]


def load_frozen(path, n_vars: int | None = None) -> ExtractorModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "extractor":
        raise VersionMismatch(f"{path}: not an extractor checkpoint (kind={meta.get('kind')!r})")
    if n_vars is not None and meta["n_vars"] != n_vars:
        raise VersionMismatch(
            f"{path}: extractor trained for D={meta['n_vars']} variables, data has D={n_vars}",
            expected=n_vars,
            got=meta["n_vars"],
        )
    model = ExtractorModel(meta["n_vars"], meta["per_variable"])
    model = model.with_params(**tensors)
    if model.digest() != meta["digest"]:
        raise VersionMismatch(f"{path}: parameter digest does not match header")
    return model

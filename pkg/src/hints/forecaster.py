"""Stage 2: Human-Factor attention, input modulation and a DLinear backbone.

Batched arrays are ``[N, D, L]`` (windows, variables, lookback). The
extracted factor of each window comes from decomposing that lookback
window on its own, so nothing after the window's last step is used.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .decomposition import window_residuals
from .errors import EmptyTestSet, NumericalError, ShapeMismatch, UsageError, VersionMismatch
from .extractor import ExtractorModel, extract
from .grad import ParamModule, uniform_init
from .seeding import stage_rng

logger = logging.getLogger(__name__)


def moving_average_matrix(L: int, m: int) -> np.ndarray:
    """DLinear's trend filter as an ``[L, L]`` matrix: width-``m`` mean with edge replication."""
    if m < 1 or m % 2 == 0:
        raise UsageError(f"moving-average kernel must be a positive odd integer, got {m}", "--ma-kernel")
    half = (m - 1) // 2
    M = np.zeros((L, L))
    for t in range(L):
        for o in range(-half, half + 1):
            M[t, min(max(t + o, 0), L - 1)] += 1.0 / m
    return M


class AttentionBlock(ParamModule):
    """Depthwise Conv1D -> tanh -> softmax over time."""

    def __init__(self, n_vars: int, k: int, flat=None):
        super().__init__([("kernel", (n_vars, k)), ("bias", (n_vars,))], flat)
        self.n_vars, self.k = n_vars, k

    @classmethod
    def initialize(cls, n_vars: int, k: int, rng) -> "AttentionBlock":
        m = cls(n_vars, k)
        return m.with_params(kernel=uniform_init(rng, (n_vars, k), fan_in=k), bias=np.zeros(n_vars))


class DLinearBackbone(ParamModule):
    """``y = trend_head(ma(x)) + remainder_head(x - ma(x))``, heads shared across variables."""

    def __init__(self, L: int, h: int, m: int = 25, flat=None):
        super().__init__(
            [
                ("trend_weight", (h, L)),
                ("trend_bias", (h,)),
                ("remainder_weight", (h, L)),
                ("remainder_bias", (h,)),
            ],
            flat,
        )
        self.L, self.h, self.m = L, h, m
        self.ma = moving_average_matrix(L, m)

    @classmethod
    def initialize(cls, L: int, h: int, m: int, rng) -> "DLinearBackbone":
        b = cls(L, h, m)
        return b.with_params(
            trend_weight=uniform_init(rng, (h, L), fan_in=L),
            remainder_weight=uniform_init(rng, (h, L), fan_in=L),
            trend_bias=np.zeros(h),
            remainder_bias=np.zeros(h),
        )


def attention_forward(hhat, block: AttentionBlock):
    c, conv_cache = G.conv1d_forward(hhat, block["kernel"], block["bias"])
    a, tanh_cache = G.tanh_forward(c)
    A, sm_cache = G.softmax_forward(a)
    return A, (conv_cache, tanh_cache, sm_cache)


def attention_backward(cache, grad_A, block: AttentionBlock):
    conv_cache, tanh_cache, sm_cache = cache
    g = G.softmax_backward(sm_cache, grad_A)
    g = G.tanh_backward(tanh_cache, g)
    g_hhat, g_kernel, g_bias = G.conv1d_backward(conv_cache, g, block["kernel"])
    return g_kernel, g_bias, g_hhat


def attention_map(hhat, block: AttentionBlock) -> np.ndarray:
    hhat = np.asarray(hhat, dtype=np.float64)
    if hhat.shape[-2] != block.n_vars:
        raise ShapeMismatch("attention input variables", block.n_vars, hhat.shape[-2])
    return attention_forward(hhat, block)[0]


def modulate(X, A, gamma: float) -> np.ndarray:
    """``X * (1 + gamma * A)``; at ``gamma = 0`` this returns ``X`` bit for bit."""
    X = np.asarray(X, dtype=np.float64)
    if np.shape(A) != X.shape:
        raise ShapeMismatch("attention map", X.shape, np.shape(A))
    return X * (1.0 + gamma * np.asarray(A))


def backbone_forward(x, bb: DLinearBackbone):
    if x.shape[-1] != bb.L:
        raise ShapeMismatch("backbone input length", bb.L, x.shape[-1])
    trend = G.linear_operator_forward(x, bb.ma)
    rem = x - trend
    yt, ct = G.affine_forward(trend, bb["trend_weight"], bb["trend_bias"])
    yr, cr = G.affine_forward(rem, bb["remainder_weight"], bb["remainder_bias"])
    return yt + yr, (ct, cr)


def backbone_backward(cache, grad_y, bb: DLinearBackbone):
    ct, cr = cache
    gx_t, gw_t, gb_t = G.affine_backward(ct, grad_y, bb["trend_weight"])
    gx_r, gw_r, gb_r = G.affine_backward(cr, grad_y, bb["remainder_weight"])
    grad_x = gx_r + G.linear_operator_backward(gx_t - gx_r, bb.ma)
    grads = {"trend_weight": gw_t, "trend_bias": gb_t, "remainder_weight": gw_r, "remainder_bias": gb_r}
    return grad_x, grads


def forecast(x, bb: DLinearBackbone) -> np.ndarray:
    return backbone_forward(np.asarray(x, dtype=np.float64), bb)[0]


class ForecastModel(ParamModule):
    """Attention block + backbone in one flat parameter vector.

    ``use_attention=False`` is the bare backbone: the attention parameters are
    absent and the input goes to the backbone unmodulated.
    """

    def __init__(self, n_vars, L, h, k=3, m=25, gamma=0.5, attn_scale=1.0, use_attention=True, flat=None):
        spec = []
        if use_attention:
            spec += [("attn.kernel", (n_vars, k)), ("attn.bias", (n_vars,))]
        spec += [(f"backbone.{n}", s) for n, s in DLinearBackbone(L, h, m).spec]
        super().__init__(spec, flat)
        self.n_vars, self.L, self.h, self.k, self.m = n_vars, L, h, k, m
        self.gamma, self.attn_scale, self.use_attention = gamma, attn_scale, use_attention
        self._ma = moving_average_matrix(L, m)

    @property
    def attention(self) -> AttentionBlock:
        return AttentionBlock(self.n_vars, self.k, np.concatenate([self["attn.kernel"].ravel(), self["attn.bias"]]))

    @property
    def backbone(self) -> DLinearBackbone:
        bb = DLinearBackbone.__new__(DLinearBackbone)
        names = [n for n in self.names if n.startswith("backbone.")]
        ParamModule.__init__(bb, [(n.split(".", 1)[1], self[n].shape) for n in names], np.concatenate([self[n].ravel() for n in names]))
        bb.L, bb.h, bb.m, bb.ma = self.L, self.h, self.m, self._ma
        return bb

    def hyper(self) -> dict:
        return dict(n_vars=self.n_vars, L=self.L, h=self.h, k=self.k, m=self.m, gamma=self.gamma,
                    attn_scale=self.attn_scale, use_attention=self.use_attention)


def init_model(cfg: "Stage2Config", n_vars: int) -> ForecastModel:
    """Backbone and attention draw from separate seed streams, so a bare
    backbone and a HINTS model with the same seed start from identical
    backbone weights."""
    bb = DLinearBackbone.initialize(cfg.lookback, cfg.horizon, cfg.ma_kernel, stage_rng(cfg.seed, "stage2-backbone"))
    model = ForecastModel(n_vars, cfg.lookback, cfg.horizon, cfg.attn_kernel, cfg.ma_kernel,
                          cfg.gamma, cfg.attn_scale, cfg.use_attention)
    params = {f"backbone.{n}": bb[n] for n in bb.names}
    if cfg.use_attention:
        att = AttentionBlock.initialize(n_vars, cfg.attn_kernel, stage_rng(cfg.seed, "stage2-attention"))
        params["attn.kernel"] = att["kernel"]
        params["attn.bias"] = att["bias"]
    return model.with_params(**params)


def model_forward(model: ForecastModel, X, hhat=None, return_attention=False):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-2:] != (model.n_vars, model.L):
        raise ShapeMismatch("input window", (model.n_vars, model.L), X.shape[-2:])
    A = None
    xt = X
    if model.use_attention:
        A = attention_map(hhat, model.attention)
        xt = modulate(X, model.attn_scale * A, model.gamma)
    y = forecast(xt, model.backbone)
    return (y, A) if return_attention else y


def loss_and_grad(model: ForecastModel, X, Y, hhat=None, return_factor_grad=False):
    """Forecast MSE and its gradient with respect to every model parameter.

    With ``return_factor_grad`` the gradient with respect to ``hhat`` is
    returned as a third value (used by joint training).
    """
    bb = model.backbone
    if model.use_attention:
        att = model.attention
        A, att_cache = attention_forward(hhat, att)
        A_eff = model.attn_scale * A
        xt = X * (1.0 + model.gamma * A_eff)
    else:
        xt = X
    y, bb_cache = backbone_forward(xt, bb)
    loss, mse_cache = G.mse_forward(y, Y)
    g_y = G.mse_backward(mse_cache)
    g_xt, bb_grads = backbone_backward(bb_cache, g_y, bb)
    grads = {f"backbone.{n}": g for n, g in bb_grads.items()}
    g_hhat = None
    if model.use_attention:
        g_A = model.gamma * model.attn_scale * X * g_xt
        g_kernel, g_bias, g_hhat = attention_backward(att_cache, g_A, att)
        grads["attn.kernel"] = g_kernel
        grads["attn.bias"] = g_bias
    if return_factor_grad:
        return loss, model.pack(grads), g_hhat
    return loss, model.pack(grads)


# --- data plumbing ----------------------------------------------------------------


@dataclass(frozen=True)
class WindowSet:
    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


def factor_windows(inputs, extractor: ExtractorModel | None, period: int, mode: str = "classical") -> np.ndarray:
    """Per-window residuals passed through the frozen extractor.

    With ``extractor=None`` the raw residuals are returned.
    """
    R = window_residuals(inputs, period, mode)
    return R if extractor is None else extract(extractor, R)


@dataclass(frozen=True)
class Stage2Config:
    gamma: float = 0.5
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    patience: int = 10
    seed: int = 0
    lookback: int = 96
    horizon: int = 96
    attn_kernel: int = 3
    ma_kernel: int = 25
    attn_scale: float = 1.0
    use_attention: bool = True
    period: int = 5
    decomp_mode: str = "classical"
    joint: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise UsageError(f"gamma must lie in [0, 1], got {self.gamma}", "--gamma")
        if self.attn_kernel % 2 == 0:
            raise UsageError("attention kernel width must be odd", "--attn-kernel")


@dataclass
class Stage2Result:
    model: ForecastModel
    best_epoch: int
    best_val: float
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    extractor: ExtractorModel | None = None


def _batch_mse(model, X, Y, H, batch=1024):
    """Mean over windows of the per-window MSE, accumulated in a fixed order."""
    total = 0.0
    for lo in range(0, X.shape[0], batch):
        sl = slice(lo, lo + batch)
        y = model_forward(model, X[sl], None if H is None else H[sl])
        total += float(np.sum(np.mean((y - Y[sl]) ** 2, axis=(1, 2))))
    return total / X.shape[0]


def extractor_grad(extractor: ExtractorModel, R, g_hhat) -> np.ndarray:
    """Gradient of a loss with respect to the extractor, given dL/dHhat for ``Hhat = a R + b``."""
    if extractor.per_variable:
        axes = tuple(i for i in range(R.ndim) if i != R.ndim - 2)
        return extractor.pack({"weight": np.sum(g_hhat * R, axis=axes), "bias": np.sum(g_hhat, axis=axes)})
    return extractor.pack({"weight": np.array([np.sum(g_hhat * R)]), "bias": np.array([np.sum(g_hhat)])})


def train_stage2(
    train: WindowSet,
    val: WindowSet | None,
    cfg: Stage2Config,
    extractor: ExtractorModel | None = None,
    raw_residual_factor: bool = False,
) -> Stage2Result:
    """Minibatch SGD on the forecast MSE with validation-based model selection.

    The extractor is only read; its digest is checked before and after.
    ``raw_residual_factor`` feeds the window residuals directly as the factor
    (no Stage 1). With ``cfg.joint`` the extractor is instead updated along
    with the forecaster (experimental; the returned result carries the
    updated copy).
    """
    if len(train) == 0:
        raise EmptyTestSet()
    digest = extractor.digest() if extractor is not None else None
    n_vars = train.inputs.shape[1]
    joint = cfg.joint and cfg.use_attention and extractor is not None and not raw_residual_factor
    if cfg.use_attention and extractor is None and not raw_residual_factor:
        raise UsageError("attention needs a frozen extractor (or raw residual factors)")

    def residuals(ws):
        if not cfg.use_attention or ws is None or len(ws) == 0:
            return None
        return window_residuals(ws.inputs, cfg.period, cfg.decomp_mode)

    def factors(R, ext):
        if R is None:
            return None
        return R if raw_residual_factor else extract(ext, R)

    R_train, R_val = residuals(train), residuals(val)
    ext = extractor
    H_train, H_val = factors(R_train, ext), factors(R_val, ext)
    model = init_model(cfg, n_vars)
    opt = G.SGD(cfg.lr, cfg.momentum)
    ext_opt = G.SGD(cfg.lr, cfg.momentum) if joint else None
    shuffle = stage_rng(cfg.seed, "stage2-shuffle")
    best, best_ext, best_val, best_epoch, stale = model, ext, np.inf, -1, 0
    train_curve, val_curve = [], []
    N = len(train)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(N)
        running = 0.0
        for lo in range(0, N, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            H = None
            if cfg.use_attention:
                H = extract(ext, R_train[idx]) if joint else H_train[idx]
            out = loss_and_grad(model, train.inputs[idx], train.targets[idx], H, return_factor_grad=joint)
            loss, g = out[0], out[1]
            if not np.isfinite(loss):
                raise NumericalError(f"stage 2 loss became non-finite at epoch {epoch}")
            running += loss * len(idx)
            model = opt.step(model, g)
            if joint:
                ext = ext_opt.step(ext, extractor_grad(ext, R_train[idx], out[2]))
        train_curve.append(running / N)
        if val is None or len(val) == 0:
            best, best_ext, best_epoch = model, ext, epoch
            continue
        if joint:
            H_val = factors(R_val, ext)
        v = _batch_mse(model, val.inputs, val.targets, H_val)
        val_curve.append(v)
        if v < best_val:
            best, best_ext, best_val, best_epoch, stale = model, ext, v, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if extractor is not None and extractor.digest() != digest:
        raise RuntimeError("extractor parameters changed during stage 2")
    return Stage2Result(best, best_epoch, float(best_val), train_curve, val_curve, best_ext if joint else extractor)


def evaluate(model: ForecastModel, test: WindowSet, hhat=None, normalizer=None) -> dict:
    """MSE and MAE on the normalized scale (per-window mean, then mean over windows).

    With a normalizer, ``raw_mse`` / ``raw_mae`` on the original scale are
    added. ``mse_by_step`` holds the error at each forecast step.
    """
    if len(test) == 0:
        raise EmptyTestSet()
    pred = model_forward(model, test.inputs, hhat)
    return metrics(pred, test.targets, normalizer)


def metrics(pred, target, normalizer=None) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch("predictions", target.shape, pred.shape)
    if pred.shape[0] == 0:
        raise EmptyTestSet()
    err = pred - target
    out = {
        "mse": float(np.mean(np.mean(err * err, axis=(1, 2)))),
        "mae": float(np.mean(np.mean(np.abs(err), axis=(1, 2)))),
        "mse_by_step": np.mean(err * err, axis=(0, 1)).tolist(),
    }
    if normalizer is not None:
        s = normalizer.std[None, :, None]
        out["raw_mse"] = float(np.mean(np.mean((err * s) ** 2, axis=(1, 2))))
        out["raw_mae"] = float(np.mean(np.mean(np.abs(err * s), axis=(1, 2))))
    return out


def dump_predictions(path, model: ForecastModel, test: WindowSet, hhat=None, names=None) -> None:
    """CSV rows ``window, variable, step, prediction, target``."""
    pred = model_forward(model, test.inputs, hhat)
    names = names or [str(d) for d in range(pred.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "variable", "step", "prediction", "target"])
        for n in range(pred.shape[0]):
            for d in range(pred.shape[1]):
                for s in range(pred.shape[2]):
                    w.writerow([int(test.starts[n]), names[d], s, repr(float(pred[n, d, s])), repr(float(test.targets[n, d, s]))])


def save_bundle(path, model: ForecastModel, extractor_digest: str | None) -> None:
    meta = {"kind": "forecaster", "hyper": model.hyper(), "extractor_digest": extractor_digest, "digest": model.digest()}
    G.save_tensors(path, model.tensors(), meta)


def load_bundle(path) -> tuple[ForecastModel, str | None]:
    tensors, meta = G.load_tensors(path)
    if meta.get("kind") != "forecaster":
        raise VersionMismatch(f"{path}: not a forecaster checkpoint (kind={meta.get('kind')!r})")
    model = ForecastModel(**meta["hyper"]).with_params(**tensors)
    if model.digest() != meta["digest"]:
        raise VersionMismatch(f"{path}: parameter digest does not match header")
    return model, meta["extractor_digest"]

"""Run configuration: defaults, flat ``key = value`` files, canonical hashing.

Precedence is defaults < config file < command-line flags. The canonical
form lists every result-affecting field as ``key = value`` in declaration
order; its SHA-256 is the experiment's config hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigConflict, UsageError
from .extractor import Stage1Config
from .fj import FjConfig
from .forecaster import Stage2Config
from .timeseries import SplitSpec

VARIANTS = ("baseline", "hints", "no_social", "no_memory_bias", "no_fj_loss")

# fields that do not change results and stay out of the hash
_UNHASHED = {"out_dir", "jobs"}


def _f(default, help, **kw):
    return field(default=default, metadata={"help": help, **kw})


@dataclass(frozen=True)
class RunConfig:
    data: str = _f("", "CSV file with a header row")
    columns: str = _f("", "comma-separated ordered column schema (default: all but the timestamp)")
    timestamp_col: str = _f("", "timestamp column excluded from the variables")
    delimiter: str = _f(",", "CSV delimiter")

    decomp_mode: str = _f("classical", "decomposition mode: classical or stl")
    period: int = _f(5, "seasonal period in steps (daily financial 5, hourly 24, weekly 52)")

    beta: float = _f(0.4, "social-influence weight")
    delta: float = _f(0.4, "self-memory weight")
    lam: float = _f(0.5, "susceptibility to new residual signals")
    bias_window: int = _f(24, "dynamic-bias rolling window W")
    signed_influence: bool = _f(False, "keep correlation signs in the influence matrix")

    stage1_lr: float = _f(1e-2, "stage 1 learning rate")
    stage1_epochs: int = _f(200, "stage 1 full-batch epochs")
    stage1_momentum: float = _f(0.9, "stage 1 momentum")
    target_detached: bool = _f(True, "treat the expected factor as a constant target")
    per_variable: bool = _f(False, "separate extractor parameters per variable")
    loss_reduction: str = _f("mean", "stage 1 loss reduction: mean or sum")

    gamma: float = _f(0.5, "modulation strength")
    stage2_lr: float = _f(1e-2, "stage 2 learning rate")
    stage2_epochs: int = _f(30, "stage 2 maximum epochs")
    stage2_momentum: float = _f(0.9, "stage 2 momentum")
    batch_size: int = _f(32, "stage 2 minibatch size")
    patience: int = _f(10, "early-stopping patience in epochs")
    lookback: int = _f(96, "lookback window L")
    horizon: int = _f(96, "forecast horizon h")
    attn_kernel: int = _f(3, "attention Conv1D kernel width (odd)")
    ma_kernel: int = _f(25, "DLinear moving-average kernel (odd)")
    attn_scale: float = _f(1.0, "multiplier on the attention map (set to L for mean-one attention)")
    joint: bool = _f(False, "experimental: keep updating the extractor during stage 2 instead of freezing it")

    train_frac: float = _f(0.7, "training fraction")
    val_frac: float = _f(0.1, "validation fraction")
    test_frac: float = _f(0.2, "test fraction")
    stride: int = _f(1, "window stride")

    seed: int = _f(0, "master seed")
    variant: str = _f("hints", "baseline | hints | no_social | no_memory_bias | no_fj_loss")
    out_dir: str = _f("hints_out", "output directory (env HINTS_OUT_DIR)")
    jobs: int = _f(1, "parallel worker processes")

    def validate(self, sources: dict | None = None) -> "RunConfig":
        sources = sources or {}
        if self.beta + self.delta > 1.0 + 1e-12:
            raise ConfigConflict(
                f"beta + delta must be <= 1 (got {self.beta} + {self.delta})",
                (f"beta from {sources.get('beta', 'default')}", f"delta from {sources.get('delta', 'default')}"),
            )
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}", "--variant")
        if self.decomp_mode not in ("classical", "stl"):
            raise UsageError(f"unknown mode {self.decomp_mode!r}", "--decomp-mode")
        if self.loss_reduction not in ("mean", "sum"):
            raise UsageError("must be mean or sum", "--loss-reduction")
        for name in ("period", "bias_window", "stage1_epochs", "stage2_epochs", "batch_size",
                     "patience", "lookback", "horizon", "stride", "jobs"):
            if getattr(self, name) < 1:
                raise UsageError("must be a positive integer", "--" + name.replace("_", "-"))
        for name in ("stage1_lr", "stage2_lr"):
            if getattr(self, name) <= 0:
                raise UsageError("learning rate must be positive", "--" + name.replace("_", "-"))
        if self.attn_kernel % 2 == 0 or self.ma_kernel % 2 == 0:
            raise UsageError("kernel widths must be odd", "--attn-kernel/--ma-kernel")
        if self.lookback < 2 * self.period:
            raise UsageError(f"lookback {self.lookback} must be at least twice the period {self.period}", "--lookback")
        self.fj_config()
        self.stage2_config()
        self.split()
        return self

    # --- derived configs ---

    def fj_config(self) -> FjConfig:
        return FjConfig(self.beta, self.delta, self.lam, self.bias_window)

    def stage1_config(self) -> Stage1Config:
        return Stage1Config(
            fj=self.fj_config(), lr=self.stage1_lr, epochs=self.stage1_epochs, momentum=self.stage1_momentum,
            seed=self.seed, target_detached=self.target_detached, per_variable=self.per_variable,
            reduction=self.loss_reduction,
        )

    def stage2_config(self) -> Stage2Config:
        return Stage2Config(
            gamma=self.gamma, lr=self.stage2_lr, momentum=self.stage2_momentum, epochs=self.stage2_epochs,
            batch_size=self.batch_size, patience=self.patience, seed=self.seed, lookback=self.lookback,
            horizon=self.horizon, attn_kernel=self.attn_kernel, ma_kernel=self.ma_kernel,
            attn_scale=self.attn_scale, use_attention=self.variant != "baseline", period=self.period,
            decomp_mode=self.decomp_mode, joint=self.joint,
        )

    def split(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac, self.stride)

    def column_list(self) -> list[str] | None:
        return [c.strip() for c in self.columns.split(",") if c.strip()] or None

    # --- canonical form ---

    def canonical(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self) if f.name not in _UNHASHED)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def to_text(self) -> str:
        """Commented config file that re-ingests to the same hash."""
        lines = ["# hints run configuration (key = value; '#' starts a comment)"]
        for f in fields(self):
            lines.append(f"# {f.metadata['help']}")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def as_dict(self, hashed_only: bool = False) -> dict:
        d = asdict(self)
        if hashed_only:
            for k in _UNHASHED:
                d.pop(k)
        return d


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(name: str, text: str):
    """Parse ``text`` into the type of RunConfig field ``name``."""
    types = {f.name: type(f.default) for f in fields(RunConfig)}
    if name not in types:
        raise UsageError(f"unknown config key {name!r}")
    kind = types[name]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise UsageError(f"cannot parse {text!r} as {kind.__name__}", "--" + name.replace("_", "-")) from None
    return text


def read_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def resolve(file_path=None, overrides: dict | None = None, env=None) -> tuple[RunConfig, dict]:
    """Merge defaults, an optional config file and explicit overrides.

    Returns the validated config and a field -> source mapping.
    """
    import os

    env = os.environ if env is None else env
    values, sources = {}, {}
    if env.get("HINTS_OUT_DIR"):
        values["out_dir"] = env["HINTS_OUT_DIR"]
        sources["out_dir"] = "env HINTS_OUT_DIR"
    if file_path:
        if not Path(file_path).exists():
            raise UsageError(f"config file {file_path} does not exist", "--config")
        for k, v in read_config_file(file_path).items():
            values[k] = v
            sources[k] = f"file {file_path}"
    for k, v in (overrides or {}).items():
        values[k] = v
        sources[k] = "command line"
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return cfg.validate(sources), sources

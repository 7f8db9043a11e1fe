"""Run configuration: model and training hyperparameters, ablation flags,
and the key=value config-file format used by the CLI.

Every run persists its fully resolved RunConfig next to its outputs, so any
artifact can be reproduced from the echoed file alone.
"""

import dataclasses
from dataclasses import dataclass, field

from .embodiment import V_F, V_R


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; parameter shapes are a function of these."""

    d_feat: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    T: int = 16          # prediction horizon (chunk length)
    T_o: int = 2         # observation history length
    M: int = 32          # local groups per frame
    K: int = 16          # points per local group
    N: int = 512         # points per cloud (data default; encoders accept any N)
    L_lang: int = 8
    V_lang: int = 1024
    V_e: int = 32
    V_f: int = V_F
    V_r: int = V_R
    point_hidden: int = 64   # hidden width of the point MLPs
    tau_dim: int = 128       # sinusoidal feature width for flow time
    max_joints: int = 30     # width of the temporal-variant projection/head
    temporal_centric: bool = False

    def __post_init__(self):
        if self.d_feat % self.n_heads != 0:
            raise ValueError(f"d_feat={self.d_feat} not divisible by n_heads={self.n_heads}")
        if self.d_feat % self.T_o != 0:
            raise ValueError(f"d_feat={self.d_feat} not divisible by T_o={self.T_o}")
        if self.tau_dim % 2 != 0:
            raise ValueError("tau_dim must be even (sin/cos halves)")
        for name in ("d_feat", "n_layers", "n_heads", "mlp_ratio", "T", "T_o", "M",
                     "K", "N", "L_lang", "V_lang", "V_e", "V_f", "V_r",
                     "point_hidden", "tau_dim", "max_joints"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.K > self.N or self.M > self.N:
            raise ValueError("point cloud defaults violate N >= K and N >= M")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 5000
    warmup_steps: int = 250
    peak_lr: float = 1e-4
    final_lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    # safety net against loss spikes, not a per-step regularizer: typical
    # batch gradient norms are 1-3, so anything tighter rescales every step
    clip_norm: float = 10.0
    ema_decay: float = 0.0   # 0 disables the EMA hook
    seed: int = 0
    ckpt_every: int = 1000

    def __post_init__(self):
        # total_steps=0 is the "emit the initial checkpoint only" mode
        if self.total_steps > 0 and not self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if not (self.peak_lr > self.final_lr > 0):
            raise ValueError("need peak_lr > final_lr > 0")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size >= 1 and total_steps >= 0 required")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay in [0, 1) required")


@dataclass(frozen=True)
class Ablations:
    """Component-removal switches. zero_* blank one codebook table's lookup;
    no_codebook blanks all three. The normalization key drops the same
    components (see synthdata.effective_stats_key) so an ablated category
    cannot leak back in through per-category statistics."""

    zero_embodiment: bool = False
    zero_function: bool = False
    zero_rotation: bool = False
    no_codebook: bool = False
    temporal_centric: bool = False
    no_global_token: bool = False
    no_local_tokens: bool = False
    no_causal_mask: bool = False

    def __post_init__(self):
        if self.temporal_centric and (
            self.zero_embodiment or self.zero_function or self.zero_rotation
            or self.no_codebook
        ):
            raise ValueError(
                "temporal_centric has no codebook path; codebook ablation flags "
                "are meaningless with it"
            )
        if self.no_global_token and self.no_local_tokens:
            raise ValueError("cannot drop both global and local observation tokens")

    @property
    def drop_e(self) -> bool:
        return self.zero_embodiment or self.no_codebook

    @property
    def drop_f(self) -> bool:
        return self.zero_function or self.no_codebook

    @property
    def drop_r(self) -> bool:
        return self.zero_rotation or self.no_codebook

    def active_flags(self) -> tuple:
        return tuple(f.name for f in dataclasses.fields(self) if getattr(self, f.name))


ABLATION_NAMES = tuple(f.name for f in dataclasses.fields(Ablations))


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI run needs; schema-validated before any work."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: Ablations = field(default_factory=Ablations)
    sampler_steps: int = 10
    seed: int = 0
    data_path: str = ""
    eval_data_path: str = ""
    out_dir: str = ""
    checkpoint: str = ""

    def __post_init__(self):
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be >= 1")
        if self.ablate.temporal_centric != self.model.temporal_centric:
            # the flag lives in both places; keep them agreeing
            object.__setattr__(
                self, "model",
                dataclasses.replace(self.model,
                                    temporal_centric=self.ablate.temporal_centric),
            )


def _coerce(raw: str, typ):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "ablate": Ablations,
}
_TOP_FIELDS = {
    f.name: f.type for f in dataclasses.fields(RunConfig)
    if f.name not in _SECTIONS
}


def parse_overrides(pairs) -> dict:
    """Parse 'key=value' strings into a nested override dict.

    Keys are either top-level RunConfig fields (seed=3, data_path=x.shard),
    section-qualified (model.d_feat=32, train.total_steps=100), or bare
    ablation flag names (no_codebook=true). Unknown keys are errors.
    """
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        raw = raw.strip()
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ValueError(f"unknown config section {section!r} in {pair!r}")
            fields = {f.name: f.type for f in dataclasses.fields(_SECTIONS[section])}
            if name not in fields:
                raise ValueError(f"unknown key {name!r} in section {section!r}")
            typ = _resolve_type(fields[name])
            out.setdefault(section, {})[name] = _coerce(raw, typ)
        elif key in ABLATION_NAMES:
            out.setdefault("ablate", {})[key] = _coerce(raw, bool)
        elif key in _TOP_FIELDS:
            typ = _resolve_type(_TOP_FIELDS[key])
            out[key] = _coerce(raw, typ)
        else:
            raise ValueError(f"unknown config key {key!r}")
    return out


def _resolve_type(t):
    # dataclass field types arrive as strings under from __future__ semantics
    # or as real types; normalize the three we use.
    if t in (int, float, str, bool):
        return t
    name = getattr(t, "__name__", str(t))
    return {"int": int, "float": float, "str": str, "bool": bool}[name]


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse key=value text ('#' comments, blank lines ok) into overrides."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{origin}:{lineno}: expected key=value, got {stripped!r}")
        pairs.append(stripped)
    return parse_overrides(pairs)


def load_config_file(path: str) -> dict:
    """Read a key=value config file; see parse_config_text."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), origin=path)


def build_run_config(*override_dicts) -> RunConfig:
    """Merge override dicts (later wins) into a validated RunConfig."""
    merged: dict = {}
    for d in override_dicts:
        for key, val in d.items():
            if isinstance(val, dict):
                merged.setdefault(key, {}).update(val)
            else:
                merged[key] = val
    kwargs: dict = {}
    for section, cls in _SECTIONS.items():
        kwargs[section] = cls(**merged.pop(section, {}))
    kwargs.update(merged)
    return RunConfig(**kwargs)


def dump_run_config(cfg: RunConfig) -> str:
    """Render a RunConfig as a reloadable key=value file."""
    lines = ["# resolved run configuration"]
    for f in dataclasses.fields(RunConfig):
        val = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(val):
                lines.append(f"{f.name}.{sub.name} = {getattr(val, sub.name)}")
        else:
            lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"

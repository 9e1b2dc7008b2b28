"""Run configuration: nested sections, strict JSON loading and ``key=value`` overrides."""
import dataclasses
import json
from dataclasses import dataclass, field

from .datagen import ClassPartition, DomainShiftParams, SceneConfig
from .errors import ConfigError

MASK_STRATEGIES = ("cam", "random", "grid", "none")
SAMPLING_MODES = ("cam", "uniform")
CDM_MODES = ("paper", "inverted", "off")
FDM_MODES = ("on", "off")
EXTRACTOR_MODES = ("auxiliary-pretrained", "fixed-random")


@dataclass
class DataSettings:
    n_source: int = 400
    n_target: int = 400
    n_val: int = 100
    n_aux: int = 200
    seed: int = 1


@dataclass
class TrainSettings:
    seed: int = 0
    iterations: int = 3000
    batch_size: int = 3
    lambda_kd: float = 0.01
    alpha: float = 0.999
    ema_ramp: bool = True
    self_training: bool = True
    target_warmup: int = 600          # source-only iterations before the target losses start
    eval_interval: int = 250


@dataclass
class CamSettings:
    sampling: str = "cam"
    t_b: float = 1.0
    t_f: float = 0.7
    p_fg_branch: float = 0.5
    n_min: int = 8
    mask_strategy: str = "cam"
    mask_ratio: float = 0.7
    block_fore: int = 16
    block_back: int = 32


@dataclass
class FdmSettings:
    mode: str = "on"
    normalization: str = "mean"
    n_min_fg: int = 8


@dataclass
class CdmSettings:
    mode: str = "paper"
    decay: float = 0.9
    init: float = 0.5


@dataclass
class ExtractorSettings:
    mode: str = "auxiliary-pretrained"
    seed: int = 0
    iterations: int = 300
    lr: float = 1e-2


@dataclass
class OptimSettings:
    lr_enc: float = 6e-4
    lr_dec: float = 6e-3
    warmup: int = 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    cam: CamSettings = field(default_factory=CamSettings)
    fdm: FdmSettings = field(default_factory=FdmSettings)
    cdm: CdmSettings = field(default_factory=CdmSettings)
    extractor: ExtractorSettings = field(default_factory=ExtractorSettings)
    optim: OptimSettings = field(default_factory=OptimSettings)

    def to_dict(self):
        d = {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        base = cls().to_dict()
        merged = _merge(base, d, "")
        return _build(merged).validate()

    def with_overrides(self, overrides):
        """Apply ``{"section.key": value}`` overrides; unknown paths are rejected."""
        d = self.to_dict()
        for path, value in overrides.items():
            _set_path(d, path, value)
        return _build(d).validate()

    def validate(self):
        _validate(self)
        return self


def _merge(base, update, prefix):
    if not isinstance(update, dict):
        raise ConfigError("expected an object", prefix or "<root>")
    out = dict(base)
    for key, value in update.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in base:
            raise ConfigError("unknown key", path)
        if isinstance(base[key], dict) and key != "partition":
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


def _set_path(d, path, value):
    parts = path.split(".")
    node = d
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError("unknown key", ".".join(parts[:i + 1]))
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError("unknown key", path)
    node[parts[-1]] = value


def parse_override(text):
    """Parse ``key=value``; the value is JSON when it parses, else a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


_SECTIONS = {
    "data": DataSettings, "train": TrainSettings, "cam": CamSettings, "fdm": FdmSettings,
    "cdm": CdmSettings, "extractor": ExtractorSettings, "optim": OptimSettings,
}


def _build(d):
    try:
        scene = SceneConfig.from_dict(d["scene"])
    except TypeError as exc:
        raise ConfigError(str(exc), "scene") from exc
    kwargs = {"scene": scene}
    for name, cls in _SECTIONS.items():
        kwargs[name] = cls(**d[name])
    return Config(**kwargs)


def _check(cond, key, message):
    if not cond:
        raise ConfigError(message, key)


def _number(value, key, integer=False):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if integer:
        ok = ok and float(value) == int(value)
    _check(ok, key, "must be an integer" if integer else "must be a number")


def _validate(c: Config):
    try:
        c.scene.validate()
    except TypeError as exc:
        raise ConfigError(str(exc), "scene") from exc
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], exc.key if exc.key.startswith("scene")
                          else f"scene.{exc.key}") from exc
    for name in ("n_source", "n_target", "n_val", "n_aux", "seed"):
        _number(getattr(c.data, name), f"data.{name}", integer=True)
    _check(c.data.n_source >= 1 and c.data.n_target >= 1 and c.data.n_val >= 1, "data.n_source",
           "dataset sizes must be >= 1")
    t = c.train
    for name in ("seed", "iterations", "batch_size", "eval_interval", "target_warmup"):
        _number(getattr(t, name), f"train.{name}", integer=True)
    _check(t.iterations >= 0, "train.iterations", "must be >= 0")
    _check(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    _check(t.eval_interval >= 1, "train.eval_interval", "must be >= 1")
    _check(t.target_warmup >= 0, "train.target_warmup", "must be >= 0")
    _number(t.lambda_kd, "train.lambda_kd")
    _check(t.lambda_kd >= 0, "train.lambda_kd", "must be >= 0")
    _number(t.alpha, "train.alpha")
    _check(0.0 <= t.alpha < 1.0, "train.alpha", "must lie in [0, 1)")
    _check(isinstance(t.ema_ramp, bool), "train.ema_ramp", "must be true or false")
    _check(isinstance(t.self_training, bool), "train.self_training", "must be true or false")
    if c.fdm.mode == "on":
        _check(t.batch_size >= 3, "train.batch_size", "must be >= 3 when fdm.mode is on")

    m = c.cam
    _check(m.sampling in SAMPLING_MODES, "cam.sampling", f"must be one of {SAMPLING_MODES}")
    _check(m.mask_strategy in MASK_STRATEGIES, "cam.mask_strategy", f"must be one of {MASK_STRATEGIES}")
    for name in ("t_b", "t_f"):
        _number(getattr(m, name), f"cam.{name}")
        _check(getattr(m, name) > 0, f"cam.{name}", "must be > 0")
    _number(m.p_fg_branch, "cam.p_fg_branch")
    _check(0.0 <= m.p_fg_branch <= 1.0, "cam.p_fg_branch", "must lie in [0, 1]")
    _number(m.mask_ratio, "cam.mask_ratio")
    _check(0.0 <= m.mask_ratio <= 1.0, "cam.mask_ratio", "must lie in [0, 1]")
    for name in ("block_fore", "block_back", "n_min"):
        _number(getattr(m, name), f"cam.{name}", integer=True)
        _check(getattr(m, name) >= 1, f"cam.{name}", "must be >= 1")

    _check(c.fdm.mode in FDM_MODES, "fdm.mode", f"must be one of {FDM_MODES}")
    _check(c.fdm.normalization in ("mean", "sum"), "fdm.normalization", "must be mean or sum")
    _number(c.fdm.n_min_fg, "fdm.n_min_fg", integer=True)
    _check(c.fdm.n_min_fg >= 1, "fdm.n_min_fg", "must be >= 1")

    _check(c.cdm.mode in CDM_MODES, "cdm.mode", f"must be one of {CDM_MODES}")
    _number(c.cdm.decay, "cdm.decay")
    _check(0.0 <= c.cdm.decay <= 1.0, "cdm.decay", "must lie in [0, 1]")
    _number(c.cdm.init, "cdm.init")
    _check(0.0 <= c.cdm.init <= 1.0, "cdm.init", "must lie in [0, 1]")

    _check(c.extractor.mode in EXTRACTOR_MODES, "extractor.mode", f"must be one of {EXTRACTOR_MODES}")
    _number(c.extractor.iterations, "extractor.iterations", integer=True)
    _check(c.extractor.iterations >= 0, "extractor.iterations", "must be >= 0")

    o = c.optim
    for name in ("lr_enc", "lr_dec", "weight_decay", "beta1", "beta2", "eps"):
        _number(getattr(o, name), f"optim.{name}")
        _check(getattr(o, name) >= 0, f"optim.{name}", "must be >= 0")
    _number(o.warmup, "optim.warmup", integer=True)
    _check(o.warmup >= 0, "optim.warmup", "must be >= 0")
    _check(o.beta1 < 1 and o.beta2 < 1, "optim.beta1", "betas must be < 1")


def load_config(path=None, overrides=()):
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides."""
    if path is None:
        config = Config().validate()
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        config = Config.from_dict(raw)
    if overrides:
        config = config.with_overrides(dict(parse_override(o) for o in overrides))
    return config


__all__ = ["Config", "ClassPartition", "DomainShiftParams", "load_config", "parse_override"]

"""Declarative run configuration.

A YAML document fully determines a run. Every key and its default is listed in the
dataclasses below; unknown keys are rejected. ``config_hash`` is embedded in every
artifact produced from a config.
"""
import copy
import hashlib
import json
import os
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import yaml

from .encoder import EncoderSpec
from .generator import GeneratorSpec
from .losses import LossWeights

CONFIG_DIR_ENV = "MASKRECOVERY_CONFIG_DIR"
EXTERNALS_ENV = "MASKRECOVERY_EXTERNALS"
PHASES = ("baseline", "unmasking", "rmfrd-finetune")


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    backend: str = "toy"
    depth: int = 14
    weights_uri: Optional[str] = None
    seed: int = 0
    channels: int = 32

    def spec(self, root=None):
        uri = resolve_external(self.weights_uri, root) if self.weights_uri else None
        return GeneratorSpec(self.depth, self.backend, uri, self.seed, self.channels)


@dataclass
class EncoderConfig:
    input_resolution: int = 256
    backbone_width: int = 32
    head_grid: int = 4
    style_groups: Optional[list] = None
    seed: int = 0

    def spec(self, num_styles):
        groups = tuple(self.style_groups) if self.style_groups else None
        return EncoderSpec(num_styles, self.input_resolution, self.backbone_width, self.head_grid, groups)


@dataclass
class LossConfig:
    alpha: float = 0.8
    beta: float = 0.1
    gamma: float = 1.0
    reconstruction: float = 1.0
    normalize: bool = False

    def weights(self):
        return LossWeights(self.alpha, self.beta, self.gamma, self.reconstruction)


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-4
    batch_size: int = 8
    schedule: str = "constant"


@dataclass
class FinetuneConfig:
    estimate_steps: int = 200
    k_w: float = 2.0
    k_h: float = 1.0


@dataclass
class TrainConfig:
    phase: str = "baseline"
    dataset: str = "toy"
    seed: int = 0
    steps: int = 1000
    dtype: str = "float32"
    output_dir: Optional[str] = None
    init_checkpoint: Optional[str] = None
    frozen_checkpoint: Optional[str] = None
    resume: Optional[str] = None
    smoothing_window: int = 50
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    perceptual: dict = field(default_factory=lambda: {"type": "identity-map"})
    identity: dict = field(default_factory=lambda: {"type": "random-projection"})
    data: dict = field(default_factory=lambda: {"kind": "toy"})

    def validate(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.optimizer.name not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer.name!r}")
        if self.optimizer.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be constant or cosine, got {self.optimizer.schedule!r}")
        if self.phase != "baseline" and not (self.init_checkpoint or self.resume):
            need = "baseline" if self.phase == "unmasking" else "unmasking"
            raise ConfigError(f"phase {self.phase!r} needs init_checkpoint pointing at a {need} checkpoint")
        self.losses.weights()
        return self

    def checkpoint_path(self):
        return os.path.join(self.output_dir or default_output_dir(self), "checkpoint.pt")


@dataclass
class EvalConfig:
    checkpoint: Optional[str] = None
    manifest: Optional[str] = None
    dataset: str = ""
    settings: list = field(default_factory=lambda: ["MM", "MT", "UU", "UT", "TT"])
    matcher: dict = field(default_factory=lambda: {"type": "downsampled-pixels"})
    metrics: list = field(default_factory=lambda: ["psnr", "ssim"])
    policy: str = "all"
    impostor_ratio: float = 1.0
    seed: int = 0
    subsample: Optional[int] = None
    output_dir: Optional[str] = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def validate(self):
        from .evaluation import SETTINGS

        bad = [s for s in self.settings if s not in SETTINGS]
        if bad:
            raise ConfigError(f"unknown verification settings {bad}")
        if any(s[0] == "U" for s in self.settings) and not self.checkpoint:
            raise ConfigError("settings UU/UT need a checkpoint")
        if self.policy not in ("all", "ratio"):
            raise ConfigError(f"policy must be all or ratio, got {self.policy!r}")
        return self


def default_output_dir(cfg):
    return os.path.join("runs", cfg.dataset, cfg.phase)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if hasattr(default, "__dataclass_fields__"):
            value = _build(type(default), value or {}, f"{where}.{name}".strip("."))
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(data, cls=None):
    data = copy.deepcopy(data)
    if cls is None:
        cls = EvalConfig if data.pop("kind", "train") == "evaluate" else TrainConfig
    else:
        data.pop("kind", None)
    try:
        cfg = _build(cls, data, "")
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()


def to_dict(cfg):
    d = asdict(cfg)
    d["kind"] = "evaluate" if isinstance(cfg, EvalConfig) else "train"
    return d


def apply_overrides(data, overrides):
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def find_config(path):
    """Resolve ``path`` directly or inside ``$MASKRECOVERY_CONFIG_DIR``."""
    if os.path.exists(path):
        return path
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and os.path.exists(os.path.join(base, path)):
        return os.path.join(base, path)
    raise ConfigError(f"config file not found: {path}")


def load_config(path, overrides=(), cls=None):
    path = find_config(path)
    with open(path, encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
    return from_dict(apply_overrides(data, overrides), cls)


def config_hash(cfg):
    d = to_dict(cfg)
    # resuming must reproduce the same run identity
    d.pop("resume", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve_external(path, root=None):
    """External weight and data paths are relative to ``root`` or ``$MASKRECOVERY_EXTERNALS``."""
    if path is None or os.path.isabs(path):
        return path
    root = root or os.environ.get(EXTERNALS_ENV) or "."
    return os.path.join(root, path)


# ---------------------------------------------------------------------------
# dry run

@dataclass
class Reference:
    config: str
    role: str
    path: str
    produced: bool = False
    status: str = "unchecked"


def references(cfg, name=""):
    """Every external dependency named by ``cfg``: (role, path, produced-by-a-run)."""
    refs = []
    if cfg.generator.backend == "pretrained":
        refs.append(Reference(name, "generator weights", cfg.generator.weights_uri))
    embedders = [("perceptual", cfg.perceptual), ("identity", cfg.identity)] if isinstance(cfg, TrainConfig) \
        else [("matcher", cfg.matcher)]
    for role, emb in embedders:
        if emb.get("type") == "torchscript":
            refs.append(Reference(name, f"{role} weights", emb.get("weights_uri")))
    if isinstance(cfg, TrainConfig):
        if cfg.data.get("kind") == "manifest":
            refs.append(Reference(name, "training manifest", cfg.data.get("path")))
        for role, path in (("init checkpoint", cfg.init_checkpoint), ("frozen baseline", cfg.frozen_checkpoint)):
            if path:
                refs.append(Reference(name, role, path, produced=True))
    else:
        if cfg.manifest:
            refs.append(Reference(name, "evaluation manifest", cfg.manifest))
        if cfg.checkpoint:
            refs.append(Reference(name, "checkpoint", cfg.checkpoint, produced=True))
    return refs


def _probe(path):
    import torch

    if path.endswith((".yaml", ".yml", ".tsv", ".txt")):
        with open(path, encoding="utf-8") as f:
            f.read(1)
        return "ok"
    try:
        with warnings.catch_warnings():
            # TorchScript archives are detected and loaded by torch.jit.load below
            warnings.simplefilter("ignore")
            torch.load(path, map_location="cpu", weights_only=True)
    except Exception:
        try:
            torch.jit.load(path, map_location="cpu")
        except Exception as e:
            return f"unreadable: {type(e).__name__}"
    return "ok"


def dry_run(paths, root=None, probe=True):
    """Validate configs and every external reference they make.

    Checkpoints that another config in ``paths`` writes are accepted as produced by
    the run order. Returns ``(configs, references)``; any reference whose status is not
    ``ok``/``produced`` makes the dry run fail.
    """
    configs, refs = {}, []
    for p in paths:
        configs[p] = load_config(p)
    produced = {os.path.normpath(c.checkpoint_path()) for c in configs.values() if isinstance(c, TrainConfig)}
    for p, cfg in configs.items():
        for ref in references(cfg, p):
            if ref.path is None:
                ref.status = "missing: no path given"
            elif ref.produced:
                ref.status = "produced" if os.path.normpath(ref.path) in produced else (
                    "ok" if os.path.exists(ref.path) else "missing: no config produces it")
            else:
                full = resolve_external(ref.path, root)
                if not os.path.exists(full):
                    ref.status = f"missing: {full}"
                else:
                    ref.status = _probe(full) if probe else "ok"
            refs.append(ref)
    return configs, refs

"""Training procedures: baseline autoencoding encoder, unmasking encoder, cross-dataset
cascade, and fine-tuning on real masks with an estimated unmasked latent target."""
import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import data as dp
from . import losses
from .config import TrainConfig, config_hash, to_dict
from .embedders import build_embedder
from .encoder import EncoderError, EncoderParams, build_encoder, initialize_from, spec_from_dict, spec_to_dict
from .generator import at_resolution, build_generator

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDivergence(TrainingError):
    def __init__(self, step, terms):
        self.step = step
        self.terms = terms
        super().__init__(f"non-finite loss at step {step}: {terms}")


DTYPES = {"float32": torch.float32, "float64": torch.float64}


# ---------------------------------------------------------------------------
# data and shared resources

@dataclass
class PairData:
    """Training images as tensors ``(N, 3, R, R)``; ``T`` rows may be NaN-free only where
    ``has_T`` is true (real-mask datasets carry masked images without a paired T)."""

    T: Optional[torch.Tensor]
    M: Optional[torch.Tensor]
    identities: list
    eyes: Optional[np.ndarray] = None
    name: str = ""

    def __len__(self):
        return len(self.identities)

    @property
    def resolution(self):
        x = self.T if self.T is not None else self.M
        return x.shape[-1]


@dataclass
class Pipeline:
    generator: torch.nn.Module
    perceptual: torch.nn.Module
    identity: torch.nn.Module
    dtype: torch.dtype


def build_pipeline(cfg, root=None):
    dtype = DTYPES[cfg.dtype]
    g = build_generator(cfg.generator.spec(root), dtype=dtype)
    perceptual = build_embedder(_resolved(cfg.perceptual, root)).to(dtype)
    identity = build_embedder(_resolved(cfg.identity, root)).to(dtype)
    if perceptual.kind != "perceptual" or identity.kind != "identity":
        raise TrainingError("perceptual/identity embedders are of the wrong kind")
    return Pipeline(g, perceptual, identity, dtype)


def _resolved(emb, root):
    from .config import resolve_external

    emb = dict(emb)
    if "weights_uri" in emb:
        emb["weights_uri"] = resolve_external(emb["weights_uri"], root)
    return emb


def load_data(cfg, pipeline, root=None):
    """Build training data from ``cfg.data``: ``kind: toy`` renders synthetic pairs with
    the generator, ``kind: manifest`` reads the train split of a manifest."""
    spec = dict(cfg.data)
    kind = spec.pop("kind", "toy")
    if kind == "toy":
        from .toy import toy_pairs

        pairs = toy_pairs(pipeline.generator, spec.get("identities", 16), spec.get("per_identity", 1),
                          seed=spec.get("seed", 0), spread=spec.get("spread", 0.5),
                          templates=tuple(spec.get("templates", ("rectangle", "surgical"))))
        return PairData(pairs.T.to(pipeline.dtype), pairs.M.to(pipeline.dtype), pairs.identities, pairs.eyes,
                        name=cfg.dataset)
    if kind == "manifest":
        from .config import resolve_external

        path = resolve_external(spec["path"], root)
        return data_from_manifest(dp.ingest_manifest(path), path, spec.get("split", "train"), pipeline.dtype,
                                  name=cfg.dataset)
    raise TrainingError(f"unknown data kind {kind!r}")


def data_from_manifest(manifest, manifest_path, split="train", dtype=torch.float32, name=""):
    records = manifest.split(split)
    if not records:
        raise TrainingError(f"manifest has no {split} records")

    def stack(paths):
        if not any(paths):
            return None
        imgs = []
        shape = None
        for p in paths:
            if p:
                img = dp.load_image(dp.resolve(manifest_path, p))
                shape = img.shape
                imgs.append(img)
            else:
                imgs.append(None)
        imgs = [np.full(shape, np.nan, np.float32) if i is None else i for i in imgs]
        return torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).to(dtype)

    T = stack([r.t_path for r in records])
    M = stack([r.m_path for r in records])
    eyes = None
    if any(r.eyes for r in records):
        eyes = np.array([r.eyes or (np.nan,) * 4 for r in records], dtype=np.float64).reshape(-1, 2, 2)
    return PairData(T, M, [r.identity for r in records], eyes, name=name or manifest.name)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    encoder: EncoderParams
    step: int = 0
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    metrics: list = field(default_factory=list)
    optimizer_state: Optional[dict] = None
    skipped: int = 0
    generator: dict = field(default_factory=dict)

    @property
    def phase_tag(self):
        return self.encoder.phase_tag

    @property
    def lineage(self):
        return self.encoder.lineage

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        meta = {
            "encoder_spec": spec_to_dict(self.encoder.spec),
            "phase_tag": self.encoder.phase_tag,
            "lineage": self.encoder.lineage,
            "step": self.step,
            "config": self.config,
            "config_hash": self.config_hash,
            "skipped": self.skipped,
            "generator": self.generator,
            "dtype": str(next(self.encoder.module.parameters()).dtype).replace("torch.", ""),
        }
        torch.save({
            "state_dict": self.encoder.module.state_dict(),
            "optimizer": self.optimizer_state,
            "meta": json.dumps(meta, sort_keys=True),
        }, path)

    @classmethod
    def load(cls, path):
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
            meta = json.loads(blob["meta"])
        except FileNotFoundError:
            raise TrainingError(f"checkpoint not found: {path}") from None
        except Exception as e:
            raise TrainingError(f"cannot read checkpoint {path}: {e}") from e
        spec = spec_from_dict(meta["encoder_spec"])
        params = build_encoder(spec, dtype=DTYPES[meta.get("dtype", "float32")])
        params.module.load_state_dict(blob["state_dict"])
        params.phase_tag = meta["phase_tag"]
        params.lineage = meta["lineage"]
        return cls(params, meta["step"], meta["config"], meta["config_hash"], [], blob["optimizer"],
                   meta.get("skipped", 0), meta.get("generator", {}))


def _as_checkpoint(source):
    if source is None or isinstance(source, Checkpoint):
        return source
    return Checkpoint.load(source)


def frozen_copy(params):
    module = copy.deepcopy(params.module)
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


# ---------------------------------------------------------------------------
# loop

def smoothed(values, window=50):
    """Trailing moving average (the first entries average what is available)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def loss_reduction(trace, window=50):
    """Trailing-smoothed final total loss divided by the total at initialization."""
    totals = [r["total"] for r in trace]
    if len(totals) < 2:
        return 1.0
    return float(smoothed(totals, window)[-1] / totals[0])


def _batches(n, batch_size, seed, step):
    # one permutation per epoch, keyed by (seed, epoch): resumable and deterministic
    per_epoch = max(1, math.ceil(n / batch_size))
    epoch, k = divmod(step, per_epoch)
    g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    perm = torch.randperm(n, generator=g)
    return perm[k * batch_size:(k + 1) * batch_size]


def _optimizer(cfg, params):
    o = cfg.optimizer
    if o.name == "adam":
        return torch.optim.Adam(params, lr=o.lr)
    return torch.optim.SGD(params, lr=o.lr, momentum=0.9)


def _lr_at(cfg, step):
    o = cfg.optimizer
    if o.schedule == "cosine" and cfg.steps > 0:
        return o.lr * 0.5 * (1 + math.cos(math.pi * min(step, cfg.steps) / cfg.steps))
    return o.lr


class MetricsLog:
    """Append-only JSON-lines metrics file (one record per step)."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _run(cfg, params, loss_fn, n, start_step=0, optimizer_state=None, log=None):
    """Minimize ``loss_fn(batch_indices)`` over ``params`` until ``cfg.steps``."""
    log = log or MetricsLog()
    module = params.module
    module.train()
    opt = _optimizer(cfg, module.parameters())
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for step in range(start_step, cfg.steps):
            lr = _lr_at(cfg, step)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = _batches(n, cfg.optimizer.batch_size, cfg.seed, step)
            try:
                result = loss_fn(idx)
            except EncoderError as e:
                raise TrainingDivergence(step, {"error": str(e)}) from e
            terms = result.breakdown()
            if not all(math.isfinite(v) for v in terms.values()):
                raise TrainingDivergence(step, terms)
            opt.zero_grad(set_to_none=True)
            result.total.backward()
            opt.step()
            log.append({"step": step + 1, "phase": params.phase_tag, "lr": lr, "seed": cfg.seed, **terms})
    module.eval()
    return opt.state_dict(), log


def _checkpoint(cfg, params, step, log, opt_state, skipped=0):
    return Checkpoint(params, step, to_dict(cfg), config_hash(cfg), list(log.records), opt_state, skipped,
                      generator={"backend": cfg.generator.backend, "depth": cfg.generator.depth,
                                 "seed": cfg.generator.seed, "channels": cfg.generator.channels,
                                 "weights_uri": cfg.generator.weights_uri})


def _resume(cfg, expected_phase):
    ckpt = Checkpoint.load(cfg.resume)
    if ckpt.phase_tag != expected_phase:
        raise TrainingError(f"cannot resume {expected_phase} training from a {ckpt.phase_tag} checkpoint")
    return ckpt


def train_baseline(cfg, pipeline=None, data=None, init=None, metrics_path=None, root=None):
    """Train the baseline encoder to autoencode unmasked faces through the fixed generator.

    ``init`` (a checkpoint or path) seeds the encoder from a previous dataset's baseline.
    """
    if cfg.phase != "baseline":
        raise TrainingError(f"train_baseline needs phase 'baseline', got {cfg.phase!r}")
    pipeline = pipeline or build_pipeline(cfg, root)
    data = data if data is not None else load_data(cfg, pipeline, root)
    if data.T is None:
        raise TrainingError("baseline training needs unmasked images")
    T = data.T.to(pipeline.dtype)
    keep = torch.isfinite(T).flatten(1).all(dim=1)
    T = T[keep]
    g = at_resolution(pipeline.generator, data.resolution)
    start, opt_state = 0, None
    init = _as_checkpoint(init if init is not None else cfg.init_checkpoint)
    if cfg.resume:
        ckpt = _resume(cfg, "baseline")
        params, start, opt_state = ckpt.encoder, ckpt.step, ckpt.optimizer_state
    elif init is not None:
        if init.phase_tag != "baseline":
            raise TrainingError(f"baseline initialization needs a baseline checkpoint, got {init.phase_tag!r}")
        params = initialize_from(init.encoder, "baseline", cfg.dataset,
                                 target_spec=cfg.encoder.spec(g.depth))
    else:
        spec = cfg.encoder.spec(g.depth)
        params = build_encoder(spec, seed=cfg.encoder.seed, latent_offset=g.mean_latent(), dtype=pipeline.dtype)
        params.lineage = [cfg.dataset]
    weights = cfg.losses.weights()

    def loss_fn(idx):
        return losses.baseline_loss(T[idx], params.module, g, weights, pipeline.perceptual, pipeline.identity,
                                    cfg.losses.normalize)

    opt_state, log = _run(cfg, params, loss_fn, len(T), start, opt_state, MetricsLog(metrics_path))
    return _checkpoint(cfg, params, max(start, cfg.steps), log, opt_state)


def train_unmasking(cfg, pipeline=None, data=None, init=None, frozen=None, metrics_path=None, root=None):
    """Train the unmasking encoder, initialized from (and regularized towards) a baseline.

    ``frozen`` is the baseline encoder providing the latent targets; it defaults to
    ``init``. Neither it nor the generator is modified.
    """
    if cfg.phase != "unmasking":
        raise TrainingError(f"train_unmasking needs phase 'unmasking', got {cfg.phase!r}")
    pipeline = pipeline or build_pipeline(cfg, root)
    data = data if data is not None else load_data(cfg, pipeline, root)
    if data.T is None or data.M is None:
        raise TrainingError("unmasking training needs paired unmasked and masked images")
    init = _as_checkpoint(init if init is not None else cfg.init_checkpoint)
    frozen = _as_checkpoint(frozen if frozen is not None else (cfg.frozen_checkpoint or init))
    if frozen is None:
        raise TrainingError("unmasking training needs the frozen baseline encoder (init_checkpoint)")
    if frozen.phase_tag != "baseline":
        raise TrainingError(f"frozen encoder must be a baseline checkpoint, got {frozen.phase_tag!r}")
    g = at_resolution(pipeline.generator, data.resolution)
    start, opt_state = 0, None
    if cfg.resume:
        ckpt = _resume(cfg, "unmasking")
        params, start, opt_state = ckpt.encoder, ckpt.step, ckpt.optimizer_state
    else:
        if init is None or init.phase_tag != "baseline":
            raise TrainingError("unmasking training must be initialized from a baseline checkpoint")
        params = initialize_from(init.encoder, "unmasking", target_spec=cfg.encoder.spec(g.depth))
    f0 = frozen_copy(frozen.encoder)
    keep = torch.isfinite(data.T).flatten(1).all(dim=1) & torch.isfinite(data.M).flatten(1).all(dim=1)
    T, M = data.T[keep].to(pipeline.dtype), data.M[keep].to(pipeline.dtype)
    weights = cfg.losses.weights()

    def loss_fn(idx):
        return losses.unmasking_loss(T[idx], M[idx], params.module, f0, g, weights, pipeline.perceptual,
                                     pipeline.identity, cfg.losses.normalize)

    opt_state, log = _run(cfg, params, loss_fn, len(T), start, opt_state, MetricsLog(metrics_path))
    return _checkpoint(cfg, params, max(start, cfg.steps), log, opt_state)


def cascade_train(stages, pipeline=None):
    """Train datasets in order, each baseline initialized from the previous baseline.

    ``stages`` is a sequence of dicts with keys ``name``, ``baseline`` (TrainConfig),
    ``data`` (PairData) and optionally ``unmasking`` (TrainConfig). Returns a mapping
    ``name -> {"baseline": Checkpoint, "unmasking": Checkpoint}``.
    """
    if not stages:
        raise TrainingError("cascade needs at least one dataset")
    out = {}
    previous, prev_res = None, None
    for stage in stages:
        name, data = stage["name"], stage["data"]
        bcfg = stage["baseline"]
        pl = pipeline or build_pipeline(bcfg)
        if prev_res is not None and data.resolution > prev_res:
            raise TrainingError(f"stage {name} has resolution {data.resolution} > previous {prev_res}")
        if previous is not None and previous.encoder.spec != bcfg.encoder.spec(pl.generator.depth):
            raise TrainingError(f"encoder spec of stage {name} differs from the previous stage")
        base = train_baseline(bcfg, pl, data, init=previous)
        out[name] = {"baseline": base}
        if stage.get("unmasking") is not None:
            out[name]["unmasking"] = train_unmasking(stage["unmasking"], pl, data, init=base)
        previous, prev_res = base, data.resolution
    return out


# ---------------------------------------------------------------------------
# latent target estimation and real-mask fine-tuning

@dataclass
class LatentTargetEstimate:
    w_hat: torch.Tensor
    residual: float
    iterations_used: int
    trace: list


def estimate_unmasked_latent(M, region, generator, steps=200, init=None, history_size=20, patience=3):
    """Find ``w`` whose rendering matches ``M`` on ``region`` in the l2 sense.

    ``M`` is ``(3, R, R)`` or ``(1, 3, R, R)``; ``region`` a boolean ``(R, R)`` map.
    Starts from the generator mean latent (or ``init``) and runs L-BFGS with a strong
    Wolfe line search on the squared residual. A step that does not lower the residual
    is undone and the curvature history reset; ``patience`` such steps in a row end the
    search. The reported residual is the plain l2 norm and its trace never increases.
    """
    if steps < 0:
        raise TrainingError("latent estimation needs a non-negative iteration budget")
    M = M if M.ndim == 4 else M[None]
    region = torch.as_tensor(region)
    if not region.any():
        raise TrainingError("latent estimation region is empty")
    dtype = generator.mean_latent().dtype
    M = M.to(dtype)
    w = (init if init is not None else generator.mean_latent()).detach().clone().to(dtype).requires_grad_(True)

    def residual():
        return losses.reconstruction_loss(M, generator(w), region)[0]

    def new_optimizer():
        return torch.optim.LBFGS([w], lr=1, max_iter=1, history_size=history_size, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        r = residual().pow(2)
        r.backward()
        return r

    with torch.no_grad():
        best = float(residual())
    trace = [best]
    opt = new_optimizer()
    used, failures = 0, 0
    for it in range(1, steps + 1):
        used = it
        prev = w.detach().clone()
        opt.step(closure)
        with torch.no_grad():
            r = float(residual())
        if not math.isfinite(r) or r >= best:
            with torch.no_grad():
                w.copy_(prev)
            trace.append(best)
            failures += 1
            if failures >= patience:
                break
            opt = new_optimizer()
            continue
        failures = 0
        best = r
        trace.append(best)
        if best == 0.0:
            break
    return LatentTargetEstimate(w.detach(), best, used, trace)


def finetune_rmfrd(cfg, pipeline=None, data=None, references=None, init=None, metrics_path=None, root=None,
                   targets=None):
    """Fine-tune an unmasking encoder on real masked faces without pixel-aligned targets.

    ``data.M`` holds masked faces with eye positions; ``references`` is a PairData of
    unmasked faces (defaults to the rows of ``data`` that have ``T``). Samples whose
    identity has no unmasked reference are skipped and counted. ``targets`` may supply
    precomputed latent estimates per masked sample.
    """
    if cfg.phase != "rmfrd-finetune":
        raise TrainingError(f"finetune_rmfrd needs phase 'rmfrd-finetune', got {cfg.phase!r}")
    pipeline = pipeline or build_pipeline(cfg, root)
    data = data if data is not None else load_data(cfg, pipeline, root)
    g = at_resolution(pipeline.generator, data.resolution)
    if data.M is None or data.eyes is None:
        raise TrainingError("fine-tuning needs masked images with eye positions")
    start, opt_state = 0, None
    if cfg.resume:
        ckpt = _resume(cfg, "unmasking")
        params, start, opt_state = ckpt.encoder, ckpt.step, ckpt.optimizer_state
    else:
        init = _as_checkpoint(init if init is not None else cfg.init_checkpoint)
        if init is None or init.phase_tag != "unmasking":
            raise TrainingError("fine-tuning must start from an unmasking checkpoint")
        params = initialize_from(init.encoder, "unmasking", cfg.dataset, target_spec=cfg.encoder.spec(g.depth))

    if references is None:
        has_t = torch.isfinite(data.T).flatten(1).all(dim=1) if data.T is not None else torch.zeros(len(data), dtype=torch.bool)
        references = PairData(data.T[has_t] if data.T is not None else None, None,
                              [i for i, h in zip(data.identities, has_t) if h])
    ref_index = {}
    for i, ident in enumerate(references.identities):
        ref_index.setdefault(ident, i)

    masked = torch.isfinite(data.M).flatten(1).all(dim=1)
    rows, skipped = [], 0
    for i in range(len(data)):
        if not masked[i]:
            continue
        if not np.isfinite(data.eyes[i]).all():
            logger.info("masked sample %d has no eye positions; skipping", i)
            skipped += 1
            continue
        if data.identities[i] not in ref_index:
            logger.info("no unmasked reference for identity %s; skipping sample %d", data.identities[i], i)
            skipped += 1
            continue
        rows.append(i)
    if not rows:
        raise TrainingError("no fine-tuning sample has a same-identity reference")
    res = data.resolution
    M = data.M[rows].to(pipeline.dtype)
    regions = torch.stack([
        torch.from_numpy(dp.periorbital_region(data.eyes[i], (res, res), cfg.finetune.k_w, cfg.finetune.k_h))
        for i in rows])
    refs = references.T[[ref_index[data.identities[i]] for i in rows]].to(pipeline.dtype)
    if targets is None:
        targets = torch.cat([
            estimate_unmasked_latent(M[k], regions[k], g, cfg.finetune.estimate_steps).w_hat
            for k in range(len(rows))])
    weights = cfg.losses.weights()

    def loss_fn(idx):
        return losses.periorbital_loss(M[idx], regions[idx][:, None], targets[idx], refs[idx], params.module, g,
                                       weights, pipeline.perceptual, pipeline.identity, cfg.losses.normalize)

    opt_state, log = _run(cfg, params, loss_fn, len(rows), start, opt_state, MetricsLog(metrics_path))
    return _checkpoint(cfg, params, max(start, cfg.steps), log, opt_state, skipped)

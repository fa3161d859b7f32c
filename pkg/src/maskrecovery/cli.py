"""Command line entry point: ``maskrecovery <subcommand> ...``.

Exit codes: 0 success, 1 precondition or configuration error, 2 divergence or I/O failure.
"""
import argparse
import dataclasses
import logging
import os
import sys

import numpy as np
import torch
import yaml

from . import config as C
from . import data as dp
from .encoder import EncoderError
from .evaluation import SETTINGS, EvaluationError, ImageBank, Unmasker, evaluate, plot_roc
from .embedders import EmbedderError, build_embedder
from .generator import GeneratorError, build_generator
from .losses import LossError
from .training import (Checkpoint, TrainingDivergence, TrainingError, build_pipeline, finetune_rmfrd, load_data,
                       train_baseline, train_unmasking)

logger = logging.getLogger("maskrecovery")

PRECONDITION_ERRORS = (C.ConfigError, TrainingError, dp.DataError, EncoderError, GeneratorError, EvaluationError,
                       EmbedderError, LossError)


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers

def _train_config(args, phase):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"output_dir={args.out}")
    if getattr(args, "resume", None):
        overrides.append(f"resume={args.resume}")
    overrides.append(f"phase={phase}")
    return C.load_config(args.config, overrides, cls=C.TrainConfig)


def _write_resolved(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    d = C.to_dict(cfg)
    d["config_hash"] = C.config_hash(cfg)
    with open(os.path.join(out_dir, "config.yaml"), "w", encoding="utf-8") as f:
        yaml.safe_dump(d, f, sort_keys=True)


def _run_training(args, phase, fn):
    cfg = _train_config(args, phase)
    out_dir = cfg.output_dir or C.default_output_dir(cfg)
    metrics = os.path.join(out_dir, "metrics.jsonl")
    _write_resolved(cfg, out_dir)
    if not cfg.resume and os.path.exists(metrics):
        os.remove(metrics)
    ckpt = fn(cfg, metrics_path=metrics, root=args.externals)
    path = cfg.checkpoint_path()
    ckpt.save(path)
    last = ckpt.metrics[-1]["total"] if ckpt.metrics else float("nan")
    print(f"{phase}: {ckpt.step} steps, final loss {last:.4f}, config {ckpt.config_hash} -> {path}")
    if getattr(ckpt, "skipped", 0):
        print(f"skipped {ckpt.skipped} samples without an unmasked reference")
    return 0


def _generator_from_checkpoint(ckpt, root=None, fallback=None):
    gen = dict(ckpt.generator) if ckpt.generator else dataclasses.asdict(fallback or C.GeneratorConfig())
    spec = C.GeneratorConfig(**gen).spec(root)
    dtype = next(ckpt.encoder.module.parameters()).dtype
    return build_generator(spec, dtype=dtype)


# ---------------------------------------------------------------------------
# subcommands

def cmd_toy_dataset(args):
    from .generator import GeneratorSpec
    from .toy import toy_pairs

    g = build_generator(GeneratorSpec(depth=args.depth, seed=args.generator_seed, channels=args.channels))
    records = []
    for split, n_id, seed in (("train", args.train_identities, args.seed), ("test", args.test_identities, args.seed + 1)):
        if n_id == 0:
            continue
        pairs = toy_pairs(g, n_id, args.per_identity, seed=seed, prefix=f"{split}-id")
        for i in range(len(pairs)):
            rel = os.path.join("true", f"{split}_{i:04d}.png")
            dp.save_image(os.path.join(args.out, rel), pairs.T[i].permute(1, 2, 0).numpy())
            records.append(dp.Record(rel, None, pairs.identities[i], split, tuple(pairs.eyes[i].ravel())))
    manifest = dp.DatasetManifest(args.name, records)
    manifest.declared = manifest.counts
    path = os.path.join(args.out, "manifest.tsv")
    dp.emit_manifest(manifest, path)
    print(f"wrote {len(records)} toy faces -> {path}")
    return 0


def cmd_synthesize_pairs(args):
    src = dp.ingest_manifest(args.manifest)
    rng = np.random.default_rng(args.seed)
    templates = tuple(args.templates.split(","))
    bad = [t for t in templates if t not in dp.TEMPLATES or t == "box"]
    if bad:
        raise CliError(f"unknown mask template(s) {bad}; choose from {dp.TEMPLATES[:-1]}")
    out_manifest = os.path.join(args.out, "manifest.tsv")
    out_base = os.path.dirname(os.path.abspath(out_manifest))
    records, skipped = [], 0
    for i, r in enumerate(src.records):
        if not r.t_path:
            records.append(r)
            continue
        t_abs = dp.resolve(args.manifest, r.t_path)
        spec = dp.random_mask_spec(rng, np.asarray(r.eyes).reshape(2, 2) if r.eyes else np.full((2, 2), np.nan),
                                   templates)
        try:
            if r.eyes is None:
                raise dp.MaskingError("record has no eye coordinates")
            pair = dp.apply_mask(dp.load_image(t_abs), spec, r.identity, src.name)
        except dp.MaskingError as e:
            logger.warning("skipping record %d (%s): %s", i, r.t_path, e)
            skipped += 1
            continue
        m_rel = os.path.join("masked", os.path.splitext(os.path.basename(r.t_path))[0] + f"_{i:05d}.png")
        dp.save_image(os.path.join(out_base, m_rel), pair.M)
        records.append(dp.Record(os.path.relpath(t_abs, out_base), m_rel, r.identity, r.split, r.eyes))
    out = dp.DatasetManifest(src.name, records, config_hash=f"seed={args.seed};templates={args.templates}")
    out.declared = out.counts
    dp.emit_manifest(out, out_manifest)
    print(f"{len(records)} pairs, {skipped} skipped -> {out_manifest}")
    return 0


def cmd_train_baseline(args):
    return _run_training(args, "baseline", lambda cfg, **kw: train_baseline(cfg, **kw))


def cmd_train_unmask(args):
    return _run_training(args, "unmasking", lambda cfg, **kw: train_unmasking(cfg, **kw))


def cmd_finetune_rmfrd(args):
    return _run_training(args, "rmfrd-finetune", lambda cfg, **kw: finetune_rmfrd(cfg, **kw))


def cmd_unmask(args):
    ckpt = Checkpoint.load(args.checkpoint)
    g = _generator_from_checkpoint(ckpt, args.externals)
    unmasker = Unmasker(ckpt.encoder.module, g)
    if args.manifest:
        man = dp.ingest_manifest(args.manifest)
        items = [(dp.resolve(args.manifest, r.m_path), r.eyes) for r in man.records if r.m_path]
    else:
        items = [(p, None) for p in args.images]
    if not items:
        raise CliError("no masked images to unmask")
    os.makedirs(args.out, exist_ok=True)
    for path, eyes in items:
        img = dp.load_image(path)
        if args.strict_alignment:
            _check_aligned(path, img, eyes, args.max_tilt)
        x = torch.from_numpy(img).permute(2, 0, 1)[None]
        u = unmasker(x)[0].permute(1, 2, 0).double().numpy()
        dp.save_image(os.path.join(args.out, os.path.splitext(os.path.basename(path))[0] + "_unmasked.png"), u)
    print(f"unmasked {len(items)} images at {g.resolution}px -> {args.out}")
    return 0


def _check_aligned(path, img, eyes, max_tilt):
    h, w = img.shape[:2]
    if h != w:
        raise CliError(f"{path}: not an aligned face crop ({w}x{h} is not square)")
    if eyes is None:
        raise CliError(f"{path}: strict alignment needs eye coordinates (pass a manifest)")
    angle = dp.eye_angle(eyes)
    if abs(angle) > max_tilt:
        raise CliError(f"{path}: eyes tilted by {angle:.1f} degrees (limit {max_tilt})")


def _eval_config(args):
    overrides = list(args.set or [])
    for key in ("checkpoint", "manifest"):
        if getattr(args, key):
            overrides.append(f"{key}={getattr(args, key)}")
    if args.settings:
        overrides.append("settings=[" + ",".join(args.settings.split(",")) + "]")
    if args.matcher:
        overrides.append(f"matcher.type={args.matcher}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"output_dir={args.out}")
    if args.config:
        return C.load_config(args.config, overrides, cls=C.EvalConfig)
    return C.from_dict(C.apply_overrides({}, overrides), cls=C.EvalConfig)


def cmd_evaluate(args):
    cfg = _eval_config(args)
    if not cfg.manifest:
        raise CliError("evaluate needs a manifest")
    manifest_path = C.resolve_external(cfg.manifest, args.externals)
    man = dp.ingest_manifest(manifest_path)
    test = man.split("test") or man.records
    matcher = build_embedder(_resolved_matcher(cfg.matcher, args.externals))
    unmasker, dtype = None, torch.float32
    if cfg.checkpoint:
        ckpt = Checkpoint.load(cfg.checkpoint)
        g = _generator_from_checkpoint(ckpt, args.externals, cfg.generator)
        unmasker = Unmasker(ckpt.encoder.module, g)
    from .training import data_from_manifest

    sub = dp.DatasetManifest(man.name, test)
    data = data_from_manifest(sub, manifest_path, split=test[0].split, dtype=dtype)
    bank = ImageBank(data.T, data.M, unmasker)
    report, trials = evaluate(bank, data.identities, cfg.settings, matcher.to(dtype), cfg.metrics, cfg.policy,
                              cfg.impostor_ratio, cfg.seed, cfg.subsample, C.config_hash(cfg), return_trials=True)
    out = cfg.output_dir or os.path.join("runs", man.name or "eval", "evaluate")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json())
    if args.plot:
        plot_roc(trials, os.path.join(out, "roc.png"))
    for s in cfg.settings:
        print(f"{s}  AUC {report.auc[s]:.4f}")
    if report.psnr_mean is not None:
        print(f"PSNR {report.psnr_mean:.2f} dB  SSIM {report.ssim_mean:.4f}")
    print(f"report -> {os.path.join(out, 'report.json')}")
    return 0


def _resolved_matcher(matcher, root):
    matcher = dict(matcher)
    if "weights_uri" in matcher:
        matcher["weights_uri"] = C.resolve_external(matcher["weights_uri"], root)
    return matcher


def cmd_dry_run(args):
    paths = list(args.configs)
    for d in args.dirs or ():
        paths += sorted(os.path.join(d, f) for f in os.listdir(d) if f.endswith((".yaml", ".yml")))
    if not paths:
        raise CliError("dry-run needs at least one config")
    _, refs = C.dry_run(paths, root=args.externals, probe=not args.no_probe)
    failed = [r for r in refs if r.status not in ("ok", "produced")]
    for r in refs:
        flag = "ok  " if r.status in ("ok", "produced") else "FAIL"
        print(f"{flag}  {r.config}  {r.role}: {r.path}  [{r.status}]")
    print(f"{len(paths)} configs, {len(refs)} references, {len(failed)} unresolved")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    p = argparse.ArgumentParser(prog="maskrecovery", description="Masked-face recovery through a fixed generator.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--externals", help=f"root for external weights and data (default ${C.EXTERNALS_ENV})")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("toy-dataset", help="render a synthetic toy face dataset with a manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--name", default="toy")
    t.add_argument("--train-identities", type=int, default=8)
    t.add_argument("--test-identities", type=int, default=8)
    t.add_argument("--per-identity", type=int, default=4)
    t.add_argument("--depth", type=int, default=4)
    t.add_argument("--channels", type=int, default=32)
    t.add_argument("--generator-seed", type=int, default=7)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_toy_dataset)

    s = sub.add_parser("synthesize-pairs", help="paint synthetic masks on the faces of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--templates", default="rectangle,surgical")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize_pairs)

    for name, func, helptext in (("train-baseline", cmd_train_baseline, "train the autoencoding baseline encoder"),
                                 ("train-unmask", cmd_train_unmask, "train the unmasking encoder"),
                                 ("finetune-rmfrd", cmd_finetune_rmfrd, "fine-tune on real masked faces")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("config")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        q.add_argument("--out", help="output directory")
        q.add_argument("--seed", type=int)
        q.add_argument("--resume", help="continue from this checkpoint")
        q.set_defaults(func=func)

    u = sub.add_parser("unmask", help="recover unmasked faces with a trained encoder")
    u.add_argument("--checkpoint", required=True)
    src = u.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="manifest whose m_path images are unmasked")
    src.add_argument("--images", nargs="+")
    u.add_argument("--out", required=True)
    u.add_argument("--strict-alignment", action="store_true", help="reject inputs that are not aligned face crops")
    u.add_argument("--max-tilt", type=float, default=1.0, help="eye-line tilt limit in degrees")
    u.set_defaults(func=cmd_unmask)

    e = sub.add_parser("evaluate", help="verification AUCs and image quality")
    e.add_argument("config", nargs="?")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--settings", help=f"comma separated subset of {','.join(SETTINGS)}")
    e.add_argument("--matcher", help="matcher embedder type")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--plot", action="store_true", help="also write roc.png")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("dry-run", help="validate configs and every external reference")
    d.add_argument("configs", nargs="*")
    d.add_argument("--dir", dest="dirs", action="append", help="validate every YAML file in a directory")
    d.add_argument("--no-probe", action="store_true", help="check existence only")
    d.set_defaults(func=cmd_dry_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.externals = args.externals or os.environ.get(C.EXTERNALS_ENV)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except TrainingDivergence as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 2
    except PRECONDITION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

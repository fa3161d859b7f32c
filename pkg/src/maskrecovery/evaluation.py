"""Image-quality metrics and the five-setting face verification protocol.

Settings pair a probe variant with a gallery variant of every test image:

====  =================  ============
code  probe              gallery
====  =================  ============
MM    masked             masked
MT    masked             true
UU    unmasked by model  unmasked by model
UT    unmasked by model  true
TT    true               true
====  =================  ============
"""
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata
from torch.nn import functional as F

logger = logging.getLogger(__name__)

SETTINGS = {
    "MM": ("masked", "masked"),
    "MT": ("masked", "true"),
    "UU": ("unmasked", "unmasked"),
    "UT": ("unmasked", "true"),
    "TT": ("true", "true"),
}


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image quality

def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak ** 2 / mse))


def ssim(a, b, window=8, data_range=1.0, k1=0.01, k2=0.03):
    """Mean SSIM over all valid ``window x window`` positions (uniform window,
    population statistics), averaged over channels for ``(H, W, C)`` inputs."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if window > a.shape[0] or window > a.shape[1]:
        raise EvaluationError(f"window {window} larger than image {a.shape[:2]}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# verification

@dataclass
class Trial:
    probe: int
    gallery: int
    probe_variant: str
    gallery_variant: str
    genuine: bool
    score: Optional[float] = None


def build_trials(identities, setting, policy="all", impostor_ratio=1.0, seed=0):
    """Pair every two distinct test images; genuine pairs share an identity.

    ``identities[i]`` is the label of test image ``i``. With ``policy="all"`` every
    impostor pair is kept; ``policy="ratio"`` keeps ``impostor_ratio`` impostors per
    genuine pair, sampled with ``seed``.
    """
    if setting not in SETTINGS:
        raise EvaluationError(f"unknown setting {setting!r}; expected one of {tuple(SETTINGS)}")
    probe_v, gallery_v = SETTINGS[setting]
    counts = {}
    for ident in identities:
        counts[ident] = counts.get(ident, 0) + 1
    for ident, n in sorted(counts.items()):
        if n < 2:
            logger.info("identity %s has a single image and contributes no genuine pair", ident)
    genuine, impostor = [], []
    for i, j in itertools.combinations(range(len(identities)), 2):
        (genuine if identities[i] == identities[j] else impostor).append((i, j))
    if policy == "ratio":
        k = min(len(impostor), int(round(impostor_ratio * len(genuine))))
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(impostor), size=k, replace=False))
        impostor = [impostor[i] for i in keep]
    elif policy != "all":
        raise EvaluationError(f"unknown pairing policy {policy!r}")
    trials = [Trial(i, j, probe_v, gallery_v, True) for i, j in genuine]
    trials += [Trial(i, j, probe_v, gallery_v, False) for i, j in impostor]
    return trials


class ImageBank:
    """Test images by index and variant.

    ``true`` and ``masked`` are tensors ``(N, 3, H, W)`` (either may be None);
    ``unmasked`` images are produced on first request by ``unmasker`` applied to the
    masked images and cached. ``inference_calls`` counts unmasker invocations.
    """

    def __init__(self, true=None, masked=None, unmasker=None, batch_size=16):
        self.images = {"true": true, "masked": masked, "unmasked": None}
        self.unmasker = unmasker
        self.batch_size = batch_size
        self.inference_calls = 0

    def __len__(self):
        return next(len(v) for v in self.images.values() if v is not None)

    def has(self, variant):
        if variant == "unmasked":
            return self.images["masked"] is not None and (self.unmasker is not None or self.images["unmasked"] is not None)
        return self.images[variant] is not None

    def variant(self, variant):
        if variant == "unmasked" and self.images["unmasked"] is None:
            if self.unmasker is None or self.images["masked"] is None:
                raise EvaluationError("unmasked images need masked inputs and an unmasking model")
            out = []
            with torch.no_grad():
                for chunk in torch.split(self.images["masked"], self.batch_size):
                    self.inference_calls += 1
                    out.append(self.unmasker(chunk))
            self.images["unmasked"] = torch.cat(out)
        if self.images[variant] is None:
            raise EvaluationError(f"no {variant} images available")
        return self.images[variant]

    def get(self, index, variant):
        return self.variant(variant)[index]


class EmbeddingCache:
    def __init__(self, matcher):
        self.matcher = matcher
        self.store = {}
        self.embed_calls = 0

    def __call__(self, bank, index, variant):
        key = (index, variant)
        if key not in self.store:
            self.embed_calls += 1
            with torch.no_grad():
                self.store[key] = self.matcher(bank.get(index, variant)[None])[0]
        return self.store[key]


def score_trials(trials, matcher, bank, cache=None):
    """Cosine similarity of matcher embeddings for every trial.

    Returns ``(scored, dropped)``; trials whose images cannot be embedded are dropped.
    """
    if getattr(matcher, "kind", "identity") != "identity":
        raise EvaluationError("matcher must be an identity embedder")
    cache = cache or EmbeddingCache(matcher)
    scored, dropped = [], 0
    for t in trials:
        try:
            a = cache(bank, t.probe, t.probe_variant)
            b = cache(bank, t.gallery, t.gallery_variant)
        except (RuntimeError, ValueError) as e:
            logger.warning("dropping trial %d-%d: %s", t.probe, t.gallery, e)
            dropped += 1
            continue
        score = float(torch.dot(a.double(), b.double()))
        if not math.isfinite(score):
            dropped += 1
            continue
        scored.append(Trial(t.probe, t.gallery, t.probe_variant, t.gallery_variant, t.genuine, score))
    return scored, dropped


def auc(trials=None, genuine=None, impostor=None):
    """Probability that a genuine score exceeds an impostor score, ties counted as 1/2."""
    if trials is not None:
        genuine = [t.score for t in trials if t.genuine]
        impostor = [t.score for t in trials if not t.genuine]
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise EvaluationError("AUC needs at least one genuine and one impostor score")
    ranks = rankdata(np.concatenate([genuine, impostor]))
    n_g, n_i = genuine.size, impostor.size
    u = ranks[:n_g].sum() - n_g * (n_g + 1) / 2
    return float(u / (n_g * n_i))


def roc_curve(trials):
    """False/true positive rates over all score thresholds (for plotting)."""
    scores = np.array([t.score for t in trials])
    labels = np.array([t.genuine for t in trials])
    order = np.argsort(-scores, kind="mergesort")
    labels = labels[order]
    tpr = np.concatenate([[0], np.cumsum(labels) / max(labels.sum(), 1)])
    fpr = np.concatenate([[0], np.cumsum(~labels) / max((~labels).sum(), 1)])
    return fpr, tpr


# ---------------------------------------------------------------------------
# end-to-end evaluation

class Unmasker:
    """``g(f(M))``: resize to the encoder input, encode, generate."""

    def __init__(self, encoder, generator):
        self.encoder = encoder
        self.generator = generator

    def __call__(self, masked):
        res = self.encoder.spec.input_resolution
        dtype = next(self.encoder.parameters()).dtype
        x = masked.to(dtype)
        if x.shape[-1] != res:
            x = F.interpolate(x, size=(res, res), mode="bilinear", align_corners=False, antialias=True)
        with torch.no_grad():
            return self.generator(self.encoder(x))


@dataclass
class EvalReport:
    auc: dict = field(default_factory=dict)
    psnr_mean: Optional[float] = None
    ssim_mean: Optional[float] = None
    counts: dict = field(default_factory=dict)
    config_hash: Optional[str] = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _to_hwc01(img):
    return ((img.detach().double().permute(1, 2, 0).numpy() + 1) / 2).clip(0, 1)


def image_quality(bank):
    """Mean PSNR/SSIM between unmasked and true images on a [0, 1] scale, compared at
    the smaller of the two resolutions."""
    U = bank.variant("unmasked")
    T = bank.variant("true").to(U.dtype)
    res = min(U.shape[-1], T.shape[-1])
    resize = lambda x: x if x.shape[-1] == res else F.interpolate(
        x, size=(res, res), mode="bilinear", align_corners=False, antialias=True)
    U, T = resize(U), resize(T)
    p, s = [], []
    for u, t in zip(U, T):
        if not torch.isfinite(t).all():
            continue
        a, b = _to_hwc01(u), _to_hwc01(t)
        p.append(psnr(a, b, peak=1.0))
        s.append(ssim(a, b, window=8, data_range=1.0))
    if not p:
        raise EvaluationError("no image has a ground-truth unmasked version")
    return float(np.mean(p)), float(np.mean(s)), len(p)


def evaluate(bank, identities, settings, matcher, metrics=("psnr", "ssim"), policy="all",
             impostor_ratio=1.0, seed=0, subsample=None, config_hash=None, return_trials=False):
    """Run the verification protocol for ``settings`` and the image-quality metrics.

    ``subsample`` restricts evaluation to a seeded random subset of test images.
    """
    identities = list(identities)
    index = np.arange(len(identities))
    if subsample is not None and subsample < len(identities):
        index = np.sort(np.random.default_rng(seed).choice(len(identities), subsample, replace=False))
    ids = [identities[i] for i in index]
    report = EvalReport(config_hash=config_hash)
    cache = EmbeddingCache(matcher)
    sub = _SubBank(bank, index)
    all_trials = {}
    for setting in settings:
        probe_v, gallery_v = SETTINGS[setting]
        for v in (probe_v, gallery_v):
            if not bank.has(v):
                raise EvaluationError(f"setting {setting} needs {v} images")
        trials = build_trials(ids, setting, policy, impostor_ratio, seed)
        scored, dropped = score_trials(trials, matcher, sub, cache)
        report.auc[setting] = auc(scored)
        report.counts[setting] = {
            "genuine": sum(t.genuine for t in scored),
            "impostor": sum(not t.genuine for t in scored),
            "dropped": dropped,
        }
        all_trials[setting] = scored
    if metrics:
        if bank.has("true") and bank.has("unmasked"):
            p, s, n = image_quality(_SubBank(bank, index))
            if "psnr" in metrics:
                report.psnr_mean = p
            if "ssim" in metrics:
                report.ssim_mean = s
            report.counts["quality_pairs"] = n
            report.counts["quality_skipped"] = len(index) - n
        else:
            report.counts["quality_skipped"] = len(index)
    report.counts["images"] = len(index)
    return (report, all_trials) if return_trials else report


class _SubBank:
    def __init__(self, bank, index):
        self.bank = bank
        self.index = torch.as_tensor(index)

    def has(self, variant):
        return self.bank.has(variant)

    def variant(self, variant):
        return self.bank.variant(variant)[self.index]

    def get(self, i, variant):
        return self.bank.get(int(self.index[i]), variant)


def plot_roc(trials_by_setting, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    for setting, trials in trials_by_setting.items():
        fpr, tpr = roc_curve(trials)
        ax.plot(fpr, tpr, label=f"{setting} (AUC {auc(trials):.3f})")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

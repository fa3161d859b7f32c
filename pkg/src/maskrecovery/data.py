"""Paired (unmasked, masked) face data: alignment, synthetic mask overlay, periorbital
regions, manifests and lossless image I/O.

Images in this module are numpy arrays of shape ``(H, W, 3)`` with float values in
``[-1, 1]``. Points are ``(x, y)`` in pixel coordinates (pixel centres at integers).
"""
import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import polygon as draw_polygon

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
MANIFEST_MAGIC = "# maskrecovery-manifest v1"
MANIFEST_COLUMNS = ("t_path", "m_path", "identity", "split", "eyes")


class DataError(ValueError):
    pass


class AlignmentError(DataError):
    pass


class MaskingError(DataError):
    pass


class ManifestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# ---------------------------------------------------------------------------
# image I/O

def to_unit_range(pixels):
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0


def to_uint8(image):
    return np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_image(path):
    with Image.open(path) as im:
        return to_unit_range(np.asarray(im.convert("RGB")))


def save_image(path, image):
    """Write a lossless PNG; ``image`` is float in [-1, 1] or uint8."""
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def quantize(image):
    """Round-trip through 8-bit so that in-memory pairs match what is written to disk."""
    return to_unit_range(to_uint8(image))


# ---------------------------------------------------------------------------
# alignment

def _check_eyes(eyes, shape):
    eyes = np.asarray(eyes, dtype=np.float64).reshape(2, 2)
    if not np.isfinite(eyes).all():
        raise AlignmentError("eye coordinates are not finite")
    h, w = shape[:2]
    if (eyes < -0.5).any() or (eyes[:, 0] > w - 0.5).any() or (eyes[:, 1] > h - 0.5).any():
        raise AlignmentError(f"eyes {eyes.tolist()} fall outside the {w}x{h} image")
    if np.linalg.norm(eyes[1] - eyes[0]) < 1e-6:
        raise AlignmentError("eyes are coincident")
    return eyes


def eye_angle(eyes):
    """Angle of the left->right eye segment in degrees (0 = horizontal)."""
    (lx, ly), (rx, ry) = np.asarray(eyes, dtype=np.float64).reshape(2, 2)
    return math.degrees(math.atan2(ry - ly, rx - lx))


def _alignment_frame(eyes):
    centre = eyes.mean(axis=0)
    theta = math.atan2(eyes[1, 1] - eyes[0, 1], eyes[1, 0] - eyes[0, 0])
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return centre, rot


def align_points(points, eyes, shape, crop=None, out_resolution=None):
    """Map points of the source image into the aligned output image."""
    eyes = _check_eyes(eyes, shape)
    h, w = shape[:2]
    x0, y0, cw, ch = crop if crop is not None else (0, 0, w, h)
    out = out_resolution or cw
    centre, rot = _alignment_frame(eyes)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    level = (pts - centre) @ rot + centre
    u = (level[:, 0] - x0 + 0.5) * out / cw - 0.5
    v = (level[:, 1] - y0 + 0.5) * out / ch - 0.5
    return np.stack([u, v], axis=1)


def align_face(image, eyes, crop=None, out_resolution=None):
    """Rotate about the eye midpoint so the eyes are horizontal, then crop and resize.

    ``crop`` is ``(x0, y0, width, height)`` in the eye-levelled frame (default: the whole
    image); the crop is resampled bilinearly to ``out_resolution`` pixels per side.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    eyes = _check_eyes(eyes, image.shape)
    x0, y0, cw, ch = crop if crop is not None else (0, 0, w, h)
    out = out_resolution or cw
    centre, rot = _alignment_frame(eyes)

    # crop corners must stay inside the source after undoing the rotation
    corners = np.array([[x0 - 0.5, y0 - 0.5], [x0 + cw - 0.5, y0 - 0.5],
                        [x0 - 0.5, y0 + ch - 0.5], [x0 + cw - 0.5, y0 + ch - 0.5]])
    src = (corners - centre) @ rot.T + centre
    tol = 1e-6
    if (src < -0.5 - tol).any() or (src[:, 0] > w - 0.5 + tol).any() or (src[:, 1] > h - 0.5 + tol).any():
        raise AlignmentError(f"crop {crop} leaves the image after rotating by {eye_angle(eyes):.2f} degrees")

    grid = (np.arange(out) + 0.5)
    px = x0 + grid * cw / out - 0.5
    py = y0 + grid * ch / out - 0.5
    gx, gy = np.meshgrid(px, py)
    level = np.stack([gx.ravel(), gy.ravel()], axis=1)
    sx, sy = ((level - centre) @ rot.T + centre).T
    channels = [
        ndimage.map_coordinates(image[..., k].astype(np.float64), [sy, sx], order=1, mode="nearest")
        for k in range(image.shape[2])
    ]
    return np.stack(channels, axis=-1).reshape(out, out, -1).astype(image.dtype)


# ---------------------------------------------------------------------------
# synthetic masks

@dataclass(frozen=True)
class MaskSpec:
    """Mask overlay description.

    ``anchors`` are the two eye centres for face templates (``rectangle``, ``surgical``,
    ``ffhq_black``) or the two opposite corners for ``box``. ``color`` is RGB in 0..255.
    """

    template: str = "surgical"
    color: tuple = (200, 200, 200)
    anchors: tuple = ()
    opacity: float = 1.0


# template outlines in eye-distance units, relative to the eye midpoint in the levelled frame
_TEMPLATES = {
    "rectangle": [(-1.0, 0.55), (1.0, 0.55), (1.0, 1.9), (-1.0, 1.9)],
    "surgical": [(-0.75, 0.45), (0.75, 0.45), (1.05, 1.15), (0.6, 1.95), (-0.6, 1.95), (-1.05, 1.15)],
    "ffhq_black": [(-0.9, 0.4), (0.9, 0.4), (1.2, 1.1), (0.75, 2.1), (-0.75, 2.1), (-1.2, 1.1)],
}
TEMPLATES = tuple(_TEMPLATES) + ("box",)


def mask_polygon(spec):
    """Polygon vertices ``(x, y)`` of the overlay described by ``spec``."""
    anchors = np.asarray(spec.anchors, dtype=np.float64)
    if anchors.shape != (2, 2) or not np.isfinite(anchors).all():
        raise MaskingError(f"mask needs two finite anchor points, got {spec.anchors!r}")
    if spec.template == "box":
        (x0, y0), (x1, y1) = np.sort(anchors, axis=0)
        return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    if spec.template not in _TEMPLATES:
        raise MaskingError(f"unknown mask template {spec.template!r}")
    d = np.linalg.norm(anchors[1] - anchors[0])
    if d < 1.0:
        raise MaskingError("eye anchors are degenerate (inter-eye distance below one pixel)")
    centre, rot = _alignment_frame(anchors)
    outline = np.array(_TEMPLATES[spec.template]) * d
    return outline @ rot.T + centre


def mask_footprint(spec, shape):
    """Boolean ``(H, W)`` map of pixels covered by the overlay, clipped to the image."""
    poly = mask_polygon(spec)
    h, w = shape[:2]
    if spec.template != "box":
        anchors = np.asarray(spec.anchors, dtype=np.float64)
        if (anchors < 0).any() or (anchors[:, 0] > w - 1).any() or (anchors[:, 1] > h - 1).any():
            raise MaskingError(f"eye anchors {anchors.tolist()} lie outside the image")
    rr, cc = draw_polygon(poly[:, 1], poly[:, 0], shape=(h, w))
    footprint = np.zeros((h, w), dtype=bool)
    footprint[rr, cc] = True
    if not footprint.any():
        raise MaskingError("mask overlay does not cover any pixel")
    return footprint


@dataclass
class FacePair:
    T: np.ndarray
    M: np.ndarray
    mask_region: np.ndarray
    identity: str = ""
    source_dataset: str = ""


def apply_mask(T, spec, identity="", source_dataset=""):
    """Paint an opaque mask onto ``T``. Pixels outside the footprint are copied untouched."""
    if spec.opacity != 1.0:
        raise MaskingError("only opaque masks are supported")
    T = np.asarray(T)
    footprint = mask_footprint(spec, T.shape)
    M = T.copy()
    color = to_unit_range(np.asarray(spec.color, dtype=np.float64)).astype(T.dtype)
    if spec.template == "ffhq_black":
        color = np.full_like(color, -1.0)
    M[footprint] = color
    return FacePair(T, M, footprint, identity, source_dataset)


def random_mask_spec(rng, eyes, templates=("rectangle", "surgical")):
    """Draw a template and colour; anchors are the given eyes."""
    template = templates[rng.integers(len(templates))]
    color = tuple(int(c) for c in rng.integers(0, 256, size=3))
    return MaskSpec(template=template, color=color, anchors=tuple(map(tuple, np.asarray(eyes).reshape(2, 2))))


def synthesize_pairs(items, spec_for, source_dataset=""):
    """Mask every ``(T, eyes, identity)`` item; failures are logged and skipped.

    Returns ``(pairs, skipped)`` where ``skipped`` lists ``(index, reason)``.
    """
    pairs, skipped = [], []
    for i, (T, eyes, identity) in enumerate(items):
        try:
            pairs.append(apply_mask(T, spec_for(i, eyes), identity, source_dataset))
        except MaskingError as e:
            logger.warning("skipping item %d (%s): %s", i, identity, e)
            skipped.append((i, str(e)))
    return pairs, skipped


# ---------------------------------------------------------------------------
# periorbital region

def periorbital_box(eyes, shape, k_w=2.0, k_h=1.0):
    """Inclusive pixel bounds ``(x0, y0, x1, y1)`` of the eye-centred rectangle, clipped."""
    eyes = np.asarray(eyes, dtype=np.float64).reshape(2, 2)
    if not np.isfinite(eyes).all():
        raise DataError("eye coordinates are not finite")
    d = np.linalg.norm(eyes[1] - eyes[0])
    if d <= 0:
        raise DataError("eyes are coincident")
    cx, cy = eyes.mean(axis=0)
    h, w = shape[:2]
    x0 = max(0, math.ceil(cx - d * k_w / 2))
    x1 = min(w - 1, math.floor(cx + d * k_w / 2))
    y0 = max(0, math.ceil(cy - d * k_h / 2))
    y1 = min(h - 1, math.floor(cy + d * k_h / 2))
    if x0 > x1 or y0 > y1:
        raise DataError(f"periorbital region for eyes {eyes.tolist()} is empty after clipping")
    return x0, y0, x1, y1


def periorbital_region(eyes, shape, k_w=2.0, k_h=1.0):
    """Boolean ``(H, W)`` map: width ``k_w`` and height ``k_h`` times the inter-eye distance."""
    x0, y0, x1, y1 = periorbital_box(eyes, shape, k_w, k_h)
    region = np.zeros(shape[:2], dtype=bool)
    region[y0:y1 + 1, x0:x1 + 1] = True
    return region


# ---------------------------------------------------------------------------
# manifests

@dataclass
class Record:
    t_path: Optional[str]
    m_path: Optional[str]
    identity: str
    split: str
    eyes: Optional[tuple] = None


@dataclass
class DatasetManifest:
    name: str
    records: list = field(default_factory=list)
    declared: dict = field(default_factory=dict)
    config_hash: Optional[str] = None

    @property
    def counts(self):
        out = {s: 0 for s in SPLITS}
        for r in self.records:
            out[r.split] += 1
        return out

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def identities(self, split=None):
        return sorted({r.identity for r in self.records if split is None or r.split == split})

    def validate(self, identity_disjoint=False):
        seen = {}
        for i, r in enumerate(self.records):
            if r.split not in SPLITS:
                raise ManifestError(f"split must be one of {SPLITS}, got {r.split!r}", i + 1)
            if not r.t_path and not r.m_path:
                raise ManifestError("record has neither t_path nor m_path", i + 1)
            for p in (r.t_path, r.m_path):
                if p and p in seen:
                    raise ManifestError(f"duplicate path {p!r} (first seen in record {seen[p]})", i + 1)
                if p:
                    seen[p] = i + 1
        counts = self.counts
        for split, n in self.declared.items():
            if counts.get(split) != n:
                raise ManifestError(f"declared {n} {split} records, found {counts.get(split)}")
        if identity_disjoint:
            overlap = set(self.identities("train")) & set(self.identities("test"))
            if overlap:
                raise ManifestError(f"identities in both splits: {sorted(overlap)[:5]}")
        return self


def _fmt_eyes(eyes):
    return "" if eyes is None else ",".join(repr(float(v)) for v in eyes)


def dumps_manifest(manifest):
    buf = io.StringIO()
    buf.write(MANIFEST_MAGIC + "\n")
    buf.write(f"# dataset: {manifest.name}\n")
    if manifest.declared:
        buf.write("# declared: " + " ".join(f"{k}={v}" for k, v in manifest.declared.items()) + "\n")
    if manifest.config_hash:
        buf.write(f"# config_hash: {manifest.config_hash}\n")
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in manifest.records:
        writer.writerow([r.t_path or "", r.m_path or "", r.identity, r.split, _fmt_eyes(r.eyes)])
    return buf.getvalue()


def loads_manifest(text, identity_disjoint=False):
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise ManifestError("missing manifest header", 1)
    name, declared, config_hash = "", {}, None
    body_start = 1
    for body_start in range(1, len(lines)):
        line = lines[body_start]
        if not line.startswith("#"):
            break
        key, _, value = line[1:].partition(":")
        key, value = key.strip(), value.strip()
        if key == "dataset":
            name = value
        elif key == "declared":
            try:
                declared = {k: int(v) for k, v in (item.split("=") for item in value.split())}
            except ValueError:
                raise ManifestError(f"malformed declared counts {value!r}", body_start + 1) from None
        elif key == "config_hash":
            config_hash = value
    if body_start >= len(lines) or tuple(lines[body_start].split("\t")) != MANIFEST_COLUMNS:
        raise ManifestError(f"expected column header {MANIFEST_COLUMNS}", body_start + 1)
    records = []
    reader = csv.reader(lines[body_start + 1:], delimiter="\t")
    for offset, row in enumerate(reader):
        lineno = body_start + 2 + offset
        if not row:
            continue
        if len(row) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}", lineno)
        t_path, m_path, identity, split, eyes = row
        if eyes:
            try:
                eyes = tuple(float(v) for v in eyes.split(","))
            except ValueError:
                raise ManifestError(f"malformed eye coordinates {eyes!r}", lineno) from None
            if len(eyes) != 4:
                raise ManifestError(f"eye coordinates need 4 values, got {len(eyes)}", lineno)
        records.append(Record(t_path or None, m_path or None, identity, split, eyes or None))
    manifest = DatasetManifest(name, records, declared, config_hash)
    try:
        manifest.validate(identity_disjoint)
    except ManifestError as e:
        # report file line numbers rather than record indices
        if e.line is not None:
            raise ManifestError(str(e).split(": ", 1)[1], e.line + body_start + 1) from None
        raise
    return manifest


def emit_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_manifest(manifest))


def ingest_manifest(path, identity_disjoint=False):
    with open(path, encoding="utf-8") as f:
        return loads_manifest(f.read(), identity_disjoint)


def resolve(manifest_path, rel):
    """Resolve a manifest path entry relative to the manifest's directory."""
    if rel is None:
        return None
    return rel if os.path.isabs(rel) else os.path.join(os.path.dirname(os.path.abspath(manifest_path)), rel)

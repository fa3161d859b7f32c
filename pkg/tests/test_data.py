import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskrecovery import data
from maskrecovery.data import (AlignmentError, DatasetManifest, ManifestError, MaskingError, MaskSpec, Record,
                               align_face, align_points, apply_mask, dumps_manifest, loads_manifest,
                               periorbital_box, periorbital_region)

EYES = ((11.0, 12.0), (21.0, 12.0))


def face(rng, size=32):
    return rng.uniform(-1, 1, size=(size, size, 3)).astype(np.float32)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["rectangle", "surgical", "ffhq_black"]),
       st.floats(-4, 4), st.floats(-3, 3))
def test_outside_mask_bit_identical(seed, template, dx, dy):
    rng = np.random.default_rng(seed)
    T = face(rng)
    eyes = np.array(EYES) + [dx, dy]
    pair = apply_mask(T, MaskSpec(template, (10, 20, 30), tuple(map(tuple, eyes))))
    outside = ~pair.mask_region
    assert np.array_equal(pair.M[outside].view(np.uint32), T[outside].view(np.uint32))
    assert pair.mask_region.any()
    assert pair.M.dtype == T.dtype and pair.M.shape == T.shape


def test_mask_colour_and_black_template(rng):
    T = face(rng)
    pair = apply_mask(T, MaskSpec("surgical", (255, 0, 0), EYES))
    assert np.allclose(pair.M[pair.mask_region], [1, -1, -1])
    black = apply_mask(T, MaskSpec("ffhq_black", (255, 0, 0), EYES))
    assert np.all(black.M[black.mask_region] == -1)


def test_mask_covers_lower_face_not_eyes(rng):
    pair = apply_mask(face(rng), MaskSpec("rectangle", (0, 0, 0), EYES))
    rows = np.nonzero(pair.mask_region.any(axis=1))[0]
    assert rows.min() > 12 and not pair.mask_region[12, 11] and not pair.mask_region[12, 21]


def test_mask_failures(rng):
    T = face(rng)
    with pytest.raises(MaskingError):
        apply_mask(T, MaskSpec("surgical", anchors=((5, 5), (5.2, 5))))
    with pytest.raises(MaskingError):
        apply_mask(T, MaskSpec("surgical", anchors=((-3, 5), (10, 5))))
    with pytest.raises(MaskingError):
        apply_mask(T, MaskSpec("unknown", anchors=EYES))
    with pytest.raises(MaskingError):
        apply_mask(T, MaskSpec("box", anchors=((40, 40), (50, 50))))
    with pytest.raises(MaskingError):
        apply_mask(T, MaskSpec("surgical", anchors=EYES, opacity=0.5))


def test_synthesize_pairs_skips_failures(rng, caplog):
    items = [(face(rng), EYES, "a"), (face(rng), ((5, 5), (5.1, 5)), "b"), (face(rng), EYES, "c")]
    pairs, skipped = data.synthesize_pairs(items, lambda i, eyes: MaskSpec("surgical", anchors=eyes), "toy")
    assert [p.identity for p in pairs] == ["a", "c"]
    assert [i for i, _ in skipped] == [1]
    assert "skipping item 1" in caplog.text


@given(st.floats(0, 31), st.floats(0, 31), st.floats(1, 20), st.floats(-1, 1), st.floats(0.5, 3), st.floats(0.5, 2))
def test_periorbital_inside_image_and_box(cx, cy, d, tilt, k_w, k_h):
    eyes = [(cx - d / 2, cy - tilt), (cx + d / 2, cy + tilt)]
    try:
        region = periorbital_region(eyes, (32, 32), k_w, k_h)
    except data.DataError:
        return
    x0, y0, x1, y1 = periorbital_box(eyes, (32, 32), k_w, k_h)
    ys, xs = np.nonzero(region)
    assert (xs.min(), ys.min(), xs.max(), ys.max()) == (x0, y0, x1, y1)
    assert region.sum() == (x1 - x0 + 1) * (y1 - y0 + 1)


def test_periorbital_exact_box():
    # inter-eye distance 10, centre (16, 12): width 20, height 10
    assert periorbital_box(EYES, (32, 32)) == (6, 7, 26, 17)


def test_alignment_levels_the_eyes(rng):
    img = face(rng, 48)
    eyes = np.array([[15.0, 20.0], [33.0, 26.0]])
    out = align_face(img, eyes, crop=(8, 8, 32, 32), out_resolution=32)
    assert out.shape == (32, 32, 3)
    p = align_points(eyes, eyes, img.shape, crop=(8, 8, 32, 32), out_resolution=32)
    assert abs(p[0, 1] - p[1, 1]) < 1e-9


def test_alignment_identity_when_level(rng):
    img = face(rng, 16)
    out = align_face(img, [(4, 8), (12, 8)])
    assert np.allclose(out, img, atol=1e-6)


def test_alignment_errors(rng):
    img = face(rng, 32)
    with pytest.raises(AlignmentError):
        align_face(img, [(5, 5), (5, 5)])
    with pytest.raises(AlignmentError):
        align_face(img, [(5, 5), (50, 5)])
    with pytest.raises(AlignmentError):
        align_face(img, [(8, 8), (24, 24)])


def test_image_round_trip(tmp_path, rng):
    img = data.quantize(face(rng, 8))
    data.save_image(tmp_path / "a.png", img)
    assert np.array_equal(data.load_image(tmp_path / "a.png"), img)


records = st.lists(
    st.tuples(st.sampled_from(["x", "y", "z"]), st.sampled_from(["train", "test"]),
              st.none() | st.tuples(*[st.floats(-1e3, 1e3)] * 4)),
    max_size=6)


@given(records)
def test_manifest_round_trip(rows):
    recs = [Record(f"t/{i}.png", f"m/{i}.png", ident, split, eyes) for i, (ident, split, eyes) in enumerate(rows)]
    m = DatasetManifest("toy", recs, {}, "abc123")
    m.declared = m.counts
    back = loads_manifest(dumps_manifest(m))
    assert back == m


def _manifest_text(*rows, declared="train=1 test=1"):
    head = [data.MANIFEST_MAGIC, "# dataset: toy", f"# declared: {declared}", "\t".join(data.MANIFEST_COLUMNS)]
    return "\n".join(head + ["\t".join(r) for r in rows]) + "\n"


def test_manifest_errors_carry_line_numbers():
    good = ("t/0.png", "m/0.png", "a", "train", "")
    with pytest.raises(ManifestError) as e:
        loads_manifest(_manifest_text(good, ("t/1.png", "m/1.png", "b", "valid", "")))
    assert e.value.line == 6
    with pytest.raises(ManifestError) as e:
        loads_manifest(_manifest_text(good, ("t/0.png", "m/1.png", "b", "test", "")))
    assert e.value.line == 6 and "duplicate" in str(e.value)
    with pytest.raises(ManifestError) as e:
        loads_manifest(_manifest_text(good, ("t/1.png", "m/1.png", "b", "test")))
    assert e.value.line == 6
    with pytest.raises(ManifestError, match="declared"):
        loads_manifest(_manifest_text(good, declared="train=2"))
    with pytest.raises(ManifestError) as e:
        loads_manifest("garbage\n")
    assert e.value.line == 1


def test_identity_disjoint_splits():
    text = _manifest_text(("t/0.png", "", "a", "train", ""), ("t/1.png", "", "a", "test", ""))
    loads_manifest(text)
    with pytest.raises(ManifestError, match="both splits"):
        loads_manifest(text, identity_disjoint=True)


def test_toy_pairs(toy_g):
    from maskrecovery.toy import toy_pairs

    pairs = toy_pairs(toy_g, 3, per_identity=2, seed=4)
    assert pairs.T.shape == pairs.M.shape == (6, 3, 32, 32)
    assert pairs.identities == ["id0", "id0", "id1", "id1", "id2", "id2"]
    outside = ~pairs.regions[:, None].expand_as(pairs.T)
    assert (pairs.T[outside] == pairs.M[outside]).all()
    again = toy_pairs(toy_g, 3, per_identity=2, seed=4)
    assert (again.M == pairs.M).all()

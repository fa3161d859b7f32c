import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from maskrecovery.embedders import IdentityFeatures, RandomConvFeatures, RandomProjectionIdentity
from maskrecovery.encoder import EncoderSpec, build_encoder, initialize_from
from maskrecovery.losses import (LossError, LossWeights, baseline_loss, combine, identity_loss,
                                 latent_reconstruction_loss, perceptual_loss, periorbital_loss,
                                 reconstruction_loss, unmasking_loss)

floats = st.floats(-1, 1, allow_nan=False, width=32)
images = arrays(np.float32, (2, 3, 4, 4), elements=floats)


def unit(x):
    return F.normalize(torch.as_tensor(x, dtype=torch.float64), dim=1)


@given(images, images)
def test_reconstruction_symmetric_nonnegative(a, b):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    ab, ba = reconstruction_loss(a, b), reconstruction_loss(b, a)
    assert (ab >= 0).all()
    assert torch.allclose(ab, ba)
    assert torch.allclose(reconstruction_loss(a, a), torch.zeros(2))


@given(images, images)
def test_region_restriction_ignores_outside(a, b):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    region = torch.zeros(4, 4, dtype=torch.bool)
    region[1:3, :2] = True
    b2 = b.clone()
    b2[..., ~region] = 7.0
    assert torch.equal(reconstruction_loss(a, b, region), reconstruction_loss(a, b2, region))
    perc = RandomConvFeatures(seed=1)
    assert torch.allclose(perceptual_loss(a, b, perc, region), perceptual_loss(a, b2, perc, region))


@given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10)).filter(lambda x: (np.abs(x).sum(1) > 1e-3).all()),
       arrays(np.float64, (3, 6), elements=st.floats(-10, 10)).filter(lambda x: (np.abs(x).sum(1) > 1e-3).all()))
def test_identity_loss_bounds(x, y):
    e, f = unit(x), unit(y)
    v = identity_loss(e, f)
    assert ((v >= -1e-9) & (v <= 2 + 1e-9)).all()
    assert torch.allclose(v, identity_loss(f, e))


def test_identity_requires_unit_norm():
    with pytest.raises(LossError):
        identity_loss(torch.ones(1, 4), unit(torch.ones(1, 4)))


@given(arrays(np.float32, (2, 3, 8), elements=floats), arrays(np.float32, (2, 3, 8), elements=floats))
def test_latent_loss_is_a_metric(a, b):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    assert torch.allclose(latent_reconstruction_loss(a, b), latent_reconstruction_loss(b, a))
    assert torch.allclose(latent_reconstruction_loss(a, a), torch.zeros(2))


def test_latent_depth_mismatch():
    with pytest.raises(LossError):
        latent_reconstruction_loss(torch.zeros(1, 14, 512), torch.zeros(1, 18, 512))


def test_shape_and_region_errors():
    with pytest.raises(LossError):
        reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 8, 8))
    with pytest.raises(LossError, match="empty"):
        reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), torch.zeros(4, 4, dtype=torch.bool))
    with pytest.raises(LossError):
        perceptual_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), RandomProjectionIdentity())


@given(st.lists(st.floats(0, 100), min_size=4, max_size=4), st.lists(st.floats(0, 5), min_size=4, max_size=4))
def test_combine_is_linear(values, w):
    weights = LossWeights(alpha=w[1], beta=w[2], gamma=w[3], reconstruction=w[0])
    terms = dict(zip(("L_R", "L_LPIPS", "L_ID", "L_LR"), map(torch.tensor, values)))
    expected = sum(c * v for c, v in zip(w, values))
    assert float(combine(terms, weights)) == pytest.approx(expected, rel=1e-6, abs=1e-6)


def test_negative_weight_rejected():
    with pytest.raises(LossError):
        LossWeights(alpha=-1)


def test_default_weights():
    w = LossWeights()
    assert (w.alpha, w.beta, w.gamma) == (0.8, 0.1, 1.0)


@pytest.fixture
def pipeline64(toy_g64):
    spec = EncoderSpec(4, input_resolution=32, backbone_width=4, head_grid=2)
    f0 = build_encoder(spec, seed=0, latent_offset=toy_g64.mean_latent().double(), dtype=torch.float64)
    return toy_g64, f0


def test_composites_are_finite_and_break_down(pipeline64):
    g, f0 = pipeline64
    f = initialize_from(f0, phase_tag="unmasking")
    torch.manual_seed(0)
    T = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    M = T.clone()
    M[..., 20:, :] = 0.5
    ident = RandomProjectionIdentity(seed=2).double()
    b = baseline_loss(T, f0.module, g, LossWeights(), IdentityFeatures(), ident)
    assert set(b.terms) == {"L_R", "L_LPIPS", "L_ID"}
    u = unmasking_loss(T, M, f.module, f0.module, g, LossWeights(), IdentityFeatures(), ident)
    bd = u.breakdown()
    assert set(bd) == {"L_R", "L_LPIPS", "L_ID", "L_LR", "total"}
    assert bd["total"] == pytest.approx(bd["L_R"] + 0.8 * bd["L_LPIPS"] + 0.1 * bd["L_ID"] + bd["L_LR"])
    region = torch.zeros(32, 32, dtype=torch.bool)
    region[8:16, 4:28] = True
    p = periorbital_loss(M, region, f0.module(T).detach(), T, f.module, g, LossWeights(),
                         IdentityFeatures(), ident)
    assert all(np.isfinite(v) for v in p.breakdown().values())


def test_unmasking_loss_gradient_matches_finite_differences(pipeline64):
    g, f0 = pipeline64
    f = initialize_from(f0, phase_tag="unmasking")
    torch.manual_seed(1)
    T = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    M = T.clone()
    M[..., 18:, 6:26] = torch.tensor([0.2, 0.4, 0.9], dtype=torch.float64)[:, None, None]
    perc = RandomConvFeatures(seed=5).double()
    ident = RandomProjectionIdentity(seed=6).double()
    weights = LossWeights()
    param = f.module.heads[1].linear.weight
    idx = [(0, 0), (3, 5), (100, 9), (511, 15), (250, 2), (7, 12), (400, 11), (64, 0)]

    def total():
        return unmasking_loss(T, M, f.module, f0.module, g, weights, perc, ident).total

    f.module.zero_grad()
    total().backward()
    analytic = [float(param.grad[i]) for i in idx]
    eps = 1e-6
    for i, a in zip(idx, analytic):
        with torch.no_grad():
            orig = param[i].item()
            param[i] = orig + eps
            up = float(total())
            param[i] = orig - eps
            down = float(total())
            param[i] = orig
        fd = (up - down) / (2 * eps)
        assert abs(fd - a) / max(abs(fd), abs(a), 1e-10) < 1e-3, (i, fd, a)

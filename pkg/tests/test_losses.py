import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from privshield import losses
from privshield.losses import EPS, HyperParams
from privshield.nets import PerceptualSpec, build


def t(*vals):
    return torch.tensor(vals, dtype=torch.float64)


class TestPixel:
    def test_zero_at_equality(self):
        x = torch.rand(4, 3, 2, 2, dtype=torch.float64)
        assert losses.pixel_recon_loss(x, x).item() == 0.0

    def test_unnormalized_norm_convention(self):
        x = torch.rand(5, 3, 2, 2, dtype=torch.float64)
        assert losses.pixel_recon_loss(x + 0.1, x).item() == pytest.approx(0.12, abs=1e-12)

    def test_symmetric(self):
        a, b = torch.rand(3, 1, 4, 4), torch.rand(3, 1, 4, 4)
        assert losses.pixel_recon_loss(a, b).item() == losses.pixel_recon_loss(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            losses.pixel_recon_loss(torch.zeros(2, 3), torch.zeros(2, 4))


class TestGAN:
    def test_generator_half(self):
        assert losses.gan_generator_loss(t(0.5, 0.5, 0.5)).item() == pytest.approx(math.log(0.5))
        assert losses.gan_generator_loss(t(0.5)).item() == pytest.approx(-0.6931, abs=1e-4)

    def test_generator_hand_example(self):
        want = (math.log(0.75) + math.log(0.25)) / 2
        assert losses.gan_generator_loss(t(0.25, 0.75)).item() == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(-0.8370, abs=1e-4)

    def test_generator_limit_is_clamped(self):
        assert losses.gan_generator_loss(t(1.0)).item() == pytest.approx(math.log(EPS), rel=1e-6)

    def test_discriminator_half(self):
        d = t(0.5, 0.5)
        assert losses.gan_discriminator_loss(d, d).item() == pytest.approx(-1.3863, abs=1e-4)

    def test_discriminator_penalizes_conventional_labels(self):
        got = losses.gan_discriminator_loss(t(0.8), t(0.2)).item()
        assert got == pytest.approx(2 * math.log(0.2), abs=1e-12)
        assert got == pytest.approx(-3.2189, abs=1e-4)

    def test_discriminator_maximum(self):
        best = losses.gan_discriminator_loss(t(EPS), t(1 - EPS)).item()
        assert -1e-5 < best < 0
        assert best > losses.gan_discriminator_loss(t(0.5), t(0.5)).item()

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10))
    def test_clamp_bounds(self, vals):
        d = torch.tensor(vals, dtype=torch.float64)
        lo, hi = math.log(EPS), math.log1p(-EPS)
        for v in (losses.gan_generator_loss(d).item(), losses.gan_discriminator_loss(d, d).item() / 2):
            assert lo - 1e-9 <= v <= hi + 1e-9


class TestPerceptual:
    def test_zero_at_equality(self):
        g = build(PerceptualSpec((3, 16, 16)), 0, torch.float64)
        x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
        assert losses.perceptual_loss(g, x, x).item() == 0.0

    def test_null_space_perturbation(self):
        # g that only looks at channel 0: changing channels 1 and 2 is invisible to it
        g = build(PerceptualSpec((3, 16, 16), (4, 4)), 1, torch.float64)
        with torch.no_grad():
            g.blocks[0][0].weight[:, 1:] = 0.0
        x = torch.rand(3, 3, 16, 16, dtype=torch.float64)
        x_hat = x.clone()
        x_hat[:, 1:] = torch.rand(3, 2, 16, 16, dtype=torch.float64)
        assert losses.perceptual_loss(g, x_hat, x).item() == 0.0
        assert losses.pixel_recon_loss(x_hat, x).item() > 0

    def test_scaling_features_by_two_quadruples(self):
        g = build(PerceptualSpec((3, 16, 16)), 2, torch.float64)
        g2 = lambda x: [2 * f for f in g(x)]
        a, b = torch.rand(2, 3, 16, 16, dtype=torch.float64), torch.rand(2, 3, 16, 16, dtype=torch.float64)
        assert losses.perceptual_loss(g2, a, b).item() == pytest.approx(4 * losses.perceptual_loss(g, a, b).item())


class TestUtility:
    def test_confident_correct(self):
        assert losses.utility_loss(t(30.0)[None], t(1.0)[None]).item() < 1e-12

    def test_zero_logit(self):
        assert losses.utility_loss(t(0.0, 0.0)[None], t(1.0, 0.0)[None]).item() == pytest.approx(math.log(2))

    def test_hand_example(self):
        got = losses.utility_loss(t(0.0, 30.0)[None], t(1.0, 1.0)[None]).item()
        assert got == pytest.approx(0.3466, abs=1e-4)

    def test_arity_mismatch(self):
        with pytest.raises(ValueError):
            losses.utility_loss(torch.zeros(2, 3), torch.zeros(2, 2))


class TestObjectives:
    def test_adversary(self):
        assert losses.adversary_objective(HyperParams(), 3.0, 5.0, 7.0) == 3.0
        assert losses.adversary_objective(HyperParams(mu2=1.0), 3.0, 5.0, 7.0) == 10.0
        assert losses.adversary_objective(HyperParams(mu1=2, mu2=3), 0.0, 0.0, 0.0) == 0.0

    def test_protector(self):
        assert losses.protector_objective(HyperParams(), 0.4, 9.0, 9.0) == 0.4
        assert losses.protector_objective(HyperParams(lambda1=1.0), 0.4, 2.0, 9.0) == pytest.approx(-1.6)

    @given(l1=st.floats(0, 10), l2=st.floats(0, 10))
    def test_gradient_sign(self, l1, l2):
        hp = HyperParams(lambda1=l1, lambda2=l2)
        pix = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
        perc = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
        obj = losses.protector_objective(hp, torch.tensor(0.5, dtype=torch.float64), pix, perc)
        gp, gq = torch.autograd.grad(obj, [pix, perc])
        assert gp.item() == -l1 and gq.item() == -l2

    @pytest.mark.parametrize("bad", [-1.0, float("nan"), float("inf")])
    def test_hyperparams_validated(self, bad):
        with pytest.raises(ValueError):
            HyperParams(lambda1=bad)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_permutation_invariance(seed):
    gen = torch.Generator().manual_seed(seed)
    n = 5
    a = torch.rand(n, 3, 16, 16, generator=gen, dtype=torch.float64)
    b = torch.rand(n, 3, 16, 16, generator=gen, dtype=torch.float64)
    d1, d2 = torch.rand(n, generator=gen, dtype=torch.float64), torch.rand(n, generator=gen, dtype=torch.float64)
    logits, labels = torch.randn(n, 4, generator=gen, dtype=torch.float64), torch.randint(0, 2, (n, 4), generator=gen)
    g = build(PerceptualSpec((3, 16, 16)), 0, torch.float64)
    perm = torch.randperm(n, generator=gen)
    pairs = [
        (losses.pixel_recon_loss(a, b), losses.pixel_recon_loss(a[perm], b[perm])),
        (losses.perceptual_loss(g, a, b), losses.perceptual_loss(g, a[perm], b[perm])),
        (losses.gan_generator_loss(d1), losses.gan_generator_loss(d1[perm])),
        (losses.gan_discriminator_loss(d1, d2), losses.gan_discriminator_loss(d1[perm], d2[perm])),
        (losses.utility_loss(logits, labels), losses.utility_loss(logits[perm], labels[perm])),
    ]
    for x, y in pairs:
        assert x.item() == pytest.approx(y.item(), rel=1e-12, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_non_negativity(seed):
    gen = torch.Generator().manual_seed(seed)
    a, b = torch.rand(3, 3, 16, 16, generator=gen), torch.rand(3, 3, 16, 16, generator=gen)
    g = build(PerceptualSpec((3, 16, 16)), seed, torch.float32)
    assert losses.pixel_recon_loss(a, b).item() >= 0
    assert losses.perceptual_loss(g, a, b).item() >= 0
    assert losses.utility_loss(torch.randn(3, 2, generator=gen), torch.randint(0, 2, (3, 2), generator=gen)).item() >= 0

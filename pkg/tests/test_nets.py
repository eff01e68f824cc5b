import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from privshield.nets import (
    ClassifierSpec,
    DiscriminatorSpec,
    EncoderSpec,
    MapperSpec,
    PerceptualSpec,
    PrivateSpec,
    SpecError,
    Stage,
    build,
    classify,
    decode,
    default_encoder_spec,
    discriminate,
    encode,
    load_checkpoint,
    mirror_decoder_spec,
    param_checksum,
    perceptual,
    private_features,
    save_checkpoint,
)

ENC = default_encoder_spec()
TAPS = ENC.stage_names


def images(n=4, seed=0):
    return torch.rand(n, 3, 32, 32, generator=torch.Generator().manual_seed(seed))


class TestBuild:
    def test_same_seed_identical(self):
        assert param_checksum(build(ENC, 7)) == param_checksum(build(ENC, 7))
        assert param_checksum(build(ENC, 7)) != param_checksum(build(ENC, 8))

    def test_fan_in_uniform_bounds(self):
        enc = build(ENC, 0)
        w = enc.stages["conv1"][0].weight
        bound = np.sqrt(6.0 / w[0].numel())
        assert w.abs().max().item() <= bound
        assert w.abs().max().item() > 0.9 * bound
        assert enc.stages["conv1"][0].bias.abs().max().item() == 0.0

    def test_forty_logits(self):
        clf = build(ClassifierSpec(ENC, 32, 40), 0)
        assert classify(clf, build(ENC, 0)(images())).shape == (4, 40)

    @pytest.mark.parametrize("tap,shape", [("conv1", (16, 16, 16)), ("conv2", (32, 8, 8)),
                                           ("conv3", (64, 4, 4)), ("fc", (64,))])
    def test_tap_shapes(self, tap, shape):
        enc = build(ENC.with_tap(tap), 0)
        assert tuple(encode(enc, images()).shape[1:]) == shape == enc.out_shape

    def test_encode_deterministic(self):
        enc, x = build(ENC, 0), images()
        assert torch.equal(encode(enc, x), encode(enc, x))

    def test_bad_tap(self):
        with pytest.raises(SpecError):
            build(ENC.with_tap("conv9"), 0)

    def test_bad_stride(self):
        spec = EncoderSpec((3, 18, 18), (Stage("a", "conv", 4, 4), Stage("fc", "fc", 4, 1, "none")), "fc")
        with pytest.raises(SpecError):
            build(spec, 0)

    def test_conv_after_fc(self):
        spec = EncoderSpec((3, 16, 16), (Stage("fc", "fc", 4, 1), Stage("c", "conv", 4)), "c")
        with pytest.raises(SpecError):
            build(spec, 0)


class TestDecoder:
    def test_mirror_full_and_single_stage(self):
        assert len(mirror_decoder_spec(ENC).stages) == 4
        assert len(mirror_decoder_spec(ENC, "conv1").stages) == 1

    @pytest.mark.parametrize("tap", TAPS)
    def test_shape_round_trip(self, tap):
        spec = ENC.with_tap(tap)
        dec = build(mirror_decoder_spec(spec), 1)
        x = images()
        assert decode(dec, build(spec, 0)(x)).shape == x.shape

    @pytest.mark.parametrize("widths,size", [((4, 8), 16), ((4, 8, 8, 8), 64), ((5,), 32)])
    def test_round_trip_other_geometries(self, widths, size):
        spec = default_encoder_spec(size, 1, widths, 6)
        for tap in spec.stage_names:
            s = spec.with_tap(tap)
            x = torch.rand(2, 1, size, size)
            assert build(mirror_decoder_spec(s), 0)(build(s, 0)(x)).shape == x.shape

    @settings(max_examples=25, deadline=None)
    @given(scale=st.floats(0.01, 1e4), seed=st.integers(0, 100))
    def test_output_in_unit_interval(self, scale, seed):
        dec = build(mirror_decoder_spec(ENC), seed)
        z = scale * torch.randn(3, 64, generator=torch.Generator().manual_seed(seed))
        out = decode(dec, z)
        assert out.min().item() >= 0.0 and out.max().item() <= 1.0

    def test_input_shape_checked(self):
        with pytest.raises(SpecError):
            build(mirror_decoder_spec(ENC), 0)(torch.zeros(2, 32))

    def test_batch_standardized_input(self):
        dec = build(mirror_decoder_spec(ENC, input_norm="batch"), 0)
        z = torch.randn(8, 64)
        assert torch.allclose(dec(z), dec(5 * z + 3), atol=1e-3)


class TestOtherNets:
    def test_discriminator_open_interval(self):
        d = build(DiscriminatorSpec((3, 32, 32)), 0)
        p = discriminate(d, images(6))
        assert p.shape == (6,)
        assert ((p > 0) & (p < 1)).all()

    def test_perceptual_tap_shapes(self):
        g = build(PerceptualSpec((3, 32, 32)), 0)
        assert [tuple(f.shape[2:]) for f in perceptual(g, images())] == [(16, 16), (8, 8), (4, 4)]

    def test_perceptual_frozen(self):
        g = build(PerceptualSpec((3, 32, 32)), 0)
        before = param_checksum(g)
        assert not any(p.requires_grad for p in g.parameters())
        g.train()
        assert not g.training
        opt = torch.optim.Adam([torch.nn.Parameter(torch.zeros(1))])
        x = images().requires_grad_(True)
        sum(f.sum() for f in g(x)).backward()
        opt.step()
        assert param_checksum(g) == before

    def test_private_features_taps(self):
        c = build(PrivateSpec((3, 32, 32), 5, hidden=12), 0)
        x = images()
        assert private_features(c, x).shape == (4, 12)
        assert private_features(c, x, "logits").shape == (4, 5)
        assert private_features(c, x, "conv1").shape == (4, 16 * 16 * 16)
        assert torch.allclose(private_features(c, x, "logits"), c(x))

    def test_mapper(self):
        m = build(MapperSpec(10, 7, 16), 0)
        assert m(torch.zeros(3, 10)).shape == (3, 7)


class TestCheckpoint:
    @pytest.mark.parametrize("spec", [
        ENC, ENC.with_tap("conv2"), mirror_decoder_spec(ENC, input_norm="batch"),
        ClassifierSpec(ENC.with_tap("conv3"), 16, 8), DiscriminatorSpec((3, 32, 32)),
        PerceptualSpec((3, 32, 32)), PrivateSpec((3, 32, 32), 4), MapperSpec(8, 3),
    ], ids=lambda s: type(s).__name__)
    def test_round_trip_bit_exact(self, tmp_path, spec):
        model = build(spec, 3)
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        back = load_checkpoint(path)
        assert back.spec == model.spec
        assert param_checksum(back) == param_checksum(model)
        save_checkpoint(back, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_little_endian_float32(self, tmp_path):
        path = save_checkpoint(build(ENC, 0), tmp_path / "e.ckpt")
        with np.load(path) as npz:
            arr = npz["stages.conv1.0.weight"]
            assert arr.dtype == np.dtype("<f4")

    def test_corrupt_file_is_spec_error(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"\x00" * 10)
        with pytest.raises(SpecError):
            load_checkpoint(tmp_path / "bad.ckpt")

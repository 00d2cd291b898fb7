"""2D-3D U-Net, 2D-3D PhiSeg, checkpoint loading and the model factory."""

import numpy as np
import pytest

from drr_volume_seg.config import PhiSegConfig, SrmConfig, TrainConfig, UNet3DConfig
from drr_volume_seg.core.losses import bce_loss
from drr_volume_seg.core.optim import Adam
from drr_volume_seg.core.rng import RngState
from drr_volume_seg.core.tensor import Tensor
from drr_volume_seg.errors import ConfigError, ShapeError
from drr_volume_seg.models import (
    PhiSeg2D3D,
    build_model,
    checkpoint_meta,
    distill_forward,
    fusion_forward,
    is_stochastic,
    lift_latent,
    load_model,
    model_spec_from_train,
    phiseg_forward,
    phiseg_encode,
    phiseg_likelihood,
    phiseg_loss,
    phiseg_predict_mean,
    phiseg_reconstruct,
    phiseg_sample,
    predict_probabilities,
    sample_probabilities,
    srm_forward,
    uda_forward,
    unet3d_forward,
)
from drr_volume_seg.models.phiseg import Fusion
from drr_volume_seg.storage import save_checkpoint

from conftest import TINY, box_mask, tiny_phiseg_spec, tiny_unet_spec


def _images(rng, batch=2):
    return Tensor(rng.uniform((batch, 1, TINY, TINY)).astype(np.float32))


def _masks(batch=2):
    return np.stack([box_mask()] * batch).astype(np.float32)


@pytest.mark.unit
class TestSrmConfig:
    @pytest.mark.parametrize(
        "depth,strides",
        [(16, (2, 2, 2, 2, 1)), (32, (2, 2, 2, 2, 2)), (64, (2, 2, 2, 2, 4)), (1, (1, 1, 1, 1, 1))],
    )
    def test_for_depth(self, depth, strides):
        config = SrmConfig.for_depth(depth)
        assert config.z_strides == strides
        assert config.depth == depth

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError):
            SrmConfig.for_depth(24)

    def test_kernel_grows_with_stride(self):
        assert SrmConfig().kernel_for(2) == (4, 3, 3)
        assert SrmConfig().kernel_for(1) == (3, 3, 3)


@pytest.mark.unit
class TestUNet:
    def test_srm_inflates_depth(self, rng):
        model = build_model(tiny_unet_spec())
        features = srm_forward(model.srm, _images(rng))
        assert features.shape == (2, 2, TINY, TINY, TINY)

    def test_srm_rejects_multichannel_input(self, rng):
        model = build_model(tiny_unet_spec())
        with pytest.raises(ShapeError):
            srm_forward(model.srm, Tensor(np.zeros((1, 2, TINY, TINY), dtype=np.float32)))

    def test_logit_shape(self, rng):
        model = build_model(tiny_unet_spec())
        assert model(_images(rng)).shape == (2, 1, TINY, TINY, TINY)

    def test_depth_mismatch_rejected(self):
        spec = tiny_unet_spec().model_copy(update={"target_shape": (32, 16, 16)})
        with pytest.raises(ConfigError):
            build_model(spec)

    def test_mc_samples_differ_with_dropout(self, rng):
        model = build_model(tiny_unet_spec("dropout", "unet-dropout"))
        probs = sample_probabilities(model, _images(rng, 1), 3, RngState(5))
        assert probs.shape == (3, 1, TINY, TINY, TINY)
        assert not np.array_equal(probs[0], probs[1])
        assert ((probs >= 0) & (probs <= 1)).all()

    def test_mc_samples_reproducible(self, rng):
        model = build_model(tiny_unet_spec("dropblock", "unet-dropblock"))
        x = _images(rng, 1)
        a = sample_probabilities(model, x, 2, RngState(5))
        b = sample_probabilities(model, x, 2, RngState(5))
        np.testing.assert_array_equal(a, b)

    def test_deterministic_model_samples_identical(self, rng):
        model = build_model(tiny_unet_spec("none", "unet-det"))
        assert not is_stochastic(model)
        x = _images(rng, 1)
        probs = sample_probabilities(model, x, 2, RngState(5))
        np.testing.assert_array_equal(probs[0], probs[1])
        np.testing.assert_allclose(probs[0], predict_probabilities(model, x), atol=1e-6)

    def test_sample_count_checked(self, rng):
        model = build_model(tiny_unet_spec())
        with pytest.raises(ValueError):
            sample_probabilities(model, _images(rng, 1), 0, RngState(5))

    def test_unet_rejects_indivisible_extents(self, rng):
        model = build_model(tiny_unet_spec())
        features = Tensor(rng.uniform((1, 2, 12, 12, 12)).astype(np.float32))
        with pytest.raises(ShapeError):
            unet3d_forward(model.unet, features)


@pytest.mark.unit
class TestLiftLatent:
    def test_scaled_lift_preserves_norm(self, rng):
        z = Tensor(rng.normal((1, 2, 3, 3)).astype(np.float32))
        lifted = lift_latent(z, 4, "scaled")
        assert lifted.shape == (1, 2, 4, 3, 3)
        assert np.linalg.norm(lifted.data) == pytest.approx(np.linalg.norm(z.data), rel=1e-5)

    def test_tile_lift_replicates(self, rng):
        z = Tensor(rng.normal((1, 2, 3, 3)).astype(np.float32))
        lifted = lift_latent(z, 4, "tile")
        for d in range(4):
            np.testing.assert_array_equal(lifted.data[:, :, d], z.data)

    def test_depth_mismatch(self, rng):
        z = Tensor(rng.normal((1, 2, 3, 3)).astype(np.float32))
        with pytest.raises(ShapeError):
            lift_latent(z, 4, expected_depth=8)

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError):
            lift_latent(Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32)), 2, "stretch")


@pytest.mark.unit
class TestFusion:
    def test_identity_at_initialisation(self, rng):
        fusion = Fusion(4, RngState(2))
        s = Tensor(rng.normal((1, 1, 4, 6, 6)).astype(np.float32))
        x = Tensor(rng.uniform((1, 1, 6, 6)).astype(np.float32))
        np.testing.assert_allclose(fusion_forward(fusion, x, s).data, s.data, atol=1e-6)

    def test_image_branch_learns_after_one_step(self, rng):
        fusion = Fusion(4, RngState(2))
        s = Tensor(rng.normal((1, 1, 4, 6, 6)).astype(np.float32))
        x = Tensor(rng.uniform((1, 1, 6, 6)).astype(np.float32))
        optimizer = Adam(fusion.parameters(), lr=0.01)

        fusion_forward(fusion, x, s).mean().backward()
        first = fusion.image_conv.weight.grad
        assert first is None or not np.any(first)
        assert np.any(fusion.mix.weight.grad[0, 1:] != 0)

        optimizer.step()
        optimizer.zero_grad()
        fusion_forward(fusion, x, s).mean().backward()
        assert np.any(fusion.image_conv.weight.grad != 0)

    def test_shape_mismatch(self, rng):
        fusion = Fusion(2, RngState(2))
        with pytest.raises(ShapeError):
            fusion_forward(fusion, Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32)), Tensor(np.zeros((1, 1, 4, 6, 6))))


@pytest.mark.unit
class TestPhiSeg:
    def test_distillation_collapses_depth(self):
        model = build_model(tiny_phiseg_spec())
        features = distill_forward(model.distill, Tensor(_masks()))
        assert features.shape == (2, 2, TINY, TINY)

    def test_forward_and_loss(self, rng):
        model = build_model(tiny_phiseg_spec())
        out = phiseg_forward(model, _images(rng), Tensor(_masks()), RngState(4))
        assert out.logits.shape == (2, 1, TINY, TINY, TINY)
        assert sorted(out.posterior.levels) == [1, 2, 3]
        loss, breakdown = phiseg_loss(out.logits, _masks(), out.prior, out.posterior, beta=1.0)
        assert {"bce", "kl", "kl_level1", "kl_level2", "kl_level3", "loss"} <= set(breakdown)
        assert breakdown["kl"] >= 0.0
        assert breakdown["loss"] == pytest.approx(breakdown["bce"] + breakdown["kl"], rel=1e-5)
        loss.backward()
        assert model.prior.heads[3].weight.grad is not None

    def test_beta_zero_drops_kl(self, rng):
        model = build_model(tiny_phiseg_spec())
        out = phiseg_forward(model, _images(rng), Tensor(_masks()), RngState(4))
        _, breakdown = phiseg_loss(out.logits, _masks(), out.prior, out.posterior, beta=0.0)
        assert breakdown["loss"] == pytest.approx(breakdown["bce"])

    def test_prior_samples_differ(self, rng):
        model = build_model(tiny_phiseg_spec())
        assert is_stochastic(model)
        probs = sample_probabilities(model, _images(rng, 1), 2, RngState(8))
        assert probs.shape == (2, 1, TINY, TINY, TINY)
        assert not np.array_equal(probs[0], probs[1])

    def test_mean_prediction_shape(self, rng):
        model = build_model(tiny_phiseg_spec(fusion=False))
        assert model.fusion is None
        assert predict_probabilities(model, _images(rng)).shape == (2, TINY, TINY, TINY)

    def test_indivisible_target_rejected(self):
        with pytest.raises(ConfigError):
            PhiSeg2D3D(PhiSegConfig(base_channels=2), SrmConfig.for_depth(16), (16, 12, 12), RngState(0))

    def test_reconstruction_needs_head(self, rng):
        model = build_model(tiny_phiseg_spec())
        with pytest.raises(ConfigError):
            phiseg_reconstruct(model, _images(rng), RngState(1))

    def test_reconstruction_in_unit_range(self, rng):
        model = build_model(tiny_phiseg_spec("phiseg-uda", recon_head=True))
        recon = phiseg_reconstruct(model, _images(rng), RngState(1))
        assert recon.shape == (2, 1, TINY, TINY)
        assert ((recon.data >= 0) & (recon.data <= 1)).all()

    def test_prior_mean_encoding(self, rng):
        model = build_model(tiny_phiseg_spec())
        stack = phiseg_encode(model, _images(rng), use_mean=True)
        assert sorted(stack.levels) == [1, 2, 3]
        for entry in stack:
            np.testing.assert_array_equal(entry.z.data, entry.mu.data)
        assert phiseg_likelihood(model, stack).shape == (2, 1, TINY, TINY, TINY)

    def test_sampling_reproducible(self, rng):
        model = build_model(tiny_phiseg_spec())
        x = _images(rng, 1)
        np.testing.assert_array_equal(phiseg_sample(model, x, 2, RngState(3)), phiseg_sample(model, x, 2, RngState(3)))
        assert phiseg_predict_mean(model, x).shape == (1, TINY, TINY, TINY)

    def test_uda_forward_reports_reconstruction(self, rng):
        model = build_model(tiny_phiseg_spec("phiseg-uda", recon_head=True))
        seg_loss, recon_loss, breakdown = uda_forward(model, _images(rng), Tensor(_masks()), _images(rng), RngState(2))
        assert recon_loss.item() >= 0
        assert breakdown["recon"] == pytest.approx(recon_loss.item())
        assert breakdown["loss"] == pytest.approx(seg_loss.item())


@pytest.mark.unit
class TestGradientFlow:
    """Every parameter receives a gradient within a few optimiser steps."""

    @staticmethod
    def _silent_parameters(model, loss_fn, steps=3):
        optimizer = Adam(model.parameters(), lr=1e-2)
        touched = {name: False for name, _ in model.named_parameters()}
        for step in range(steps):
            optimizer.zero_grad()
            loss_fn(step).backward()
            for name, param in model.named_parameters():
                touched[name] |= param.grad is not None and bool(np.any(param.grad != 0))
            optimizer.step()
        return [name for name, seen in touched.items() if not seen]

    def test_unet(self, rng):
        spec = tiny_unet_spec("none", "unet-det").model_copy(
            update={"unet": UNet3DConfig(base_channels=4, dropout_mode="none")}
        )
        model = build_model(spec)
        x, gt = _images(rng), _masks()
        assert self._silent_parameters(model, lambda step: bce_loss(model(x), gt)) == []

    def test_phiseg(self, rng):
        spec = tiny_phiseg_spec()
        spec = spec.model_copy(update={"phiseg": spec.phiseg.model_copy(update={"base_channels": 4})})
        model = build_model(spec)
        x, gt = _images(rng), _masks()

        def loss_fn(step):
            out = phiseg_forward(model, x, Tensor(gt), RngState(step))
            return phiseg_loss(out.logits, gt, out.prior, out.posterior, beta=1.0)[0]

        # the fusion image branch only receives gradient once the mix weights have moved
        assert self._silent_parameters(model, loss_fn) == []


@pytest.mark.unit
class TestStateDict:
    def test_order_and_determinism(self):
        a = build_model(tiny_phiseg_spec()).state_dict()
        b = build_model(tiny_phiseg_spec()).state_dict()
        assert list(a) == list(b)
        assert next(iter(a)) == "prior.block0.conv1.weight"
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_unet_order_starts_with_srm(self):
        assert next(iter(build_model(tiny_unet_spec()).state_dict())) == "srm.layer0.weight"

    def test_strict_load(self):
        model = build_model(tiny_unet_spec())
        state = model.state_dict()
        assert model.load_state_dict(state) == []

        extra = dict(state, bogus=np.zeros(1))
        with pytest.raises(ConfigError):
            model.load_state_dict(extra)
        assert model.load_state_dict(extra, strict=False) == ["bogus"]

        missing = dict(state)
        missing.pop("srm.layer0.bias")
        with pytest.raises(ConfigError):
            model.load_state_dict(missing, strict=False)

        wrong = dict(state)
        wrong["srm.layer0.bias"] = np.zeros(7)
        with pytest.raises(ShapeError):
            model.load_state_dict(wrong)


@pytest.mark.unit
class TestLoadModel:
    def _save(self, tmp_path, spec):
        model = build_model(spec)
        path = save_checkpoint(tmp_path / "model.ckpt", model.state_dict(), checkpoint_meta(spec))
        return model, path

    def test_roundtrip(self, tmp_path):
        model, path = self._save(tmp_path, tiny_unet_spec())
        loaded, spec = load_model(path)
        assert spec.architecture == "unet-dropout"
        for name, array in model.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[name], array)

    def test_uda_checkpoint_loads_as_phiseg(self, tmp_path):
        _, path = self._save(tmp_path, tiny_phiseg_spec("phiseg-uda", recon_head=True))
        loaded, spec = load_model(path, architecture="phiseg")
        assert spec.architecture == "phiseg"
        assert loaded.recon_head is None

    def test_dropout_checkpoint_loads_deterministic(self, tmp_path):
        _, path = self._save(tmp_path, tiny_unet_spec())
        loaded, spec = load_model(path, architecture="unet-det")
        assert spec.unet.dropout_mode == "none"
        assert not is_stochastic(loaded)

    def test_cross_family_rejected(self, tmp_path):
        _, path = self._save(tmp_path, tiny_unet_spec())
        with pytest.raises(ConfigError):
            load_model(path, architecture="phiseg")

    def test_missing_sidecar(self, tmp_path):
        model = build_model(tiny_unet_spec())
        path = save_checkpoint(tmp_path / "bare.ckpt", model.state_dict())
        with pytest.raises(ConfigError):
            load_model(path)


@pytest.mark.unit
class TestModelSpecFromTrain:
    def test_unet_modes(self):
        config = TrainConfig(model="unet-dropblock", dataset_dir="d", base_channels=2)
        spec = model_spec_from_train(config, (16, 16, 16))
        assert spec.unet.dropout_mode == "dropblock"
        assert spec.srm.z_strides == (2, 2, 2, 2, 1)
        assert spec.phiseg is None

    def test_nofusion_and_uda(self):
        nofusion = model_spec_from_train(TrainConfig(model="phiseg-nofusion", dataset_dir="d"), (16, 16, 16))
        assert not nofusion.phiseg.fusion
        uda = model_spec_from_train(
            TrainConfig(model="phiseg-uda", dataset_dir="d", use_target_stream=False), (16, 16, 16)
        )
        assert uda.phiseg.recon_head and uda.phiseg.fusion

    def test_init_seed_follows_training_seed(self):
        a = model_spec_from_train(TrainConfig(dataset_dir="d", seed=1), (16, 16, 16))
        b = model_spec_from_train(TrainConfig(dataset_dir="d", seed=2), (16, 16, 16))
        assert a.init_seed != b.init_seed

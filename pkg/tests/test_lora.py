import numpy as np
import pytest

from storyvid.autograd import ParamSet, ShapeError, Tensor, finite_diff_check
from storyvid.denoiser import AttnTrace, DenoiserConfig, Vocab, init_weights
from storyvid.diffusion import make_schedule
from storyvid.lora import (
    Adam,
    ReferenceClip,
    TrainConfig,
    attach_lora,
    augment_background,
    customization_loss,
    downsample_mask,
    fine_tune,
    init_block_embeddings,
    ldm_loss,
    load_checkpoint,
    localization_loss,
    lora_apply,
    make_customization,
    save_checkpoint,
    train_step,
)
from storyvid.sprites import sprite
from storyvid.storyboard import make_reference_clips

TINY = DenoiserConfig(frames=4, d_model=16, n_blocks=2, n_heads=2, timesteps=50)


@pytest.fixture(scope="module")
def weights():
    return init_weights(TINY, seed=2)


@pytest.fixture(scope="module")
def vocab():
    return Vocab()


@pytest.fixture(scope="module")
def clip():
    return make_reference_clips("crab", 1, seed=5, frames=TINY.frames)[0]


class TestAttach:
    def test_adapter_count(self, weights):
        cfg4 = DenoiserConfig(frames=4, d_model=16, n_blocks=4, n_heads=2)
        w4 = init_weights(cfg4, seed=0)
        adapters = attach_lora(w4, cfg4, rank=4)
        assert len(adapters) == 48  # K x 3 kinds x 4 roles

    def test_rank_bounds(self, weights):
        with pytest.raises(ValueError):
            attach_lora(weights, TINY, rank=0)
        with pytest.raises(ValueError):
            attach_lora(weights, TINY, rank=TINY.d_model + 1)

    def test_b_zero_init(self, weights):
        adapters = attach_lora(weights, TINY, rank=3, seed=1)
        for ad in adapters.entries.values():
            assert np.all(ad.B.data == 0.0)
            assert ad.A.data.std() < 0.05


class TestLoraApply:
    def test_zero_delta(self):
        rng = np.random.default_rng(0)
        x, W = rng.standard_normal(4), rng.standard_normal((3, 4))
        A, B = rng.standard_normal((2, 4)), np.zeros((3, 2))
        y = lora_apply(x, W, A, B)
        assert np.allclose(y.data, W @ x)

    def test_rank1_by_hand(self):
        x = np.array([1.0, 2.0])
        W = np.zeros((2, 2))
        A = np.array([[3.0, 1.0]])      # A x = 5
        B = np.array([[2.0], [1.0]])    # B (A x) = [10, 5]
        y = lora_apply(x, W, A, B, scale=1.0)
        assert np.allclose(y.data, [10.0, 5.0])

    def test_scale_doubles_delta_only(self):
        rng = np.random.default_rng(1)
        x, W = rng.standard_normal(4), rng.standard_normal((3, 4))
        A, B = rng.standard_normal((2, 4)), rng.standard_normal((3, 2))
        base = W @ x
        d1 = lora_apply(x, W, A, B, scale=1.0).data - base
        d2 = lora_apply(x, W, A, B, scale=2.0).data - base
        assert np.allclose(d2, 2 * d1)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            lora_apply(np.zeros(3), np.zeros((2, 4)), np.zeros((1, 4)), np.zeros((2, 1)))


class TestLdmLoss:
    def test_identity_zero(self):
        x = np.random.default_rng(0).standard_normal((2, 3))
        assert ldm_loss(x, Tensor(x)).item() == 0.0

    def test_constant_difference(self):
        a = np.zeros((4, 4))
        assert np.isclose(ldm_loss(a, Tensor(a + 0.3)).item(), 0.09)

    def test_random_vs_elementwise_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        expect = sum((a.flat[i] - b.flat[i]) ** 2 for i in range(4)) / 4
        assert np.isclose(ldm_loss(a, Tensor(b)).item(), expect)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ldm_loss(np.zeros((2, 2)), Tensor(np.zeros((2, 3))))


class TestDownsampleMask:
    def test_all_ones(self):
        assert downsample_mask(np.ones((32, 32), bool)).all()

    def test_aligned_block(self):
        m = np.zeros((32, 32), bool)
        m[4:8, 8:12] = True
        lat = downsample_mask(m)
        assert lat.sum() == 1 and lat[1, 2]

    def test_threshold_rule(self):
        m = np.zeros((32, 32), bool)
        m.reshape(8, 4, 8, 4)[0, :, 0, :].flat[:7] = True
        assert not downsample_mask(m)[0, 0]
        m.reshape(8, 4, 8, 4)[0, :, 0, :].flat[:8] = True
        assert downsample_mask(m)[0, 0]  # exactly 8/16 rounds to 1


class TestLocalizationLoss:
    def _trace(self, maps):
        return AttnTrace(maps=[Tensor(m) for m in maps], subject_index=0,
                         text_len=3, n_img_tokens=4)

    def test_uniform_attention(self):
        n_keys = 10
        maps = [np.full((2, 2, 2), 1.0 / n_keys)] * 3
        masks = np.zeros((2, 2, 2), bool)
        masks[:, 0, 0] = True
        loss = localization_loss(self._trace(maps), masks)
        assert np.isclose(loss.item(), -1.0 / n_keys)

    def test_full_concentration_bound(self):
        maps = [np.ones((2, 2, 2))]
        masks = np.ones((2, 2, 2), bool)
        assert np.isclose(localization_loss(self._trace(maps), masks).item(), -1.0)

    def test_hand_case_vs_direct_average(self):
        d = np.array([[[0.2, 0.4]], [[0.6, 0.8]]])  # [F=2, 1, 2]
        masks = np.array([[[True, False]], [[True, True]]])
        expect = -((0.2) + (0.6 + 0.8) / 2) / 2
        loss = localization_loss(self._trace([d]), masks)
        assert np.isclose(loss.item(), expect)

    def test_empty_frame_skipped_all_empty_rejected(self, caplog):
        d = np.full((2, 1, 2), 0.5)
        masks = np.array([[[True, False]], [[False, False]]])
        loss = localization_loss(self._trace([d]), masks)
        assert np.isclose(loss.item(), -0.5)
        with pytest.raises(ValueError):
            localization_loss(self._trace([d]), np.zeros((2, 1, 2), bool))


class TestAugment:
    def test_full_mask_unchanged(self, clip):
        full = ReferenceClip(frames=clip.frames, masks=np.ones_like(clip.masks),
                             prompt_tokens=clip.prompt_tokens)
        out = augment_background(full, np.random.default_rng(0))
        assert np.array_equal(out.frames, full.frames)

    def test_subject_pixels_preserved(self, clip):
        out = augment_background(clip, np.random.default_rng(1))
        assert np.array_equal(out.frames[clip.masks], clip.frames[clip.masks])
        assert np.array_equal(out.masks, clip.masks)

    def test_deterministic(self, clip):
        a = augment_background(clip, np.random.default_rng(2))
        b = augment_background(clip, np.random.default_rng(2))
        assert np.array_equal(a.frames, b.frames)


class TestTraining:
    def test_frozen_base_and_lambda_zero(self, weights, vocab, clip):
        sched = make_schedule(TINY.timesteps)
        cfg = TrainConfig(epochs=1, seed=3, learning_rate=1e-3)
        adapters, embeds, opt = make_customization(weights, TINY, vocab, cfg)
        checksum = weights.checksum()
        for _ in range(5):
            train_step(clip, weights, adapters, embeds, sched, cfg,
                       np.random.default_rng(0), opt, TINY, vocab)
        assert weights.checksum() == checksum

        # lambda_loc = 0 reduces the loss to the MSE term exactly
        rng = np.random.default_rng(9)
        t = 5
        eps = rng.standard_normal((TINY.frames, TINY.c_lat, TINY.h, TINY.w))
        loss, l_ldm, l_loc = customization_loss(
            clip, t, eps, weights, adapters, embeds, sched, TINY, vocab, lambda_loc=0.0)
        assert loss.item() == l_ldm.item() and l_loc is None

    def test_gradients_match_central_differences(self, weights, vocab, clip):
        sched = make_schedule(TINY.timesteps)
        cfg = TrainConfig(seed=1)
        adapters, embeds, _ = make_customization(weights, TINY, vocab, cfg)
        rng = np.random.default_rng(2)
        t = 7
        eps = rng.standard_normal((TINY.frames, TINY.c_lat, TINY.h, TINY.w))

        params = ParamSet()
        for name, tns in adapters.trainable_params():
            params.add(name, tns, trainable=True)
        params.add("embeds.e", embeds.e, trainable=True)

        def loss_fn(p):
            loss, _, _ = customization_loss(
                clip, t, eps, weights, adapters, embeds, sched, TINY, vocab)
            return loss

        # eps=1e-3: near-zero adapter gradients sit below the 1e-8 relative-error
        # floor, so a smaller step leaves pure f64 rounding noise in the numerator.
        err = finite_diff_check(loss_fn, params, eps=1e-3, subsample=60, seed=0)
        assert err <= 1e-4

    def test_fine_tune_deterministic(self, weights, vocab):
        clips = make_reference_clips("crab", 2, seed=1, frames=TINY.frames)
        sched = make_schedule(TINY.timesteps)
        cfg = TrainConfig(epochs=2, seed=4, learning_rate=1e-3)
        a1, e1, t1 = fine_tune(clips, weights, TINY, vocab, sched, cfg)
        a2, e2, t2 = fine_tune(clips, weights, TINY, vocab, sched, cfg)
        assert np.array_equal(e1.e.data, e2.e.data)
        for name in a1.entries:
            assert np.array_equal(a1.entries[name].B.data, a2.entries[name].B.data)
        assert t1 == t2
        assert len(t1) == 2

    def test_fine_tune_empty_rejected(self, weights, vocab):
        with pytest.raises(ValueError):
            fine_tune([], weights, TINY, Vocab(), make_schedule(10), TrainConfig(epochs=1))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, weights, vocab):
        cfg = TrainConfig(seed=0)
        adapters, embeds, opt = make_customization(weights, TINY, vocab, cfg)
        # perturb so payloads are nontrivial
        rng = np.random.default_rng(0)
        for ad in adapters.entries.values():
            ad.B.data = rng.standard_normal(ad.B.shape) * 0.1
        embeds.e.data = rng.standard_normal(embeds.e.shape)

        path = tmp_path / "custom.lrbe"
        save_checkpoint(path, adapters, embeds, TINY)
        loaded_a, loaded_e = load_checkpoint(path, TINY)
        path2 = tmp_path / "again.lrbe"
        save_checkpoint(path2, loaded_a, loaded_e, TINY)
        assert path.read_bytes() == path2.read_bytes()  # bit-exact container

        # forward pass with loaded parameters is reproducible
        from storyvid.diffusion import sample_shot

        img = np.random.default_rng(1).random((32, 32, 3))
        ids = vocab.encode(["a", "<subject>", "idles"])
        v1 = sample_shot(weights, TINY, img, ids, make_schedule(TINY.timesteps),
                         steps=2, seed=0, adapters=loaded_a, embeds=loaded_e)
        loaded_a2, loaded_e2 = load_checkpoint(path, TINY)
        v2 = sample_shot(weights, TINY, img, ids, make_schedule(TINY.timesteps),
                         steps=2, seed=0, adapters=loaded_a2, embeds=loaded_e2)
        assert np.array_equal(v1, v2)

    def test_magic_rejected(self, tmp_path):
        bad = tmp_path / "bad.lrbe"
        bad.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="container"):
            load_checkpoint(bad, TINY)


def test_adam_matches_reference_step():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam([("t", t)], lr=0.1)
    t.grad = np.array([0.5, -0.5])
    opt.step()
    # bias-corrected first step moves by ~lr * sign(grad)
    assert np.allclose(t.data, [1.0 - 0.1 * (0.5 / (np.sqrt(0.25) + 1e-8) * 1.0),
                                2.0 + 0.1 * (0.5 / (np.sqrt(0.25) + 1e-8))], atol=1e-6)

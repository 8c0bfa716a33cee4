import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cloudgap import masking, vit
from cloudgap.errors import ConfigError, DataError, DivergenceError, FullyMaskedError
from cloudgap.vit import TrainConfig, ViTConfig

import oracles
from conftest import masked_chip_from
from gradcheck import directional_errors

TINY = ViTConfig(embed_dim=16, encoder_depth=1, encoder_heads=2, decoder_dim=16, decoder_depth=1,
                 decoder_heads=2, mlp_ratio=2)


def test_config_validation():
    with pytest.raises(ConfigError, match="patch size"):
        ViTConfig(patch_size=5)
    with pytest.raises(ConfigError):
        ViTConfig(embed_dim=24, encoder_heads=4)
    with pytest.raises(ConfigError):
        ViTConfig(encoder_heads=3)


def test_patch_counts():
    x = np.zeros((3, 6, 32, 32))
    assert vit.patchify_array(x, 16).shape == (12, 1536)
    assert vit.patchify_array(x, 8).shape == (48, 384)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.sampled_from([4, 8]))
def test_patchify_slice_oracle_and_round_trip(seed, p):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(2, 3, 16, 24))
    patches = vit.patchify_array(x, p)
    gh, gw = 16 // p, 24 // p
    for t in range(2):
        for i in range(gh):
            for j in range(gw):
                expected = x[t, :, i * p : (i + 1) * p, j * p : (j + 1) * p].ravel()
                np.testing.assert_array_equal(patches[(t * gh + i) * gw + j], expected)
    np.testing.assert_array_equal(vit.unpatchify(patches, p, 2, 3, 16, 24), x)
    np.testing.assert_array_equal(
        vit.patchify_array(torch.as_tensor(x), p).numpy(), patches)


def test_patchify_masked_chip_partition(small_chips, small_masks):
    m = masking.pair_masks(small_chips[:1], small_masks, "E2", 0)[0]
    ps = vit.patchify(m, 8)
    assert sorted(np.concatenate([ps.visible, ps.masked]).tolist()) == list(range(48))
    assert not set(ps.visible) & set(ps.masked)
    assert ps.tokens.shape == (len(ps.visible), 384)


def test_patchify_non_divisible():
    with pytest.raises(ConfigError):
        vit.patchify_array(np.zeros((1, 1, 12, 16)), 8)


def test_sincos_3d_distinct_positions():
    pe = vit.sincos_3d(64, (3, 4, 4))
    assert pe.shape == (48, 64)
    assert len({tuple(np.round(r, 12)) for r in pe}) == 48
    assert np.all(np.abs(pe) <= 1)


# --- loss ------------------------------------------------------------------------


def test_mse_masked_patches_examples():
    truth = np.zeros((1, 1, 8, 8))
    rec = np.zeros_like(truth)
    pm = np.zeros((1, 2, 2), np.uint8)
    pm[0, 1, 0] = 1
    rec[0, 0, 4:, :4] = 0.5
    assert vit.mse_masked_patches(rec, truth, pm, 4) == 0.25
    assert vit.mse_masked_patches(truth, truth, pm, 4) == 0.0
    with pytest.raises(DataError):
        vit.mse_masked_patches(rec, truth, np.zeros_like(pm), 4)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mse_masked_patches_oracle(seed):
    rng = np.random.default_rng(seed)
    truth, rec = rng.uniform(size=(2, 3, 2, 8, 12))
    pm = (rng.uniform(size=(3, 2, 3)) < 0.4).astype(np.uint8)
    pm[0, 0, 0] = 1
    ref = oracles.patch_mse(rec, truth, pm, 4)
    assert vit.mse_masked_patches(rec, truth, pm, 4) == pytest.approx(ref, abs=1e-12)
    # Patch-space form used in training agrees.
    loss = vit._patch_loss(vit.patchify_array(torch.as_tensor(rec), 4), vit.patchify_array(torch.as_tensor(truth), 4),
                           torch.as_tensor(pm.reshape(-1).astype(bool)))
    assert float(loss) == pytest.approx(ref, abs=1e-12)


# --- model -----------------------------------------------------------------------


def _masked(chip, rng, density=0.3):
    # Block-structured clouds so some patches stay visible.
    grid = rng.uniform(size=(3, 4, 4)) < density
    grid[0, 0, 0] = False
    grid[1, 1, 1] = True
    pm = np.kron(grid, np.ones((8, 8))).astype(np.uint8)
    return masked_chip_from(chip, pm)


def test_output_shape_and_finite(small_chips, rng):
    model = vit.build_vit(TINY, seed=0)
    for chip in small_chips[:3]:
        out = vit.forward_reconstruct(model, _masked(chip, rng))
        assert out.shape == chip.data.shape
        assert np.isfinite(out).all()


def test_build_is_seeded():
    a = vit.build_vit(TINY, seed=3).state_dict()
    b = vit.build_vit(TINY, seed=3).state_dict()
    c = vit.build_vit(TINY, seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_fully_masked_input_rejected(small_chips):
    model = vit.build_vit(TINY)
    m = masked_chip_from(small_chips[0], np.ones((3, 32, 32), np.uint8))
    with pytest.raises(FullyMaskedError, match="fully-masked"):
        vit.forward_reconstruct(model, m)


def test_impute_falls_back_for_fully_masked(small_chips, rng):
    model = vit.build_vit(TINY)
    full = masked_chip_from(small_chips[0], np.ones((3, 32, 32), np.uint8))
    part = _masked(small_chips[1], rng)
    out = vit.impute(model, [full, part])
    assert np.all(out[0] == np.float32(0.15))
    np.testing.assert_allclose(out[1], vit.forward_reconstruct(model, part), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_visible_token_sufficiency(small_chips, seed):
    rng = np.random.default_rng(seed)
    model = vit.build_vit(TINY, seed=seed)
    m = _masked(small_chips[seed], rng)
    base = vit.forward_reconstruct(model, m)
    cloudy = np.broadcast_to(vit.unpatchify(
        np.repeat(masking.lift_to_patch_mask(m.pixel_mask, 8).reshape(-1, 1), 384, axis=1), 8, 3, 6, 32, 32
    ).astype(bool), m.masked_data.shape)
    m.masked_data[cloudy] = rng.uniform(-10, 10, size=int(cloudy.sum()))
    assert np.array_equal(vit.forward_reconstruct(model, m), base)


def test_batch_padding_does_not_leak(small_chips, rng):
    model = vit.build_vit(TINY)
    a = _masked(small_chips[0], rng, density=0.1)
    b = _masked(small_chips[1], rng, density=0.7)
    joint = vit.impute(model, [a, b])
    np.testing.assert_allclose(joint[1], vit.impute(model, [b])[0], atol=1e-5)


def test_decoder_order_permutation_invariant(small_chips, rng):
    model = vit.build_vit(TINY, seed=1)
    m = _masked(small_chips[0], rng)
    base = vit.forward_reconstruct(model, m)
    order = torch.as_tensor(rng.permutation(TINY.num_patches))
    np.testing.assert_allclose(vit.forward_reconstruct(model, m, token_order=order), base, atol=1e-5)


def test_decoder_bias_pattern(small_chips, rng):
    cfg = ViTConfig(embed_dim=16, encoder_depth=0, encoder_heads=2, decoder_dim=16, decoder_depth=0,
                    decoder_heads=2)
    model = vit.build_vit(cfg)
    with torch.no_grad():
        model.decoder_pred.weight.zero_()
        model.decoder_pred.bias.copy_(torch.linspace(-1, 1, cfg.patch_dim))
    out = vit.forward_reconstruct(model, _masked(small_chips[0], rng))
    expected = vit.unpatchify(np.tile(np.linspace(-1, 1, cfg.patch_dim) * 0.07 + 0.15, (48, 1)), 8, 3, 6, 32, 32)
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_gradients_match_finite_differences(small_chips):
    torch.manual_seed(0)
    model = vit.build_vit(TINY, seed=0).double()
    rng = np.random.default_rng(0)
    m = _masked(small_chips[0], rng)
    chip = small_chips[0]
    pm = masking.lift_to_patch_mask(m.pixel_mask, 8)
    patches = vit.patchify_array(torch.as_tensor(m.masked_data, dtype=torch.float64), 8)[None]
    dropped = torch.as_tensor(pm.reshape(1, -1).astype(bool))
    truth = torch.as_tensor(chip.data, dtype=torch.float64)

    def loss():
        rec = vit.unpatchify(model(patches, dropped)[0], 8, 3, 6, 32, 32)
        return vit.mse_masked_patches(rec, truth, torch.as_tensor(pm), 8)

    errors = directional_errors(loss, dict(model.named_parameters()))
    assert max(errors.values()) < 1e-3, errors


# --- training --------------------------------------------------------------------


def _train(chips, masks, seed=0, lr=1e-3, epochs=2, evaluate=None, model_seed=0):
    model = vit.build_vit(TINY, seed=model_seed)
    cfg = TrainConfig(epochs=epochs, batch_size=4, lr=lr, seed=seed)
    return model, list(vit.train_vit(model, chips, masks, cfg, evaluate))


def test_training_is_deterministic(small_chips, small_masks):
    m1, r1 = _train(small_chips, small_masks)
    m2, r2 = _train(small_chips, small_masks)
    assert [r.train_loss for r in r1] == [r.train_loss for r in r2]
    s1, s2 = m1.state_dict(), m2.state_dict()
    assert all(torch.equal(s1[k], s2[k]) for k in s1)


def test_zero_lr_leaves_parameters(small_chips, small_masks):
    before = {k: v.clone() for k, v in vit.build_vit(TINY).state_dict().items()}
    model, _ = _train(small_chips, small_masks, lr=0.0, epochs=3)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_training_reduces_loss(small_chips, small_masks):
    _, results = _train(small_chips, small_masks, epochs=6)
    assert results[-1].train_loss < results[0].train_loss


def test_best_state_tracks_min_validation(small_chips, small_masks):
    vals = iter([0.5, 0.2, 0.3])
    model, results = _train(small_chips, small_masks, epochs=3, evaluate=lambda m, e: next(vals))
    assert [r.val_mae for r in results] == [0.5, 0.2, 0.3]
    assert model.best_epoch == 2 and model.best_val == 0.2
    assert model.best_state is not None


def test_pretraining_ignores_cloud_masks(small_chips):
    model = vit.build_vit(TINY)
    cfg = TrainConfig(epochs=1, batch_size=4)
    results = list(vit.train_vit(model, small_chips, [], cfg, pretrain=True))
    assert np.isfinite(results[0].train_loss)


def test_random_patch_masks_bounds(rng):
    masks = vit.random_patch_masks(rng, 200, TINY)
    counts = masks.sum(axis=1)
    assert counts.min() >= 1 and counts.max() <= TINY.num_patches - 1


def test_divergence_reports_epoch(small_chips, small_masks):
    model = vit.build_vit(TINY)
    with torch.no_grad():
        model.decoder_pred.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError) as exc:
        list(vit.train_vit(model, small_chips, small_masks, TrainConfig(epochs=2, batch_size=4)))
    assert exc.value.epoch == 1


def test_empty_training_set():
    with pytest.raises(DataError):
        list(vit.train_vit(vit.build_vit(TINY), [], [], TrainConfig(epochs=1)))


def test_checkpoint_round_trip(tmp_path, small_chips, rng):
    model = vit.build_vit(TINY, seed=5)
    p = tmp_path / "m.vitc"
    vit.save_vit(model, p, {"epoch": 7, "val_mae": 0.0123})
    back, meta = vit.load_vit(p)
    assert meta == {"epoch": 7, "val_mae": 0.0123}
    assert back.config == model.config
    sa, sb = model.state_dict(), back.state_dict()
    assert all(sa[k].numpy().tobytes() == sb[k].numpy().tobytes() for k in sa)
    assert p.read_bytes()[:4] == b"VITC"
    m = _masked(small_chips[0], rng)
    assert np.array_equal(vit.forward_reconstruct(model, m), vit.forward_reconstruct(back, m))

import numpy as np
import pytest

from attnreg import dataio, geometry, pipeline
from attnreg.errors import InputError, ParamError, UsageError
from attnreg.pipeline import Adam, ModelConfig, RegistrationModel, TrainConfig


@pytest.fixture
def small_model():
    cfg = ModelConfig(ndim=2, channels=(2, 4), match_channels=4)
    return RegistrationModel(cfg, seed=0)


@pytest.fixture
def small_pair():
    return dataio.gen_synthetic_pair(
        dataio.SynthSpec(shape=(16, 16), magnitude=2.0, seed=1)
    )


def test_model_config_validation():
    with pytest.raises(ParamError):
        ModelConfig(ndim=4)
    assert ModelConfig(channels=(4, 8, 16)).levels == 3


def test_parameters_include_beta_and_prematch(small_model):
    names = set(small_model.named_parameters())
    assert "beta" in names
    assert "pm_f0.w" in names and "pm_m1.b" in names
    assert any(n.startswith("f.enc") for n in names)
    assert small_model.parameter_count() == sum(
        v.size for v in small_model.parameters()
    )


def test_separate_weights_doubles_extractor():
    shared = RegistrationModel(ModelConfig(ndim=2, channels=(2, 4)), seed=0)
    separate = RegistrationModel(
        ModelConfig(ndim=2, channels=(2, 4), shared_weights=False), seed=0
    )
    assert any(n.startswith("m.") for n in separate.named_parameters())
    assert separate.parameter_count() > shared.parameter_count()


def test_register_output_structure(small_model, small_pair):
    phi, levels = pipeline.register(small_model, small_pair["fixed"], small_pair["moving"])
    assert phi.spatial == (16, 16)
    assert [lv.level for lv in levels] == [2, 1]  # coarse to fine
    assert levels[0].phi.spatial == (8, 8)
    assert levels[-1].phi is phi


def test_register_levels_rebuild_bitwise(small_model, small_pair):
    """phi at each level is exactly compose(local, upsample(coarser phi))."""
    phi, levels = pipeline.register(small_model, small_pair["fixed"], small_pair["moving"])
    prev = None
    for lv in levels:
        if prev is None:
            assert np.array_equal(lv.phi.disp.data, lv.local.disp.data)
        else:
            rebuilt = geometry.compose(lv.local, geometry.upsample_transform(prev))
            assert np.array_equal(lv.phi.disp.data, rebuilt.disp.data)
        prev = lv.phi


def test_register_beta_zero_is_identity_bitwise(small_model, small_pair):
    small_model.set_parameter("beta", 0.0)
    phi, levels = pipeline.register(small_model, small_pair["fixed"], small_pair["moving"])
    assert np.array_equal(phi.disp.data, np.zeros((2, 16, 16), np.float32))
    for lv in levels:
        assert not lv.local.disp.data.any()


def test_register_shape_mismatch(small_model):
    with pytest.raises(InputError):
        pipeline.register(small_model, np.ones((16, 16)), np.ones((16, 32)))


def test_register_collect_attention(small_model, small_pair):
    _, levels = pipeline.register(
        small_model, small_pair["fixed"], small_pair["moving"], collect_attention=True
    )
    for lv in levels:
        n = int(np.prod(lv.phi.spatial))
        assert lv.weights.shape == (n, 9)


def test_diffeomorphic_variant_runs(small_pair):
    cfg = ModelConfig(ndim=2, channels=(2, 4), diffeomorphic=True, integrator_steps=4)
    model = RegistrationModel(cfg, seed=0)
    phi, _ = pipeline.register(model, small_pair["fixed"], small_pair["moving"])
    assert np.isfinite(phi.disp.data).all()


def test_search_region_recurrence():
    assert [pipeline.search_region(L) for L in (1, 2, 3, 4, 5)] == [3, 8, 18, 38, 78]


def test_adam_matches_reference_updates():
    """Three steps on a known gradient sequence vs a hand-coded oracle."""
    from attnreg.autodiff import Var

    p = Var(np.array([1.0, -2.0], dtype=np.float64), requires_grad=True)
    opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    theta = np.array([1.0, -2.0])
    m = v = np.zeros(2)
    rng = np.random.default_rng(0)
    for t in range(1, 4):
        g = rng.standard_normal(2)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, theta, rtol=1e-12)
        opt.zero_grad()


def test_adam_converges_on_quadratic():
    from attnreg.autodiff import Var

    p = Var(np.array(5.0), requires_grad=True)
    opt = Adam([p], lr=0.3)
    for _ in range(200):
        opt.zero_grad()
        loss = (p - 2.0) * (p - 2.0)
        loss.backward()
        opt.step()
    assert float(p.data) == pytest.approx(2.0, abs=1e-2)


def test_loss_presets_pinned_weights():
    assert pipeline.LOSS_PRESETS["t1-atlas"] == (("ncc", 1.0), ("diffusion", 1.0))
    assert pipeline.LOSS_PRESETS["multimodal"] == (("mi", 1.0), ("diffusion", 0.2))
    assert pipeline.LOSS_PRESETS["weakly-sup"] == (
        ("mse", 1.0),
        ("diffusion", 0.05),
        ("dice", 1.0),
    )
    assert pipeline.LOSS_PRESETS["semi-sup-tre"] == (
        ("mse", 5.0),
        ("diffusion", 0.2),
        ("tre", 0.05),
    )


def test_history_header_strings():
    assert pipeline.history_header(TrainConfig(preset="t1-atlas")) == [
        "step", "epoch", "total", "ncc*1", "diffusion*1", "beta", "val_metric",
    ]
    assert pipeline.history_header(TrainConfig(preset="semi-sup-tre")) == [
        "step", "epoch", "total", "mse*5", "diffusion*0.2", "tre*0.05", "beta", "val_metric",
    ]


def test_unknown_preset_rejected():
    with pytest.raises(ParamError, match="unknown preset"):
        TrainConfig(preset="fancy").terms()


def test_presets_requiring_aux_raise_without_it(small_model, small_pair):
    bare = {"fixed": small_pair["fixed"], "moving": small_pair["moving"]}
    with pytest.raises(UsageError, match="label"):
        pipeline.compute_loss_terms(small_model, bare, TrainConfig(preset="weakly-sup"))
    with pytest.raises(UsageError, match="keypoint"):
        pipeline.compute_loss_terms(small_model, bare, TrainConfig(preset="semi-sup-tre"))


@pytest.mark.parametrize("preset", sorted(pipeline.LOSS_PRESETS))
def test_all_presets_train_one_step(preset, small_model, small_pair):
    cfg = TrainConfig(preset=preset, ncc_window=5, mi_bins=8)
    opt = Adam(small_model.parameters())
    values = pipeline.train_step(small_model, opt, small_pair, cfg)
    for name, _ in cfg.terms():
        assert np.isfinite(values[name])
    assert "beta" in values and "total" in values


def test_train_step_aborts_on_nonfinite_loss(small_model, small_pair, monkeypatch):
    from attnreg.autodiff import constant

    monkeypatch.setattr(
        pipeline.losses, "ncc_loss", lambda *a, **k: constant(np.float32(np.nan))
    )
    opt = Adam(small_model.parameters())
    with pytest.raises(RuntimeError, match="displacement stats"):
        pipeline.train_step(small_model, opt, small_pair, TrainConfig(ncc_window=5))


def test_flip_pair_is_involution(small_pair):
    flipped = pipeline.flip_pair(small_pair, (0, 1), 2)
    restored = pipeline.flip_pair(flipped, (0, 1), 2)
    for key in ("fixed", "moving", "fixed_labels", "moving_labels", "phi_gt"):
        assert np.array_equal(np.asarray(restored[key]), np.asarray(small_pair[key]))
    np.testing.assert_allclose(
        restored["keypoints"].fixed_points, small_pair["keypoints"].fixed_points
    )
    np.testing.assert_allclose(
        restored["keypoints"].moving_points, small_pair["keypoints"].moving_points
    )


def test_fit_history_and_reproducibility(small_pair, tmp_path):
    def run():
        model = RegistrationModel(ModelConfig(ndim=2, channels=(2, 4)), seed=0)
        cfg = TrainConfig(max_steps=6, ncc_window=5, seed=3, flip_augment=True)
        history, _ = pipeline.fit(model, [small_pair], cfg)
        return history

    h1, h2 = run(), run()
    assert len(h1) == 6
    assert [r["total"] for r in h1] == [r["total"] for r in h2]
    assert h1[-1]["val_metric"] is not None


def test_fit_writes_history_csv(small_pair, tmp_path):
    model = RegistrationModel(ModelConfig(ndim=2, channels=(2, 4)), seed=0)
    cfg = TrainConfig(max_steps=3, ncc_window=5)
    path = tmp_path / "history.csv"
    pipeline.fit(model, [small_pair], cfg, history_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,epoch,total,ncc*1,diffusion*1,beta,val_metric"
    assert len(lines) == 4


def test_fit_requires_data(small_model):
    with pytest.raises(UsageError):
        pipeline.fit(small_model, [], TrainConfig())


def test_validation_metric_uses_ground_truth(small_model, small_pair):
    score = pipeline.validation_metric(small_model, [small_pair], TrainConfig(ncc_window=5))
    # untrained near-identity model: endpoint error close to mean |u_gt|
    gt = np.sqrt((small_pair["phi_gt"].astype(np.float64) ** 2).sum(axis=0)).mean()
    assert score == pytest.approx(gt, rel=0.05)


def test_checkpoint_roundtrip(tmp_path, small_model, small_pair):
    path = pipeline.save_model(tmp_path / "model", small_model)
    assert path.endswith(".npz")
    loaded = pipeline.load_model(path)
    assert loaded.config == small_model.config
    a, _ = pipeline.register(small_model, small_pair["fixed"], small_pair["moving"])
    b, _ = pipeline.register(loaded, small_pair["fixed"], small_pair["moving"])
    assert np.array_equal(a.disp.data, b.disp.data)


def test_checkpoint_rejects_foreign_npz(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, foo=np.ones(3))
    with pytest.raises(InputError, match="metadata"):
        pipeline.load_model(path)

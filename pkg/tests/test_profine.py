import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import finite_difference_check, naive_model_forward, randomize
from cogadapt import signal_pipeline as sp
from cogadapt.dataio.synth import SynthConfig, synth_generate
from cogadapt.errors import ConfigError, DimensionError
from cogadapt.evalkit.metrics import macro_f1
from cogadapt.nn_core import cross_entropy_batch, focal_loss_batch
from cogadapt.profine import harness as hz
from cogadapt.profine.model import (CogAdaptModel, ModelConfig, ToyEncoder, model_forward,
                                    toy_encoder_forward)


def small_model(seed=0, **kw):
    cfg = dict(n_layers=4, d_model=8, head_hidden=16, adapter_hidden=8)
    cfg.update(kw)
    return CogAdaptModel(ModelConfig(**cfg), np.random.default_rng(seed))


def toy_data(n=40, t=20, seed=0):
    """Two classes separated by the scale of the first input lead."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, 3, t))
    x[:, 0] *= np.where(y == 1, 3.0, 0.3)[:, None]
    return x, y


def encoder_leaves(model, j):
    return {k: v.copy() for k, v in {**model.parameters(), **model.buffers()}.items()
            if k.startswith(f"encoder.layer{j}.")}


class TestModelForward:
    def test_zero_head_output(self):
        m = small_model()
        x = np.random.default_rng(1).normal(size=(5, 3, 30))
        np.testing.assert_allclose(model_forward(m, x), 0.5, atol=1e-12)

    def test_probability_contract(self):
        m = small_model()
        randomize(m, np.random.default_rng(2))
        x = 3 * np.random.default_rng(3).normal(size=(1000, 3, 10))
        p = model_forward(m, x)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("stride,residual", [(1, True), (3, True), (2, False)])
    def test_naive_oracle(self, stride, residual):
        rng = np.random.default_rng(4)
        m = small_model(n_layers=3, stride=stride, residual=residual)
        randomize(m, rng, scale=0.3)
        for k, v in m.buffers().items():
            v[...] = rng.normal(size=v.shape) * 0.1 if k.endswith("mean") else rng.uniform(0.5, 2, v.shape)
        x = rng.normal(size=(4, 3, 25))
        expected = naive_model_forward(m.state_dict(), x, 3, stride, residual=residual)
        np.testing.assert_allclose(model_forward(m, x), expected, atol=1e-6)

    def test_single_window(self):
        p = model_forward(small_model(), np.zeros((3, 12)))
        assert p.shape == (2,)

    def test_stage_named_in_error(self):
        with pytest.raises(DimensionError, match=r"\[adapter\]"):
            small_model().forward(np.zeros((2, 4, 10)))


class TestToyEncoder:
    def test_zero_blocks_pass_embedding(self):
        enc = ToyEncoder(ModelConfig(n_layers=3, d_model=6), np.random.default_rng(0))
        for k, v in enc.parameters().items():
            if k.startswith("layer") and not k.endswith("gamma"):
                v[...] = 0.0
        x = np.random.default_rng(1).normal(size=(12, 9))
        embed = enc.parameters()["embed.weight"] @ x + enc.parameters()["embed.bias"][:, None]
        np.testing.assert_allclose(toy_encoder_forward(enc, x), embed, atol=1e-12)

    def test_no_layers_is_embedding(self):
        enc = ToyEncoder(ModelConfig(n_layers=0, d_model=5, stride=2), np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(12, 10))
        embed = enc.parameters()["embed.weight"] @ x[:, ::2] + enc.parameters()["embed.bias"][:, None]
        np.testing.assert_array_equal(toy_encoder_forward(enc, x), embed)

    def test_wrong_channels(self):
        enc = ToyEncoder(ModelConfig(n_layers=1, d_model=4), np.random.default_rng(0))
        with pytest.raises(DimensionError):
            toy_encoder_forward(enc, np.zeros((3, 10)))

    @pytest.mark.parametrize("L", [1, 2, 4])
    def test_gradients_match_finite_differences(self, L):
        enc = ToyEncoder(ModelConfig(n_layers=L, d_model=6), np.random.default_rng(L))
        x = np.random.default_rng(10 + L).normal(size=(3, 12, 20))
        worst, checked, _ = finite_difference_check(enc, x, per_param=8, floor=1e-4)
        assert checked > 0 and worst < 1e-5


class TestSelectTrainable:
    def test_scenario_a(self):
        m = small_model()
        part = hz.select_trainable(m, hz.ScenarioConfig.preset("A"))
        assert set(part.frozen_modules) == {"encoder.embed", *(f"encoder.layer{j}" for j in range(1, 5))}
        assert all(k.startswith(("adapter.", "head.")) for k in part.trainable)

    def test_scenario_b(self):
        m = small_model()
        part = hz.select_trainable(m, hz.ScenarioConfig.preset("B", K=2))
        enc = {k.split(".")[1] for k in part.trainable if k.startswith("encoder.")}
        assert enc == {"layer3", "layer4"}

    def test_scenario_c(self):
        part = hz.select_trainable(small_model(), hz.ScenarioConfig.preset("C"))
        assert part.frozen == set() and part.frozen_modules == []

    def test_k_exceeds_depth(self):
        with pytest.raises(ConfigError):
            hz.select_trainable(small_model(n_layers=2), hz.ScenarioConfig.preset("B", K=3))

    @pytest.mark.parametrize("scenario", hz.SCENARIOS)
    def test_exact_partition(self, scenario):
        m = small_model()
        part = hz.select_trainable(m, hz.ScenarioConfig.preset(scenario))
        assert part.trainable.isdisjoint(part.frozen)
        assert part.trainable | part.frozen == set(m.parameters())

    def test_frozen_adapter(self):
        part = hz.select_trainable(small_model(), hz.ScenarioConfig.preset("A", adapter_trainable=False))
        assert not any(k.startswith("adapter.") for k in part.trainable)


class TestLearningRates:
    def test_depth_decay_arithmetic(self):
        np.testing.assert_allclose(hz.depth_decay_rates(1e-4, 0.5, 3), [2.5e-5, 5e-5, 1e-4])

    def test_tiers(self):
        assert [hz.tier_of_layer(j, 12) for j in (12, 9, 8, 5, 4, 1)] == \
            ["top", "top", "mid", "mid", "bottom", "bottom"]

    def test_table_c_kfold(self):
        m = small_model(n_layers=12)
        cfg = hz.ScenarioConfig.preset("C", "kfold")
        plan = hz.assign_learning_rates(m, hz.select_trainable(m, cfg), cfg)
        assert plan.rates == {"head": 1e-4, "adapter": 3e-5, "encoder_top": 1e-5,
                              "encoder_mid": 3e-6, "encoder_bottom": 1e-6}
        assert plan.group_of["encoder.layer12.linear.weight"] == "encoder_top"
        assert plan.group_of["encoder.layer1.linear.weight"] == "encoder_bottom"
        assert plan.group_of["encoder.embed.weight"] == "encoder_bottom"

    def test_table_b(self):
        m = small_model()
        cfg = hz.ScenarioConfig.preset("B")
        plan = hz.assign_learning_rates(m, hz.select_trainable(m, cfg), cfg)
        assert plan.rates["head"] > plan.rates["adapter"] > plan.rates["encoder"]
        assert (plan.rates["head"], plan.rates["adapter"], plan.rates["encoder"]) == (5e-4, 1e-4, 1e-5)

    def test_b_ordering_enforced(self):
        m = small_model()
        cfg = hz.ScenarioConfig.preset("B", lr_adapter=1e-3)
        with pytest.raises(ConfigError):
            hz.assign_learning_rates(m, hz.select_trainable(m, cfg), cfg)

    def test_c_tier_ordering_enforced(self):
        m = small_model()
        cfg = hz.ScenarioConfig.preset("C", lr_encoder_bottom=1e-3)
        with pytest.raises(ConfigError):
            hz.assign_learning_rates(m, hz.select_trainable(m, cfg), cfg)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.05, 0.95), st.integers(1, 12))
    def test_geometric_ratio(self, xi, L):
        m = small_model(n_layers=L, d_model=2, head_hidden=2, adapter_hidden=2)
        cfg = hz.ScenarioConfig.preset("C", lr_mode="geometric", xi=xi, eta_base=1e-4)
        plan = hz.assign_learning_rates(m, hz.select_trainable(m, cfg), cfg)
        for j in range(1, L):
            lo, hi = plan.rates[f"encoder.layer{j}"], plan.rates[f"encoder.layer{j + 1}"]
            assert lo / hi == pytest.approx(xi, rel=1e-12)
        assert plan.rates[f"encoder.layer{L}"] == 1e-4

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-6, 1e-2), st.floats(1e-6, 1e-2), st.floats(1e-6, 1e-2))
    def test_accepted_b_configs_are_ordered(self, head, adapter, enc):
        m = small_model(d_model=2, head_hidden=2, adapter_hidden=2)
        cfg = hz.ScenarioConfig.preset("B", lr_head=head, lr_adapter=adapter, lr_encoder_top=enc)
        try:
            plan = hz.assign_learning_rates(m, hz.select_trainable(m, cfg), cfg)
        except ConfigError:
            assert not head > adapter > enc
            return
        assert plan.rates["head"] > plan.rates["adapter"] > plan.rates["encoder"]


class TestClassWeights:
    def test_balanced(self):
        np.testing.assert_allclose(hz.compute_class_weights([0, 1, 0, 1]).alpha, [1.0, 1.0])

    def test_imbalanced(self):
        np.testing.assert_allclose(hz.compute_class_weights([0] * 30 + [1] * 10).alpha, [2 / 3, 2.0])

    def test_missing_class(self):
        with pytest.raises(ConfigError):
            hz.compute_class_weights([1, 1, 1])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 10_000), st.integers(1, 10_000))
    def test_identity(self, n0, n1):
        a = hz.compute_class_weights([0] * n0 + [1] * n1).alpha
        assert a[0] * n0 + a[1] * n1 == pytest.approx(n0 + n1, rel=1e-12)
        assert np.all(a > 0)


class TestLossEquivalence:
    def test_focal_gamma_zero_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(32, 2)) * 3
        y = rng.integers(0, 2, size=32)
        fl, dfl = focal_loss_batch(logits, y, np.ones(2), 0.0)
        ce, dce = cross_entropy_batch(logits, y)
        assert fl == pytest.approx(ce, abs=1e-7)
        np.testing.assert_allclose(dfl, dce, atol=1e-7)


def quick_cfg(scenario, **kw):
    base = dict(epochs=3, batch=8, lr_head=1e-2, lr_adapter=1e-3, lr_encoder_top=1e-4,
                lr_encoder_mid=5e-5, lr_encoder_bottom=1e-5, metric="macro_f1")
    base.update(kw)
    return hz.ScenarioConfig.preset(scenario, "loso", **base)


class TestTrain:
    def test_scenario_a_freezes_encoder(self):
        m = small_model()
        x, y = toy_data()
        before = {k: v.copy() for k, v in {**m.parameters(), **m.buffers()}.items()
                  if k.startswith("encoder.")}
        hz.train(m, x, y, x[:10], y[:10], quick_cfg("A"), np.random.default_rng(0))
        after = {**m.parameters(), **m.buffers()}
        for k, v in before.items():
            assert after[k].tobytes() == v.tobytes(), k

    def test_scenario_b_top_layers_only(self):
        m = small_model()
        x, y = toy_data()
        snaps = {j: encoder_leaves(m, j) for j in range(1, 5)}
        hz.train(m, x, y, x[:10], y[:10], quick_cfg("B", K=2, patience=50), np.random.default_rng(0))
        m_params = {**m.parameters(), **m.buffers()}
        for j in (1, 2):
            assert all(m_params[k].tobytes() == v.tobytes() for k, v in snaps[j].items())
        for j in (3, 4):
            assert any(m_params[k].tobytes() != v.tobytes() for k, v in snaps[j].items())

    def test_frozen_mutation_detected(self, monkeypatch):
        monkeypatch.setattr(hz, "_freeze_modules", lambda model, partition: None)
        x, y = toy_data()
        with pytest.raises(AssertionError):
            hz.train(small_model(), x, y, x[:10], y[:10], quick_cfg("A"), np.random.default_rng(0))

    def test_determinism(self):
        x, y = toy_data()
        runs = []
        for _ in range(2):
            m = small_model(seed=3)
            r = hz.train(m, x, y, x[:10], y[:10], quick_cfg("C"), np.random.default_rng(7))
            runs.append((r.log, {k: v.tobytes() for k, v in r.best_state.items()}))
        assert runs[0] == runs[1]

    def test_checkpoint_metric_reproduced(self):
        x, y = toy_data()
        vx, vy = toy_data(n=20, seed=1)
        m = small_model()
        r = hz.train(m, x, y, vx, vy, quick_cfg("A", epochs=4), np.random.default_rng(1))
        metric, _ = hz.evaluate(m, vx, vy, "macro_f1")
        assert metric == r.best_metric
        assert r.best_metric == max(e["val_macro_f1"] for e in r.log)

    def test_log_records_group_rates(self):
        x, y = toy_data()
        r = hz.train(small_model(), x, y, x[:10], y[:10], quick_cfg("C", epochs=2), np.random.default_rng(0))
        assert set(r.log[0]["lr"]) == {"head", "adapter", "encoder_top", "encoder_mid", "encoder_bottom"}

    def test_empty_sets(self):
        with pytest.raises(ValueError):
            hz.train(small_model(), np.zeros((0, 3, 5)), np.zeros(0), np.zeros((1, 3, 5)), np.zeros(1),
                     quick_cfg("A"), np.random.default_rng(0))

    def test_separable_hrv_regimes(self):
        syn = SynthConfig(n_subjects=3, minutes_per_subject=4.0, fs=100.0, seed=11)
        recs, _ = synth_generate(syn)
        wcfg = sp.WindowingConfig(target_fs=100.0)
        tr = [w for r in recs[:2] for w in sp.preprocess_recording(r, wcfg, "train")]
        va = sp.preprocess_recording(recs[2], wcfg, "eval")
        tx, ty = np.stack([w.data for w in tr]), np.array([w.label for w in tr])
        vx, vy = np.stack([w.data for w in va]), np.array([w.label for w in va])
        m = CogAdaptModel(ModelConfig(n_layers=4, d_model=32, stride=5), np.random.default_rng(1))
        cfg = hz.ScenarioConfig.preset("C", "loso", epochs=30, batch=32, lr_head=1e-3, lr_adapter=3e-4,
                                       lr_encoder_top=1e-4, lr_encoder_mid=3e-5, lr_encoder_bottom=1e-5)
        r = hz.train(m, tx, ty, vx, vy, cfg, np.random.default_rng(2))
        assert r.best_metric >= 0.95
        assert len(r.log) <= 30
        assert macro_f1(hz.evaluate(m, vx, vy, "macro_f1")[1]) == pytest.approx(r.best_metric)


class TestPresets:
    def test_protocol_metric(self):
        assert hz.ScenarioConfig.preset("A", "kfold").metric == "auroc"
        assert hz.ScenarioConfig.preset("A", "loso").metric == "macro_f1"

    def test_losses(self):
        assert hz.ScenarioConfig.preset("A").loss == "focal"
        assert hz.ScenarioConfig.preset("B").loss == "cross_entropy"
        assert not hz.ScenarioConfig.preset("C").augment

    @pytest.mark.parametrize("bad", [dict(scenario="D"), dict(gamma=-1.0), dict(xi=1.0),
                                     dict(loss="mse"), dict(lr_head=-1.0), dict(lr_head=math.inf)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            hz.ScenarioConfig(**bad)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustlab import attacks, nn
from robustlab import tensor as T
from robustlab.errors import ConfigurationError

from conftest import tiny_model

EPS = 5.0 / 255.0


class TestProjectLinf:
    def test_inside_both_boxes_unchanged(self):
        cand = np.array([0.52, 0.48])
        orig = np.array([0.5, 0.5])
        np.testing.assert_array_equal(attacks.project_linf(cand, orig, 0.1), cand)

    def test_budget_clamp(self):
        out = attacks.project_linf(np.array([0.63]), np.array([0.5]), 0.1)
        assert out[0] == pytest.approx(0.6)

    def test_range_binds_after_budget(self):
        out = attacks.project_linf(np.array([-0.3]), np.array([0.0]), 0.1)
        assert out[0] == 0.0

    def test_idempotent(self, rng):
        cand = rng.uniform(-1, 2, size=(4, 5))
        orig = rng.uniform(0, 1, size=(4, 5))
        once = attacks.project_linf(cand, orig, 0.07)
        twice = attacks.project_linf(once, orig, 0.07)
        np.testing.assert_array_equal(once, twice)

    @given(st.floats(-2, 3), st.floats(0.05, 0.95), st.floats(0, 0.3))
    @settings(max_examples=200, deadline=None)
    def test_idempotent_property(self, cand, orig, eps):
        once = attacks.project_linf(np.array([cand]), np.array([orig]), eps)
        twice = attacks.project_linf(once, np.array([orig]), eps)
        assert once[0] == twice[0]
        assert abs(once[0] - orig) <= eps + 1e-12 and 0.0 <= once[0] <= 1.0


class TestAttackConfig:
    def test_defaults_match_protocol(self):
        battery = attacks.evaluation_attacks()
        assert battery["pgd"].steps == 20 and battery["pgd"].step_size == 0.001
        assert battery["cw"].steps == 10 and battery["cw"].step_size == 0.001
        for cfg in battery.values():
            assert cfg.epsilon == pytest.approx(5.0 / 255.0)

    def test_invalid_rejected(self):
        with pytest.raises(ConfigurationError):
            attacks.AttackConfig(kind="pgd", epsilon=-0.1)
        with pytest.raises(ConfigurationError):
            attacks.AttackConfig(kind="pgd", steps=0)
        with pytest.raises(ConfigurationError):
            attacks.AttackConfig(kind="warp")


class TestFgsm:
    def test_pixel_arithmetic(self):
        # pixels at 0.99 with any gradient sign stay inside [0, 1]
        x = np.full((1, 1, 8, 8), 0.99)
        model = tiny_model()
        adv = attacks.fgsm(model, x, np.array([0]), EPS)
        moved = np.abs(adv - x)
        assert np.all(adv <= 1.0)
        assert np.all(moved <= EPS + 1e-12)
        # pixels pushed up hit the range clip exactly
        pushed_up = adv > x
        if pushed_up.any():
            assert np.all(adv[pushed_up] == 1.0)

    def test_zero_gradient_leaves_pixel(self, rng):
        model = tiny_model()
        for p in model.params.values():
            p.data[:] = 0.0  # constant logits -> zero input gradient everywhere
        x = rng.uniform(0.3, 0.7, size=(2, 1, 8, 8))
        adv = attacks.fgsm(model, x, np.array([0, 1]), EPS)
        np.testing.assert_array_equal(adv, x)

    def test_equals_single_step_pgd_bitwise(self, rng):
        model = tiny_model(seed=7)
        x = rng.uniform(0, 1, size=(3, 1, 8, 8))
        y = np.array([0, 1, 0])
        via_fgsm = attacks.fgsm(model, x, y, EPS)
        cfg = attacks.AttackConfig(kind="pgd", epsilon=EPS, steps=1, step_size=EPS)
        via_pgd = attacks.pgd(model, x, y, cfg).final
        np.testing.assert_array_equal(via_fgsm, via_pgd)


class TestPgd:
    def test_trajectory_layout(self, rng):
        model = tiny_model()
        x = rng.uniform(0, 1, size=(2, 1, 8, 8))
        y = np.array([0, 1])
        cfg = attacks.AttackConfig(kind="pgd", epsilon=EPS, steps=10, step_size=0.005)
        traj = attacks.pgd(model, x, y, cfg)
        assert len(traj.instances) == 11
        np.testing.assert_array_equal(traj.instances[0], x)
        assert traj.losses.shape == (11, 2)

    def test_every_instance_in_budget(self, rng):
        model = tiny_model(seed=2)
        x = rng.uniform(0, 1, size=(2, 1, 8, 8))
        y = np.array([1, 0])
        cfg = attacks.AttackConfig(kind="pgd", epsilon=EPS, steps=8, step_size=0.01)
        traj = attacks.pgd(model, x, y, cfg)
        for inst in traj.instances:
            assert np.max(np.abs(inst - x)) <= EPS + 1e-9
            assert inst.min() >= 0.0 and inst.max() <= 1.0

    def test_deterministic(self, rng):
        model = tiny_model()
        x = rng.uniform(0, 1, size=(2, 1, 8, 8))
        y = np.array([0, 1])
        cfg = attacks.AttackConfig(kind="pgd", epsilon=EPS, steps=5, step_size=0.01)
        a = attacks.pgd(model, x, y, cfg).final
        b = attacks.pgd(model, x, y, cfg).final
        np.testing.assert_array_equal(a, b)

    def test_parameters_untouched(self, rng):
        model = tiny_model()
        before = {k: v.data.copy() for k, v in model.params.items()}
        cfg = attacks.AttackConfig(kind="pgd", epsilon=EPS, steps=3, step_size=0.01)
        attacks.pgd(model, rng.uniform(0, 1, size=(2, 1, 8, 8)), np.array([0, 1]), cfg)
        for k, v in model.params.items():
            np.testing.assert_array_equal(v.data, before[k])
            assert v.grad is None


class TestCwMargin:
    def test_losing_margin_clamps_at_zero(self):
        z = T.Tensor(np.array([[2.0, 3.0]]))
        assert attacks.cw_margin(z, np.array([0]), kappa=0.0).item() == 0.0

    def test_winning_margin(self):
        z = T.Tensor(np.array([[3.0, 2.0]]))
        assert attacks.cw_margin(z, np.array([0]), kappa=0.0).item() == 1.0

    def test_kappa_floor(self):
        z = T.Tensor(np.array([[1.0, 4.0]]))
        assert attacks.cw_margin(z, np.array([0]), kappa=2.0).item() == -2.0

    def test_multiclass_best_other(self):
        z = T.Tensor(np.array([[5.0, 1.0, 4.0]]))
        assert attacks.cw_margin(z, np.array([0]), kappa=0.0).item() == 1.0


class TestCwLinf:
    def test_budget_and_range(self, rng):
        model = tiny_model(seed=4)
        x = rng.uniform(0, 1, size=(3, 1, 8, 8))
        y = np.array([0, 1, 1])
        cfg = attacks.AttackConfig(kind="cw", epsilon=EPS, steps=10, step_size=0.005)
        adv = attacks.cw_linf(model, x, y, cfg)
        assert np.max(np.abs(adv - x)) <= EPS + 1e-9
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_margin_decreases(self, rng):
        model = tiny_model(seed=4)
        x = rng.uniform(0.2, 0.8, size=(8, 1, 8, 8))
        y = np.argmax(nn.forward(model, T.Tensor(x)).data, axis=1)  # attack own preds
        cfg = attacks.AttackConfig(kind="cw", epsilon=0.1, steps=10, step_size=0.02)
        adv = attacks.cw_linf(model, x, y, cfg)
        before = attacks.cw_margin(nn.forward(model, T.Tensor(x)), y, 0.0).item()
        after = attacks.cw_margin(nn.forward(model, T.Tensor(adv)), y, 0.0).item()
        assert after < before


class TestBudgetSweep:
    def test_budget_invariant_over_random_cases(self, rng):
        # many small random models and inputs across all three attacks
        for trial in range(12):
            model = tiny_model(seed=trial)
            x = rng.uniform(0, 1, size=(4, 1, 8, 8))
            y = rng.integers(0, 2, size=4)
            for cfg in (attacks.AttackConfig(kind="fgsm", epsilon=EPS, steps=1,
                                             step_size=EPS),
                        attacks.AttackConfig(kind="pgd", epsilon=EPS, steps=4,
                                             step_size=0.01),
                        attacks.AttackConfig(kind="cw", epsilon=EPS, steps=4,
                                             step_size=0.01)):
                adv = attacks.run_attack(model, x, y, cfg)
                assert np.max(np.abs(adv - x)) <= EPS + 1e-9
                assert adv.min() >= 0.0 and adv.max() <= 1.0


class TestArtifacts:
    def test_grid_dump(self, tmp_path, rng):
        clean = rng.uniform(0, 1, size=(4, 1, 8, 8))
        adv = np.clip(clean + rng.uniform(-EPS, EPS, size=clean.shape), 0, 1)
        png = tmp_path / "grid.png"
        manifest = tmp_path / "grid.json"
        attacks.save_adversarial_grid(clean, adv, "pgd", EPS, png, manifest)
        assert png.exists() and manifest.exists()
        import json
        meta = json.loads(manifest.read_text())
        assert meta["attack"] == "pgd" and meta["count"] == 4
        assert meta["linf"] <= EPS + 1e-9

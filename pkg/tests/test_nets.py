"""Residual network construction, hooks, perturbation plumbing."""

import numpy as np
import pytest

from ifmatch import featperturb as fp
from ifmatch import nets
from ifmatch import tensor as T
from ifmatch.tensor import Tensor


@pytest.fixture
def spec3():
    return nets.ModelSpec(stage_widths=(3, 4, 5), blocks_per_stage=1,
                          num_classes=10, input_shape=(1, 12, 12))


@pytest.fixture
def small_model():
    spec = nets.ModelSpec(stage_widths=(3, 4), blocks_per_stage=1,
                          num_classes=3, input_shape=(1, 8, 8))
    return nets.build(spec, seed=5)


class TestBuild:
    def test_hook_point_counts(self, spec3):
        model = nets.build(spec3, seed=0)
        hooks = model.hook_points()
        a_hooks = [h for h in hooks if h.position == "A"]
        b_hooks = [h for h in hooks if h.position == "B"]
        assert len(a_hooks) == 3
        assert len(b_hooks) == 6

    def test_same_seed_bitwise_identical(self, spec3):
        m1 = nets.build(spec3, seed=9)
        m2 = nets.build(spec3, seed=9)
        for (n1, p1), (n2, p2) in zip(m1.param_items(), m2.param_items()):
            assert n1 == n2
            assert np.array_equal(p1.data, p2.data)

    def test_different_seed_differs(self, spec3):
        m1 = nets.build(spec3, seed=1)
        m2 = nets.build(spec3, seed=2)
        assert not np.array_equal(m1.params["stem.w"].data, m2.params["stem.w"].data)

    def test_logit_shape(self, spec3):
        model = nets.build(spec3, seed=0)
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (4, 1, 12, 12)))
        assert nets.forward(model, x).data.shape == (4, 10)

    def test_zero_blocks_rejected(self):
        with pytest.raises(ValueError):
            nets.ModelSpec(stage_widths=(), blocks_per_stage=1, num_classes=4,
                           input_shape=(1, 8, 8)).validate()

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            nets.ModelSpec(stage_widths=(4,), blocks_per_stage=1, num_classes=1,
                           input_shape=(1, 8, 8)).validate()

    def test_feature_shapes_follow_downsampling(self, spec3):
        model = nets.build(spec3, seed=0)
        assert model.feature_shape_at(0) == (3, 12, 12)
        assert model.feature_shape_at(1) == (4, 6, 6)
        assert model.feature_shape_at(2) == (5, 3, 3)


class TestForwardHooks:
    def test_no_hook_matches_plain(self, small_model):
        x = Tensor(np.random.default_rng(1).uniform(0, 1, (2, 1, 8, 8)))
        a = nets.forward(small_model, x).data
        b = nets.forward(small_model, x, hook=None).data
        assert np.array_equal(a, b)

    def test_all_false_mask_matches_plain(self, small_model):
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(0, 1, (3, 1, 8, 8)))
        draw = fp.sample_draw({"channel_drop"}, small_model.feature_shape_at(0), "strong", rng)
        plain = nets.forward(small_model, x).data
        hooked = nets.forward(small_model, x, hook=(nets.HookPoint(0, "A"), draw),
                              sample_mask=np.zeros(3, dtype=bool)).data
        assert np.array_equal(plain, hooked)

    def test_identity_draw_matches_plain(self, small_model):
        x = Tensor(np.random.default_rng(3).uniform(0, 1, (2, 1, 8, 8)))
        draw = fp.PerturbDraw("translate", "strong", small_model.feature_shape_at(0),
                              direction="left", length=0)
        plain = nets.forward(small_model, x).data
        hooked = nets.forward(small_model, x, hook=(nets.HookPoint(0, "A"), draw)).data
        assert np.array_equal(plain, hooked)

    def test_per_sample_isolation(self, small_model):
        rng = np.random.default_rng(4)
        x = Tensor(rng.uniform(0, 1, (4, 1, 8, 8)))
        draw = fp.sample_draw({"spatial_drop"}, small_model.feature_shape_at(1), "weak", rng)
        hook = (nets.HookPoint(1, "B", 2), draw)
        base_mask = np.array([True, False, True, False])
        flipped = base_mask.copy()
        flipped[1] = True
        a = nets.forward(small_model, x, hook=hook, sample_mask=base_mask).data
        b = nets.forward(small_model, x, hook=hook, sample_mask=flipped).data
        assert not np.array_equal(a[1], b[1])
        for i in (0, 2, 3):
            assert np.array_equal(a[i], b[i])

    def test_perturbation_locality_upstream_unchanged(self, small_model):
        # Hook at the last block: logits differ, but a forward stopped at the
        # first block output (its own A hook with an identity draw) does not.
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
        draw = fp.sample_draw({"channel_drop"}, small_model.feature_shape_at(1), "strong", rng)
        hook = (nets.HookPoint(1, "A"), draw)
        captured = {}

        orig = fp.apply

        def capture(feat, d):
            captured.setdefault("pre_hook", []).append(feat.data.copy())
            return orig(feat, d)

        fp.apply = capture
        try:
            nets.forward(small_model, x, hook=hook)
            with_hook = captured["pre_hook"][0]
            captured.clear()
            nets.forward(small_model, x, hook=(nets.HookPoint(1, "A"),
                                               fp.PerturbDraw("translate", "strong",
                                                              small_model.feature_shape_at(1),
                                                              direction="up", length=0)))
            without = captured["pre_hook"][0]
        finally:
            fp.apply = orig
        assert np.array_equal(with_hook, without)

    def test_mask_length_mismatch(self, small_model):
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 1, 8, 8)))
        draw = fp.PerturbDraw("translate", "strong", small_model.feature_shape_at(0),
                              direction="up", length=0)
        with pytest.raises(ValueError, match="mask"):
            nets.forward(small_model, x, hook=(nets.HookPoint(0, "A"), draw),
                         sample_mask=np.array([True]))

    def test_hook_shape_incompatibility(self, small_model):
        rng = np.random.default_rng(0)
        draw = fp.sample_draw({"channel_drop"}, (7, 8, 8), "strong", rng)
        x = Tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
        with pytest.raises(ValueError):
            nets.forward(small_model, x, hook=(nets.HookPoint(0, "A"), draw))

    def test_hook_block_out_of_range(self, small_model):
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 1, 8, 8)))
        draw = fp.PerturbDraw("translate", "strong", (4, 4, 4), direction="up", length=0)
        with pytest.raises(ValueError, match="out of range"):
            nets.forward(small_model, x, hook=(nets.HookPoint(7, "A"), draw))

    def test_forward_deterministic(self, small_model):
        x = Tensor(np.random.default_rng(6).uniform(0, 1, (2, 1, 8, 8)))
        assert np.array_equal(nets.forward(small_model, x).data,
                              nets.forward(small_model, x).data)


class TestGradFlowThroughHooks:
    @pytest.mark.parametrize("position", ["A", "B"])
    def test_grad_check_with_frozen_perturbation(self, small_model, position):
        # generic parameter point: jitter offsets away from relu kinks
        jit = np.random.default_rng(99)
        for p in small_model.parameters():
            p.data = p.data + jit.uniform(0.05, 0.3, p.data.shape) * jit.choice([-1.0, 1.0], p.data.shape)
        rng = np.random.default_rng(17)
        x = rng.uniform(-1, 1, (2, 1, 8, 8))
        onehot = np.zeros((2, 3))
        onehot[0, 1] = onehot[1, 2] = 1.0
        point = nets.HookPoint(0, position, 1 if position == "B" else 0)
        draw = fp.sample_draw({"translate"}, small_model.feature_shape_at(0), "strong", rng)

        def f():
            logits = nets.forward(small_model, Tensor(x), hook=(point, draw))
            return T.tmean(T.cross_entropy_rows(Tensor(onehot), T.softmax(logits)))

        report = T.grad_check(f, small_model.parameters(), tol=1e-5)
        assert report["passed"], report["max_rel_err"]


class TestMlpFallback:
    def test_forward_shapes_and_hooks(self):
        spec = nets.ModelSpec(stage_widths=(6, 5), blocks_per_stage=1,
                              num_classes=3, input_shape=(1, 4, 4), kind="mlp")
        model = nets.build(spec, seed=1)
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 1, 4, 4)))
        assert nets.forward(model, x).data.shape == (2, 3)
        hooks = model.hook_points()
        assert all(h.position == "A" for h in hooks)
        assert len(hooks) == 2

    def test_mlp_channel_drop_hook(self):
        spec = nets.ModelSpec(stage_widths=(6,), blocks_per_stage=1,
                              num_classes=3, input_shape=(1, 4, 4), kind="mlp")
        model = nets.build(spec, seed=1)
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(0, 1, (2, 1, 4, 4)))
        draw = fp.sample_draw({"channel_drop"}, model.feature_shape_at(0), "weak", rng)
        out = nets.forward(model, x, hook=(nets.HookPoint(0, "A"), draw))
        assert out.data.shape == (2, 3)

    def test_mlp_rejects_b_hooks(self):
        spec = nets.ModelSpec(stage_widths=(6,), blocks_per_stage=1,
                              num_classes=3, input_shape=(1, 4, 4), kind="mlp")
        model = nets.build(spec, seed=1)
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 1, 4, 4)))
        draw = fp.PerturbDraw("translate", "weak", (6, 1, 1), direction="up", length=0)
        with pytest.raises(ValueError, match="position-A"):
            nets.forward(model, x, hook=(nets.HookPoint(0, "B", 1), draw))

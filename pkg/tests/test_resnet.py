import numpy as np
import pytest

from voxcam import ModelSpec, Tensor, build_model, spec_from_state
from voxcam.errors import InvalidSpec, MissingTensor, UnknownLayer
from voxcam.resnet import FREEZE_POLICIES, apply_freeze_policy

import oracles


def _names(depth, base):
    m = build_model(ModelSpec(depth=depth, base_width=base), seed=0)
    return set(m.state_dict())


class TestNamingContract:
    def test_depth18_tensor_names(self):
        names = _names(18, 4)
        assert "stem.conv.weight" in names
        assert "stem.bn.weight" in names and "stem.bn.running_var" in names
        assert "stage1.block1.conv1.weight" in names
        assert "stage4.block2.bn2.bias" in names
        assert "head.weight" in names and "head.bias" in names
        # basic blocks: two convs, no third, downsample only on stride stages
        assert not any(".conv3." in n for n in names)
        assert "stage2.block1.down.conv.weight" in names
        assert "stage1.block1.down.conv.weight" not in names
        assert "stage2.block2.down.conv.weight" not in names

    def test_depth50_has_bottleneck_and_stage1_projection(self):
        names = _names(50, 4)
        assert "stage1.block1.conv3.weight" in names
        # channel expansion forces a projection even at stride 1
        assert "stage1.block1.down.conv.weight" in names

    @pytest.mark.parametrize("depth,blocks", [(18, (2, 2, 2, 2)), (34, (3, 4, 6, 3)), (50, (3, 4, 6, 3))])
    def test_block_counts(self, depth, blocks):
        names = _names(depth, 4)
        for si, nb in enumerate(blocks, start=1):
            found = {n.split(".")[1] for n in names if n.startswith(f"stage{si}.")}
            assert found == {f"block{b}" for b in range(1, nb + 1)}

    def test_parameter_shapes_depth18(self):
        m = build_model(ModelSpec(depth=18, base_width=4, in_channels=1, num_classes=2), seed=0)
        st = m.state_dict()
        assert st["stem.conv.weight"].shape == (4, 1, 7, 7, 7)
        assert st["stage1.block1.conv1.weight"].shape == (4, 4, 3, 3, 3)
        assert st["stage2.block1.conv1.weight"].shape == (8, 4, 3, 3, 3)
        assert st["stage2.block1.down.conv.weight"].shape == (8, 4, 1, 1, 1)
        assert st["stage4.block1.conv2.weight"].shape == (32, 32, 3, 3, 3)
        assert st["head.weight"].shape == (2, 32)

    def test_depth50_head_width_uses_expansion(self):
        m = build_model(ModelSpec(depth=50, base_width=64), seed=0)
        assert m.state_dict()["head.weight"].shape == (2, 2048)

    def test_every_tensor_float32(self):
        for arr in build_model(ModelSpec(depth=18, base_width=4), seed=3).state_dict().values():
            assert arr.dtype == np.float32


class TestForward:
    @pytest.mark.parametrize(
        "extent,stage4_tail",
        [(16, (1, 1, 1)), (32, (2, 1, 1)), (64, (4, 2, 2))],
    )
    def test_stage4_extents(self, make_model, extent, stage4_tail):
        m = make_model(stats_seed=5)
        x = Tensor(np.zeros((1, 1, extent, extent, extent), np.float32))
        logits, acts = m.forward_capturing(x, "stage4")
        assert logits.shape == (1, 2)
        assert acts.shape == (1, 32) + stage4_tail

    def test_matches_float64_twin(self, make_model, rng):
        for depth in (18, 34, 50):
            m = make_model(depth=depth, stats_seed=21)
            x = rng.normal(0, 1, (2, 1, 16, 16, 16)).astype(np.float32)
            got = m.forward(Tensor(x)).data.astype(np.float64)
            want, _ = oracles.twin_forward(m.state_dict(), depth, x.astype(np.float64))
            scale = max(1.0, float(np.abs(want).max()))
            assert np.abs(got - want).max() / scale < 1e-5

    def test_capture_then_resume_splices(self, make_model, rng):
        m = make_model(stats_seed=8)
        x = Tensor(rng.normal(0, 1, (1, 1, 16, 16, 16)).astype(np.float32))
        whole = m.forward(x)
        logits, acts = m.forward_capturing(x, "stage3")
        resumed = m.forward_from("stage3", acts)
        assert np.array_equal(whole.data, logits.data)
        assert np.array_equal(whole.data, resumed.data)

    def test_unknown_layer_rejected(self, make_model):
        m = make_model()
        x = Tensor(np.zeros((1, 1, 16, 16, 16), np.float32))
        with pytest.raises(UnknownLayer):
            m.forward_capturing(x, "stage9")

    def test_init_is_seed_deterministic(self):
        a = build_model(ModelSpec(depth=18, base_width=4), seed=7).state_dict()
        b = build_model(ModelSpec(depth=18, base_width=4), seed=7).state_dict()
        c = build_model(ModelSpec(depth=18, base_width=4), seed=8).state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert any(a[k].tobytes() != c[k].tobytes() for k in a)

    def test_forward_is_deterministic(self, make_model, rng):
        m = make_model(stats_seed=2)
        x = Tensor(rng.normal(0, 1, (1, 1, 16, 16, 16)).astype(np.float32))
        assert m.forward(x).data.tobytes() == m.forward(x).data.tobytes()


class TestStateDict:
    def test_round_trip_bitwise(self, make_model):
        src = make_model(seed=4, stats_seed=9)
        dst = make_model(seed=5)
        dst.load_state_dict(src.state_dict())
        out = dst.state_dict()
        for k, v in src.state_dict().items():
            assert out[k].tobytes() == v.tobytes()

    def test_ignored_extras_are_returned(self, make_model):
        m = make_model()
        st = m.state_dict()
        st["bogus.weight"] = np.zeros(1, np.float32)
        assert m.load_state_dict(st) == ["bogus.weight"]

    def test_missing_tensor_rejected(self, make_model):
        m = make_model()
        st = m.state_dict()
        del st["head.bias"]
        with pytest.raises(MissingTensor):
            m.load_state_dict(st)

    @pytest.mark.parametrize("depth", [18, 34, 50])
    def test_spec_recovered_from_state(self, depth):
        spec = ModelSpec(depth=depth, base_width=4, in_channels=3, num_classes=5)
        got = spec_from_state(build_model(spec, seed=0).state_dict())
        assert got == spec

    def test_spec_from_state_needs_stem(self):
        with pytest.raises(MissingTensor):
            spec_from_state({"head.weight": np.zeros((2, 8), np.float32)})


class TestFreezePolicy:
    def test_policy_names(self):
        assert FREEZE_POLICIES == ("none", "final_stage_and_head")

    def test_unknown_policy_rejected(self, make_model):
        with pytest.raises(InvalidSpec):
            apply_freeze_policy(make_model(), "head_only")

    def test_final_stage_and_head_flags(self, make_model):
        m = make_model()
        apply_freeze_policy(m, "final_stage_and_head")
        for name, t in m.parameters().items():
            assert t.requires_grad == name.startswith(("stage4.", "head."))
        for name, bn in m.batchnorms().items():
            assert bn.frozen == (not name.startswith("stage4."))

    def test_none_unfreezes_everything(self, make_model):
        m = make_model()
        apply_freeze_policy(m, "final_stage_and_head")
        apply_freeze_policy(m, "none")
        assert all(t.requires_grad for t in m.parameters().values())
        assert not any(bn.frozen for bn in m.batchnorms().values())


class TestSpecValidation:
    def test_bad_depth(self):
        with pytest.raises(InvalidSpec):
            ModelSpec(depth=20)

    def test_bad_width_and_classes(self):
        with pytest.raises(InvalidSpec):
            ModelSpec(base_width=0)
        with pytest.raises(InvalidSpec):
            ModelSpec(num_classes=1)

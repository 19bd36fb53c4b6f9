import numpy as np
import pytest

from voxcam import ModelSpec, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_model():
    """Factory for small eval-mode models with randomized running stats,
    so the eval batch-norm path is nontrivial."""

    def _make(depth=18, base_width=4, seed=11, stats_seed=None, classes=2):
        m = build_model(
            ModelSpec(depth=depth, base_width=base_width, in_channels=1, num_classes=classes),
            seed=seed,
        )
        if stats_seed is not None:
            r = np.random.default_rng(stats_seed)
            st = m.state_dict()
            for k in st:
                if k.endswith("running_mean"):
                    st[k] = r.normal(0.0, 0.3, st[k].shape).astype(np.float32)
                elif k.endswith("running_var"):
                    st[k] = r.uniform(0.5, 2.0, st[k].shape).astype(np.float32)
            m.load_state_dict(st)
        m.eval()
        return m

    return _make

import hashlib
from pathlib import Path

import numpy as np
import pytest

from voxcam import PhantomSpec, generate_cohort, generate_phantom, read_manifest
from voxcam.errors import InvalidSpec

_AXES = (0.40, 0.38, 0.36)


def _rho(extent):
    c = (extent - 1) / 2.0
    grid = np.indices((extent, extent, extent), dtype=np.float64)
    axes = [f * extent for f in _AXES]
    return np.sqrt(sum(((grid[i] - c) / axes[i]) ** 2 for i in range(3)))


class TestGeneratePhantom:
    def test_bitwise_deterministic(self):
        spec = PhantomSpec(extent=24, seed=7)
        v1, m1 = generate_phantom(spec, lesion=True)
        v2, m2 = generate_phantom(spec, lesion=True)
        assert v1.data.tobytes() == v2.data.tobytes()
        assert m1.values.data.tobytes() == m2.values.data.tobytes()

    def test_seed_changes_output(self):
        a, _ = generate_phantom(PhantomSpec(extent=24, seed=1), lesion=True)
        b, _ = generate_phantom(PhantomSpec(extent=24, seed=2), lesion=True)
        assert a.data.tobytes() != b.data.tobytes()

    def test_control_has_empty_mask(self):
        _, mask = generate_phantom(PhantomSpec(extent=24, seed=3), lesion=False)
        assert not mask.values.data.any()

    def test_lesion_mask_nonempty_and_inside_head(self):
        spec = PhantomSpec(extent=32, seed=5)
        _, mask = generate_phantom(spec, lesion=True)
        sel = mask.values.data > 0.5
        assert sel.any()
        assert _rho(32)[sel].max() <= 1.0

    def test_lesion_brighter_than_control_sphere(self):
        # same-radius sphere at the point reflection of the lesion center
        # through the head center sits at the same shell depth
        spec = PhantomSpec(extent=32, seed=11)
        vol, mask = generate_phantom(spec, lesion=True)
        sel = mask.values.data > 0.5
        grid = np.indices((32, 32, 32), dtype=np.float64)
        center = np.array([grid[i][sel].mean() for i in range(3)])
        mirror = (32 - 1) - center
        d2 = sum((grid[i] - mirror[i]) ** 2 for i in range(3))
        r2 = (3 * sel.sum() / (4 * np.pi)) ** (2 / 3)
        control = d2 <= r2
        assert vol.data[sel].mean() > vol.data[control].mean()

    @pytest.mark.parametrize("seed", range(8))
    def test_easy_tier_margin(self, seed):
        spec = PhantomSpec(extent=32, seed=seed)
        vol, mask = generate_phantom(spec, lesion=True)
        sel = mask.values.data > 0.5
        rho = _rho(32)
        shell = (rho > 0.62) & (rho <= 1.0) & ~sel
        margin = vol.data[sel].mean() - vol.data[shell].mean()
        assert margin >= 3 * spec.noise_sigma

    def test_subtle_tier_still_separates_in_expectation(self):
        spec = PhantomSpec(extent=32, lesion_contrast=0.15, seed=4)
        vol, mask = generate_phantom(spec, lesion=True)
        sel = mask.values.data > 0.5
        assert vol.data[sel].mean() > vol.data[~sel].mean()

    def test_zero_noise_head_intensities(self):
        spec = PhantomSpec(extent=32, noise_sigma=0.0, seed=0)
        vol, _ = generate_phantom(spec, lesion=False)
        rho = _rho(32)
        interior = rho <= 0.5
        outside = rho > 1.05
        assert abs(vol.data[interior].mean() - 0.6) < 0.05
        assert np.all(vol.data[outside] == 0.0)

    def test_spacing_is_isotropic_unit(self):
        vol, mask = generate_phantom(PhantomSpec(extent=24, seed=0), lesion=True)
        assert vol.spacing == (1.0, 1.0, 1.0)
        assert mask.values.spacing == (1.0, 1.0, 1.0)


class TestPhantomSpecValidation:
    def test_defaults_are_valid(self):
        spec = PhantomSpec()
        assert spec.extent == 64
        assert spec.lesion_contrast == 0.5
        assert spec.radius_range == (3.0, 6.0)

    def test_small_extent_scales_radius_down(self):
        assert PhantomSpec(extent=16).radius_range == (1.5, 1.5)

    def test_extent_too_small(self):
        with pytest.raises(InvalidSpec):
            PhantomSpec(extent=15)

    def test_negative_contrast(self):
        with pytest.raises(InvalidSpec):
            PhantomSpec(lesion_contrast=-0.1)

    def test_negative_noise(self):
        with pytest.raises(InvalidSpec):
            PhantomSpec(noise_sigma=-1.0)

    def test_radius_too_large_for_extent(self):
        with pytest.raises(InvalidSpec):
            PhantomSpec(extent=16, lesion_radius=(2.5, 3.0))

    def test_radius_range_inverted(self):
        with pytest.raises(InvalidSpec):
            PhantomSpec(lesion_radius=(5.0, 4.0))

    def test_radius_nonpositive(self):
        with pytest.raises(InvalidSpec):
            PhantomSpec(lesion_radius=(0.0, 4.0))


class TestGenerateCohort:
    def test_layout_and_manifest(self, tmp_path):
        rows = generate_cohort(PhantomSpec(extent=16, seed=0), 5, tmp_path)
        assert len(rows) == 10
        assert [r.subject_id for r in rows[:5]] == [f"p{i:03d}" for i in range(5)]
        assert [r.subject_id for r in rows[5:]] == [f"c{i:03d}" for i in range(5)]
        assert all(r.label == 1 and r.mask for r in rows[:5])
        assert all(r.label == 0 and r.mask is None for r in rows[5:])
        images = sorted(p.name for p in tmp_path.glob("*.nii"))
        assert len(images) == 15  # 10 scans + 5 masks
        assert read_manifest(tmp_path / "manifest.csv") == rows

    def test_rerun_identical_bytes(self, tmp_path):
        def digest(root: Path) -> dict[str, str]:
            return {
                p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(root.iterdir())
            }

        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_cohort(PhantomSpec(extent=16, seed=3), 2, a)
        generate_cohort(PhantomSpec(extent=16, seed=3), 2, b)
        assert digest(a) == digest(b)

    def test_subjects_differ_from_each_other(self, tmp_path):
        generate_cohort(PhantomSpec(extent=16, seed=0), 2, tmp_path)
        first = (tmp_path / "p000.nii").read_bytes()
        second = (tmp_path / "p001.nii").read_bytes()
        assert first != second

    def test_zero_subjects_rejected(self, tmp_path):
        with pytest.raises(InvalidSpec):
            generate_cohort(PhantomSpec(extent=16), 0, tmp_path)

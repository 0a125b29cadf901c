import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcgan.imagecore import luminance
from lcgan.synthdata import (MAX_COVERAGE, MIN_COVERAGE, DomainSpec, _instrument_alpha, default_specs,
                             generate, in_memory, load_domain, render_sample)

SPEC_X, SPEC_Y = default_specs()


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_defaults():
    assert SPEC_X.size == 64 and SPEC_Y.size == 64
    assert SPEC_X.domain == "X" and SPEC_Y.domain == "Y"
    assert SPEC_X.base_rgb == (0.78, 0.71, 0.59)
    assert SPEC_Y.base_rgb == (0.55, 0.22, 0.18)
    assert SPEC_X.instrument_gray == (0.35, 0.55)
    assert SPEC_Y.instrument_gray == (0.6, 0.8) and SPEC_Y.highlight_stripe


def test_spec_roundtrip_through_json():
    for spec in (SPEC_X, SPEC_Y):
        assert DomainSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(domain="Z")
    with pytest.raises(ValueError):
        DomainSpec(instrument_shape="hexagon")


def test_generate_is_byte_deterministic(tmp_path):
    for run in ("a", "b"):
        generate(SPEC_X, 5, tmp_path / run)
        generate(SPEC_Y, 5, tmp_path / run)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_generate_layout_and_reload(tmp_path):
    ids = generate(SPEC_Y, 3, tmp_path, start=10)
    assert ids == ["Y_00010", "Y_00011", "Y_00012"]
    data = load_domain(tmp_path, "Y")
    assert data.images.shape == (3, 64, 64, 3) and data.masks.shape == (3, 64, 64)
    np.testing.assert_array_equal(data.masks[0], render_sample(SPEC_Y, 10).mask)
    assert json.loads((tmp_path / "Y" / "spec.json").read_text()) == SPEC_Y.to_dict()


def test_generate_needs_one_sample(tmp_path):
    with pytest.raises(ValueError):
        generate(SPEC_X, 0, tmp_path)


def test_samples_depend_on_seed_and_index():
    a = render_sample(SPEC_X, 0).image
    assert not np.array_equal(a, render_sample(SPEC_X, 1).image)
    assert not np.array_equal(a, render_sample(DomainSpec(seed=1), 0).image)
    np.testing.assert_array_equal(a, render_sample(SPEC_X, 0).image)


def test_coverage_bounds_over_1000_samples():
    for spec in (SPEC_X, SPEC_Y):
        for i in range(500):
            s = render_sample(spec, i)
            assert MIN_COVERAGE <= s.mask.mean() <= MAX_COVERAGE
            assert s.image.dtype == np.float32 and 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_domain_y_backgrounds_are_darker():
    def background_luma(spec):
        vals = []
        for i in range(200):
            s = render_sample(spec, i)
            vals.append(luminance(s.image)[s.mask == 0].mean())
        return float(np.mean(vals))

    assert background_luma(SPEC_Y) < background_luma(SPEC_X)


def test_trivial_color_classifier_separates_domains():
    def feats(spec, start, n):
        return in_memory(spec, n, start).images.mean(axis=(1, 2))

    fit_x, fit_y = feats(SPEC_X, 0, 25), feats(SPEC_Y, 0, 25)
    # threshold on the mean-RGB projection onto the class-mean difference
    direction = fit_x.mean(axis=0) - fit_y.mean(axis=0)
    threshold = 0.5 * (fit_x.mean(axis=0) + fit_y.mean(axis=0)) @ direction
    test_x, test_y = feats(SPEC_X, 100, 200), feats(SPEC_Y, 100, 200)
    correct = np.sum(test_x @ direction > threshold) + np.sum(test_y @ direction <= threshold)
    assert correct / 400 >= 0.99


@settings(max_examples=40, deadline=None)
@given(y0=st.floats(5, 59), x0=st.floats(5, 59), y1=st.floats(5, 59), x1=st.floats(5, 59),
       radius=st.floats(2, 8), wedge=st.booleans())
def test_full_opacity_pixels_are_in_mask(y0, x0, y1, x1, radius, wedge):
    spec = DomainSpec(instrument_shape="wedge" if wedge else "capsule")
    yy, xx = np.mgrid[0:64, 0:64].astype(np.float64) + 0.5
    alpha, _ = _instrument_alpha(spec, np.array([y0, x0]), np.array([y1, x1]), radius, yy, xx)
    assert alpha.min() >= 0.0 and alpha.max() <= 1.0
    mask = alpha >= 0.5
    assert np.all(mask[alpha == 1.0])

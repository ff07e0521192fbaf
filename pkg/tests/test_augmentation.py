import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metastyle.augmentation import BezierCurve, apply_bezier, build_augmented_domains, sample_bezier
from metastyle.data import Style, make_synthetic_domain
from metastyle.errors import ConfigError, DataError


def test_strength_zero_is_identity(rng):
    for _ in range(20):
        curve = sample_bezier(rng, 0.0)
        np.testing.assert_allclose(curve.evaluate(np.linspace(0, 1, 101)), np.linspace(0, 1, 101), atol=1e-12)


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.booleans())
def test_endpoints_hit_control_values(values, inverted):
    curve = BezierCurve(tuple(values), inverted)
    v = curve.effective_values
    assert curve.evaluate(0.0) == v[0]
    assert curve.evaluate(1.0) == v[3]


def test_seed_determinism():
    a = sample_bezier(np.random.default_rng(5))
    b = sample_bezier(np.random.default_rng(5))
    assert a == b


def test_identity_lookup_error():
    img = np.random.default_rng(0).uniform(size=(32, 32))
    assert np.max(np.abs(apply_bezier(img, BezierCurve()) - img)) < 1e-3


def test_constant_image(rng):
    curve = sample_bezier(rng)
    out = apply_bezier(np.full((8, 8), 0.3), curve)
    assert np.all(out == out[0, 0])
    assert out[0, 0] == pytest.approx(float(curve.evaluate(0.3)), abs=1e-5)


def test_out_of_range_rejected():
    with pytest.raises(DataError):
        apply_bezier(np.array([[1.2]]), BezierCurve())
    with pytest.raises(DataError):
        apply_bezier(np.array([[np.nan]]), BezierCurve())


@settings(max_examples=40)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4).map(sorted), st.integers(0, 2**31 - 1))
def test_monotone_controls_preserve_order(values, seed):
    curve = BezierCurve(tuple(values))
    dense = curve(np.linspace(0, 1, 10_000))
    assert np.all(np.diff(dense) >= -1e-12)
    # brute-force order check on random pixel pairs
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=500), r.uniform(size=500)
    fa, fb = curve(a), curve(b)
    assert np.all((fa <= fb + 1e-12)[a <= b])


def test_output_range(rng):
    for _ in range(50):
        out = apply_bezier(rng.uniform(size=(16, 16)), sample_bezier(rng))
        assert out.min() >= 0 and out.max() <= 1


def test_build_domains():
    src = make_synthetic_domain(Style(), 6, seed=3, size=16)
    doms = build_augmented_domains(src, 1, np.random.default_rng(0))
    assert len(doms) == 1 and len(doms[0]) == len(src)
    doms = build_augmented_domains(src, 3, np.random.default_rng(0))
    assert [d.domain_id for d in doms] == [1, 2, 3]
    for d in doms:
        assert d.masks.tobytes() == src.masks.tobytes()
        assert d.images.shape == src.images.shape
    with pytest.raises(ConfigError):
        build_augmented_domains(src, 0, np.random.default_rng(0))


def test_different_seeds_differ():
    src = make_synthetic_domain(Style(), 10, seed=3, size=16)
    a = build_augmented_domains(src, 1, np.random.default_rng(1))[0]
    b = build_augmented_domains(src, 1, np.random.default_rng(2))[0]
    assert abs(a.images.mean() - b.images.mean()) > 0

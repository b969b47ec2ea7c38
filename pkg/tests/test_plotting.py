import re

import numpy as np
import pytest

from graphmdn.mdn import PoseMixture
from graphmdn.plotting import AZIMUTHS, kernel_opacity, render_sample, rotate_azimuth


def _mixture(rng, pi):
    m = len(pi)
    return PoseMixture(rng.uniform(-0.5, 0.5, (m, 48)), np.ones(m), np.asarray(pi, dtype=float))


def _opacities(svg):
    return [float(v) for v in re.findall(r'stroke="#1f5fa8" stroke-opacity="([0-9.]+)"', svg)]


def test_single_kernel_fully_opaque(skeleton, rng):
    svg = render_sample(skeleton, rng.normal(size=32), _mixture(rng, [1.0]))
    ops = _opacities(svg)
    assert len(ops) == len(skeleton.edges) * len(AZIMUTHS)
    assert set(ops) == {1.0}


def test_low_weight_kernel_nearly_transparent(skeleton, rng):
    assert kernel_opacity(0.01) == pytest.approx(0.0595, rel=1e-12)
    svg = render_sample(skeleton, rng.normal(size=32), _mixture(rng, [0.99, 0.01]))
    assert set(_opacities(svg)) == {0.06, 0.991}  # printed to 3 decimals


def test_opacity_map_endpoints():
    assert kernel_opacity(0.0) == 0.05
    assert kernel_opacity(1.0) == 1.0


def test_svg_is_deterministic(skeleton):
    a = render_sample(skeleton, np.random.default_rng(1).normal(size=32), _mixture(np.random.default_rng(2), [0.3, 0.7]), title="a<b")
    b = render_sample(skeleton, np.random.default_rng(1).normal(size=32), _mixture(np.random.default_rng(2), [0.3, 0.7]), title="a<b")
    assert a == b
    assert "a&lt;b" in a


def test_azimuth_panels_labelled(skeleton, rng):
    svg = render_sample(skeleton, rng.normal(size=32), _mixture(rng, [1.0]), truth=rng.uniform(-1, 1, 48))
    for az in AZIMUTHS:
        assert f"azimuth {az}<" in svg
    assert "stroke-dasharray" in svg


def test_rotate_azimuth():
    p = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(rotate_azimuth(p, 0), [[1.0, 2.0]])
    np.testing.assert_allclose(rotate_azimuth(p, 90), [[3.0, 2.0]], atol=1e-15)

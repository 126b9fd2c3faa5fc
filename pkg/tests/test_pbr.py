import numpy as np
import pytest

from splatskin import autodiff as ad
from splatskin import pbr, shlight
from splatskin.pbr import BRDFParams, ShadePoint, brdf_eval, shade, visibility


def _unit(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_metallic_pinned():
    with pytest.raises(ValueError):
        BRDFParams([0.5, 0.5, 0.5], 0.4, metallic=0.3)


def test_visibility_dc_one():
    coeffs = np.zeros(16)
    coeffs[0] = 1.0 / 0.28209479177387814
    rng = np.random.default_rng(0)
    vals = visibility(coeffs, _unit(rng, (100, 3)))
    assert np.allclose(vals, 1.0, atol=1e-12)


def test_visibility_zero_coeffs():
    rng = np.random.default_rng(1)
    assert np.all(visibility(np.zeros(16), _unit(rng, (50, 3))) == 0.0)


def test_visibility_hemisphere_mask():
    # least-squares fit of the upper-hemisphere indicator over the probe grid
    dirs, omega = shlight.probe_directions()
    y = shlight.sh_basis(dirs)
    target = (dirs[:, 2] > 0).astype(float)
    w = omega[:, None]
    coeffs = np.linalg.lstsq(y * np.sqrt(w), target * np.sqrt(omega),
                             rcond=None)[0]
    assert visibility(coeffs, [0, 0, 1.0]) > 0.8
    assert visibility(coeffs, [0, 0, -1.0]) < 0.2


def test_brdf_pure_diffuse_when_f0_zero():
    rng = np.random.default_rng(2)
    params = BRDFParams([0.8, 0.4, 0.2], 0.3, f0=0.0)
    n = np.array([0.0, 0.0, 1.0])
    for _ in range(20):
        wi = _unit(rng, 3)
        wo = _unit(rng, 3)
        f = brdf_eval(params, n, wi, wo)
        if wi[2] > 0 and wo[2] > 0:
            assert np.array_equal(f, params.c_a / np.pi)
        else:
            assert np.array_equal(f, np.zeros(3))


def test_brdf_reciprocity():
    rng = np.random.default_rng(3)
    params = BRDFParams([0.6, 0.6, 0.6], 0.35)
    for _ in range(50):
        n = _unit(rng, 3)
        wi = _unit(rng, 3)
        wo = _unit(rng, 3)
        ab = brdf_eval(params, n, wi, wo)
        ba = brdf_eval(params, n, wo, wi)
        assert np.max(np.abs(ab - ba)) < 1e-12


def test_brdf_nonnegative_finite():
    rng = np.random.default_rng(4)
    for g in (0.05, 0.3, 0.9):
        params = BRDFParams([1.0, 1.0, 1.0], g)
        n = _unit(rng, (200, 3))
        wi = _unit(rng, (200, 3))
        wo = _unit(rng, (200, 3))
        f = brdf_eval(params, n, wi, wo)
        assert np.all(np.isfinite(f))
        assert np.all(f >= 0)


def test_diffuse_albedo_integral():
    # hemisphere quadrature of f cos(theta) for white albedo, specular off
    dirs, omega = shlight.probe_directions()
    params = BRDFParams([1.0, 1.0, 1.0], 0.5, f0=0.0)
    n = np.array([0.0, 0.0, 1.0])
    f = brdf_eval(params, n, dirs, n)
    total = (f[:, 0] * np.maximum(0.0, dirs[:, 2]) * omega).sum()
    assert abs(total - 1.0) < 0.01


def _full_vis():
    v = np.zeros(16)
    v[0] = 1.0 / 0.28209479177387814
    return v


def test_shade_black_probe():
    probe = shlight.EnvLightProbe.constant([0.0, 0.0, 0.0])
    pt = ShadePoint(np.zeros(3), [0, 0, 1.0], [0, 0, 1.0], _full_vis())
    out = shade(pt, BRDFParams([0.7, 0.7, 0.7], 0.4), probe)
    assert np.array_equal(out, np.zeros(3))


def test_shade_uniform_probe_diffuse_equals_albedo():
    probe = shlight.EnvLightProbe.constant([1.0, 1.0, 1.0])
    c_a = np.array([0.9, 0.45, 0.2])
    rng = np.random.default_rng(5)
    for _ in range(5):
        n = _unit(rng, 3)
        pt = ShadePoint(np.zeros(3), n, n, _full_vis())
        out = shade(pt, BRDFParams(c_a, 0.5, f0=0.0), probe)
        assert np.max(np.abs(out - c_a) / c_a) < 0.01


def test_shade_zero_visibility():
    probe = shlight.EnvLightProbe.constant([3.0, 3.0, 3.0])
    pt = ShadePoint(np.zeros(3), [0, 0, 1.0], [0, 0, 1.0], np.zeros(16))
    out = shade(pt, BRDFParams([1.0, 1.0, 1.0], 0.4), probe)
    assert np.array_equal(out, np.zeros(3))


def test_shade_linear_in_probe():
    rng = np.random.default_rng(6)
    ra = rng.random((32, 64, 3))
    rb = rng.random((32, 64, 3))
    n = _unit(rng, 3)
    pt = ShadePoint(np.zeros(3), n, _unit(rng, 3), _full_vis())
    params = BRDFParams([0.5, 0.8, 0.3], 0.25)
    sa = shade(pt, params, shlight.EnvLightProbe(ra))
    sb = shade(pt, params, shlight.EnvLightProbe(rb))
    sab = shade(pt, params, shlight.EnvLightProbe(ra + rb))
    assert np.max(np.abs(sab - (sa + sb))) < 1e-12


def test_shade_energy_bound_diffuse():
    rng = np.random.default_rng(7)
    rad = rng.random((32, 64, 3)) * 2.0
    probe = shlight.EnvLightProbe(rad)
    for _ in range(10):
        n = _unit(rng, 3)
        pt = ShadePoint(np.zeros(3), n, n, _full_vis())
        out = shade(pt, BRDFParams([1.0, 1.0, 1.0], 0.5, f0=0.0), probe)
        assert np.all(out <= rad.max() * 1.001)


def test_shade_batch_matches_pointwise():
    rng = np.random.default_rng(8)
    probe = shlight.EnvLightProbe(rng.random((32, 64, 3)))
    dirs, omega = probe.directions()
    n = 6
    c_a = rng.random((n, 3))
    gamma = rng.uniform(0.1, 0.9, n)
    vis = rng.standard_normal((n, 16)) * 0.3
    vis[:, 0] += 2.0
    normal = _unit(rng, (n, 3))
    w_o = _unit(rng, (n, 3))
    batch = pbr.shade_batch(c_a, gamma, vis, normal, w_o,
                            probe.radiance.reshape(-1, 3), dirs, omega)
    for i in range(n):
        pt = ShadePoint(np.zeros(3), normal[i], w_o[i], vis[i])
        ref = shade(pt, BRDFParams(c_a[i], gamma[i]), probe)
        if (normal[i] * w_o[i]).sum() <= 0:
            ref = np.zeros(3)  # batch path blacks out camera-backfacing points
        assert np.max(np.abs(batch[i] - ref)) < 1e-12


def test_shade_tape_matches_numpy():
    rng = np.random.default_rng(9)
    probe_rad = rng.random((2048, 3))
    dirs, omega = shlight.probe_directions()
    n = 5
    c_a = rng.random((n, 3))
    gamma = rng.uniform(0.2, 0.8, n)
    vis = rng.standard_normal((n, 16)) * 0.2
    vis[:, 0] += 2.5
    normal = _unit(rng, (n, 3))
    w_o = normal + 0.3 * _unit(rng, (n, 3))
    w_o /= np.linalg.norm(w_o, axis=1, keepdims=True)

    ref = pbr.shade_batch(c_a, gamma, vis, normal, w_o, probe_rad, dirs, omega)

    tape = ad.Tape()
    out = pbr.shade_t(tape.leaf("c_a", c_a), tape.leaf("g", gamma[:, None]),
                      tape.leaf("v", vis), tape.leaf("n", normal),
                      tape.leaf("wo", w_o), tape.leaf("L", probe_rad),
                      dirs, omega)
    assert np.max(np.abs(out.value - ref)) < 1e-12


def test_shade_gradients():
    rng = np.random.default_rng(10)
    # tiny probe keeps the finite-difference sweep fast
    rows, cols = 8, 16
    dirs, omega = shlight.probe_directions(rows, cols)
    probe_rad = rng.random((rows * cols, 3))
    n = 3
    c_a = rng.random((n, 3)) * 0.8 + 0.1
    gamma = rng.uniform(0.3, 0.7, (n, 1))
    vis = rng.standard_normal((n, 16)) * 0.2
    vis[:, 0] += 2.5
    normal = _unit(rng, (n, 3))
    w_o = normal + 0.2 * _unit(rng, (n, 3))
    w_o /= np.linalg.norm(w_o, axis=1, keepdims=True)
    probe_w = rng.standard_normal((n, 3))

    def make(name, base):
        def f(x):
            tape = x.tape
            args = {"c_a": c_a, "g": gamma, "v": vis, "n": normal,
                    "wo": w_o, "L": probe_rad}
            tensors = {k: (x if k == name else tape.leaf(k, v))
                       for k, v in args.items()}
            if name == "n":
                tensors["n"] = ad.normalize(x, axis=1)
            out = pbr.shade_t(tensors["c_a"], tensors["g"], tensors["v"],
                              tensors["n"], tensors["wo"], tensors["L"],
                              dirs, omega)
            return (out * probe_w).sum()
        return f

    assert ad.grad_check(make("c_a", c_a), c_a) <= 1e-4
    assert ad.grad_check(make("g", gamma), gamma) <= 1e-4
    assert ad.grad_check(make("v", vis), vis, coords=range(16)) <= 1e-4
    assert ad.grad_check(make("n", normal), normal) <= 1e-4
    assert ad.grad_check(make("L", probe_rad), probe_rad,
                         coords=range(0, 384, 17)) <= 1e-4

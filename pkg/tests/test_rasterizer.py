import numpy as np
import pytest

from oracles import brute_render, central_diff, rel_err
from uwsplat.raster import Splats, coverage_stats, render, render_backward


def random_splats(rng, n, w, h, dtype=np.float64, scale=(1.0, 4.0)):
    mean = np.column_stack([rng.uniform(-2, w + 2, n), rng.uniform(-2, h + 2, n)])
    sx, sy = rng.uniform(*scale, n), rng.uniform(*scale, n)
    rho = rng.uniform(-0.6, 0.6, n)
    cov = np.column_stack([sx**2, rho * sx * sy, sy**2])
    a, c = cov[:, 0], cov[:, 2]
    lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + cov[:, 1] ** 2)
    return Splats(mean.astype(dtype), cov.astype(dtype), rng.uniform(size=(n, 3)).astype(dtype),
                  rng.uniform(0.2, 0.95, n).astype(dtype),
                  rng.permutation(np.linspace(1, 5, n)).astype(dtype) + rng.uniform(0, 0.01, n),
                  3 * np.sqrt(lam), np.ones(n, bool))


def test_single_opaque_splat():
    sp = Splats(np.array([[4.5, 4.5]]), np.array([[4.0, 0, 4.0]]), np.array([[0.2, 0.6, 1.0]]),
                np.array([1.0]), np.array([5.0]), np.array([6.0]), np.array([True]))
    out = render(sp, 9, 9)
    assert np.allclose(out.image[4, 4], 0.99 * np.array([0.2, 0.6, 1.0]))
    assert np.isclose(out.depth[4, 4], 4.95)


def test_two_coincident_half_alpha():
    sp = Splats(np.array([[2.5, 2.5]] * 2), np.array([[1e4, 0, 1e4]] * 2),
                np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([0.5, 0.5]), np.array([1.0, 2.0]),
                np.array([300.0, 300.0]), np.array([True, True]))
    out = render(sp, 5, 5)
    c = out.image[2, 2]
    assert np.allclose(c, [0.5, 0.25, 0], atol=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    sp = random_splats(rng, 10, 8, 8)
    bg = rng.uniform(size=3)
    out = render(sp, 8, 8, bg, tile=4)
    img, dmap, T, w = brute_render(sp.mean2d, sp.cov2d, sp.color, sp.opacity, sp.depth,
                                   sp.visible, 8, 8, bg)
    assert np.abs(out.image - img).max() < 1e-6
    assert np.abs(out.depth - dmap).max() < 1e-6
    assert np.abs(out.final_T - T).max() < 1e-6
    assert np.abs(out.accum_blend_weight - w).max() < 1e-6


def test_weights_plus_transmittance_is_one():
    rng = np.random.default_rng(10)
    sp = random_splats(rng, 60, 32, 32)
    sp.color[:] = 1.0
    out = render(sp, 32, 32, (0.0, 0.0, 0.0))
    # with white splats over black, the image is exactly the summed weight
    assert np.abs(out.image[..., 0] + out.final_T - 1).max() < 1e-6
    assert np.all((out.final_T >= 0) & (out.final_T <= 1))


def test_order_shuffle_invariance():
    rng = np.random.default_rng(11)
    sp = random_splats(rng, 40, 24, 24)
    perm = rng.permutation(40)
    sp2 = Splats(*(np.asarray(getattr(sp, k))[perm] for k in
                   ("mean2d", "cov2d", "color", "opacity", "depth", "radius", "visible")))
    a, b = render(sp, 24, 24), render(sp2, 24, 24)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.covered_pixels[perm], b.covered_pixels)


def test_culled_splat_has_no_stats():
    rng = np.random.default_rng(12)
    sp = random_splats(rng, 5, 16, 16)
    sp.visible[2] = False
    out = render(sp, 16, 16)
    g = render_backward(out, rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16)))
    cov, gn = coverage_stats(out, g)
    assert cov[2] == 0 and gn[2] == 0
    for arr in (g.d_mean2d, g.d_cov2d, g.d_color, g.d_opacity, g.d_depth):
        assert np.all(arr[2] == 0)


def test_covered_pixels_three_by_three_block():
    # centred on a pixel, sigma^2 = 0.35: the diagonal neighbours stay above the
    # weight threshold while pixels two steps away fall outside the 3-sigma cut
    sp = Splats(np.array([[5.5, 5.5]]), np.array([[0.35, 0, 0.35]]), np.ones((1, 3)),
                np.array([0.9]), np.array([1.0]), np.array([3 * np.sqrt(0.35)]), np.array([True]))
    out = render(sp, 10, 10)
    assert out.covered_pixels[0] == 9
    assert np.count_nonzero(out.final_T < 1) == 9


def test_covered_pixels_matches_enumeration():
    rng = np.random.default_rng(13)
    sp = random_splats(rng, 20, 16, 16)
    out = render(sp, 16, 16)
    count = np.zeros(20, int)
    # enumerate per pixel with the brute renderer's rules
    order = np.lexsort((np.arange(20), sp.depth))
    for py in range(16):
        for px in range(16):
            T = 1.0
            for i in order:
                a, b, c = sp.cov2d[i]
                det = a * c - b * b
                dx, dy = sp.mean2d[i, 0] - px - 0.5, sp.mean2d[i, 1] - py - 0.5
                pw = -0.5 * (c * dx * dx + a * dy * dy) / det + b * dx * dy / det
                if pw < -4.5:
                    continue
                al = min(0.99, sp.opacity[i] * np.exp(pw))
                if T * (1 - al) < 1e-4:
                    break
                if al * T > 1e-4:
                    count[i] += 1
                T *= 1 - al
    assert np.array_equal(out.covered_pixels, count)


def test_backward_zero_upstream():
    rng = np.random.default_rng(14)
    sp = random_splats(rng, 8, 16, 16)
    g = render_backward(render(sp, 16, 16), np.zeros((16, 16, 3)), np.zeros((16, 16)))
    for arr in (g.d_mean2d, g.d_cov2d, g.d_color, g.d_opacity, g.d_depth):
        assert np.all(arr == 0)


def test_single_splat_color_grad_closed_form():
    rng = np.random.default_rng(15)
    sp = random_splats(rng, 1, 12, 12)
    sp.mean2d[:] = [[6, 6]]
    out = render(sp, 12, 12)
    up = rng.normal(size=(12, 12, 3))
    g = render_backward(out, up)
    w = 1 - out.final_T  # alpha * T with T = 1 before the only splat
    assert np.allclose(g.d_color[0], np.einsum("hw,hwc->c", w, up))


def cutoff_margin(mean, cov, size):
    """Smallest distance (in exponent units) of any pixel centre to the 3-sigma cut."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    a, b, c = np.asarray(cov, dtype=np.float64)
    det = a * c - b * b
    dx, dy = mean[0] - xs, mean[1] - ys
    pw = -0.5 * (c * dx * dx + a * dy * dy) / det + b * dx * dy / det
    return np.abs(pw + 4.5).min()


def _fd_check(seed, dtype, h, tol, n=15, size=32):
    # alpha is cut to zero at 3 sigma; finite differences are only meaningful
    # when no pixel centre of the perturbed splat sits within reach of that cut
    rng = np.random.default_rng(seed)
    sp = random_splats(rng, n, size, size, dtype, scale=(1.5, 5.0))
    for i in range(n):
        while cutoff_margin(sp.mean2d[i], sp.cov2d[i], size) < 0.01:
            sp.mean2d[i] += rng.uniform(-0.5, 0.5, 2).astype(dtype)
    bg = rng.uniform(size=3)
    up_img = rng.normal(size=(size, size, 3))
    up_d = rng.normal(size=(size, size))
    out = render(sp, size, size, bg)
    g = render_backward(out, up_img, up_d)

    def f():
        o = render(sp, size, size, bg)
        return float(np.sum(o.image * up_img) + np.sum(o.depth * up_d))

    worst = {}
    for name, ana in (("mean2d", g.d_mean2d), ("cov2d", g.d_cov2d), ("color", g.d_color),
                      ("opacity", g.d_opacity), ("depth", g.d_depth)):
        arr = getattr(sp, name)
        x = arr.astype(np.float64)
        setattr(sp, name, x)
        num = central_diff(f, x, h)
        setattr(sp, name, arr)
        worst[name] = rel_err(ana, num)
    assert max(worst.values()) < tol, worst
    return worst


@pytest.mark.parametrize("seed", [0, 1])
def test_backward_fd_64bit(seed):
    _fd_check(seed, np.float64, 1e-6, 1e-6)


def test_backward_fd_32bit():
    _fd_check(2, np.float32, 1e-3, 1e-3)


def test_tile_size_does_not_change_result():
    rng = np.random.default_rng(16)
    sp = random_splats(rng, 30, 40, 24)
    a, b = render(sp, 40, 24, tile=16), render(sp, 40, 24, tile=8)
    assert np.abs(a.image - b.image).max() < 1e-12
    assert np.array_equal(a.covered_pixels, b.covered_pixels)

import numpy as np
import pytest

from gplvm_ais import autodiff as ad
from gplvm_ais import linalg
from gplvm_ais.errors import NonScalarLoss


def _rand_spd(rng, n):
    m = rng.normal(size=(n, n))
    return m @ m.T + n * np.eye(n)


def _fd_check(f, point, h=1e-5, tol=1e-5):
    report = ad.grad_check(f, point, h=h, tol=tol)
    assert report.passed, f"worst rel err {report.max_rel_error:.3e}: " \
                          f"{report.per_leaf}"


class TestPrimitiveGradients:
    """Every primitive against central finite differences on random 3x3."""

    def setup_method(self):
        self.rng = np.random.default_rng(11)
        self.x = self.rng.normal(size=(3, 3))
        self.y = self.rng.normal(size=(3, 3))
        self.pos = np.abs(self.rng.normal(size=(3, 3))) + 0.5

    def test_add_sub_mul_div(self):
        _fd_check(lambda v: ad.sum_(ad.mul(ad.add(v["x"], v["y"]),
                                           ad.sub(v["x"], v["y"]))),
                  {"x": self.x, "y": self.y})
        _fd_check(lambda v: ad.sum_(ad.div(v["x"], v["p"])),
                  {"x": self.x, "p": self.pos})

    def test_matmul_transpose(self):
        _fd_check(lambda v: ad.sum_(ad.matmul(v["x"], ad.transpose(v["y"]))),
                  {"x": self.x, "y": self.y})

    def test_elementwise_unaries(self):
        _fd_check(lambda v: ad.sum_(ad.exp(v["x"])), {"x": self.x})
        _fd_check(lambda v: ad.sum_(ad.log(v["p"])), {"p": self.pos})
        _fd_check(lambda v: ad.sum_(ad.sqrt(v["p"])), {"p": self.pos})
        _fd_check(lambda v: ad.sum_(ad.square(v["x"])), {"x": self.x})
        _fd_check(lambda v: ad.sum_(ad.softplus(v["x"])), {"x": self.x})

    def test_sum_axis_and_cumsum(self):
        _fd_check(lambda v: ad.sum_(ad.square(ad.sum_(v["x"], axis=0))),
                  {"x": self.x})
        _fd_check(lambda v: ad.sum_(ad.square(ad.cumsum(v["c"]))),
                  {"c": self.rng.normal(size=5)})

    def test_scale_clamp(self):
        _fd_check(lambda v: ad.sum_(ad.scale(v["x"], -1.7)), {"x": self.x})
        # clamp inactive everywhere (values >= 0.5), so gradient passes through
        _fd_check(lambda v: ad.sum_(ad.clamp_min(v["p"], 1e-3)),
                  {"p": self.pos})

    def test_cholesky_primitive(self):
        a = _rand_spd(self.rng, 3)

        def f(v):
            sym = ad.scale(ad.add(v["a"], ad.transpose(v["a"])), 0.5)
            return ad.sum_(ad.cholesky(sym))

        _fd_check(f, {"a": a})

    def test_tri_solve_both_sides(self):
        a = _rand_spd(self.rng, 3)
        lower = np.linalg.cholesky(a)
        b = self.rng.normal(size=(3, 2))
        for side in ("lower", "upper"):
            _fd_check(lambda v, s=side: ad.sum_(
                ad.square(ad.tri_solve(ad.mul(v["l"], np.tril(np.ones((3, 3)))),
                                       v["b"], s))),
                      {"l": lower, "b": b})

    def test_solve_batched(self):
        a = np.stack([_rand_spd(self.rng, 3) for _ in range(2)])
        b = self.rng.normal(size=(2, 3, 2))
        _fd_check(lambda v: ad.sum_(ad.square(ad.solve(v["a"], v["b"]))),
                  {"a": a, "b": b})

    def test_inv(self):
        a = _rand_spd(self.rng, 3)
        _fd_check(lambda v: ad.sum_(ad.square(ad.inv(v["a"]))), {"a": a})

    def test_logdet(self):
        a = _rand_spd(self.rng, 3)

        def f(v):
            sym = ad.scale(ad.add(v["a"], ad.transpose(v["a"])), 0.5)
            return ad.logdet(sym)

        _fd_check(f, {"a": a})

    def test_row_ops(self):
        x = self.rng.normal(size=(5, 2))
        _fd_check(lambda v: ad.sum_(ad.square(ad.concat_rows(
            [ad.slice_rows(v["x"], 0, 2), ad.slice_rows(v["x"], 2, 5)]))),
            {"x": x})
        idx = np.array([4, 1, 1, 0])
        _fd_check(lambda v: ad.sum_(ad.square(ad.take_rows(v["x"], idx))),
                  {"x": x})
        _fd_check(lambda v: ad.sum_(ad.square(
            ad.embed_rows(v["y"], np.array([0, 3]), 6))),
            {"y": self.rng.normal(size=(2, 2))})

    def test_diag_parts(self):
        _fd_check(lambda v: ad.sum_(ad.square(ad.diag_part(v["x"]))),
                  {"x": self.x})
        s = self.rng.normal(size=(4, 3, 3))
        _fd_check(lambda v: ad.sum_(ad.square(ad.batch_diag(v["s"]))),
                  {"s": s})

    def test_mvn_quadform(self):
        a = _rand_spd(self.rng, 3)
        lower = np.linalg.cholesky(a)
        r = self.rng.normal(size=(3, 1))
        _fd_check(lambda v: ad.mvn_quadform(
            ad.mul(v["l"], np.tril(np.ones((3, 3)))), v["r"]),
            {"l": lower, "r": r})


class TestBackward:
    def test_sum_gradient_all_ones(self):
        t = ad.Tape()
        x = t.leaf(np.random.default_rng(0).normal(size=(2, 4)))
        g = ad.backward(ad.sum_(x))
        np.testing.assert_array_equal(g[x.index], np.ones((2, 4)))

    def test_half_norm_squared_gradient_is_x(self):
        val = np.random.default_rng(1).normal(size=(3, 3))
        t = ad.Tape()
        x = t.leaf(val)
        g = ad.backward(ad.scale(ad.sum_(ad.square(x)), 0.5))
        np.testing.assert_allclose(g[x.index], val, rtol=1e-12)

    def test_logdet_shift_gradient_is_trace_inverse(self):
        # d/dx logdet(A + x I) at x=0 equals trace(A^-1) = 1.5 for diag(1,2)
        a = np.diag([1.0, 2.0])

        def f(v):
            shifted = ad.add(a, ad.mul(v["x"], np.eye(2)))
            return ad.logdet(shifted)

        t = ad.Tape()
        x = t.leaf(np.zeros(()))
        g = ad.backward(f({"x": x}))[x.index]
        np.testing.assert_allclose(float(g), 1.5, rtol=1e-10)
        fd = (float(ad._val(f({"x": np.array(1e-6)})))
              - float(ad._val(f({"x": np.array(-1e-6)})))) / 2e-6
        np.testing.assert_allclose(float(g), fd, rtol=1e-6)

    def test_logdet_gradient_is_symmetrized_inverse(self):
        rng = np.random.default_rng(5)
        a = _rand_spd(rng, 4)
        t = ad.Tape()
        av = t.leaf(a)
        g = ad.backward(ad.logdet(av))[av.index]
        inv = np.linalg.inv(a)
        np.testing.assert_allclose(g, 0.5 * (inv + inv.T), rtol=1e-9)

    def test_non_scalar_loss_rejected(self):
        t = ad.Tape()
        x = t.leaf(np.ones((2, 2)))
        with pytest.raises(NonScalarLoss):
            ad.backward(ad.square(x))

    def test_untouched_leaf_gets_zeros(self):
        t = ad.Tape()
        x = t.leaf(np.ones(3))
        y = t.leaf(np.ones(2))
        g = ad.backward(ad.sum_(ad.square(x)))
        np.testing.assert_array_equal(g[y.index], np.zeros(2))

    def test_replay_determinism(self):
        rng = np.random.default_rng(8)
        val = rng.normal(size=(4, 4))

        def run():
            t = ad.Tape()
            x = t.leaf(val)
            loss = ad.sum_(ad.square(ad.matmul(ad.exp(ad.scale(x, 0.1)), x)))
            return float(loss.value), ad.backward(loss)[x.index]

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


class TestRoundTrips:
    def test_exp_log_round_trip(self):
        rng = np.random.default_rng(2)
        x = np.abs(rng.normal(size=(3, 3))) + 0.1
        t = ad.Tape()
        v = t.leaf(x)
        out = ad.exp(ad.log(v))
        np.testing.assert_allclose(out.value, x, atol=1e-12)

    def test_additive_identity_and_matmul_identity(self):
        x = np.random.default_rng(3).normal(size=(3, 3))
        t = ad.Tape()
        v = t.leaf(x)
        np.testing.assert_array_equal(ad.add(v, np.zeros((3, 3))).value, x)
        np.testing.assert_array_equal(ad.matmul(np.eye(3), v).value, x)


class TestRecordDispatch:
    def test_spec_primitive_names_accepted(self):
        t = ad.Tape()
        x = t.leaf(np.full((2, 2), 2.0))
        out = ad.record("mul-elementwise", x, x)
        np.testing.assert_array_equal(out.value, np.full((2, 2), 4.0))
        out = ad.record("logdet-via-cholesky", t.leaf(np.eye(3)))
        assert float(out.value) == 0.0

    def test_unknown_primitive_rejected(self):
        with pytest.raises(ValueError):
            ad.record("convolve", None)


class TestGradCheck:
    def test_sum_of_squares_passes(self):
        x = np.random.default_rng(4).normal(size=(3, 2))
        rep = ad.grad_check(lambda v: ad.sum_(ad.square(v["x"])), {"x": x},
                            h=1e-5, tol=1e-6)
        assert rep.passed and rep.max_rel_error <= 1e-6

    def test_mvn_logpdf_wrt_mean_passes(self):
        rng = np.random.default_rng(6)
        a = _rand_spd(rng, 3)
        lower = np.linalg.cholesky(a)
        x = rng.normal(size=(3, 1))

        def f(v):
            resid = ad.sub(x, v["mean"])
            quad = ad.mvn_quadform(lower, resid)
            return ad.scale(ad.add(quad, float(np.log(np.linalg.det(a))
                                               + 3 * np.log(2 * np.pi))), -0.5)

        rep = ad.grad_check(f, {"mean": rng.normal(size=(3, 1))}, tol=1e-5)
        assert rep.passed

    def test_negative_control_sign_flip_fails(self):
        # a deliberately wrong vjp must be caught
        def bad_square(a):
            if not isinstance(a, ad.Var):
                return np.square(a)
            av = a.value

            def vjp(g):
                return (-2.0 * g * av,)   # sign flipped

            return a.tape._append((a.index,), vjp, av * av)

        x = np.random.default_rng(7).normal(size=(2, 2)) + 3.0
        rep = ad.grad_check(lambda v: ad.sum_(bad_square(v["x"])), {"x": x},
                            tol=1e-6)
        assert not rep.passed
        assert "x" in rep.failures

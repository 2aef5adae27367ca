import numpy as np
import pytest

from re2re import diffcore as dc
from re2re.diffcore import ShapeError, Tape
from re2re.losses import (LossConfig, decompose_remixit, re2re_loss, re2re_reg_loss,
                          remixit_loss, supervised_loss)
from re2re.remixer import Permutation, apply, bootstrap_pair, sample_pair
from re2re.signal import SignalBatch

from helpers import central_difference, rel_err


def batch(rng, b=4, t=16):
    return rng.standard_normal((b, t))


def si_sdr_oracle(est, ref, eps=1e-8):
    """Per-element summation of the stabilised SI-SDR for one row."""
    dot = sum(e * r for e, r in zip(est, ref))
    energy = sum(r * r for r in ref)
    alpha = dot / (energy + eps)
    num = sum((alpha * r) ** 2 for r in ref)
    den = sum((alpha * r - e) ** 2 for e, r in zip(est, ref))
    return 10 * np.log10((num + eps) / (den + eps))


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.remixit_metric, cfg.re2re_metric, cfg.beta) == ("neg-si-sdr", "mse", 100.0)

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            LossConfig(beta=-1.0)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            LossConfig(remixit_metric="l1")


class TestSupervised:
    def test_perfect_mse(self):
        rng = np.random.default_rng(0)
        s, n = batch(rng), batch(rng)
        assert supervised_loss(s, n, s, n, "mse").item() == 0.0

    def test_unit_offset(self):
        rng = np.random.default_rng(1)
        s, n = batch(rng), batch(rng)
        assert supervised_loss(s, n + 1.0, s, n, "mse").item() == pytest.approx(1.0, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            supervised_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)))

    @pytest.mark.parametrize("metric", ["mse", "neg-si-sdr"])
    def test_gradient(self, metric):
        rng = np.random.default_rng(2)
        s, n = batch(rng, 3, 10), batch(rng, 3, 10)
        s0, n0 = s + 0.3 * batch(rng, 3, 10), n + 0.3 * batch(rng, 3, 10)
        tape = Tape()
        se, ne = tape.leaf(s0), tape.leaf(n0)
        g = tape.backward(supervised_loss(se, ne, s, n, metric))
        fd_s = central_difference(lambda v: supervised_loss(v, n0, s, n, metric).item(), s0)
        fd_n = central_difference(lambda v: supervised_loss(s0, v, s, n, metric).item(), n0)
        assert rel_err(g[se], fd_s) < 1e-4 and rel_err(g[ne], fd_n) < 1e-4


class TestRemixit:
    def test_exact_targets(self):
        rng = np.random.default_rng(3)
        st, nt = batch(rng), batch(rng)
        p = Permutation((2, 3, 1, 0))
        assert remixit_loss(st, apply(p, nt), st, nt, p, "mse").item() == 0.0

    def test_identity_is_distillation(self):
        rng = np.random.default_rng(4)
        se, ne, st, nt = (batch(rng) for _ in range(4))
        a = remixit_loss(se, ne, st, nt, Permutation.identity(4)).item()
        b = supervised_loss(se, ne, st, nt).item()
        assert a == b

    def test_noise_target_is_permuted(self):
        rng = np.random.default_rng(5)
        st, nt = batch(rng), batch(rng)
        p = Permutation((1, 0, 3, 2))
        assert remixit_loss(st, nt, st, nt, p, "mse").item() > 0.1

    @pytest.mark.parametrize("metric", ["mse", "neg-si-sdr"])
    def test_summation_oracle(self, metric):
        rng = np.random.default_rng(6)
        se, ne, st, nt = (batch(rng, 4, 16) for _ in range(4))
        p = Permutation((3, 0, 1, 2))
        total = 0.0
        for b in range(4):
            target_n = nt[p.map[b]]
            if metric == "mse":
                total += sum((x - y) ** 2 for x, y in zip(se[b], st[b])) / (4 * 16)
                total += sum((x - y) ** 2 for x, y in zip(ne[b], target_n)) / (4 * 16)
            else:
                total -= (si_sdr_oracle(se[b], st[b]) + si_sdr_oracle(ne[b], target_n)) / 4
        value = remixit_loss(se, ne, st, nt, p, metric).item()
        assert abs(value - total) <= 1e-12 * max(1.0, abs(total))


class TestRe2re:
    def test_exact(self):
        x = batch(np.random.default_rng(7))
        assert re2re_loss(x, x).item() == 0.0

    def test_oracle_student(self):
        rng = np.random.default_rng(8)
        st = SignalBatch(batch(rng, 6, 20))
        nt = SignalBatch(batch(rng, 6, 20))
        pair = sample_pair(6, rng, np.random.default_rng(9))
        _, xb = bootstrap_pair(st, nt, pair)
        energy = np.mean(apply(pair.q, nt.data) ** 2)
        assert re2re_loss(st, xb).item() == pytest.approx(energy, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            re2re_loss(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_gradient(self):
        rng = np.random.default_rng(10)
        s0, xb = batch(rng, 3, 8), batch(rng, 3, 8)
        tape = Tape()
        s = tape.leaf(s0)
        g = tape.backward(re2re_loss(s, xb))[s]
        assert rel_err(g, central_difference(lambda v: re2re_loss(v, xb).item(), s0)) < 1e-4


class TestRe2reReg:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.se, self.ne, self.st, self.nt, self.xb = (batch(rng) for _ in range(5))
        self.p = Permutation((1, 2, 3, 0))

    def test_beta_zero(self):
        a = re2re_reg_loss(self.se, self.ne, self.st, self.nt, self.p, self.xb, beta=0.0).item()
        assert a == remixit_loss(self.se, self.ne, self.st, self.nt, self.p).item()

    def test_linearity(self):
        a = re2re_reg_loss(self.se, self.ne, self.st, self.nt, self.p, self.xb, beta=100.0).item()
        b = (remixit_loss(self.se, self.ne, self.st, self.nt, self.p).item()
             + 100.0 * re2re_loss(self.se, self.xb).item())
        assert abs(a - b) <= 1e-12 * abs(b)

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            re2re_reg_loss(self.se, self.ne, self.st, self.nt, self.p, self.xb, beta=-0.1)

    def test_gradient_is_sum(self):
        def grads(fn):
            tape = Tape()
            se, ne = tape.leaf(self.se), tape.leaf(self.ne)
            g = tape.backward(fn(se, ne))
            return g[se], g[ne]

        reg = grads(lambda se, ne: re2re_reg_loss(se, ne, self.st, self.nt, self.p, self.xb, 100.0))
        rmx = grads(lambda se, ne: remixit_loss(se, ne, self.st, self.nt, self.p))
        n2n = grads(lambda se, ne: dc.scale(re2re_loss(se, self.xb), 100.0) + dc.sum(ne * 0.0))
        for r, a, b in zip(reg, rmx, n2n):
            assert np.max(np.abs(r - (a + b))) < 1e-10


class TestDecomposition:
    def test_perfect_teacher(self):
        rng = np.random.default_rng(12)
        s, se = batch(rng), batch(rng)
        rep = decompose_remixit(se, s, s)
        assert rep.total == pytest.approx(rep.student_error_term, rel=1e-14)
        assert rep.cross_term == 0.0 and rep.teacher_error_term == 0.0

    def test_perfect_student(self):
        rng = np.random.default_rng(13)
        s, st = batch(rng), batch(rng)
        rep = decompose_remixit(s, st, s)
        assert rep.total == pytest.approx(rep.teacher_error_term, rel=1e-14)
        assert rep.cross_term == 0.0

    @pytest.mark.parametrize("b, t", [(2, 16), (4, 160), (24, 16)])
    def test_expansion_oracle(self, b, t):
        rng = np.random.default_rng(b * t)
        se, st, s = (batch(rng, b, t) for _ in range(3))
        rep = decompose_remixit(se, st, s)
        direct = np.mean([np.dot(se[i] - st[i], se[i] - st[i]) for i in range(b)])
        es, et = se - s, st - s
        rhs = np.mean([es[i] @ es[i] + et[i] @ et[i] - 2 * et[i] @ es[i] for i in range(b)])
        assert abs(rep.total - direct) < 1e-10 and abs(direct - rhs) < 1e-10
        assert abs(rep.residual) < 1e-10
        assert abs(rep.supervised_form_residual) < 1e-10

    def test_multiple_remixes(self):
        rng = np.random.default_rng(14)
        s, st = batch(rng, 4, 8), batch(rng, 4, 8)
        se = rng.standard_normal((5, 4, 8))
        rep = decompose_remixit(se, st, s)
        assert rep.num_remixes == 5 and abs(rep.residual) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            decompose_remixit(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)))


class TestWienerEquivalence:
    def test_single_gain_student(self):
        # an oracle teacher makes x~ and x-bar share s with independent noise rows
        rng = np.random.default_rng(15)
        b, t = 10, 10_000
        s = rng.standard_normal((b, t))
        n = rng.standard_normal((b, t))
        pair = sample_pair(b, np.random.default_rng(16), np.random.default_rng(17))
        xt, xb = bootstrap_pair(SignalBatch(s), SignalBatch(n), pair)
        # argmin_w mean((w x~ - x-bar)^2) in closed form
        w = np.sum(xt.data * xb.data) / np.sum(xt.data * xt.data)
        assert abs(w - 0.5) / 0.5 < 0.05

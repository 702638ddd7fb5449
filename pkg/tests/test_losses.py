import numpy as np
import pytest

from fedbcs import losses as L
from fedbcs import tensor as T
from fedbcs.errors import ContractError
from fedbcs.server import GlobalPrototypeSet
from fedbcs.tensor import Parameter, Tensor


def contra_oracle(anchor, positives, negatives, tau):
    """Direct unstabilized evaluation of the contrastive ratio."""
    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    pos = [np.exp(cos(anchor, q) / tau) for q in positives]
    neg = [np.exp(cos(anchor, q) / tau) for q in negatives]
    return -np.log(sum(pos) / (sum(pos) + sum(neg)))


class TestDice:
    def test_saturated_prediction(self):
        labels = np.zeros((8, 8), dtype=int)
        labels[2:6, 2:6] = 1
        logits = np.zeros((2, 8, 8))
        logits[1] = np.where(labels == 1, 30.0, -30.0)
        logits[0] = -logits[1]
        assert L.dice_loss(Tensor(logits), labels).item() < 1e-3

    def test_uniform_prediction_on_full_foreground(self):
        # p = 0.5 everywhere and an all-foreground mask: dice = 2(.5A)/(.5A + A)
        labels = np.ones((8, 8), dtype=int)
        loss = L.dice_loss(Tensor(np.zeros((2, 8, 8))), labels).item()
        assert loss == pytest.approx(1.0 / 3.0, abs=1e-5)

    def test_empty_foreground_eps_guard(self):
        labels = np.zeros((8, 8), dtype=int)
        logits = np.zeros((2, 8, 8))
        logits[0] = 30.0
        logits[1] = -30.0
        assert L.dice_loss(Tensor(logits), labels).item() < 1e-6

    def test_batched_pools_overlaps(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 2, 8, 8))
        labels = rng.integers(0, 2, size=(2, 8, 8))
        batched = L.dice_loss(Tensor(logits), labels).item()
        assert 0.0 <= batched <= 1.0

    def test_gradient(self):
        rng = np.random.default_rng(1)
        logits = Parameter("logits", rng.normal(size=(2, 4, 4)))
        labels = rng.integers(0, 2, size=(4, 4))

        def build():
            return L.dice_loss(logits, labels)

        err = T.finite_diff_check(build, [logits], h=1e-5)
        assert err < 1e-3

    def test_three_class_averages_foreground(self):
        labels = np.zeros((4, 4), dtype=int)
        labels[0] = 1
        labels[1] = 2
        logits = np.zeros((3, 4, 4))
        loss = L.dice_loss(Tensor(logits), labels).item()
        assert 0.0 < loss < 1.0


class TestContra:
    def test_symmetric_case_ln2(self):
        v = np.array([1.0, 0.0, 0.0])
        loss = L.contra_loss(Tensor(v), [v.copy(), v.copy()], [v.copy(), v.copy()], 0.4)
        assert abs(loss.item() - np.log(2.0)) < 1e-9

    def test_no_negatives_zero(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=5)
        loss = L.contra_loss(Tensor(a), [rng.normal(size=5)], [], 0.4)
        assert abs(loss.item()) < 1e-12

    def test_empty_positives_rejected(self):
        with pytest.raises(ContractError):
            L.contra_loss(Tensor(np.ones(3)), [], [np.ones(3)], 0.4)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            d = 8
            anchor = rng.normal(size=d)
            pos = [rng.normal(size=d) for _ in range(int(rng.integers(1, 4)))]
            neg = [rng.normal(size=d) for _ in range(int(rng.integers(0, 5)))]
            tau = float(rng.uniform(0.1, 1.0))
            ours = L.contra_loss(Tensor(anchor), pos, neg, tau).item()
            assert abs(ours - contra_oracle(anchor, pos, neg, tau)) < 1e-9

    def test_anchor_scale_invariance(self):
        rng = np.random.default_rng(4)
        anchor = rng.normal(size=6)
        pos = [rng.normal(size=6) for _ in range(2)]
        neg = [rng.normal(size=6) for _ in range(3)]
        l1 = L.contra_loss(Tensor(anchor), pos, neg, 0.4).item()
        l2 = L.contra_loss(Tensor(7.3 * anchor), pos, neg, 0.4).item()
        assert abs(l1 - l2) < 1e-9

    def test_better_positive_lowers_loss(self):
        rng = np.random.default_rng(5)
        anchor = rng.normal(size=6)
        far = rng.normal(size=6)
        neg = [rng.normal(size=6) for _ in range(3)]
        closer = 0.9 * anchor + 0.1 * far
        l_far = L.contra_loss(Tensor(anchor), [far], neg, 0.4).item()
        l_close = L.contra_loss(Tensor(anchor), [closer], neg, 0.4).item()
        assert l_close < l_far

    def test_lipschitz_bound_on_representative_gradient(self):
        # empirical check of the 1/tau bound with unit-norm anchors
        rng = np.random.default_rng(6)
        tau = 0.4
        for trial in range(100):
            d = 32
            anchor = rng.normal(size=d)
            anchor /= np.linalg.norm(anchor)
            rep = Parameter("rep", rng.normal(size=d))
            others = [rng.normal(size=d) for _ in range(int(rng.integers(1, 5)))]
            with T.Tape() as tape:
                loss = L.contra_loss(Tensor(anchor), [rep], others, tau)
            T.backward(tape, loss)
            assert np.linalg.norm(rep.grad) <= 1.0 / tau + 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(7)
        anchor = Parameter("anchor", rng.normal(size=6))
        rep = Parameter("rep", rng.normal(size=6))
        neg = [rng.normal(size=6) for _ in range(2)]

        def build():
            return L.contra_loss(anchor, [rep], neg, 0.4)

        err = T.finite_diff_check(build, [anchor, rep], h=1e-6)
        assert err < 1e-3


class TestConsis:
    def test_zero_at_mean(self):
        rng = np.random.default_rng(8)
        e = rng.normal(size=5)
        loss = L.consis_loss(Tensor(e), Tensor(2 * e), e, 2 * e)
        assert loss.item() == 0.0

    def test_unit_offset(self):
        e = np.zeros(4)
        off = e.copy()
        off[2] = 1.0
        loss = L.consis_loss(Tensor(off), Tensor(e), e, e)
        assert loss.item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        e1, e2 = rng.normal(size=6), rng.normal(size=6)
        m1, m2 = rng.normal(size=6), rng.normal(size=6)
        ref = sum((e1[v] - m1[v]) ** 2 for v in range(6)) \
            + sum((e2[v] - m2[v]) ** 2 for v in range(6))
        ours = L.consis_loss(Tensor(e1), Tensor(e2), m1, m2).item()
        assert abs(ours - ref) < 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(10)
        e1 = Parameter("e1", rng.normal(size=4))
        e2 = Parameter("e2", rng.normal(size=4))
        m1, m2 = rng.normal(size=4), rng.normal(size=4)

        def build():
            return L.consis_loss(e1, e2, m1, m2)

        err = T.finite_diff_check(build, [e1, e2], h=1e-6)
        assert err < 1e-3


class TestTotal:
    def test_lambda_zero_is_dice_only(self):
        dice, contra, consis = Tensor(0.7), Tensor(2.0), Tensor(3.0)
        assert L.total_loss(dice, contra, consis, 0.0).item() == pytest.approx(0.7)

    def test_all_ones(self):
        out = L.total_loss(Tensor(1.0), Tensor(1.0), Tensor(1.0), 1.0)
        assert out.item() == pytest.approx(3.0, abs=1e-12)

    def test_gradient_is_sum_of_term_gradients(self):
        rng = np.random.default_rng(11)
        x = Parameter("x", rng.normal(size=3))
        probe = rng.normal(size=3)

        def dice_term():
            return T.tsum(T.mul(x, Tensor(probe)))

        def contra_term():
            return T.tsum(T.mul(x, x))

        def consis_term():
            return T.tsum(T.exp(T.scale(x, 0.5)))

        lam = 0.7
        x.zero_grad()
        with T.Tape() as tape:
            total = L.total_loss(dice_term(), contra_term(), consis_term(), lam)
        T.backward(tape, total)
        g_total = x.grad.copy()

        grads = []
        for term in (dice_term, contra_term, consis_term):
            x.zero_grad()
            with T.Tape() as tape:
                out = term()
            T.backward(tape, out)
            grads.append(x.grad.copy())
        ref = grads[0] + lam * (grads[1] + grads[2])
        np.testing.assert_allclose(g_total, ref, atol=1e-12)


class TestBatchAlignment:
    def _protos(self, d, rng):
        protos = GlobalPrototypeSet()
        for pw in ("enc", "dec"):
            for k in (0, 1):
                protos.add(pw, k, rng.normal(size=(2, d)))
        return protos

    def test_terms_and_count(self):
        from fedbcs.network import SegNet
        model = SegNet(seed=0)
        rng = np.random.default_rng(12)
        images = rng.uniform(size=(2, 1, 16, 16))
        labels = np.zeros((2, 16, 16), dtype=int)
        labels[:, :, 8:] = 1
        _, taps = model.forward(Tensor(images))
        protos = self._protos(model.config.d_fused, rng)
        contra, consis, count = L.batch_alignment_terms(model, taps, labels, protos, 0.4)
        assert count == 4  # 2 samples x 2 classes
        assert contra.item() > 0.0
        assert consis.item() > 0.0

    def test_no_matching_prototypes_gives_zeros(self):
        from fedbcs.network import SegNet
        model = SegNet(seed=1)
        rng = np.random.default_rng(13)
        images = rng.uniform(size=(1, 1, 16, 16))
        labels = np.zeros((1, 16, 16), dtype=int)
        labels[:, :, 8:] = 1
        _, taps = model.forward(Tensor(images))
        contra, consis, count = L.batch_alignment_terms(
            model, taps, labels, GlobalPrototypeSet(), 0.4)
        assert count == 0
        assert contra.item() == 0.0 and consis.item() == 0.0

import numpy as np
import pytest

from fitrank.tensor_core import Tensor, finite_difference_check, ops
from fitrank.towers import DinAttention, Tower, assemble_user_input, average_pool, din_attention_pool


class ConstantAttention:
    def __init__(self, value=1.0):
        self.value = value

    def __call__(self, items, queries):
        return Tensor(np.full((items.shape[0], 1), self.value, dtype=np.float32))


def seq_and_mask(rng, b=3, length=5, width=4, lengths=(5, 2, 0)):
    seq = rng.normal(size=(b, length, width)).astype(np.float32)
    mask = np.arange(length)[None, :] < np.asarray(lengths)[:, None]
    seq[~mask] = 0.0
    return seq, mask


class TestDinPool:
    def test_constant_weights_give_plain_sum(self):
        rng = np.random.default_rng(0)
        seq, mask = seq_and_mask(rng)
        q = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        out = din_attention_pool(q, Tensor(seq), mask, ConstantAttention()).data
        np.testing.assert_allclose(out, (seq * mask[:, :, None]).sum(1), rtol=1e-6)
        np.testing.assert_array_equal(out[2], np.zeros(4))  # all-masked row

    def test_single_element(self):
        rng = np.random.default_rng(1)
        att = DinAttention(rng, 4, (6, 3))
        seq, mask = seq_and_mask(rng, b=1, lengths=(1,))
        q = Tensor(rng.normal(size=(1, 4)).astype(np.float32))
        att.eval()
        w = att(Tensor(seq[0, :1]), q).data[0, 0]
        out = din_attention_pool(q, Tensor(seq), mask, att).data
        np.testing.assert_allclose(out[0], w * seq[0, 0], rtol=1e-5)

    def test_loop_oracle_and_padding_is_ignored(self):
        rng = np.random.default_rng(2)
        att = DinAttention(rng, 4, (6, 3)).eval()
        seq, mask = seq_and_mask(rng)
        q = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        out = din_attention_pool(q, Tensor(seq), mask, att).data
        garbage = seq.copy()
        garbage[~mask] = 99.0
        np.testing.assert_array_equal(din_attention_pool(q, Tensor(garbage), mask, att).data, out)
        for b in range(3):
            ref = np.zeros(4)
            for j in range(5):
                if mask[b, j]:
                    w = att(Tensor(seq[b, j:j + 1]), Tensor(q.data[b:b + 1])).data[0, 0]
                    ref += w * seq[b, j]
            np.testing.assert_allclose(out[b], ref, rtol=1e-5, atol=1e-6)

    def test_query_shape_checked(self):
        rng = np.random.default_rng(0)
        seq, mask = seq_and_mask(rng)
        with pytest.raises(ValueError):
            din_attention_pool(Tensor(np.zeros((2, 4))), Tensor(seq), mask, ConstantAttention())

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        att = DinAttention(rng, 3, (5, 2))
        for layer in att.hidden:
            layer.dice.alpha.data = rng.normal(0, 0.3, layer.dice.alpha.shape).astype(np.float32)
        att.eval()
        seq, mask = seq_and_mask(rng, width=3, lengths=(5, 2, 1))
        # embedding-sized inputs keep the h=1e-3 stencil inside the smooth regime of Dice
        s = Tensor(0.5 * seq, requires_grad=True)
        q = Tensor(rng.normal(0, 0.5, size=(3, 3)), requires_grad=True)
        w = rng.normal(size=(3, 3))
        f = lambda *_: ops.sum(ops.mul(din_attention_pool(q, s, mask, att), Tensor(w)))  # noqa: E731
        assert finite_difference_check(f, [s, q, *att.parameters()]) < 1e-3


class TestAveragePool:
    def test_examples(self):
        v = np.array([1.0, -2.0], np.float32)
        out = average_pool(Tensor(np.stack([[v, -v], [v, np.zeros(2)]])), np.array([[1, 1], [1, 0]], bool)).data
        np.testing.assert_array_equal(out, [[0, 0], v])

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        seq, mask = seq_and_mask(rng)
        out = average_pool(Tensor(seq), mask).data
        for b in range(3):
            valid = [seq[b, j] for j in range(5) if mask[b, j]]
            ref = np.mean(valid, axis=0) if valid else np.zeros(4)
            np.testing.assert_allclose(out[b], ref, rtol=1e-6, atol=1e-7)


class TestAssemble:
    def test_width_and_order(self):
        prof = Tensor(np.full((2, 16), 1.0, np.float32))
        pooled = Tensor(np.full((2, 32), 2.0, np.float32))
        query = Tensor(np.full((2, 32), 3.0, np.float32))
        e = assemble_user_input([prof], pooled, query).data
        assert e.shape == (2, 80)
        np.testing.assert_array_equal(e[0, :16], 1.0)
        np.testing.assert_array_equal(e[0, 16:48], 2.0)
        np.testing.assert_array_equal(e[0, 48:], 3.0)
        assert assemble_user_input([prof], pooled, None).shape == (2, 48)

    def test_order_sensitive(self):
        rng = np.random.default_rng(0)
        tower = Tower(rng, 8, (6,), batch_norm=False)
        a, b = (Tensor(rng.normal(size=(1, 4)).astype(np.float32)) for _ in range(2))
        x1 = tower(assemble_user_input([a], b, None))[0].data
        x2 = tower(assemble_user_input([b], a, None))[0].data
        assert not np.allclose(x1, x2)


class TestTower:
    def test_zero_input_zero_bias(self):
        tower = Tower(np.random.default_rng(0), 5, (7, 3), heads=2, head_dim=4, batch_norm=False)
        tower.head_bias.data = np.arange(8, dtype=np.float32)
        hl, h, z = tower(Tensor(np.zeros((2, 5), np.float32)))
        np.testing.assert_array_equal(hl.data, 0.0)
        np.testing.assert_array_equal(h.data, 0.0)
        np.testing.assert_array_equal(z.data, np.broadcast_to(np.arange(8).reshape(2, 4), (2, 2, 4)))

    def test_identity_head(self):
        tower = Tower(np.random.default_rng(1), 4, (3,), heads=1, head_dim=3, batch_norm=False)
        tower.head_weight.data = np.eye(3, dtype=np.float32)
        hl, _, z = tower(Tensor(np.random.default_rng(2).normal(size=(5, 4)).astype(np.float32)))
        np.testing.assert_array_equal(z.data[:, 0, :], hl.data)

    def test_heads_loop_oracle(self):
        rng = np.random.default_rng(3)
        tower = Tower(rng, 4, (6,), heads=3, head_dim=2, batch_norm=False)
        tower.head_bias.data = rng.normal(size=6).astype(np.float32)
        hl, h, z = tower(Tensor(rng.normal(size=(2, 4)).astype(np.float32)))
        w, bias = tower.head_weight.data, tower.head_bias.data
        for i in range(3):
            ref = hl.data @ w[2 * i:2 * i + 2].T + bias[2 * i:2 * i + 2]
            np.testing.assert_allclose(z.data[:, i], ref, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(h.data, axis=1), 1.0, rtol=1e-6)

    def test_head_scale(self):
        tower = Tower(np.random.default_rng(0), 32, (128,), heads=2, head_dim=64)
        bound = np.sqrt(6 / 128) / np.sqrt(64)
        assert np.abs(tower.head_weight.data).max() <= bound

    def test_input_width_checked(self):
        tower = Tower(np.random.default_rng(0), 4, (3,))
        with pytest.raises(ValueError):
            tower(Tensor(np.zeros((1, 5))))

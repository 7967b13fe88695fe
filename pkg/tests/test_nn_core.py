import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cdn.nn_core import (
    AxialBlock,
    OptimizerState,
    ShapeError,
    adamw_step,
    add,
    attention,
    binary_cross_entropy_with_logits,
    concat,
    dropout,
    embedding_lookup,
    grad_check,
    layer_norm,
    linear,
    load_checkpoint,
    matmul,
    mean,
    param_store,
    relu,
    save_checkpoint,
    self_attention,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    tanh,
    variance,
)

f64 = torch.float64


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=f64)


class TestOps:
    def test_softmax_sums_to_one(self):
        x = randn(4, 7) * 10
        assert torch.allclose(softmax(x, -1).sum(-1), torch.ones(4, dtype=f64), atol=1e-6)
        assert torch.allclose(softmax(x, 0).sum(0), torch.ones(7, dtype=f64), atol=1e-6)

    def test_layer_norm_moments(self):
        x = randn(5, 16) * 3 + 2
        y = layer_norm(x, torch.ones(16, dtype=f64), torch.zeros(16, dtype=f64))
        assert y.mean(-1).abs().max() < 1e-5
        assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-4

    def test_variance_is_population(self):
        x = torch.tensor([[1.0, 3.0]], dtype=f64)
        assert variance(x, 1).item() == 1.0 and mean(x, 1).item() == 2.0

    def test_dropout(self):
        x = torch.ones(1000, dtype=f64)
        assert torch.equal(dropout(x, 0.5, False), x)
        g = torch.Generator().manual_seed(0)
        y = dropout(x, 0.25, True, g)
        assert set(torch.unique(y).tolist()) <= {0.0, 1 / 0.75}
        a = dropout(x, 0.25, True, torch.Generator().manual_seed(3))
        b = dropout(x, 0.25, True, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)

    def test_shape_errors_name_the_op(self):
        cases = [
            (lambda: matmul(randn(2, 3), randn(4, 5)), "matmul"),
            (lambda: add(randn(2, 3), randn(4, 5)), "add"),
            (lambda: concat([randn(2, 3), randn(3, 3)]), "concat"),
            (lambda: linear(randn(2, 3), randn(4, 5)), "linear"),
            (lambda: embedding_lookup(randn(3, 2), torch.tensor([3])), "embedding_lookup"),
            (lambda: softmax_cross_entropy(randn(2, 3), torch.tensor([0, 1, 2])), "softmax_cross_entropy"),
            (lambda: attention(randn(2, 6), *[randn(6, 6)] * 4, heads=4), "attention"),
            (lambda: mean(randn(2, 3), 2), "mean"),
        ]
        for fn, op in cases:
            with pytest.raises(ShapeError) as info:
                fn()
            assert info.value.op == op and op in str(info.value)


class TestGradients:
    def test_linear_function_exact(self):
        # central differences are exact for linear maps; a wide step keeps rounding small
        w = randn(6, seed=1)
        assert grad_check(lambda x: (x * w).sum(), randn(6), eps=1e-2) < 1e-10

    def test_corrupted_gradient_detected(self):
        x = randn(5)
        fn = lambda x: (x**3).sum()
        bad = 3 * x**2 + 0.5
        assert grad_check(fn, x, analytic=bad) > 1e-2

    @pytest.mark.parametrize("name", ["matmul", "add", "concat", "mean", "variance", "tanh", "sigmoid",
                                      "softmax", "layer_norm", "linear", "bce", "xent", "embedding", "relu"])
    def test_op(self, name):
        w = randn(4, 3, seed=5)
        x = randn(2, 4, seed=6)
        g, b = randn(4, seed=7), randn(4, seed=8)
        targets = (randn(2, 4, seed=9) > 0).to(f64)
        fns = {
            "matmul": lambda x: matmul(x, w).pow(2).sum(),
            "add": lambda x: add(x, g).pow(2).sum(),
            "concat": lambda x: concat([x, x * 2]).pow(2).sum(),
            "mean": lambda x: mean(x, 0).pow(2).sum(),
            "variance": lambda x: variance(x, 1).sum(),
            "tanh": lambda x: tanh(x).sum(),
            "sigmoid": lambda x: sigmoid(x).sum(),
            "softmax": lambda x: (softmax(x, -1) * g).sum(),
            "layer_norm": lambda x: (layer_norm(x, g, b) * g).sum(),
            "linear": lambda x: linear(x, w, b[:3]).pow(2).sum(),
            "bce": lambda x: binary_cross_entropy_with_logits(x, targets),
            "xent": lambda x: softmax_cross_entropy(x, torch.tensor([1, 3])),
            "embedding": lambda t: embedding_lookup(t, torch.tensor([0, 2, 2])).pow(2).sum(),
            # keep relu away from its kink
            "relu": lambda x: relu(x).pow(2).sum(),
        }
        arg = w.clone() if name == "embedding" else x
        if name == "relu":
            arg = torch.where(arg.abs() < 0.1, arg + 0.3, arg)
        assert grad_check(fns[name], arg) < 1e-6

    def test_xent_random_logits(self):
        labels = torch.tensor([0, 4, 2, 2, 1])
        assert grad_check(lambda z: softmax_cross_entropy(z, labels), randn(5, 5, seed=3) * 2) < 1e-6


class TestAttention:
    def weights(self, d, seed=0):
        return [randn(d, d, seed=seed + i) / d**0.5 for i in range(4)]

    def test_zero_output_is_identity(self):
        h = randn(3, 5, 8)
        Wq, Wk, Wv, _ = self.weights(8)
        zero = torch.zeros(8, 8, dtype=f64)
        assert torch.equal(self_attention(h, Wq, Wk, Wv, zero), h)
        assert torch.equal(self_attention(h, zero, zero, zero, zero), h)

    def test_single_token(self):
        h = randn(1, 6)
        Wq, Wk, Wv, Wo = self.weights(6)
        out = self_attention(h, Wq, Wk, Wv, Wo)
        assert torch.allclose(out, h + h @ Wv @ Wo, atol=1e-12)

    def test_uniform_logits_average(self):
        h = randn(4, 6)
        _, _, Wv, Wo = self.weights(6)
        zero = torch.zeros(6, 6, dtype=f64)
        out = attention(h, zero, zero, Wv, Wo)
        expect = (h @ Wv).mean(0, keepdim=True).expand(4, 6) @ Wo
        assert torch.allclose(out, expect, atol=1e-12)

    def test_key_bias_masks(self):
        h = randn(4, 6)
        Wq, Wk, Wv, Wo = self.weights(6)
        bias = torch.tensor([0.0, -torch.inf, 0.0, -torch.inf], dtype=f64)
        masked = attention(h, Wq, Wk, Wv, Wo, key_bias=bias)
        sub = attention(h[[0, 2]], Wq, Wk, Wv, Wo)
        # queries still come from every row; compare the two kept rows
        assert torch.allclose(masked[[0, 2]], sub, atol=1e-12)

    def test_key_bias_is_multiplicity(self):
        # a log(2) bias on one key equals duplicating that key
        h = randn(3, 6)
        Wq, Wk, Wv, Wo = self.weights(6)
        bias = torch.tensor([np.log(2.0), 0.0, 0.0], dtype=f64)
        dup = torch.cat([h[:1], h], 0)
        full = attention(dup, Wq, Wk, Wv, Wo)[1:]
        assert torch.allclose(attention(h, Wq, Wk, Wv, Wo, key_bias=bias), full, atol=1e-12)

    @pytest.mark.parametrize("which", range(4))
    def test_gradcheck_weights(self, which):
        h = randn(5, 4, seed=11)
        W = self.weights(4)

        def fn(x):
            ws = list(W)
            ws[which] = x
            return self_attention(h, *ws, heads=2).pow(2).sum()

        assert grad_check(fn, W[which]) < 1e-5

    def test_heads_split_equals_separate(self):
        h = randn(5, 4)
        Wq, Wk, Wv, Wo = self.weights(4)
        two = attention(h, Wq, Wk, Wv, torch.eye(4, dtype=f64), heads=2)
        q, k, v = h @ Wq, h @ Wk, h @ Wv
        outs = []
        for i in range(2):
            s = slice(2 * i, 2 * i + 2)
            w = torch.softmax(q[:, s] @ k[:, s].T / 2**0.5, -1)
            outs.append(w @ v[:, s])
        assert torch.allclose(two, torch.cat(outs, -1), atol=1e-12)


def make_block(d=8, seed=0):
    return AxialBlock(d, torch.Generator().manual_seed(seed), heads=2).to(f64)


class TestAxialBlock:
    def test_zeroed_outputs_identity(self):
        block = make_block()
        with torch.no_grad():
            block.row_attn.Wo.zero_()
            block.col_attn.Wo.zero_()
            block.ff.W2.zero_()
            block.ff.b2.zero_()
        h = randn(3, 4, 8)
        assert torch.equal(block(h), h)

    @given(st.permutations(range(3)), st.permutations(range(4)))
    def test_row_col_equivariance(self, prow, pcol):
        block = make_block()
        h = randn(3, 4, 8, seed=2)
        out = block(h)
        permuted = block(h[list(prow)][:, list(pcol)])
        assert torch.allclose(permuted, out[list(prow)][:, list(pcol)], atol=1e-12)

    def test_gradcheck_end_to_end(self):
        block = make_block()
        h = randn(3, 4, 8, seed=4)
        assert grad_check(lambda x: block(x).pow(2).sum(), h) < 1e-4
        w = block.col_attn.Wk

        def through_param(x):
            saved = w.data.clone()
            w.data = x
            try:
                return block(h).pow(2).sum()
            finally:
                w.data = saved

        # parameter gradients via autograd on the module
        block.zero_grad()
        block(h).pow(2).sum().backward()
        assert grad_check(through_param, w.detach().clone(), analytic=w.grad) < 1e-4

    def test_deterministic_training_mode(self):
        block = make_block()
        h = randn(3, 4, 8)
        a = block(h, True, torch.Generator().manual_seed(1))
        b = block(h, True, torch.Generator().manual_seed(1))
        assert torch.equal(a, b)


class TestAdamW:
    def params(self):
        return {"a": randn(3, 2), "b": randn(4, seed=1)}

    def test_zero_grad_no_decay(self):
        p = self.params()
        before = {k: v.clone() for k, v in p.items()}
        st_ = OptimizerState(lr=0.01, weight_decay=0.0)
        adamw_step(p, {k: torch.zeros_like(v) for k, v in p.items()}, st_)
        assert all(torch.equal(p[k], before[k]) for k in p)

    def test_zero_grad_decay(self):
        p = self.params()
        before = {k: v.clone() for k, v in p.items()}
        st_ = OptimizerState(lr=0.01, weight_decay=0.1)
        adamw_step(p, {k: torch.zeros_like(v) for k, v in p.items()}, st_)
        for k in p:
            assert torch.allclose(p[k], before[k] * 0.999, rtol=1e-12)

    def test_constant_gradient_step_tends_to_lr(self):
        p = {"w": torch.zeros(5, dtype=f64)}
        g = {"w": torch.tensor([0.1, -2.0, 5.0, 1e-3, -0.7], dtype=f64)}
        st_ = OptimizerState(lr=1e-3, weight_decay=0.0)
        for _ in range(999):
            adamw_step(p, g, st_)
        prev = p["w"].clone()
        adamw_step(p, g, st_)
        step = (p["w"] - prev).abs()
        assert torch.all((step - 1e-3).abs() <= 0.01 * 1e-3)

    def test_first_step_matches_formula(self):
        p = {"w": torch.tensor([1.0, -2.0], dtype=f64)}
        g = {"w": torch.tensor([0.5, 0.25], dtype=f64)}
        st_ = OptimizerState(lr=0.1, weight_decay=0.01)
        adamw_step(p, g, st_)
        # bias-corrected m/sqrt(v) = g/|g| on the first step
        expect = torch.tensor([1.0, -2.0], dtype=f64) * (1 - 0.1 * 0.01) - 0.1 * g["w"] / (g["w"].abs() + 1e-8)
        assert torch.allclose(p["w"], expect, atol=1e-12)

    def test_missing_gradient(self):
        p = self.params()
        with pytest.raises(KeyError):
            adamw_step(p, {"a": torch.zeros(3, 2, dtype=f64)}, OptimizerState())


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        block = make_block().to(torch.float32)
        params = param_store(block)
        opt = OptimizerState(lr=3e-4, step=17)
        save_checkpoint(tmp_path / "m.ckpt", params, optimizer=opt, extra={"note": 1})
        header, loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert list(loaded) == list(params)
        assert all(torch.equal(loaded[k], params[k].detach()) for k in params)
        assert header["optimizer"]["lr"] == 3e-4 and header["step"] == 17 and header["extra"] == {"note": 1}

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x").write_bytes(b"not a checkpoint")
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "x")

    def test_trailing_bytes(self, tmp_path):
        save_checkpoint(tmp_path / "m", {"w": torch.ones(2)})
        with open(tmp_path / "m", "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "m")

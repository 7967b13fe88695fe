"""Tensor operations, attention blocks, AdamW and checkpoints for the CDN model.

Reverse-mode gradients come from torch autograd; every op validates shapes
up front so that errors name the op and the offending extents.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

CHECKPOINT_FORMAT = 1
_CKPT_MAGIC = b"CDNCKPT\x00"


class ShapeError(ValueError):
    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


def _need(cond: bool, op: str, detail: str) -> None:
    if not cond:
        raise ShapeError(op, detail)


# ---------------------------------------------------------------------------
# Op set
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0],
          "matmul", f"inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("add", f"cannot combine {tuple(a.shape)} and {tuple(b.shape)}") from None
    return a + b


def scale(a: Tensor, c: float) -> Tensor:
    return a * c


def concat(tensors: list[Tensor]) -> Tensor:
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        _need(t.shape[:-1] == lead, "concat", f"leading extents differ: {[tuple(x.shape) for x in tensors]}")
    return torch.cat(tensors, dim=-1)


def mean(a: Tensor, axis: int) -> Tensor:
    _need(-a.dim() <= axis < a.dim(), "mean", f"axis {axis} out of range for {tuple(a.shape)}")
    return a.mean(dim=axis)


def variance(a: Tensor, axis: int) -> Tensor:
    """Population variance along ``axis``."""
    _need(-a.dim() <= axis < a.dim(), "variance", f"axis {axis} out of range for {tuple(a.shape)}")
    mu = a.mean(dim=axis, keepdim=True)
    return ((a - mu) ** 2).mean(dim=axis)


def relu(a: Tensor) -> Tensor:
    return torch.relu(a)


def tanh(a: Tensor) -> Tensor:
    return torch.tanh(a)


def sigmoid(a: Tensor) -> Tensor:
    return torch.sigmoid(a)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(a, dim=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    _need(gain.shape == (d,) and bias.shape == (d,), "layer_norm",
          f"gain/bias {tuple(gain.shape)}/{tuple(bias.shape)} vs width {d}")
    return F.layer_norm(x, (d,), gain, bias, eps)


def dropout(x: Tensor, rate: float, train: bool, generator: torch.Generator | None = None) -> Tensor:
    """Inverted dropout with the mask drawn from ``generator``; identity when not training."""
    if not train or rate <= 0.0:
        return x
    _need(rate < 1.0, "dropout", f"rate must be < 1, got {rate}")
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def embedding_lookup(table: Tensor, indices: Tensor) -> Tensor:
    _need(table.dim() == 2, "embedding_lookup", f"table must be 2-D, got {tuple(table.shape)}")
    if indices.numel():
        lo, hi = int(indices.min()), int(indices.max())
        _need(lo >= 0 and hi < table.shape[0], "embedding_lookup",
              f"indices in [{lo}, {hi}] outside table of {table.shape[0]} rows")
    return F.embedding(indices, table)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` with ``W`` of shape (in, out)."""
    _need(W.dim() == 2 and x.shape[-1] == W.shape[0], "linear",
          f"input width {x.shape[-1]} vs weight {tuple(W.shape)}")
    out = x @ W
    if b is not None:
        _need(b.shape == (W.shape[1],), "linear", f"bias {tuple(b.shape)} vs out width {W.shape[1]}")
        out = out + b
    return out


def binary_cross_entropy_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    _need(logits.shape == targets.shape, "binary_cross_entropy_with_logits",
          f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross entropy; ``logits`` (..., C), integer ``labels`` (...)."""
    _need(logits.shape[:-1] == labels.shape, "softmax_cross_entropy",
          f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1).long())


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def attention(h: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor, heads: int = 1,
              key_bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product self-attention over axis -2 of ``h`` (..., L, d), no residual.

    ``key_bias`` (..., L) is added to the attention logits of every query;
    ``-inf`` masks a key out.
    """
    d = h.shape[-1]
    _need(d % heads == 0, "attention", f"width {d} not divisible by {heads} heads")
    for name, W in (("Wq", Wq), ("Wk", Wk), ("Wv", Wv), ("Wo", Wo)):
        _need(W.shape == (d, d), "attention", f"{name} is {tuple(W.shape)}, expected {(d, d)}")
    L = h.shape[-2]
    dh = d // heads
    lead = h.shape[:-2]

    def split(x):
        return x.reshape(*lead, L, heads, dh).transpose(-2, -3)

    q, k, v = split(h @ Wq), split(h @ Wk), split(h @ Wv)
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if key_bias is not None:
        _need(key_bias.shape == (*lead, L), "attention",
              f"key_bias {tuple(key_bias.shape)} vs tokens {(*lead, L)}")
        logits = logits + key_bias.unsqueeze(-2).unsqueeze(-2)
    w = torch.softmax(logits, dim=-1)
    out = (w @ v).transpose(-2, -3).reshape(*lead, L, d)
    return out @ Wo


def self_attention(h: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor, heads: int = 1) -> Tensor:
    """Residual attention ``h + Attn(h)``."""
    return h + attention(h, Wq, Wk, Wv, Wo, heads)


def _init_square(d: int, gen: torch.Generator, gain: float = 1.0) -> Tensor:
    return torch.randn(d, d, generator=gen) * (gain / math.sqrt(d))


class AttentionParams(nn.Module):
    def __init__(self, d: int, gen: torch.Generator):
        super().__init__()
        self.ln_g = nn.Parameter(torch.ones(d))
        self.ln_b = nn.Parameter(torch.zeros(d))
        self.Wq = nn.Parameter(_init_square(d, gen))
        self.Wk = nn.Parameter(_init_square(d, gen))
        self.Wv = nn.Parameter(_init_square(d, gen))
        self.Wo = nn.Parameter(_init_square(d, gen, 0.5))

    def residual(self, h: Tensor, heads: int, rate: float, train: bool, gen: torch.Generator | None,
                 key_bias: Tensor | None = None) -> Tensor:
        """``h + Dropout(Attn(LayerNorm(h)))`` over axis -2."""
        a = attention(layer_norm(h, self.ln_g, self.ln_b), self.Wq, self.Wk, self.Wv, self.Wo, heads, key_bias)
        return h + dropout(a, rate, train, gen)


class FeedForward(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, gen: torch.Generator, out_gain: float = 1.0):
        super().__init__()
        self.W1 = nn.Parameter(torch.randn(d_in, d_hidden, generator=gen) * math.sqrt(2.0 / d_in))
        self.b1 = nn.Parameter(torch.zeros(d_hidden))
        self.W2 = nn.Parameter(torch.randn(d_hidden, d_out, generator=gen) * (out_gain / math.sqrt(d_hidden)))
        self.b2 = nn.Parameter(torch.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return linear(relu(linear(x, self.W1, self.b1)), self.W2, self.b2)


class AxialBlock(nn.Module):
    """Row attention, column attention, then a feed-forward layer, each
    pre-layer-normed with dropout and a residual connection.

    Input ``h`` is (..., rows, cols, d).
    """

    def __init__(self, d: int, gen: torch.Generator, heads: int = 1, dropout_rate: float = 0.1):
        super().__init__()
        self.heads = heads
        self.rate = dropout_rate
        self.row_attn = AttentionParams(d, gen)
        self.col_attn = AttentionParams(d, gen)
        self.ff_ln_g = nn.Parameter(torch.ones(d))
        self.ff_ln_b = nn.Parameter(torch.zeros(d))
        self.ff = FeedForward(d, 4 * d, d, gen, out_gain=0.5)

    def forward(self, h: Tensor, train: bool = False, gen: torch.Generator | None = None) -> Tensor:
        # attend along the row axis: columns are the batch
        h = self.row_attn.residual(h.transpose(-2, -3), self.heads, self.rate, train, gen).transpose(-2, -3)
        # attend along the column axis: rows are the batch
        h = self.col_attn.residual(h, self.heads, self.rate, train, gen)
        f = self.ff(layer_norm(h, self.ff_ln_g, self.ff_ln_b))
        return h + dropout(f, self.rate, train, gen)


def axial_block(h: Tensor, block: AxialBlock, train: bool = False, gen: torch.Generator | None = None) -> Tensor:
    return block(h, train, gen)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay}


@torch.no_grad()
def adamw_step(params: dict[str, Tensor], grads: dict[str, Tensor | None], state: OptimizerState) -> None:
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    for name in params:
        if grads.get(name) is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        p.mul_(1.0 - state.lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)


def param_store(module: nn.Module) -> OrderedDict:
    return OrderedDict(module.named_parameters())


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, atol: float = 1e-6,
               analytic: Tensor | None = None) -> float:
    """Max relative error between the autograd gradient of scalar ``fn`` at ``x``
    and central differences, computed in binary64.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, atol)``. Pass
    ``analytic`` to check a gradient from elsewhere.
    """
    x = x.detach().to(torch.float64).clone()
    if analytic is None:
        xg = x.clone().requires_grad_(True)
        out = fn(xg)
        _need(out.numel() == 1, "grad_check", f"function must be scalar, got {tuple(out.shape)}")
        (analytic,) = torch.autograd.grad(out, xg)
    analytic = analytic.detach().to(torch.float64).reshape(-1)
    flat = x.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = fn(x).item()
            flat[i] = orig - eps
            fm = fn(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(atol, dtype=torch.float64))
    return float(((analytic - numeric).abs() / denom).max())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: dict[str, Tensor], *, optimizer: OptimizerState | None = None,
                    extra: dict | None = None) -> None:
    """Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
    then each parameter as little-endian binary32 in header order."""
    entries = [{"name": n, "shape": list(p.shape), "dtype": "float32"} for n, p in params.items()]
    header = {
        "format_version": CHECKPOINT_FORMAT,
        "params": entries,
        "optimizer": optimizer.hyperparams() if optimizer else None,
        "step": optimizer.step if optimizer else 0,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blocks = [p.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes() for p in params.values()]
    Path(path).write_bytes(_CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blocks))


def load_checkpoint(path: str | Path) -> tuple[dict, OrderedDict]:
    buf = Path(path).read_bytes()
    if buf[:8] != _CKPT_MAGIC:
        raise OSError(f"{path}: not a CDN checkpoint")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    header = json.loads(buf[16:16 + hlen].decode())
    if header.get("format_version") != CHECKPOINT_FORMAT:
        raise OSError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    off = 16 + hlen
    params: OrderedDict = OrderedDict()
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(e["shape"])
        params[e["name"]] = torch.from_numpy(arr.copy())
        off += 4 * count
    if off != len(buf):
        raise OSError(f"{path}: {len(buf) - off} trailing bytes")
    return header, params

"""Causal structure learner and differential network.

Pair representations are indexed ``h[i, j]`` for the ordered pair i -> j,
matching adjacency matrices ``A[src, dst]``. The differential network works
on the transpose, so that each row is a node and its columns are the node's
incoming edges plus one node-statistics column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator
from torch import Tensor, nn

from . import nn_core as nc
from .local_discovery import N_EDGE_CODES, LocalEstimates, local_estimates
from .stats import summary_stats


class ConfigError(ValueError):
    pass


class CdnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = 64
    structure_layers: int = 4
    diff_layers: int | None = None
    variant: Literal["diff", "cat"] = "diff"
    n_max: int = 128
    dropout: float = 0.1
    heads: int = 1
    T: int = 100
    k: int = 5
    alpha: float = 0.05
    ensemble: int = 4

    @model_validator(mode="after")
    def _check(self):
        if self.d <= 0 or self.d % self.heads:
            raise ValueError("d must be positive and divisible by heads")
        if self.diff_layers is None:
            self.diff_layers = 2 if self.variant == "diff" else 3
        if self.diff_layers < 1 or self.structure_layers < 1:
            raise ValueError("layer counts must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        return self


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


@dataclass
class SideFeatures:
    """One dataset's summary: correlation, node moments and local FCI estimates."""

    rho: np.ndarray
    moments: np.ndarray
    local: LocalEstimates

    @property
    def n(self) -> int:
        return self.rho.shape[0]

    def permuted(self, perm: np.ndarray) -> SideFeatures:
        """Relabel nodes so that new node ``a`` is old node ``perm[a]``."""
        inv = np.argsort(perm)
        local = LocalEstimates(
            self.local.n,
            self.local.k,
            [tuple(int(inv[v]) for v in s) for s in self.local.subsets],
            [p.copy() for p in self.local.pags],
            self.local.alpha,
        )
        return SideFeatures(self.rho[np.ix_(perm, perm)], self.moments[perm], local)


@dataclass
class FeatureBundle:
    obs: SideFeatures
    int: SideFeatures

    @property
    def n(self) -> int:
        return self.obs.n


def side_features(D: np.ndarray, cfg: CdnConfig, seed: int) -> SideFeatures:
    st = summary_stats(D)
    local = local_estimates(D, min(cfg.k, D.shape[1]), cfg.T, cfg.alpha, seed)
    return SideFeatures(st.rho, np.column_stack([st.mean, st.var]), local)


def featurize_pair(obs: np.ndarray, int_: np.ndarray, cfg: CdnConfig, seed: int) -> FeatureBundle:
    if obs.shape[1] != int_.shape[1]:
        raise ValueError(f"column mismatch: {obs.shape} vs {int_.shape}")
    s_obs, s_int = (int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    return FeatureBundle(side_features(obs, cfg, s_obs), side_features(int_, cfg, s_int))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class SideBatch:
    rho: Tensor  # (B, N, N)
    counts: Tensor  # (B, N, N, C) code histograms over the T estimates
    moments: Tensor  # (B, N, 2)

    @property
    def T(self) -> int:
        return int(self.counts[0, 0, 0].sum().item())


@dataclass
class ModelOutput:
    edge_logits_obs: Tensor  # (B, P, 3) over pairs i < j: {i->j, j->i, none}
    edge_logits_int: Tensor
    target_logits: Tensor  # (B, N)
    h_obs: Tensor  # (B, N, N, d)
    h_int: Tensor


def to_side_batch(sides: list[SideFeatures], dtype=torch.float32) -> SideBatch:
    return SideBatch(
        torch.tensor(np.stack([s.rho for s in sides]), dtype=dtype),
        torch.tensor(np.stack([s.local.code_counts() for s in sides]), dtype=dtype),
        torch.tensor(np.stack([s.moments for s in sides]), dtype=dtype),
    )


def moment_inputs(moments: Tensor) -> Tensor:
    # asinh keeps large means/variances from polynomial chains in range
    return torch.asinh(moments)


def upper_pairs(n: int) -> tuple[Tensor, Tensor]:
    iu = torch.triu_indices(n, n, offset=1)
    return iu[0], iu[1]


def edge_labels(adj: np.ndarray) -> np.ndarray:
    """Classes per pair i < j: 0 = i->j, 1 = j->i, 2 = no edge."""
    n = adj.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    fwd = adj[iu, ju] != 0
    bwd = adj[ju, iu] != 0
    return np.where(fwd, 0, np.where(bwd, 1, 2)).astype(np.int64)


class CdnModel(nn.Module):
    def __init__(self, cfg: CdnConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        gen = torch.Generator().manual_seed(seed)
        self.node_emb = nn.Parameter(torch.randn(cfg.n_max, d, generator=gen))
        self.pair_ffn = nc.FeedForward(2 * d, d, d, gen)
        self.rho_W = nn.Parameter(torch.randn(1, d, generator=gen))
        self.rho_b = nn.Parameter(torch.zeros(d))
        self.code_emb = nn.Parameter(torch.randn(N_EDGE_CODES, d, generator=gen))
        self.t_attn = nc.AttentionParams(d, gen)
        self.struct_blocks = nn.ModuleList(nc.AxialBlock(d, gen, cfg.heads, cfg.dropout) for _ in range(cfg.structure_layers))
        self.struct_ln_g = nn.Parameter(torch.ones(d))
        self.struct_ln_b = nn.Parameter(torch.zeros(d))
        self.edge_head = nc.FeedForward(2 * d, d, 3, gen)
        self.stat_ffn = nc.FeedForward(2, d, d, gen)
        width = d if cfg.variant == "diff" else 2 * d
        self.diff_blocks = nn.ModuleList(nc.AxialBlock(width, gen, cfg.heads, cfg.dropout) for _ in range(cfg.diff_layers))
        self.diff_ln_g = nn.Parameter(torch.ones(width))
        self.diff_ln_b = nn.Parameter(torch.zeros(width))
        self.out_W = nn.Parameter(torch.zeros(width, 1))
        self.out_b = nn.Parameter(torch.zeros(1))

    # -- embeddings ---------------------------------------------------------

    def pair_embedding(self, perm: Tensor) -> Tensor:
        """``FFN([Embed(perm i), Embed(perm j)])`` for every ordered pair; perm (B, N)."""
        if perm.numel() and (int(perm.min()) < 0 or int(perm.max()) >= self.cfg.n_max):
            raise ValueError(f"permutation entries must lie in [0, {self.cfg.n_max})")
        e = nc.embedding_lookup(self.node_emb, perm)  # (B, N, d)
        N = e.shape[1]
        pairs = nc.concat([e.unsqueeze(2).expand(-1, N, N, -1), e.unsqueeze(1).expand(-1, N, N, -1)])
        return self.pair_ffn(pairs)

    def rho_token(self, rho: Tensor) -> Tensor:
        return nc.linear(rho.unsqueeze(-1), self.rho_W, self.rho_b)

    def embed_features(self, rho: Tensor, codes: Tensor, perm: Tensor) -> Tensor:
        """Dense token lattice (B, N, N, T+1, d).

        Token 0 projects the correlation, tokens 1..T embed the local edge code
        from each estimate (or the not-covered code); every token receives the
        pair embedding.
        """
        tok0 = self.rho_token(rho).unsqueeze(3)
        toks = nc.embedding_lookup(self.code_emb, codes.long())
        lattice = torch.cat([tok0, toks], dim=3)
        return lattice + self.pair_embedding(perm).unsqueeze(3)

    # -- structure learner --------------------------------------------------

    def pool_lattice(self, lattice: Tensor, train: bool = False, gen: torch.Generator | None = None) -> Tensor:
        """Attention along the T+1 axis, then mean over it."""
        h = self.t_attn.residual(lattice, self.cfg.heads, self.cfg.dropout, train, gen)
        return h.mean(dim=3)

    def pool_compact(self, side: SideBatch, perm: Tensor, train: bool = False,
                     gen: torch.Generator | None = None) -> Tensor:
        """Same result as ``pool_lattice(embed_features(...))`` in eval mode.

        The T estimate tokens of a pair take at most ``N_EDGE_CODES`` distinct
        values and the T axis carries no positional signal, so attending over
        the distinct tokens with log-multiplicity key bias and pooling with
        multiplicity weights reproduces the full lattice exactly. Dropout
        masks are then shared between duplicate tokens.
        """
        B, N = side.rho.shape[:2]
        pe = self.pair_embedding(perm).unsqueeze(3)
        tok0 = self.rho_token(side.rho).unsqueeze(3)
        codes = self.code_emb.view(1, 1, 1, N_EDGE_CODES, -1).expand(B, N, N, -1, -1)
        tokens = torch.cat([tok0, codes], dim=3) + pe
        mult = torch.cat([torch.ones_like(side.counts[..., :1]), side.counts], dim=3)
        bias = torch.log(mult)  # log 0 = -inf masks absent codes
        h = self.t_attn.residual(tokens, self.cfg.heads, self.cfg.dropout, train, gen, key_bias=bias)
        w = mult / mult.sum(dim=3, keepdim=True)
        return (h * w.unsqueeze(-1)).sum(dim=3)

    def structure_trunk(self, h: Tensor, train: bool = False, gen: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        for block in self.struct_blocks:
            h = block(h, train, gen)
        h = nc.layer_norm(h, self.struct_ln_g, self.struct_ln_b)
        N = h.shape[1]
        z = self.edge_head(nc.concat([h, h.transpose(1, 2)]))
        iu, ju = upper_pairs(N)
        fwd, bwd = z[:, iu, ju, :], z[:, ju, iu, :]
        # average both readings of the pair so the classes do not depend on label order
        return h, 0.5 * (fwd + bwd[..., [1, 0, 2]])

    def structure_forward(self, lattice: Tensor, train: bool = False, gen: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        return self.structure_trunk(self.pool_lattice(lattice, train, gen), train, gen)

    # -- differential network -----------------------------------------------

    def node_view(self, h: Tensor, moments: Tensor) -> Tensor:
        """(B, N, N+1, d): row = node, columns = incoming edges then statistics."""
        stat = self.stat_ffn(moment_inputs(moments)).unsqueeze(2)
        return torch.cat([h.transpose(1, 2), stat], dim=2)

    def diff_forward(self, h_obs: Tensor, h_int: Tensor, mom_obs: Tensor, mom_int: Tensor,
                     train: bool = False, gen: torch.Generator | None = None) -> Tensor:
        a, b = self.node_view(h_obs, mom_obs), self.node_view(h_int, mom_int)
        if self.cfg.variant == "diff":
            x = b - a
        elif self.cfg.variant == "cat":
            x = nc.concat([a, b])
        else:
            raise ConfigError(f"unknown variant {self.cfg.variant!r}")
        if x.shape[-1] != self.out_W.shape[0]:
            raise ConfigError(f"width {x.shape[-1]} does not match variant {self.cfg.variant!r}")
        for block in self.diff_blocks:
            x = block(x, train, gen)
        x = nc.layer_norm(x, self.diff_ln_g, self.diff_ln_b)
        return nc.linear(x.mean(dim=2), self.out_W, self.out_b).squeeze(-1)

    # -- full model ---------------------------------------------------------

    def forward(self, obs: SideBatch, int_: SideBatch, perm: Tensor, train: bool = False,
                gen: torch.Generator | None = None) -> ModelOutput:
        B, N = obs.rho.shape[:2]
        if N > self.cfg.n_max:
            raise ValueError(f"N={N} exceeds n_max={self.cfg.n_max}")
        both = SideBatch(
            torch.cat([obs.rho, int_.rho]),
            torch.cat([obs.counts, int_.counts]),
            torch.cat([obs.moments, int_.moments]),
        )
        pooled = self.pool_compact(both, torch.cat([perm, perm]), train, gen)
        h, z = self.structure_trunk(pooled, train, gen)
        h_obs, h_int = h[:B], h[B:]
        logits = self.diff_forward(h_obs, h_int, obs.moments, int_.moments, train, gen)
        return ModelOutput(z[:B], z[B:], logits, h_obs, h_int)


def compute_losses(out: ModelOutput, labels_obs: Tensor, labels_int: Tensor,
                   targets: Tensor | None = None) -> tuple[Tensor, Tensor | None, Tensor]:
    """``L_G`` sums the mean pair cross entropy of both sides; ``L_I`` is the
    mean per-node binary cross entropy; ``L = L_G + L_I``."""
    L_G = nc.softmax_cross_entropy(out.edge_logits_obs, labels_obs) + nc.softmax_cross_entropy(out.edge_logits_int, labels_int)
    if targets is None:
        return L_G, None, L_G
    L_I = nc.binary_cross_entropy_with_logits(out.target_logits, targets)
    return L_G, L_I, L_G + L_I


def random_perm(n: int, n_max: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n_max, size=n, replace=False)


@dataclass
class EnsemblePrediction:
    target_probs: np.ndarray  # (N,)
    edge_probs_obs: np.ndarray  # (P, 3) over pairs i < j
    edge_probs_int: np.ndarray


@torch.no_grad()
def ensemble_predict(model: CdnModel, bundle: FeatureBundle, seed: int, ensemble: int | None = None) -> EnsemblePrediction:
    """Probabilities averaged over ``ensemble`` random node-embedding assignments."""
    P = model.cfg.ensemble if ensemble is None else ensemble
    if bundle.n > model.cfg.n_max:
        raise ValueError(f"N={bundle.n} exceeds n_max={model.cfg.n_max}")
    rng = np.random.default_rng(seed)
    dtype = model.node_emb.dtype
    obs = to_side_batch([bundle.obs] * P, dtype)
    int_ = to_side_batch([bundle.int] * P, dtype)
    perm = torch.tensor(np.stack([random_perm(bundle.n, model.cfg.n_max, rng) for _ in range(P)]))
    model.eval()
    out = model(obs, int_, perm)
    return EnsemblePrediction(
        torch.sigmoid(out.target_logits).mean(dim=0).double().numpy(),
        torch.softmax(out.edge_logits_obs, dim=-1).mean(dim=0).double().numpy(),
        torch.softmax(out.edge_logits_int, dim=-1).mean(dim=0).double().numpy(),
    )


def predict_from_features(model: CdnModel, bundle: FeatureBundle, seed: int, ensemble: int | None = None) -> np.ndarray:
    return ensemble_predict(model, bundle, seed, ensemble).target_probs


def load_model(checkpoint, cfg: CdnConfig | None = None) -> CdnModel:
    header, params = nc.load_checkpoint(checkpoint)
    stored = header.get("extra", {}).get("cdn_config")
    if cfg is None:
        if stored is None:
            raise ConfigError(f"{checkpoint}: no model configuration stored; pass one explicitly")
        cfg = CdnConfig(**stored)
    model = CdnModel(cfg)
    own = nc.param_store(model)
    if list(own) != list(params) or any(own[k].shape != params[k].shape for k in own):
        raise ConfigError(f"{checkpoint}: parameters do not match the model configuration")
    model.load_state_dict(params)
    model.eval()
    return model


def predict_targets(obs: np.ndarray, int_: np.ndarray, checkpoint, cfg: CdnConfig | None = None, seed: int = 0,
                    ensemble: int | None = None) -> np.ndarray:
    model = load_model(checkpoint, cfg)
    if obs.shape[1] > model.cfg.n_max:
        raise ValueError(f"N={obs.shape[1]} exceeds n_max={model.cfg.n_max}")
    f_seed, p_seed = (int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    bundle = featurize_pair(obs, int_, model.cfg, f_seed)
    return predict_from_features(model, bundle, p_seed, ensemble)


def predicted_adjacency(edge_scores, n: int) -> np.ndarray:
    """Most likely edge class per pair (logits or probabilities) as a binary adjacency matrix."""
    cls = np.asarray(edge_scores).argmax(axis=-1)
    iu, ju = np.triu_indices(n, k=1)
    adj = np.zeros((n, n), dtype=np.int8)
    adj[iu[cls == 0], ju[cls == 0]] = 1
    adj[ju[cls == 1], iu[cls == 1]] = 1
    return adj


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


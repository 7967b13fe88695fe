"""Synthetic structural causal models, interventions and on-disk corpora."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .stats import ParameterError

logger = logging.getLogger(__name__)

FAMILIES = ("linear", "nn_additive", "nn_nonadditive", "polynomial", "sigmoid")
INTERVENTION_KINDS = ("hard", "shift", "scale")
CORPUS_FORMAT = "cdn-corpus/1"


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dag:
    n: int
    edges: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"node count must be positive, got {self.n}")
        object.__setattr__(self, "edges", frozenset((int(a), int(b)) for a, b in self.edges))
        for a, b in self.edges:
            if a == b:
                raise ParameterError(f"self-loop at node {a}")
            if not (0 <= a < self.n and 0 <= b < self.n):
                raise ParameterError(f"edge ({a}, {b}) out of range for n={self.n}")
        self.topological_order()

    @classmethod
    def from_adjacency(cls, adj: np.ndarray) -> Dag:
        adj = np.asarray(adj)
        src, dst = np.nonzero(adj)
        return cls(adj.shape[0], frozenset(zip(src.tolist(), dst.tolist())))

    def adjacency(self) -> np.ndarray:
        """Binary matrix with ``A[src, dst] = 1``."""
        adj = np.zeros((self.n, self.n), dtype=np.int8)
        for a, b in self.edges:
            adj[a, b] = 1
        return adj

    def parents(self, v: int) -> list[int]:
        return sorted(a for a, b in self.edges if b == v)

    def children(self, v: int) -> list[int]:
        return sorted(b for a, b in self.edges if a == v)

    def topological_order(self) -> list[int]:
        indeg = [0] * self.n
        out: dict[int, list[int]] = {v: [] for v in range(self.n)}
        for a, b in self.edges:
            indeg[b] += 1
            out[a].append(b)
        ready = sorted(v for v in range(self.n) if indeg[v] == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for c in sorted(out[v]):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        if len(order) != self.n:
            raise ParameterError("graph contains a cycle")
        return order

    def descendants(self, v: int) -> set[int]:
        seen: set[int] = set()
        stack = [v]
        while stack:
            for c in self.children(stack.pop()):
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    def without_incoming(self, nodes) -> Dag:
        nodes = set(nodes)
        return Dag(self.n, frozenset(e for e in self.edges if e[1] not in nodes))


def sample_er_dag(n: int, expected_edges: int, seed: int) -> Dag:
    """Erdos-Renyi DAG oriented along a uniformly random topological order."""
    if n < 1:
        raise ParameterError(f"n must be positive, got {n}")
    pairs = n * (n - 1) // 2
    if expected_edges < 0 or expected_edges > pairs:
        raise ParameterError(f"expected_edges={expected_edges} outside [0, {pairs}] for n={n}")
    if pairs == 0:
        return Dag(n)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    p = expected_edges / pairs
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(pairs) < p
    edges = frozenset((int(order[i]), int(order[j])) for i, j in zip(iu[keep], ju[keep]))
    return Dag(n, edges)


# ---------------------------------------------------------------------------
# Mechanisms
# ---------------------------------------------------------------------------


@dataclass
class MechanismSpec:
    """Per-node mechanism parameters for one family.

    ``params[v]`` holds the blocks for node ``v``; their leading dimension
    follows ``dag.parents(v)``. Root nodes carry no block and are drawn from
    ``Uniform(root_low, root_high)``.
    """

    family: str
    params: dict[int, dict[str, np.ndarray]]
    noise_std: np.ndarray
    root_low: float = -1.0
    root_high: float = 1.0


@dataclass(frozen=True)
class Intervention:
    kind: Literal["hard", "shift", "scale"]
    low: float = -1.0
    high: float = 1.0
    delta: float = 0.0
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in INTERVENTION_KINDS:
            raise ParameterError(f"unknown intervention kind {self.kind!r}")
        if self.kind == "scale" and not self.factor > 0:
            raise ParameterError(f"scale factor must be positive, got {self.factor}")
        if self.kind == "hard" and not self.low < self.high:
            raise ParameterError("hard intervention needs low < high")

    def to_json(self) -> dict:
        if self.kind == "hard":
            return {"kind": "hard", "low": self.low, "high": self.high}
        if self.kind == "shift":
            return {"kind": "shift", "delta": self.delta}
        return {"kind": "scale", "factor": self.factor}

    @classmethod
    def from_json(cls, d: dict) -> Intervention:
        return cls(**d)


@dataclass(frozen=True)
class InterventionRegime:
    targets: tuple[int, ...]
    kinds: dict[int, Intervention] = field(hash=False)

    def __post_init__(self):
        if not 1 <= len(self.targets) <= 3:
            raise ParameterError(f"regime needs 1-3 targets, got {len(self.targets)}")
        if len(set(self.targets)) != len(self.targets):
            raise ParameterError(f"duplicate targets in {self.targets}")
        if set(self.kinds) != set(self.targets):
            raise ParameterError("every target needs exactly one intervention")

    @property
    def hard_targets(self) -> list[int]:
        return [t for t in self.targets if self.kinds[t].kind == "hard"]

    def to_json(self) -> dict:
        return {
            "targets": list(self.targets),
            "interventions": [self.kinds[t].to_json() for t in self.targets],
        }

    @classmethod
    def from_json(cls, d: dict) -> InterventionRegime:
        targets = tuple(int(t) for t in d["targets"])
        kinds = {t: Intervention.from_json(i) for t, i in zip(targets, d["interventions"])}
        return cls(targets, kinds)


@dataclass
class Scm:
    dag: Dag
    mech: MechanismSpec
    interventions: dict[int, Intervention] = field(default_factory=dict)
    # parent lists of the unmutilated graph; soft interventions keep them
    base_parents: dict[int, list[int]] | None = None

    def __post_init__(self):
        if self.base_parents is None:
            self.base_parents = {v: self.dag.parents(v) for v in range(self.dag.n)}
        if len(self.mech.noise_std) != self.dag.n:
            raise ParameterError("noise_std must cover every node")
        if np.any(np.asarray(self.mech.noise_std) <= 0):
            raise ParameterError("noise std must be positive")


def _signed_uniform(rng: np.random.Generator, size, low=0.25, high=1.0) -> np.ndarray:
    mag = rng.uniform(low, high, size=size)
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return mag * sign


def instantiate_scm(
    dag: Dag,
    family: str,
    seed: int,
    *,
    noise_range: tuple[float, float] = (0.2, 0.8),
    root_range: tuple[float, float] = (-1.0, 1.0),
    hidden: int = 10,
) -> Scm:
    if family not in FAMILIES:
        raise ParameterError(f"unknown mechanism family {family!r}; expected one of {FAMILIES}")
    rng = np.random.default_rng(seed)
    params: dict[int, dict[str, np.ndarray]] = {}
    for v in range(dag.n):
        k = len(dag.parents(v))
        if k == 0:
            continue
        if family == "linear":
            params[v] = {"W": _signed_uniform(rng, k)}
        elif family == "polynomial":
            params[v] = {
                "W0": _signed_uniform(rng, 1),
                "W1": _signed_uniform(rng, k),
                "W2": _signed_uniform(rng, k),
            }
        elif family == "sigmoid":
            params[v] = {"W": _signed_uniform(rng, k)}
        elif family == "nn_additive":
            params[v] = {"W_in": rng.normal(size=(k, hidden)), "W_out": rng.normal(size=hidden)}
        else:
            params[v] = {"W_in": rng.normal(size=(k + 1, hidden)), "W_out": rng.normal(size=hidden)}
    noise = rng.uniform(noise_range[0], noise_range[1], size=dag.n)
    mech = MechanismSpec(family, params, noise, float(root_range[0]), float(root_range[1]))
    return Scm(dag, mech)


def _mechanism(family: str, p: dict[str, np.ndarray], xpa: np.ndarray, noise: np.ndarray) -> np.ndarray:
    if family == "linear":
        return xpa @ p["W"] + noise
    if family == "polynomial":
        return p["W0"][0] + xpa @ p["W1"] + (xpa**2) @ p["W2"] + noise
    if family == "sigmoid":
        return (1.0 / (1.0 + np.exp(-xpa))) @ p["W"] + noise
    if family == "nn_additive":
        return np.tanh(xpa @ p["W_in"]) @ p["W_out"] + noise
    if family == "nn_nonadditive":
        return np.tanh(np.column_stack([xpa, noise]) @ p["W_in"]) @ p["W_out"]
    raise ParameterError(f"unknown mechanism family {family!r}")


def sample_data(scm: Scm, m: int, seed: int) -> np.ndarray:
    """Ancestral sampling of ``m`` rows."""
    if m < 0:
        raise ParameterError(f"sample count must be nonnegative, got {m}")
    n = scm.dag.n
    rng = np.random.default_rng(seed)
    x = np.zeros((m, n))
    mech = scm.mech
    for v in scm.dag.topological_order():
        iv = scm.interventions.get(v)
        if iv is not None and iv.kind == "hard":
            x[:, v] = rng.uniform(iv.low, iv.high, size=m)
            continue
        pa = scm.base_parents[v]
        if not pa:
            val = rng.uniform(mech.root_low, mech.root_high, size=m)
        else:
            noise = rng.normal(0.0, mech.noise_std[v], size=m)
            val = _mechanism(mech.family, mech.params[v], x[:, pa], noise)
        if iv is not None:
            val = val + iv.delta if iv.kind == "shift" else iv.factor * val
        x[:, v] = val
    return x


def sample_intervention(kind: str, rng: np.random.Generator) -> Intervention:
    """Draw intervention parameters: hard ~ U(-1, 1); soft magnitude z1 ~ U(2, 4)."""
    if kind == "hard":
        return Intervention("hard", -1.0, 1.0)
    z1 = rng.uniform(2.0, 4.0)
    z = rng.uniform(-1.0, 1.0)
    sign = 1.0 if z >= 0 else -1.0
    if kind == "shift":
        return Intervention("shift", delta=float(sign * z1))
    if kind == "scale":
        return Intervention("scale", factor=float(z1**sign))
    raise ParameterError(f"unknown intervention kind {kind!r}")


def mutilate(scm: Scm, regime: InterventionRegime) -> tuple[Scm, Dag]:
    if not regime.targets:
        raise ParameterError("empty target set")
    for t in regime.targets:
        if not 0 <= t < scm.dag.n:
            raise ParameterError(f"target {t} out of range for n={scm.dag.n}")
    g_int = scm.dag.without_incoming(regime.hard_targets)
    new = Scm(g_int, scm.mech, dict(regime.kinds), base_parents=dict(scm.base_parents))
    return new, g_int


def sample_regime_schedule(
    n: int, rng: np.random.Generator, max_targets: int = 3, per_size: int | None = None
) -> list[tuple[int, ...]]:
    """``per_size`` distinct target sets for each size 1..max_targets (default ``per_size = n``).

    Sizes larger than ``n`` are skipped; a size class with fewer than
    ``per_size`` possible subsets is enumerated completely.
    """
    per_size = n if per_size is None else per_size
    schedule: list[tuple[int, ...]] = []
    for size in range(1, max_targets + 1):
        if size > n:
            break
        total = comb(n, size)
        want = min(per_size, total)
        if want == total and total <= 4 * per_size:
            pool = list(combinations(range(n), size))
            idx = rng.permutation(total)[:want]
            chosen = [pool[i] for i in idx]
        else:
            seen: set[tuple[int, ...]] = set()
            chosen = []
            while len(chosen) < want:
                s = tuple(sorted(rng.choice(n, size=size, replace=False).tolist()))
                if s not in seen:
                    seen.add(s)
                    chosen.append(s)
        schedule.extend(chosen)
    return schedule


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


class CorpusConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    node_counts: list[int] = Field(default_factory=lambda: [10])
    edge_multipliers: list[int] = Field(default_factory=lambda: [1])
    families: list[str] = Field(default_factory=lambda: ["linear"])
    interventions: list[str] = Field(default_factory=lambda: ["hard"])
    datasets_per_config: int = 1
    m_obs: int = 1000
    m_int: int = 500
    regimes_per_size: int | None = None
    max_targets: int = 3
    noise_std_range: tuple[float, float] = (0.2, 0.8)
    root_range: tuple[float, float] = (-1.0, 1.0)
    hidden: int = 10
    seed: int = 0

    @field_validator("node_counts", "edge_multipliers", "families", "interventions")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("must be nonempty")
        return v

    @field_validator("node_counts", "edge_multipliers")
    @classmethod
    def _positive(cls, v):
        if any(x <= 0 for x in v):
            raise ValueError("counts must be positive")
        return v

    @field_validator("families")
    @classmethod
    def _families(cls, v):
        bad = [f for f in v if f not in FAMILIES]
        if bad:
            raise ValueError(f"unknown families {bad}")
        return v

    @field_validator("interventions")
    @classmethod
    def _kinds(cls, v):
        bad = [k for k in v if k not in INTERVENTION_KINDS]
        if bad:
            raise ValueError(f"unknown intervention kinds {bad}")
        return v

    @field_validator("datasets_per_config", "m_obs", "m_int", "hidden")
    @classmethod
    def _pos_int(cls, v):
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator("max_targets")
    @classmethod
    def _max_targets(cls, v):
        if not 1 <= v <= 3:
            raise ValueError("max_targets must be in 1..3")
        return v

    def cells(self) -> list[dict]:
        """Configuration grid in a fixed order."""
        out = []
        for n in self.node_counts:
            for mult in self.edge_multipliers:
                for fam in self.families:
                    for kind in self.interventions:
                        out.append({"n": n, "edge_multiplier": mult, "family": fam, "intervention": kind})
        return out


def write_f32(path: Path, x: np.ndarray) -> None:
    np.ascontiguousarray(x, dtype="<f4").tofile(path)


def read_f32(path: Path, shape: tuple[int, int]) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != shape[0] * shape[1]:
        raise OSError(f"{path}: expected {shape[0] * shape[1]} values, found {data.size}")
    return data.reshape(shape).astype(np.float64)


def write_graph_csv(path: Path, dag: Dag) -> None:
    lines = ["src,dst"] + [f"{a},{b}" for a, b in sorted(dag.edges)]
    path.write_text("\n".join(lines) + "\n")


def read_graph_csv(path: Path, n: int) -> Dag:
    rows = path.read_text().strip().splitlines()
    if not rows or rows[0].strip() != "src,dst":
        raise OSError(f"{path}: missing 'src,dst' header")
    edges = []
    for row in rows[1:]:
        a, b = row.split(",")
        edges.append((int(a), int(b)))
    return Dag(n, frozenset(edges))


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _generate_dataset(job: tuple[dict, dict, int, str]) -> dict:
    cfg_dict, cell, ds_seed, ds_dir = job
    cfg = CorpusConfig(**cfg_dict)
    out = Path(ds_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    n = cell["n"]
    ss = np.random.SeedSequence(ds_seed)
    graph_seed, mech_seed, obs_seed, regime_seed = (int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(4))
    expected = min(cell["edge_multiplier"] * n, n * (n - 1) // 2)
    dag = sample_er_dag(n, expected, graph_seed)
    scm = instantiate_scm(
        dag,
        cell["family"],
        mech_seed,
        noise_range=tuple(cfg.noise_std_range),
        root_range=tuple(cfg.root_range),
        hidden=cfg.hidden,
    )
    obs = sample_data(scm, cfg.m_obs, obs_seed)
    write_f32(out / "obs.f32", obs)
    write_graph_csv(out / "graph_obs.csv", dag)

    rng = np.random.default_rng(regime_seed)
    schedule = sample_regime_schedule(n, rng, cfg.max_targets, cfg.regimes_per_size)
    regimes = []
    for r, targets in enumerate(schedule):
        kinds = {t: sample_intervention(cell["intervention"], rng) for t in targets}
        regime = InterventionRegime(tuple(targets), kinds)
        int_scm, g_int = mutilate(scm, regime)
        data_seed = int(rng.integers(0, 2**63 - 1))
        x_int = sample_data(int_scm, cfg.m_int, data_seed)
        rdir = out / f"regime_{r:03d}"
        rdir.mkdir(exist_ok=True)
        write_f32(rdir / "int.f32", x_int)
        _dump_json(rdir / "targets.json", regime.to_json())
        write_graph_csv(rdir / "graph_int.csv", g_int)
        regimes.append({"regime": r, "dir": rdir.name, "targets": list(targets), "seed": data_seed})

    meta = {
        "n": n,
        "family": cell["family"],
        "intervention": cell["intervention"],
        "edge_multiplier": cell["edge_multiplier"],
        "expected_edges": expected,
        "m_obs": cfg.m_obs,
        "m_int": cfg.m_int,
        "obs_shape": [cfg.m_obs, n],
        "int_shape": [cfg.m_int, n],
        "seeds": {
            "dataset": ds_seed,
            "graph": graph_seed,
            "mechanism": mech_seed,
            "obs": obs_seed,
            "regimes": regime_seed,
        },
        "noise_std": [float(s) for s in scm.mech.noise_std],
        "regimes": regimes,
    }
    _dump_json(out / "meta.json", meta)
    return meta


def generate_corpus(config: CorpusConfig, out_dir: str | os.PathLike, workers: int = 1) -> dict:
    """Write every dataset of ``config`` under ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    root = np.random.SeedSequence(config.seed)
    cells = config.cells()
    children = root.spawn(len(cells) * config.datasets_per_config)
    jobs, entries = [], []
    idx = 0
    for cell in cells:
        for _ in range(config.datasets_per_config):
            ds_id = f"ds_{idx:05d}"
            ds_seed = int(children[idx].generate_state(1, np.uint64)[0])
            jobs.append((config.model_dump(mode="json"), cell, ds_seed, str(out / ds_id)))
            entries.append({"id": ds_id, "seed": ds_seed, **cell})
            idx += 1
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            metas = list(pool.map(_generate_dataset, jobs, chunksize=4))
    else:
        metas = [_generate_dataset(j) for j in jobs]
    for entry, meta in zip(entries, metas):
        entry["n_regimes"] = len(meta["regimes"])
    manifest = {"format": CORPUS_FORMAT, "config": config.model_dump(mode="json"), "datasets": entries}
    _dump_json(out / "manifest.json", manifest)
    logger.info("wrote %d datasets to %s", len(entries), out)
    return manifest

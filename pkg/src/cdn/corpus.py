"""Read-side access to corpora written by :func:`cdn.scm_sim.generate_corpus`."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .scm_sim import CORPUS_FORMAT, Dag, InterventionRegime, read_f32, read_graph_csv


@dataclass
class RegimeRecord:
    dataset: "DatasetRecord"
    index: int
    path: Path

    @cached_property
    def regime(self) -> InterventionRegime:
        return InterventionRegime.from_json(json.loads((self.path / "targets.json").read_text()))

    @property
    def targets(self) -> tuple[int, ...]:
        return self.regime.targets

    def target_mask(self) -> np.ndarray:
        mask = np.zeros(self.dataset.n, dtype=np.float32)
        mask[list(self.targets)] = 1.0
        return mask

    def load_int(self) -> np.ndarray:
        return read_f32(self.path / "int.f32", tuple(self.dataset.meta["int_shape"]))

    def g_int(self) -> Dag:
        return read_graph_csv(self.path / "graph_int.csv", self.dataset.n)

    @property
    def features_path(self) -> Path:
        return self.path / "features_int.bin"


@dataclass
class DatasetRecord:
    entry: dict
    path: Path

    @property
    def id(self) -> str:
        return self.entry["id"]

    @cached_property
    def meta(self) -> dict:
        return json.loads((self.path / "meta.json").read_text())

    @property
    def n(self) -> int:
        return int(self.meta["n"])

    @property
    def family(self) -> str:
        return self.meta["family"]

    @property
    def intervention(self) -> str:
        return self.meta["intervention"]

    @property
    def regimes(self) -> list[RegimeRecord]:
        return [RegimeRecord(self, r["regime"], self.path / r["dir"]) for r in self.meta["regimes"]]

    def load_obs(self) -> np.ndarray:
        return read_f32(self.path / "obs.f32", tuple(self.meta["obs_shape"]))

    def g_obs(self) -> Dag:
        return read_graph_csv(self.path / "graph_obs.csv", self.n)

    @property
    def features_path(self) -> Path:
        return self.path / "features_obs.bin"


class Corpus:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        try:
            self.manifest = json.loads(mpath.read_text())
        except OSError as exc:
            raise OSError(f"cannot read corpus manifest {mpath}: {exc}") from exc
        if self.manifest.get("format") != CORPUS_FORMAT:
            raise OSError(f"{mpath}: unsupported corpus format {self.manifest.get('format')!r}")

    @property
    def datasets(self) -> list[DatasetRecord]:
        return [DatasetRecord(e, self.root / e["id"]) for e in self.manifest["datasets"]]

    def __len__(self) -> int:
        return len(self.manifest["datasets"])

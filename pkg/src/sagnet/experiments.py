"""The two synthetic-basin studies: variant ordering and cross-basin transfer."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SynthConfig, merge_basins, synth_basin
from .evaluation import EvalReport, run_experiment
from .training import TrainConfig

ORDERING_VARIANTS = ("SAG-sim", "SAG-flow", "SAG-pp", "RNN")


@dataclass
class StudyResult:
    scope: str
    reports: dict[str, list[EvalReport]] = field(default_factory=dict)
    seconds: float = 0.0

    def per_seed(self, variant: str) -> np.ndarray:
        return np.array([r.scopes[self.scope][0] for r in self.reports[variant]])

    def mean(self, variant: str) -> float:
        return float(self.per_seed(variant).mean())

    def lines(self) -> list[str]:
        return [f"{v:10s} {self.mean(v):.4f}  per seed {np.round(self.per_seed(v), 4).tolist()}"
                for v in self.reports]


def ordering_study(synth: SynthConfig | None = None, train: TrainConfig | None = None,
                   seeds=(0, 1, 2), variants=ORDERING_VARIANTS) -> StudyResult:
    """Downstream test RMSE of each variant on one synthetic basin."""
    synth = synth or SynthConfig(n_segments=20, n_reservoirs=2, n_days=1500)
    train = train or TrainConfig(epochs=60)
    topology, dataset, _ = synth_basin(synth)
    out = StudyResult("downstream")
    start = time.perf_counter()
    for v in variants:
        out.reports[v] = run_experiment(v, dataset, topology, seeds, train)
    out.seconds = time.perf_counter() - start
    return out


def transfer_study(basin_a: SynthConfig | None = None, basin_b: SynthConfig | None = None,
                   train: TrainConfig | None = None, seeds=(0, 1, 2)) -> StudyResult:
    """One joint run over two basins: simulation embeddings on A's reservoirs,
    forecaster embeddings on B's, scored on B's downstream segments against the RNN."""
    basin_a = basin_a or SynthConfig(n_segments=20, n_reservoirs=2, n_days=1500, seed=0)
    basin_b = basin_b or replace(basin_a, n_segments=10, n_reservoirs=1, seed=basin_a.seed + 1)
    train = train or TrainConfig(epochs=60)
    a, b = synth_basin(basin_a), synth_basin(basin_b)
    topology, dataset, _, groups = merge_basins(a, b)
    offset = basin_a.n_segments
    b_down = np.array(sorted(i + offset for i in b[0].downstream_union()), dtype=int)
    pp = "SAG-pp:" + ",".join(str(k) for k in groups["B"]["reservoirs"])
    out = StudyResult("B_downstream")
    start = time.perf_counter()
    for v in (pp, "RNN"):
        out.reports[v] = run_experiment(v, dataset, topology, seeds, train,
                                        groups={"B_downstream": b_down})
    out.seconds = time.perf_counter() - start
    return out

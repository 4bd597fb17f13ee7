"""RMSE reporting, the plain LSTM baseline and variant x seed experiments."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import BasinDataset
from .model import EpisodeState, ModelConfig, ModelInputs, SagParams, Trace
from .network import NetworkTopology
from .training import (PreparedBasin, TrainConfig, TrainedModel, Variant, fit, parse_variant,
                       predict, prepare_basin, train_variant)

_log = logging.getLogger(__name__)

MIN_SEGMENT_OBS = 6  # per-segment rows need more than five test observations


class EmptyGroup(ValueError):
    pass


@dataclass
class EvalReport:
    variant: str
    seed: int | None
    overall: float
    n_obs: int
    per_segment: dict[int, tuple[float, int]] = field(default_factory=dict)
    scopes: dict[str, tuple[float, int]] = field(default_factory=dict)

    def reportable_segments(self, min_obs: int = MIN_SEGMENT_OBS) -> dict[int, tuple[float, int]]:
        return {i: v for i, v in self.per_segment.items() if v[1] >= min_obs}


def _rmse(err: np.ndarray) -> float:
    return float(np.sqrt(np.mean(err * err)))


def rmse(predictions: np.ndarray, observations: np.ndarray, mask: np.ndarray,
         groups: dict[str, np.ndarray] | None = None, variant: str = "", seed: int | None = None
         ) -> EvalReport:
    """Masked RMSE overall, per segment (rows) and for named segment groups."""
    mask = np.asarray(mask, dtype=bool) & ~np.isnan(observations)
    if not mask.any():
        raise EmptyGroup("no observations to score")
    err = np.where(mask, predictions - np.nan_to_num(observations), 0.0)
    report = EvalReport(variant, seed, _rmse(err[mask]), int(mask.sum()))
    for i in range(mask.shape[0]):
        n = int(mask[i].sum())
        if n:
            report.per_segment[i] = (_rmse(err[i][mask[i]]), n)
    report.scopes["overall"] = (report.overall, report.n_obs)
    for name, segs in (groups or {}).items():
        segs = np.asarray(sorted(segs), dtype=int)
        sub = mask[segs] if segs.size else np.zeros((0, mask.shape[1]), dtype=bool)
        if not sub.any():
            raise EmptyGroup(f"group {name!r} has no observations")
        report.scopes[name] = (_rmse(err[segs][sub]), int(sub.sum()))
    return report


# ------------------------------------------------------------------ baseline

_LSTM_GATES = ("i", "f", "o", "c")


class LstmModel:
    """Per-segment LSTM with parameters shared across segments; ignores the graph."""

    def __init__(self, cfg: ModelConfig, params: SagParams):
        self.cfg = cfg
        self.params = params

    @staticmethod
    def init_params(cfg: ModelConfig, rng: np.random.Generator) -> SagParams:
        D, Dx = cfg.hidden, cfg.n_features
        shapes: dict[str, tuple[int, ...]] = {}
        for g in _LSTM_GATES:
            shapes[f"W_{g}_h"] = (D, D)
            shapes[f"U_{g}_x"] = (D, Dx)
            shapes[f"b_{g}"] = (D,)
        shapes.update({"V": (1, D), "c": (1,)})
        values = {}
        for name, shape in shapes.items():
            if len(shape) == 2:
                s = np.sqrt(6.0 / (shape[0] + shape[1]))
                values[name] = rng.uniform(-s, s, size=shape)
            else:
                values[name] = np.zeros(shape)
        return SagParams.from_arrays(values)

    def initial_state(self, inputs: ModelInputs) -> EpisodeState:
        n = inputs.drivers.shape[1]
        return EpisodeState.zeros(n, 0, self.cfg.hidden, with_release=False)

    def run(self, inputs: ModelInputs, start: int, stop: int, state: EpisodeState,
            trace: Trace | None = None):
        P = self.params
        n = inputs.drivers.shape[1]
        steps = stop - start
        x = inputs.drivers[start:stop].reshape(steps * n, -1)
        xproj = {g: ad.add(ad.matmul(x, P[f"U_{g}_x"], transpose_b=True), P[f"b_{g}"])
                 for g in _LSTM_GATES}
        c, h = state.c, state.h
        preds = []
        for s in range(steps):
            rows = slice(s * n, (s + 1) * n)
            pre = {g: ad.add(ad.matmul(h, P[f"W_{g}_h"], transpose_b=True), ad.take(xproj[g], rows))
                   for g in _LSTM_GATES}
            i, f, o = ad.sigmoid(pre["i"]), ad.sigmoid(pre["f"]), ad.sigmoid(pre["o"])
            c = ad.add(ad.mul(f, c), ad.mul(i, ad.tanh(pre["c"])))
            h = ad.mul(o, ad.tanh(c))
            preds.append(ad.add(ad.matmul(h, P["V"], transpose_b=True), P["c"]))
            if trace is not None:
                trace.hidden.append(h.value.copy())
        return ad.concat(preds, axis=1), EpisodeState(c, state.r, h, None)

    def forward_sequence(self, inputs: ModelInputs, state: EpisodeState | None = None,
                         trace: Trace | None = None):
        state = self.initial_state(inputs) if state is None else state
        yhat, state = self.run(inputs, 0, inputs.n_steps, state, trace)
        return yhat.value, state


def train_rnn(dataset: BasinDataset, topology: NetworkTopology, cfg: TrainConfig
              ) -> tuple[TrainedModel, PreparedBasin]:
    r1 = np.zeros(dataset.n_reservoirs, dtype=bool)
    prep = prepare_basin(dataset, topology, r1, cfg.train_fraction)
    mcfg = ModelConfig(n_features=dataset.n_features, hidden=cfg.hidden, n_meta=dataset.meta.shape[1])
    params = LstmModel.init_params(mcfg, np.random.default_rng([cfg.seed, 3]))
    model = LstmModel(mcfg, params)
    history = fit(model, prep.inputs, np.nan_to_num(prep.targets), prep.mask, prep.train.stop,
                  cfg, cfg.epochs, stage="rnn")
    return TrainedModel(parse_variant("RNN"), cfg, mcfg, params, prep.norm, r1, history), prep


def baseline_rnn(dataset: BasinDataset, topology: NetworkTopology, cfg: TrainConfig,
                 groups: dict | None = None) -> EvalReport:
    trained, prep = train_rnn(dataset, topology, cfg)
    return evaluate(trained, prep, dataset, topology, groups)


# --------------------------------------------------------------- experiments

def default_groups(topology: NetworkTopology) -> dict[str, np.ndarray]:
    """Every segment below a dam, and the segments right below one."""
    groups = {"downstream": sorted(topology.downstream_union()),
              "below_dam": sorted(topology.below_dam())}
    return {k: np.array(v, dtype=int) for k, v in groups.items() if v}


def holdout_mask(prep: PreparedBasin) -> np.ndarray:
    mask = prep.mask.copy()
    mask[:, :prep.test.start] = False
    return mask


def evaluate(trained: TrainedModel, prep: PreparedBasin, dataset: BasinDataset,
             topology: NetworkTopology, groups: dict | None = None) -> EvalReport:
    groups = default_groups(topology) if groups is None else dict(groups)
    mask = holdout_mask(prep)
    for name in [g for g, segs in groups.items() if not mask[np.asarray(segs, dtype=int)].any()]:
        _log.warning("group %s has no test observations; left out of the report", name)
        del groups[name]
    preds = predict(trained, prep)
    return rmse(preds, dataset.obs, mask, groups, variant=trained.variant.name,
                seed=trained.train_config.seed)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SAG_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(variant: str | Variant, dataset: BasinDataset, topology: NetworkTopology,
                   seeds, cfg: TrainConfig, groups: dict | None = None,
                   threads: int | None = None) -> list[EvalReport]:
    """Train and score ``variant`` once per seed; seeds may run on parallel threads."""
    variant = parse_variant(variant) if isinstance(variant, str) else variant
    seeds = list(seeds)

    def one(seed: int) -> EvalReport:
        trained, prep = train_variant(dataset, topology, variant, replace(cfg, seed=seed))
        return evaluate(trained, prep, dataset, topology, groups)

    workers = min(threads or _threads(), len(seeds)) or 1
    if workers == 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, seeds))


def summarize(reports: list[EvalReport]) -> list[tuple[str, str, float, float]]:
    """``(variant, scope, mean_rmse, std_rmse)`` over seeds for each aggregate scope."""
    rows = []
    by_key: dict[tuple[str, str], list[float]] = {}
    for r in reports:
        for scope, (value, _) in r.scopes.items():
            by_key.setdefault((r.variant, scope), []).append(value)
    for (variant, scope), vals in by_key.items():
        arr = np.asarray(vals)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        rows.append((variant, scope, float(arr.mean()), std))
    return rows


def write_reports(reports: list[EvalReport], directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "scope", "segment_id", "rmse", "n_obs"])
        for r in reports:
            seed = "" if r.seed is None else r.seed
            for scope, (value, n) in r.scopes.items():
                w.writerow([r.variant, seed, scope, "", repr(value), n])
            for i, (value, n) in sorted(r.reportable_segments().items()):
                w.writerow([r.variant, seed, "segment", i, repr(value), n])
    with open(directory / "report_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "scope", "mean_rmse", "std_rmse"])
        for variant, scope, mean, std in summarize(reports):
            w.writerow([variant, scope, repr(mean), repr(std)])

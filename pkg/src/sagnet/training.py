"""Two-stage training: next-day forecaster first, then the main network."""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import BasinDataset, FeatureStats, fit_stats, standardize_drivers
from .model import (ModelConfig, ModelError, ModelInputs, SagModel, SagParams, Trace,
                    aggregate_forecaster_states, load_checkpoint, release_temperature_series,
                    save_checkpoint)
from .network import AdjacencyBlocks, NetworkTopology, compute_adjacency

_log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


class EmptyMask(TrainingError):
    pass


class TooShort(TrainingError):
    pass


class MissingReleaseData(TrainingError):
    pass


class MissingCache(TrainingError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class NumericFailure(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 40
    forecaster_epochs: int = 0  # 0 means "same as epochs"
    bptt_window: int = 100
    seed: int = 0
    train_fraction: float = 2.0 / 3.0
    hidden: int = 20
    filter_layers: int = 1

    def validate(self) -> None:
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be a finite non-negative number")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        if self.bptt_window < 1:
            raise ValueError("bptt_window must be >= 1")
        if self.epochs < 0 or self.forecaster_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.hidden < 1 or self.filter_layers < 1:
            raise ValueError("hidden and filter_layers must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("ADAM needs 0 <= beta < 1 and eps > 0")

    @property
    def stage1_epochs(self) -> int:
        return self.forecaster_epochs or self.epochs


# ------------------------------------------------------------------- pieces

def masked_mse(yhat: Tensor, y: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of squared errors over entries where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("no observed entries under the mask")
    if yhat.shape != mask.shape or np.shape(y) != mask.shape:
        raise ad.ShapeMismatch(f"prediction {yhat.shape}, target {np.shape(y)}, mask {mask.shape}")
    target = np.where(mask, y, 0.0)
    sq = ad.square(ad.subtract(yhat, target))
    return ad.scale(ad.sum(ad.mul(sq, mask.astype(np.float64))), 1.0 / count)


class Adam:
    """Bias-corrected ADAM over a fixed list of parameters."""

    def __init__(self, params, lr: float = 0.002, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NonFiniteGradient(f"gradient of {p.name} is not finite")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(params, adam: Adam) -> None:
    adam.step()
    adam.zero_grad()


def chronological_split(n_days: int, train_fraction: float = 2.0 / 3.0) -> tuple[range, range]:
    if not 0 < train_fraction < 1:
        raise TooShort(f"train_fraction {train_fraction} leaves an empty split")
    if n_days < 3:
        raise TooShort(f"need at least 3 days, got {n_days}")
    n_train = int(math.floor(train_fraction * n_days))
    if n_train < 1 or n_train >= n_days:
        raise TooShort(f"{n_days} days cannot be split at {train_fraction}")
    return range(0, n_train), range(n_train, n_days)


# ------------------------------------------------------------------ variants

@dataclass(frozen=True)
class Variant:
    name: str
    kind: str                       # "sag" or "rnn"
    pp_reservoirs: tuple[int, ...] | None = None  # None: every reservoir uses PP
    use_release: bool = False       # any SE reservoirs
    use_sim_temp: bool = True

    def routing(self, n_reservoirs: int) -> np.ndarray:
        """Boolean R1 membership (True = SE) for every reservoir."""
        if self.kind != "sag" or not self.use_release:
            return np.zeros(n_reservoirs, dtype=bool)
        r1 = np.ones(n_reservoirs, dtype=bool)
        for k in self.pp_reservoirs or ():
            if not 0 <= k < n_reservoirs:
                raise ValueError(f"{self.name}: reservoir {k} does not exist")
            r1[k] = False
        return r1

    def tables(self, n_reservoirs: int) -> set[str]:
        """Optional data tables this variant reads."""
        if not self.routing(n_reservoirs).any():
            return set()
        return {"release", "profiles"} if self.use_sim_temp else {"release"}


_PPX = re.compile(r"^SAG-pp:(\d+(?:,\d+)*)$")


def parse_variant(name: str) -> Variant:
    """``SAG-pp``, ``SAG-sim``, ``SAG-flow``, ``RNN`` or ``SAG-pp:<k,...>``.

    The last form routes the listed reservoirs through PP and every other
    reservoir through SE with simulated temperatures.
    """
    if name == "SAG-pp":
        return Variant(name, "sag")
    if name == "SAG-sim":
        return Variant(name, "sag", pp_reservoirs=(), use_release=True)
    if name == "SAG-flow":
        return Variant(name, "sag", pp_reservoirs=(), use_release=True, use_sim_temp=False)
    if name == "RNN":
        return Variant(name, "rnn")
    m = _PPX.match(name)
    if m:
        ids = tuple(sorted({int(s) for s in m.group(1).split(",")}))
        return Variant(name, "sag", pp_reservoirs=ids, use_release=True)
    raise ValueError(f"unknown variant {name!r}")


# ------------------------------------------------------------- preparation

@dataclass
class Normalization:
    drivers: FeatureStats
    target_mean: float
    target_std: float
    meta: FeatureStats | None = None
    release: FeatureStats | None = None

    def to_dict(self) -> dict:
        return {"drivers": self.drivers.to_dict(), "target_mean": self.target_mean,
                "target_std": self.target_std,
                "meta": None if self.meta is None else self.meta.to_dict(),
                "release": None if self.release is None else self.release.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(FeatureStats.from_dict(d["drivers"]), float(d["target_mean"]),
                   float(d["target_std"]),
                   None if d.get("meta") is None else FeatureStats.from_dict(d["meta"]),
                   None if d.get("release") is None else FeatureStats.from_dict(d["release"]))


@dataclass
class PreparedBasin:
    """Model-ready, standardized view of a dataset under one routing."""
    inputs: ModelInputs
    targets: np.ndarray   # (N, T) standardized, NaN where unobserved
    mask: np.ndarray      # (N, T)
    train: range
    test: range
    norm: Normalization
    topology: NetworkTopology

    def to_celsius(self, standardized: np.ndarray) -> np.ndarray:
        return standardized * self.norm.target_std + self.norm.target_mean


def release_features(dataset: BasinDataset, r1: np.ndarray, use_sim_temp: bool) -> np.ndarray:
    """Raw SE rows ``[f_1..f_L ; u]`` as ``(T, M, L')``; zeros for non-SE reservoirs."""
    M, T = dataset.n_reservoirs, dataset.n_days
    missing = [int(k) for k in np.flatnonzero(r1 & ~dataset.release_available)]
    if missing:
        raise MissingReleaseData(f"reservoirs {missing} have no release/profile data")
    flows = dataset.release
    L = flows.shape[2]
    width = L + (1 if use_sim_temp else 0)
    out = np.zeros((T, M, width))
    for k in np.flatnonzero(r1):
        out[:, k, :L] = flows[k]
    if use_sim_temp:
        prof = dataset.profiles
        for k in np.flatnonzero(r1):
            u, flagged = release_temperature_series(flows[k], prof[k])
            if flagged.any():
                _log.warning("reservoir %d: %d zero-release days use the mean layer temperature",
                             k, int(flagged.sum()))
            out[:, k, L] = u
    return out


def prepare_basin(dataset: BasinDataset, topology: NetworkTopology, r1: np.ndarray,
                  train_fraction: float, use_sim_temp: bool = True,
                  norm: Normalization | None = None, adjacency: np.ndarray | None = None
                  ) -> PreparedBasin:
    if topology.n_segments != dataset.n_segments or topology.n_reservoirs != dataset.n_reservoirs:
        raise ValueError("topology and dataset disagree on node counts")
    train, test = chronological_split(dataset.n_days, train_fraction)
    if norm is None:
        _, dstats = standardize_drivers(dataset, train)
        tr_obs = dataset.obs[:, train.start:train.stop]
        vals = tr_obs[~np.isnan(tr_obs)]
        if vals.size == 0:
            raise EmptyMask("no observations in the training period")
        sd = float(vals.std())
        norm = Normalization(dstats, float(vals.mean()), sd if sd > 0 else 1.0)
        if dataset.n_reservoirs:
            norm.meta = fit_stats(dataset.meta, axis=0)
    drivers = norm.drivers.apply(dataset.drivers)
    meta = norm.meta.apply(dataset.meta) if norm.meta is not None else dataset.meta.copy()

    A = topology_adjacency(topology) if adjacency is None else adjacency
    blocks = AdjacencyBlocks.from_matrix(A, topology.n_segments)

    se = None
    r1 = np.asarray(r1, dtype=bool)
    if r1.any():
        raw = release_features(dataset, r1, use_sim_temp)
        if norm.release is None:
            sel = raw[train.start:train.stop][:, r1, :].reshape(-1, raw.shape[2])
            norm.release = fit_stats(sel, axis=0)
        se = norm.release.apply(raw)
        se[:, ~r1, :] = 0.0

    inputs = ModelInputs(drivers=np.ascontiguousarray(drivers.transpose(1, 0, 2)), meta=meta,
                         blocks=blocks, r1=r1, se=se)
    targets = (dataset.obs - norm.target_mean) / norm.target_std
    return PreparedBasin(inputs, targets, dataset.mask, train, test, norm, topology)


def topology_adjacency(topology: NetworkTopology) -> np.ndarray:
    try:
        return compute_adjacency(topology)
    except ValueError:
        return np.zeros((topology.n_nodes, topology.n_nodes))


# --------------------------------------------------------------------- fit

def fit(model, inputs: ModelInputs, targets: np.ndarray, mask: np.ndarray, n_steps: int,
        cfg: TrainConfig, epochs: int, stage: str = "main",
        history: list | None = None) -> list[tuple[int, str, float]]:
    """Truncated-BPTT training over steps ``0..n_steps-1``.

    State is carried across windows without gradient.  Returns history rows
    ``(epoch, stage, train_loss)`` with the loss in standardized units.
    """
    if not mask[:, :n_steps].any():
        raise EmptyMask(f"{stage}: no training observations")
    params = list(model.params)
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rows = history if history is not None else []
    W = cfg.bptt_window
    for epoch in range(1, epochs + 1):
        state = model.initial_state(inputs)
        sse, count = 0.0, 0
        for start in range(0, n_steps, W):
            stop = min(start + W, n_steps)
            wmask = mask[:, start:stop]
            if not wmask.any():
                _, state = model.run(inputs, start, stop, state)
                state = state.detach()
                continue
            with ad.Tape() as tape:
                yhat, state = model.run(inputs, start, stop, state)
                loss = masked_mse(yhat, targets[:, start:stop], wmask)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericFailure(f"{stage}: loss became {value} in epoch {epoch}")
            ad.backward(loss, tape)
            opt.step()
            opt.zero_grad()
            state = state.detach()
            n = int(wmask.sum())
            sse += value * n
            count += n
        rows.append((epoch, stage, sse / count))
        _log.info("%s epoch %d loss %.5f", stage, epoch, sse / count)
    return rows


def write_history(rows, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "stage", "train_loss"])
        for epoch, stage, loss in rows:
            w.writerow([epoch, stage, repr(float(loss))])


# --------------------------------------------------------------- forecaster

@dataclass
class ForecasterResult:
    config: ModelConfig
    params: SagParams
    hidden: np.ndarray        # (T, N, D) h~ for every step and segment
    train_mask: np.ndarray    # (N, T) mask the forecaster was fitted on
    history: list


def forecaster_mask(prep: PreparedBasin) -> np.ndarray:
    """Observations usable for next-day forecasting: target day in the training
    period and segment not downstream of any reservoir."""
    N, T = prep.mask.shape
    shifted = np.zeros((N, T), dtype=bool)
    shifted[:, :-1] = prep.mask[:, 1:]
    shifted[:, prep.train.stop - 1:] = False
    excluded = sorted(prep.topology.downstream_union())
    shifted[excluded, :] = False
    return shifted


def run_forecaster(cfg: ModelConfig, params: SagParams, prep: PreparedBasin):
    model = SagModel(cfg, params)
    trace = Trace()
    preds, _ = model.forward_sequence(prep.inputs, trace=trace)
    return preds, np.stack(trace.hidden)


def train_forecaster(prep: PreparedBasin, cfg: TrainConfig) -> ForecasterResult:
    if prep.train.stop < 2:
        raise TooShort("forecaster needs at least two training days")
    mcfg = ModelConfig(n_features=prep.inputs.drivers.shape[2], hidden=cfg.hidden,
                       n_meta=prep.inputs.meta.shape[1], filter_layers=cfg.filter_layers,
                       forecaster=True)
    rng = np.random.default_rng([cfg.seed, 1])
    params = SagParams.initialize(mcfg, rng)
    model = SagModel(mcfg, params)
    mask = forecaster_mask(prep)
    targets = np.zeros_like(prep.targets)
    targets[:, :-1] = np.nan_to_num(prep.targets[:, 1:])
    hist = fit(model, prep.inputs, targets, mask, prep.train.stop - 1, cfg, cfg.stage1_epochs,
               stage="forecaster")
    _, hidden = run_forecaster(mcfg, params, prep)
    return ForecasterResult(mcfg, params, hidden, mask, hist)


# --------------------------------------------------------------------- main

@dataclass
class TrainedModel:
    variant: Variant
    train_config: TrainConfig
    model_config: ModelConfig
    params: SagParams
    norm: Normalization
    r1: np.ndarray
    history: list
    forecaster: ForecasterResult | None = None
    n_layers: int = 0

    def extra(self, dataset: BasinDataset) -> dict:
        return {"variant": self.variant.name, "r1": [bool(x) for x in self.r1],
                "train_config": asdict(self.train_config), "norm": self.norm.to_dict(),
                "n_segments": dataset.n_segments, "n_reservoirs": dataset.n_reservoirs,
                "n_features": dataset.n_features, "n_layers": self.n_layers}


def attach_pp(prep: PreparedBasin, hidden: np.ndarray | None) -> None:
    r1 = prep.inputs.r1
    if r1.size and (~r1).any():
        if hidden is None:
            raise MissingCache("PP reservoirs need the forecaster hidden-state cache")
        prep.inputs.pp = aggregate_forecaster_states(hidden, prep.inputs.blocks.res_seg)


def train_sag(prep: PreparedBasin, cfg: TrainConfig, variant: Variant,
              forecaster: ForecasterResult | None = None, history: list | None = None,
              ) -> tuple[ModelConfig, SagParams, list]:
    attach_pp(prep, None if forecaster is None else forecaster.hidden)
    se_width = prep.inputs.se.shape[2] if prep.inputs.se is not None else 3
    mcfg = ModelConfig(n_features=prep.inputs.drivers.shape[2], hidden=cfg.hidden,
                       n_meta=prep.inputs.meta.shape[1], filter_layers=cfg.filter_layers,
                       n_layers=se_width - (1 if variant.use_sim_temp else 0),
                       use_sim_temp=variant.use_sim_temp)
    rng = np.random.default_rng([cfg.seed, 2])
    params = SagParams.initialize(mcfg, rng)
    model = SagModel(mcfg, params)
    hist = fit(model, prep.inputs, np.nan_to_num(prep.targets), prep.mask, prep.train.stop, cfg,
               cfg.epochs, stage="main", history=history)
    return mcfg, params, hist


def train_variant(dataset: BasinDataset, topology: NetworkTopology, variant: Variant | str,
                  cfg: TrainConfig) -> tuple[TrainedModel, PreparedBasin]:
    """Fit one variant end to end (forecaster stage only when PP is in use)."""
    cfg.validate()
    if isinstance(variant, str):
        variant = parse_variant(variant)
    if variant.kind == "rnn":
        from .evaluation import train_rnn

        return train_rnn(dataset, topology, cfg)
    r1 = variant.routing(dataset.n_reservoirs)
    prep = prepare_basin(dataset, topology, r1, cfg.train_fraction, variant.use_sim_temp)
    forecaster = None
    history: list = []
    if (~r1).any():
        forecaster = train_forecaster(prep, cfg)
        history.extend(forecaster.history)
    mcfg, params, history = train_sag(prep, cfg, variant, forecaster, history)
    n_layers = dataset.n_layers if r1.any() else 0
    return TrainedModel(variant, cfg, mcfg, params, prep.norm, r1, history, forecaster,
                        n_layers=n_layers), prep


def predict(trained: TrainedModel, prep: PreparedBasin) -> np.ndarray:
    """Predictions in degC for every segment and day, ``(N, T)``."""
    if trained.variant.kind == "rnn":
        from .evaluation import LstmModel

        preds, _ = LstmModel(trained.model_config, trained.params).forward_sequence(prep.inputs)
        return prep.to_celsius(preds)
    if prep.inputs.r1.size and (~prep.inputs.r1).any() and prep.inputs.pp is None:
        if trained.forecaster is None:
            raise MissingCache("checkpoint lacks the forecaster needed for PP reservoirs")
        _, hidden = run_forecaster(trained.forecaster.config, trained.forecaster.params, prep)
        attach_pp(prep, hidden)
    preds, _ = SagModel(trained.model_config, trained.params).forward_sequence(prep.inputs)
    return prep.to_celsius(preds)


def train_config_keys() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


# -------------------------------------------------------------- checkpoints

def save_trained(trained: TrainedModel, dataset: BasinDataset, path: Path) -> None:
    fc = trained.forecaster
    save_checkpoint(path, model_config=trained.model_config, params=trained.params,
                    extra=trained.extra(dataset),
                    forecaster=None if fc is None else (fc.config, fc.params))


def load_trained(path: Path) -> TrainedModel:
    doc = load_checkpoint(path)
    extra = doc["extra"]
    try:
        cfg = TrainConfig(**extra["train_config"])
        variant = parse_variant(extra["variant"])
        norm = Normalization.from_dict(extra["norm"])
        r1 = np.asarray(extra["r1"], dtype=bool)
    except (KeyError, TypeError) as exc:
        raise ModelError(f"checkpoint {path} is missing run metadata: {exc}") from exc
    forecaster = None
    if "forecaster" in doc:
        fcfg, fparams = doc["forecaster"]
        forecaster = ForecasterResult(fcfg, fparams, None, None, [])
    return TrainedModel(variant, cfg, doc["model_config"], doc["params"], norm, r1, [],
                        forecaster, int(extra.get("n_layers", 0)))


def check_compatible(trained: TrainedModel, dataset: BasinDataset) -> None:
    """Raise ``ShapeMismatch`` when ``dataset`` cannot feed the stored model."""
    mcfg = trained.model_config
    problems = []
    if dataset.n_features != mcfg.n_features:
        problems.append(f"{dataset.n_features} driver features, model expects {mcfg.n_features}")
    if dataset.n_reservoirs != trained.r1.size:
        problems.append(f"{dataset.n_reservoirs} reservoirs, model expects {trained.r1.size}")
    if trained.r1.any() and dataset.n_layers != trained.n_layers:
        problems.append(f"{dataset.n_layers} release layers, model expects {trained.n_layers}")
    if problems:
        raise ad.ShapeMismatch("; ".join(problems))


def prepare_for(trained: TrainedModel, dataset: BasinDataset, topology: NetworkTopology
                ) -> PreparedBasin:
    check_compatible(trained, dataset)
    return prepare_basin(dataset, topology, trained.r1, trained.train_config.train_fraction,
                         trained.variant.use_sim_temp, norm=trained.norm)

"""State-aware graph recurrent cell over streams and reservoirs.

All node-level quantities are batched by rows: stream states are ``(N, D)``,
reservoir states ``(M, D)``.  Every cross-node term at step ``t`` reads values
from ``t - 1`` only, so the whole network advances synchronously.

Weight matrices are stored output-major (``D_out x D_in``) and applied as
``x @ W.T``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .network import AdjacencyBlocks

_log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class MissingEmbedding(ModelError):
    pass


class EmptyDownstreamSet(ModelError):
    pass


class ZeroTotalFlow(ModelError):
    pass


class ZeroTotalFlowWarning(UserWarning):
    pass


@dataclass
class ModelConfig:
    n_features: int = 10
    hidden: int = 20
    n_meta: int = 5
    n_layers: int = 2          # release depth layers L
    filter_layers: int = 1     # depth of the meta-feature filters f1/f2
    use_sim_temp: bool = True  # False drops u from the SE input (flow-only)
    forecaster: bool = False   # forecaster variant: no release embedding

    @property
    def se_width(self) -> int:
        return self.n_layers + (1 if self.use_sim_temp else 0)


_GATE_INPUTS = ("f", "g", "gr", "s", "o", "c")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, Dx, Dm = cfg.hidden, cfg.n_features, cfg.n_meta
    shapes: dict[str, tuple[int, ...]] = {"W_r": (D, D), "b_r": (D,)}
    for name in ("f1", "f2"):
        width = Dm
        for layer in range(cfg.filter_layers):
            shapes[f"{name}_W{layer}"] = (D, width)
            shapes[f"{name}_b{layer}"] = (D,)
            width = D
    shapes.update({
        "W_c_h": (D, D), "W_f_h": (D, D), "W_g_h": (D, D), "W_o_h": (D, D),
        "W_gr_p": (D, D), "W_s_q": (D, D),
    })
    for g in _GATE_INPUTS:
        shapes[f"U_{g}_x"] = (D, Dx)
        shapes[f"b_{g}"] = (D,)
    shapes.update({"W_p": (D, D), "W_p_r": (D, D), "b_p": (D,),
                   "W_q": (D, D), "b_q": (D,), "V": (1, D), "c": (1,)})
    if not cfg.forecaster:
        shapes.update({"W_pp": (D, D), "b_pp": (D,), "Z": (D, cfg.se_width), "b_se": (D,)})
    return shapes


class SagParams:
    """Named parameter set; iteration order is the (stable) declaration order."""

    def __init__(self, params: dict[str, Parameter]):
        self._p = dict(params)

    @classmethod
    def initialize(cls, cfg: ModelConfig, rng: np.random.Generator,
                   bias_scale: float = 0.0) -> "SagParams":
        out = {}
        for name, shape in param_shapes(cfg).items():
            if len(shape) == 2:
                s = np.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-s, s, size=shape)
            elif bias_scale:
                value = rng.uniform(-bias_scale, bias_scale, size=shape)
            else:
                value = np.zeros(shape)
            out[name] = Parameter(value, name)
        return cls(out)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "SagParams":
        return cls({n: Parameter(np.zeros(s), n) for n, s in param_shapes(cfg).items()})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "SagParams":
        return cls({n: Parameter(np.asarray(v, dtype=np.float64), n) for n, v in arrays.items()})

    def __getitem__(self, name: str) -> Parameter:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __iter__(self):
        return iter(self._p.values())

    def names(self) -> list[str]:
        return list(self._p)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._p.items()}

    def zero_grad(self) -> None:
        for p in self._p.values():
            p.zero_grad()

    def check_finite(self) -> None:
        for n, p in self._p.items():
            if not np.isfinite(p.value).all():
                raise ModelError(f"parameter {n} is not finite")


# ------------------------------------------------------------------ equations

def meta_filter(meta, P: SagParams, which: str) -> Tensor:
    """f1 / f2: stacked affine+sigmoid layers mapping meta-features into [0, 1]^D."""
    h = ad.constant(meta)
    layer = 0
    while f"{which}_W{layer}" in P:
        h = ad.sigmoid(ad.add(ad.matmul(h, P[f"{which}_W{layer}"], transpose_b=True),
                              P[f"{which}_b{layer}"]))
        layer += 1
    return h


def update_reservoir_state(r_prev, c_prev, filt1, seg_res_T, P: SagParams) -> Tensor:
    """r^t = tanh(W_r r^{t-1} + f1(l) * sum_{i in S(k)} A_ik c_i^{t-1} + b_r).

    ``seg_res_T`` is the ``(M, N)`` block with ``[k, i] = A_ik``.
    """
    inflow = ad.matmul(seg_res_T, c_prev)
    pre = ad.add(ad.matmul(r_prev, P["W_r"], transpose_b=True), ad.mul(filt1, inflow))
    return ad.tanh(ad.add(pre, P["b_r"]))


def transferred_from_reservoirs(r_prev, a_prev, filt2, res_seg_T, P: SagParams) -> Tensor:
    """p_i = tanh(W_p sum_{k in M(i)} A_ki f2(l_k) * (W_p^r r_k + a_k) + b_p).

    ``res_seg_T`` is ``(N, M)`` with ``[i, k] = A_ki``.
    """
    if a_prev is None:
        if res_seg_T.shape[1]:
            raise MissingEmbedding("release embeddings for t-1 are required")
        a_prev = np.zeros((0, P["b_p"].shape[0]))
    msg = ad.mul(filt2, ad.add(ad.matmul(r_prev, P["W_p_r"], transpose_b=True), a_prev))
    agg = ad.matmul(res_seg_T, msg)
    return ad.tanh(ad.add(ad.matmul(agg, P["W_p"], transpose_b=True), P["b_p"]))


def transferred_from_reservoirs_forecaster(r_prev, filt2, res_seg_T, P: SagParams) -> Tensor:
    msg = ad.mul(filt2, ad.matmul(r_prev, P["W_p_r"], transpose_b=True))
    agg = ad.matmul(res_seg_T, msg)
    return ad.tanh(ad.add(ad.matmul(agg, P["W_p"], transpose_b=True), P["b_p"]))


def transferred_from_segments(h_prev, seg_seg_T, P: SagParams) -> Tensor:
    """q_i = tanh(W_q sum_{j in N(i)} A_ji h_j + b_q); ``seg_seg_T[i, j] = A_ji``."""
    agg = ad.matmul(seg_seg_T, h_prev)
    return ad.tanh(ad.add(ad.matmul(agg, P["W_q"], transpose_b=True), P["b_q"]))


def input_projections(x, P: SagParams) -> dict[str, Tensor]:
    """``U_g x + b_g`` for every gate/candidate input, keyed by gate name."""
    return {g: ad.add(ad.matmul(x, P[f"U_{g}_x"], transpose_b=True), P[f"b_{g}"])
            for g in _GATE_INPUTS}


def compute_gates(h_prev, p, q, xproj: dict, P: SagParams):
    gf = ad.sigmoid(ad.add(ad.matmul(h_prev, P["W_f_h"], transpose_b=True), xproj["f"]))
    gi = ad.sigmoid(ad.add(ad.matmul(h_prev, P["W_g_h"], transpose_b=True), xproj["g"]))
    gr = ad.sigmoid(ad.add(ad.matmul(p, P["W_gr_p"], transpose_b=True), xproj["gr"]))
    gs = ad.sigmoid(ad.add(ad.matmul(q, P["W_s_q"], transpose_b=True), xproj["s"]))
    return gf, gi, gr, gs


def candidate_state(h_prev, xproj: dict, P: SagParams) -> Tensor:
    return ad.tanh(ad.add(ad.matmul(h_prev, P["W_c_h"], transpose_b=True), xproj["c"]))


def update_stream_state(c_prev, gates, c_bar, p, q) -> Tensor:
    gf, gi, gr, gs = gates
    total = ad.add(ad.add(ad.mul(gf, c_prev), ad.mul(gi, c_bar)),
                   ad.add(ad.mul(gr, p), ad.mul(gs, q)))
    return ad.tanh(total)


def hidden_and_predict(c, h_prev, xproj: dict, P: SagParams):
    o = ad.sigmoid(ad.add(ad.matmul(h_prev, P["W_o_h"], transpose_b=True), xproj["o"]))
    h = ad.mul(o, ad.tanh(c))
    y = ad.add(ad.matmul(h, P["V"], transpose_b=True), P["c"])
    return h, y, o


def pp_release_embedding(htilde, res_seg, P: SagParams) -> Tensor:
    """a_k = sum_{i in S_dn(k)} A_ki W_pp h~_i + b_pp, with ``res_seg[k, i] = A_ki``."""
    res_seg = np.asarray(res_seg)
    empty = np.flatnonzero(~(res_seg != 0).any(axis=1))
    if empty.size:
        raise EmptyDownstreamSet(f"reservoirs {empty.tolist()} have no downstream segments")
    proj = ad.matmul(htilde, P["W_pp"], transpose_b=True)
    return ad.add(ad.matmul(res_seg, proj), P["b_pp"])


def flow_average_temperature(flows: Sequence[float], temps: Sequence[float]) -> float:
    """Release-weighted mean of per-layer temperatures for one reservoir-day."""
    if len(flows) != len(temps):
        raise ModelError("flows and temperatures must have one entry per layer")
    num = 0.0
    den = 0.0
    for f, m in zip(flows, temps):
        num += f * m
        den += f
    if den == 0:
        raise ZeroTotalFlow("no water released from any layer")
    return num / den


def release_temperature_series(flows: np.ndarray, temps: np.ndarray):
    """Vectorized flow-average over the last axis.

    Days with zero total flow get the unweighted layer mean; the returned
    boolean array flags them.
    """
    flows = np.asarray(flows, dtype=np.float64)
    temps = np.asarray(temps, dtype=np.float64)
    if flows.shape != temps.shape:
        raise ModelError(f"flow shape {flows.shape} != temperature shape {temps.shape}")
    num = np.zeros(flows.shape[:-1])
    den = np.zeros(flows.shape[:-1])
    for d in range(flows.shape[-1]):
        num = num + flows[..., d] * temps[..., d]
        den = den + flows[..., d]
    flagged = den == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        u = num / den
    if flagged.any():
        warnings.warn(f"{int(flagged.sum())} reservoir-days with zero total release; "
                      "using the unweighted layer mean", ZeroTotalFlowWarning, stacklevel=2)
        u = np.where(flagged, temps.mean(axis=-1), u)
    return u, flagged


def se_release_embedding(se_input, P: SagParams) -> Tensor:
    """a_k = Z [f_k ; u_k] + b_se for rows of pre-concatenated ``[f ; u]`` inputs."""
    se_input = ad.constant(se_input)
    if se_input.shape[-1] != P["Z"].shape[1]:
        raise ad.ShapeMismatch(f"Z expects {P['Z'].shape[1]} release inputs, "
                               f"got {se_input.shape[-1]}")
    return ad.add(ad.matmul(se_input, P["Z"], transpose_b=True), P["b_se"])


# ------------------------------------------------------------- whole network

@dataclass
class EpisodeState:
    c: Tensor
    r: Tensor
    h: Tensor
    a: Tensor | None  # release embedding at the previous step (None in forecaster)

    @classmethod
    def zeros(cls, n_segments: int, n_reservoirs: int, hidden: int,
              with_release: bool = True) -> "EpisodeState":
        return cls(Tensor(np.zeros((n_segments, hidden))), Tensor(np.zeros((n_reservoirs, hidden))),
                   Tensor(np.zeros((n_segments, hidden))),
                   Tensor(np.zeros((n_reservoirs, hidden))) if with_release else None)

    def detach(self) -> "EpisodeState":
        return EpisodeState(self.c.detach(), self.r.detach(), self.h.detach(),
                            None if self.a is None else self.a.detach())


@dataclass
class ModelInputs:
    """Per-dataset constants, all already standardized.

    ``drivers`` is time-major ``(T, N, D_x)``.  ``se`` holds ``[f ; u]`` rows
    ``(T, M, L')`` and ``pp`` the aggregated forecaster states
    ``sum_i A_ki h~_i^t`` as ``(T, M, D)``; rows of reservoirs routed the
    other way are ignored.
    """
    drivers: np.ndarray
    meta: np.ndarray
    blocks: AdjacencyBlocks
    r1: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    se: np.ndarray | None = None
    pp: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return self.drivers.shape[0]


@dataclass
class Trace:
    hidden: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    states: list = field(default_factory=list)
    release: list = field(default_factory=list)


class SagModel:
    def __init__(self, cfg: ModelConfig, params: SagParams):
        self.cfg = cfg
        self.params = params

    def initial_state(self, inputs: ModelInputs) -> EpisodeState:
        n = inputs.drivers.shape[1]
        m = inputs.meta.shape[0]
        return EpisodeState.zeros(n, m, self.cfg.hidden, with_release=not self.cfg.forecaster)

    def _check_routing(self, inputs: ModelInputs) -> None:
        m = inputs.meta.shape[0]
        if self.cfg.forecaster or m == 0:
            return
        r1 = np.asarray(inputs.r1, dtype=bool)
        if r1.shape != (m,):
            raise ModelError(f"routing mask must cover all {m} reservoirs")
        if r1.any() and inputs.se is None:
            raise MissingEmbedding("SE reservoirs need release inputs")
        if (~r1).any():
            if inputs.pp is None:
                raise MissingEmbedding("PP reservoirs need forecaster hidden states")
            dn = inputs.blocks.res_seg[~r1]
            if not (dn != 0).any(axis=1).all():
                raise EmptyDownstreamSet("a PP reservoir has no downstream segments")

    def release_embeddings(self, inputs: ModelInputs, start: int, stop: int) -> Tensor | None:
        """Release embeddings for steps ``start..stop-1`` as a ``((stop-start)*M, D)`` tensor."""
        P = self.params
        m = inputs.meta.shape[0]
        D = self.cfg.hidden
        if self.cfg.forecaster:
            return None
        if m == 0:
            return Tensor(np.zeros((0, D)))
        r1 = np.asarray(inputs.r1, dtype=bool)
        rows = (stop - start) * m
        parts = []
        if r1.any():
            se_in = inputs.se[start:stop].reshape(rows, -1)
            parts.append(ad.mul(se_release_embedding(se_in, P),
                                np.repeat(np.tile(r1, stop - start)[:, None], D, axis=1)
                                .astype(np.float64)))
        if (~r1).any():
            pp_in = inputs.pp[start:stop].reshape(rows, D)
            pp = ad.add(ad.matmul(pp_in, P["W_pp"], transpose_b=True), P["b_pp"])
            parts.append(ad.mul(pp, np.repeat(np.tile(~r1, stop - start)[:, None], D, axis=1)
                                .astype(np.float64)))
        return parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])

    def run(self, inputs: ModelInputs, start: int, stop: int, state: EpisodeState,
            trace: Trace | None = None):
        """Advance ``state`` over steps ``start..stop-1``.

        Returns ``(predictions, state)`` where predictions is an ``(N, stop-start)``
        tensor.  Gradients flow only when called inside an active tape.
        """
        P = self.params
        self._check_routing(inputs)
        n = inputs.drivers.shape[1]
        m = inputs.meta.shape[0]
        blocks = inputs.blocks
        seg_res_T = blocks.seg_res.T
        res_seg_T = blocks.res_seg.T
        seg_seg_T = blocks.seg_seg.T
        steps = stop - start

        filt1 = meta_filter(inputs.meta, P, "f1")
        filt2 = meta_filter(inputs.meta, P, "f2")
        x_all = inputs.drivers[start:stop].reshape(steps * n, -1)
        xproj_all = input_projections(x_all, P)
        a_all = self.release_embeddings(inputs, start, stop)

        c, r, h, a = state.c, state.r, state.h, state.a
        preds = []
        for s in range(steps):
            rows = slice(s * n, (s + 1) * n)
            xproj = {g: ad.take(v, rows) for g, v in xproj_all.items()}
            q = transferred_from_segments(h, seg_seg_T, P)
            if self.cfg.forecaster:
                p = transferred_from_reservoirs_forecaster(r, filt2, res_seg_T, P)
            else:
                p = transferred_from_reservoirs(r, a, filt2, res_seg_T, P)
            r_new = update_reservoir_state(r, c, filt1, seg_res_T, P) if m else r
            gates = compute_gates(h, p, q, xproj, P)
            c_bar = candidate_state(h, xproj, P)
            c_new = update_stream_state(c, gates, c_bar, p, q)
            h, y, o = hidden_and_predict(c_new, h, xproj, P)
            c, r = c_new, r_new
            if a_all is not None:
                a = ad.take(a_all, slice(s * m, (s + 1) * m))
            preds.append(y)
            if trace is not None:
                trace.hidden.append(h.value.copy())
                trace.gates.append(tuple(g.value.copy() for g in (*gates, o)))
                trace.states.append((c.value.copy(), r.value.copy(), c_bar.value.copy(),
                                     p.value.copy(), q.value.copy()))
                if a is not None:
                    trace.release.append(a.value.copy())
        yhat = ad.concat(preds, axis=1)
        return yhat, EpisodeState(c, r, h, a)

    def step_network(self, inputs: ModelInputs, t: int, state: EpisodeState):
        """One synchronous update of every node at step ``t``."""
        yhat, new = self.run(inputs, t, t + 1, state)
        return new, yhat

    def forward_sequence(self, inputs: ModelInputs, state: EpisodeState | None = None,
                         trace: Trace | None = None):
        """Full pass over all steps, no gradient tracking; returns ``(N, T)`` predictions."""
        state = self.initial_state(inputs) if state is None else state
        yhat, state = self.run(inputs, 0, inputs.n_steps, state, trace)
        return yhat.value, state


def aggregate_forecaster_states(htilde: np.ndarray, res_seg: np.ndarray) -> np.ndarray:
    """``sum_i A_ki h~_i^t`` for every step: ``(T, N, D)`` -> ``(T, M, D)``."""
    return np.einsum("ki,tid->tkd", res_seg, htilde)


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(path: Path, *, model_config: ModelConfig, params: SagParams,
                    extra: dict | None = None, forecaster: tuple[ModelConfig, SagParams] | None = None,
                    ) -> None:
    """Write a self-describing JSON checkpoint (deterministic byte layout)."""

    def pack(p: SagParams):
        return {name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
                for name, arr in p.to_arrays().items()}

    doc = {"format_version": CHECKPOINT_VERSION, "model_config": asdict(model_config),
           "params": pack(params), "extra": extra or {}}
    if forecaster is not None:
        doc["forecaster"] = {"model_config": asdict(forecaster[0]), "params": pack(forecaster[1])}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {doc.get('format_version')}")

    def unpack(block):
        return SagParams.from_arrays({n: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
                                      for n, v in block.items()})

    out = {"model_config": ModelConfig(**doc["model_config"]), "params": unpack(doc["params"]),
           "extra": doc.get("extra", {})}
    if "forecaster" in doc:
        out["forecaster"] = (ModelConfig(**doc["forecaster"]["model_config"]),
                             unpack(doc["forecaster"]["params"]))
    return out

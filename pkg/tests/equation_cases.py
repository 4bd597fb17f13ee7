"""Random single-step cases comparing each vectorized equation with its oracle."""
from __future__ import annotations

import numpy as np

from sagnet import model as sm
from sagnet.autodiff import Tensor
from sagnet.model import ModelConfig, SagParams

from . import oracles as orc


def random_case(rng: np.random.Generator) -> dict:
    N = int(rng.integers(1, 6))
    M = int(rng.integers(1, 4))
    D = int(rng.integers(1, 6))
    Dx = int(rng.integers(1, 5))
    L = int(rng.integers(1, 4))
    cfg = ModelConfig(n_features=Dx, hidden=D, n_meta=5, n_layers=L,
                      filter_layers=int(rng.integers(1, 3)))
    P = SagParams.initialize(cfg, rng, bias_scale=1.0)

    def sparse(shape):
        return np.where(rng.random(shape) < 0.6, rng.uniform(0.05, 0.95, shape), 0.0)

    res_seg = sparse((M, N))
    res_seg[np.arange(M), rng.integers(0, N, M)] = rng.uniform(0.05, 0.95, M)  # S_dn(k) non-empty
    return dict(
        cfg=cfg, P=P, arr=P.to_arrays(), N=N, M=M, D=D,
        seg_seg=sparse((N, N)) * (1 - np.eye(N)), seg_res=sparse((N, M)), res_seg=res_seg,
        meta=rng.normal(size=(M, 5)), x=rng.normal(size=(N, Dx)),
        c=rng.normal(size=(N, D)), h=rng.uniform(-1, 1, (N, D)), r=rng.uniform(-1, 1, (M, D)),
        a=rng.normal(size=(M, D)), p=rng.uniform(-1, 1, (N, D)), q=rng.uniform(-1, 1, (N, D)),
        htilde=rng.uniform(-1, 1, (N, D)), se=rng.normal(size=(M, cfg.se_width)),
    )


def discrepancies(case: dict) -> dict[str, float]:
    """Max absolute difference between each vectorized op and its oracle."""
    P, Pa = case["P"], case["arr"]
    N, M = case["N"], case["M"]
    out: dict[str, float] = {}

    def worst(name, got, want):
        out[name] = max(out.get(name, 0.0), float(np.max(np.abs(np.asarray(got) - np.asarray(want)))))

    f1 = sm.meta_filter(case["meta"], P, "f1").value
    f2 = sm.meta_filter(case["meta"], P, "f2").value
    worst("meta_filter", f1, [orc.meta_filter(Pa, "f1", case["meta"][k]) for k in range(M)])

    r = sm.update_reservoir_state(Tensor(case["r"]), Tensor(case["c"]), Tensor(f1),
                                  case["seg_res"].T, P).value
    want = [orc.reservoir_state(Pa, case["r"][k], f1[k],
                                [(case["seg_res"][i, k], case["c"][i]) for i in range(N)
                                 if case["seg_res"][i, k]])
            for k in range(M)]
    worst("update_reservoir_state", r, want)

    p = sm.transferred_from_reservoirs(Tensor(case["r"]), Tensor(case["a"]), Tensor(f2),
                                       case["res_seg"].T, P).value
    want = [orc.transferred_p(Pa, [(case["res_seg"][k, i], f2[k], case["r"][k], case["a"][k])
                                   for k in range(M) if case["res_seg"][k, i]])
            for i in range(N)]
    worst("transferred_from_reservoirs", p, want)

    q = sm.transferred_from_segments(Tensor(case["h"]), case["seg_seg"].T, P).value
    want = [orc.transferred_q(Pa, [(case["seg_seg"][j, i], case["h"][j]) for j in range(N)
                                   if case["seg_seg"][j, i]])
            for i in range(N)]
    worst("transferred_from_segments", q, want)

    xproj = sm.input_projections(case["x"], P)
    gates = sm.compute_gates(Tensor(case["h"]), Tensor(case["p"]), Tensor(case["q"]), xproj, P)
    for i in range(N):
        ref = orc.gates(Pa, case["h"][i], case["p"][i], case["q"][i], case["x"][i])
        for g, w in zip(gates, ref):
            worst("compute_gates", g.value[i], w)

    c_bar = sm.candidate_state(Tensor(case["h"]), xproj, P)
    worst("candidate_state", c_bar.value,
          [orc.candidate(Pa, case["h"][i], case["x"][i]) for i in range(N)])

    c_new = sm.update_stream_state(Tensor(case["c"]), gates, c_bar, Tensor(case["p"]),
                                   Tensor(case["q"])).value
    gv = [g.value for g in gates]
    worst("update_stream_state", c_new,
          [orc.stream_state(case["c"][i], gv[0][i], gv[1][i], gv[2][i], gv[3][i],
                            c_bar.value[i], case["p"][i], case["q"][i]) for i in range(N)])

    h, y, o = sm.hidden_and_predict(Tensor(c_new), Tensor(case["h"]), xproj, P)
    for i in range(N):
        hw, yw, ow = orc.hidden_predict(Pa, c_new[i], case["h"][i], case["x"][i])
        worst("hidden_and_predict", h.value[i], hw)
        worst("hidden_and_predict", y.value[i, 0], yw)
        worst("hidden_and_predict", o.value[i], ow)

    a_pp = sm.pp_release_embedding(case["htilde"], case["res_seg"], P).value
    worst("pp_release_embedding", a_pp,
          [orc.pp_embedding(Pa, [(case["res_seg"][k, i], case["htilde"][i]) for i in range(N)
                                 if case["res_seg"][k, i]]) for k in range(M)])

    a_se = sm.se_release_embedding(case["se"], P).value
    worst("se_release_embedding", a_se, [orc.se_embedding(Pa, case["se"][k]) for k in range(M)])
    return out


EQUATIONS = ("meta_filter", "update_reservoir_state", "transferred_from_reservoirs",
             "transferred_from_segments", "compute_gates", "candidate_state",
             "update_stream_state", "hidden_and_predict", "pp_release_embedding",
             "se_release_embedding")

"""Acceptance criteria 1-9, each at its stated tolerance.

Every test appends one pass/fail line to the terminal summary. Run
``python tests/test_acceptance.py`` or ``pytest tests/test_acceptance.py -s``.
"""

import math

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from netgen import with_random_weights, zero_mean_graph
from scalecalc.graph import (
    AvgPool,
    BiasAdd,
    Conv,
    EdgeShape,
    Linear,
    NetworkGraph,
    ReLU,
    Residual,
    infer_shapes,
    input_key,
)
from scalecalc.initplan import FAN_IN, FAN_OUT, XAVIER, assign_second_moments, make_plan
from scalecalc.moments import forward_moments, propagate
from scalecalc.scaling import analyze
from scalecalc.verify import (
    EstimationConfig,
    SampledNet,
    gn_block_probe,
    gn_dense_oracle,
    sample_loss_matrix,
    verify_plan,
)
from scalecalc.verify.engine import expected_weight_shapes
from scalecalc.verify.estimate import stream
from scalecalc.zoo import random_graph, residual_net, strided_lenet, telescoping_net

EXACT = 1e-12
RANDOM_GRAPHS = 50


def record(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def info(number: int, detail: str) -> None:
    line = f"[info] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


def random_graphs(count=RANDOM_GRAPHS, seed=0):
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        g = random_graph(rng)
        yield g, with_random_weights(g, rng), float(rng.uniform(0.1, 10)), float(rng.uniform(0.1, 10))


def test_criterion_1_lenet_curvature_ratio():
    """gamma_theory / g_hat on strided LeNet: median in [0.8, 1.3], >= 90% of setups in [0.5, 2]."""
    plan = make_plan(strided_lenet())
    rep = verify_plan(plan, EstimationConfig(seed=0, batch=1024, trials=60, probes=1))
    rows, ok = [], True
    for est in rep.layers:
        r = np.asarray(est.ratio_g_trials)
        med, frac = float(np.median(r)), float(np.mean((r >= 0.5) & (r <= 2.0)))
        good = 0.8 <= med <= 1.3 and frac >= 0.9
        ok &= good
        rows.append(f"{est.index}:{med:.3f}/{frac:.0%}")
    record(1, ok, f"60 setups, per-layer median/fraction-in-[0.5,2]: {' '.join(rows)}")
    for name, attr in (("realised loss gradient", "ratio_g_measured_trials"), ("plan-level gamma", "plan_ratio_g_trials")):
        meds = " ".join(f"{np.median(getattr(e, attr)):.3f}" for e in rep.layers)
        info(1, f"medians with {name}: {meds}")
    assert ok


def test_criterion_2_nu_equals_gamma():
    worst = 0.0
    for g, w, m2, g2 in random_graphs():
        for r in analyze(g, w, input_m2=m2, output_g2=g2).layers:
            worst = max(worst, rel(r.nu, r.gamma_extrinsic))
    analytic_ok = worst <= EXACT

    plan = make_plan(strided_lenet())
    rep = verify_plan(plan, EstimationConfig(seed=0, batch=1024, trials=10), probe=False)
    means = [float(np.mean([1 / t for t in e.ratio_nu_trials])) for e in rep.layers]
    empirical_ok = all(0.8 <= m <= 1.25 for m in means)
    record(
        2,
        analytic_ok and empirical_ok,
        f"analytic max rel err {worst:.1e} over {RANDOM_GRAPHS} graphs; LeNet nu_hat/gamma per layer "
        + " ".join(f"{m:.3f}" for m in means),
    )
    info(2, "plan-level gamma/nu_hat per layer " + " ".join(f"{e.ratio_nu:.3f}" for e in rep.layers))
    assert analytic_ok and empirical_ok


def test_criterion_3_intrinsic_equals_extrinsic():
    worst, count = 0.0, 0
    for g, w, m2, g2 in random_graphs(count=200, seed=1):
        for r in analyze(g, w, input_m2=m2, output_g2=g2).layers:
            worst = max(worst, rel(r.gamma_intrinsic, r.gamma_extrinsic))
            count += 1
    ok = worst <= EXACT
    record(3, ok, f"max rel err {worst:.1e} over {count} layers in 200 graphs")
    assert ok


def sigma_deviations(graph, tape):
    return [
        abs(tape.sigma(p) / tape.sigma(input_key(p)) - 1) for p, op in graph.walk() if not isinstance(op, Residual)
    ]


def test_criterion_4_sigma_conservation():
    worst, ops = 0.0, 0
    for g, w, m2, g2 in random_graphs(seed=2):
        d = sigma_deviations(g, propagate(g, w, input_m2=m2, output_g2=g2))
        worst, ops = max([worst] + d), ops + len(d)
    analytic_ok = worst <= EXACT

    cfg = EstimationConfig(seed=0, batch=4096, trials=10)
    nets = [("lenet", strided_lenet())] + [
        (f"zero-mean-{s}", zero_mean_graph(np.random.default_rng(s), widths=(32, 64))) for s in range(5)
    ]
    emp = []
    for name, g in nets:
        plan = make_plan(g, target_std=None)
        tape = verify_plan(plan, cfg, probe=False).tape
        emp.append((name, max(sigma_deviations(plan.network, tape))))
    empirical_ok = all(d <= 0.15 for _, d in emp)
    record(
        4,
        analytic_ok and empirical_ok,
        f"analytic max dev {worst:.1e} over {ops} ops; empirical max |ratio-1| "
        + " ".join(f"{n}:{d:.3f}" for n, d in emp),
    )
    plan = make_plan(residual_net(), target_std=None)
    res_dev = max(sigma_deviations(plan.network, verify_plan(plan, cfg, probe=False).tape))
    info(4, f"residual example (pooling of non-zero-mean activations) max |ratio-1| {res_dev:.3f}")
    assert analytic_ok and empirical_ok


def test_criterion_5_telescoping():
    plan = make_plan(telescoping_net(), target_std=None, input_scale=False)
    expected = math.sqrt(3 / 512)
    analytic = plan.predicted_output_m2
    analytic_ok = rel(analytic, expected) <= EXACT
    tape = verify_plan(plan, EstimationConfig(seed=0, batch=4096, trials=10), probe=False).tape
    g = plan.network
    empirical = tape[g.output_key].fwd / tape[()].fwd
    empirical_ok = rel(empirical, expected) <= 0.10
    record(
        5,
        analytic_ok and empirical_ok,
        f"sqrt(3/512)={expected:.4f}, analytic {analytic:.6f}, empirical {empirical:.4f} ({rel(empirical, expected):.1%})",
    )
    assert analytic_ok and empirical_ok


def test_criterion_6_geometric_preconditioning():
    ok, parts = True, []
    for name, graph in (("lenet", strided_lenet()), ("residual", residual_net())):
        v = analyze(make_plan(graph).network).verdict
        geo = v.gamma_ratio - 1 <= 1e-9 and v.bias_ratio - 1 <= 1e-9
        others = {s.name: analyze(assign_second_moments(graph, s)).verdict.gamma_ratio for s in (FAN_IN, FAN_OUT, XAVIER)}
        ok &= geo and all(r > 1.5 for r in others.values())
        parts.append(
            f"{name}: geometric gamma {v.gamma_ratio - 1:.1e} bias {v.bias_ratio - 1:.1e}; "
            + " ".join(f"{k} {r:.2f}" for k, r in others.items())
        )
    record(6, ok, "max/min-1 or max/min | " + " | ".join(parts))
    assert ok


def test_criterion_7_input_scale_balance():
    g = infer_shapes(NetworkGraph(EdgeShape(3, 9, 9), (Conv(8, 3, 3), BiasAdd(), ReLU(), Linear(10), BiasAdd())))
    plan = make_plan(g)
    net = plan.network
    rep = analyze(net)
    first_layer = net.weighted_layers()[0]
    gamma0 = rep.layers[0].gamma
    gamma0b = rep.biases[0].gamma
    reach = forward_moments(net, net.weights(), 1.0)[input_key(first_layer)]
    target = 1 / math.sqrt(3 * 9)
    ok = rel(gamma0, gamma0b) <= EXACT and rel(reach, target) <= EXACT and abs(target - 0.2) < 0.01
    record(7, ok, f"gamma_0 {gamma0:.6g} vs gamma_0b {gamma0b:.6g}; first-layer input moment {reach:.4f} (target {target:.4f})")
    assert ok


def gn_nets():
    yield infer_shapes(NetworkGraph(EdgeShape(4), (Linear(6), ReLU(), Linear(3))))
    yield infer_shapes(NetworkGraph(EdgeShape(2, 4, 4), (Conv(3, 2, 2), BiasAdd(), ReLU(), AvgPool(2, 2), Linear(2))))
    yield infer_shapes(
        NetworkGraph(EdgeShape(3, 2, 2), (Conv(4, 1), ReLU(), Residual(0.6, 0.8, (Conv(4, 3), ReLU()), ()), Linear(5)))
    )


def test_criterion_8_gn_probe_oracle():
    worst, blocks = 0.0, 0
    for i, g in enumerate(gn_nets()):
        rng = np.random.default_rng(i)
        weights = {p: rng.standard_normal(s) * 0.5 for p, s in expected_weight_shapes(g).items()}
        net = SampledNet.from_arrays(g, weights)
        cfg = EstimationConfig(seed=i, batch=6, trials=1, probe_mode="exact")
        s = g.input_shape
        x = stream(i, 0, 1).standard_normal((cfg.batch, s.n, s.h, s.w))
        r = sample_loss_matrix(g.output_shape.size, stream(i, 0, 2))
        for layer in g.weighted_layers():
            fast = gn_block_probe(net, layer, cfg)
            dense = gn_dense_oracle(net, layer, x, r + r.T)
            worst, blocks = max(worst, rel(fast, dense)), blocks + 1
    ok = worst <= 1e-6
    record(8, ok, f"max rel err {worst:.1e} over {blocks} layer blocks")
    assert ok


def test_criterion_9_gradient_check():
    from test_engine import OP_CASES, test_gradient_check

    failed = []
    for name in sorted(OP_CASES):
        try:
            test_gradient_check(name)
        except AssertionError:
            failed.append(name)
    ok = not failed
    record(9, ok, f"{len(OP_CASES) - len(failed)}/{len(OP_CASES)} op cases within 1e-5" + (f"; failed {failed}" if failed else ""))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))

"""End-to-end acceptance checks: exact identities, spectral oracles, operator
bounds, and relative training performance on the synthetic tasks.

Each test prints one ``[PASS]``/``[FAIL]`` line with the measured numbers and
its wall time, then asserts both the tolerance and the time budget. Run

    pytest tests/test_acceptance.py -v -s

to watch the lines appear as the checks complete. The trained-model
comparisons at the end dominate the runtime (roughly twenty-five minutes on a
laptop-class CPU); everything before them finishes in seconds.
"""

import time

import numpy as np
import scipy.sparse as sp

from gbnlab import autodiff as ad
from gbnlab import graphs as gc
from gbnlab import spectral as spc
from gbnlab.models import GbnModel, GcnModel, ModelConfig, gbn_propagate
from gbnlab.synth import gen_bottleneck, gen_community, gen_transfer_split
from gbnlab.training import (
    TrainConfig,
    constant_predictor_mse,
    energy_curve,
    jacobian_probe,
    propagation_bound_series,
    train_bottleneck,
    train_classify,
    train_transfer,
)

from helpers import fd_gradient, frozen_linear_gbn, frozen_linear_gcn, random_graph


def check(num, ok, detail):
    """Print the per-criterion verdict line, then enforce it."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:02d}: {detail}"
    print(line)
    assert ok, line


def _grad_worst(build, arrays):
    """Worst relative error of tape gradients against central differences."""
    leaves = [ad.tensor(a) for a in arrays]
    with ad.Tape():
        root = build(leaves)
    ad.backward(root)
    numeric = fd_gradient(
        lambda arrs: float(build([ad.tensor(a) for a in arrs]).values), arrays
    )
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        err = np.abs(leaf.grad - num) / np.maximum(np.abs(num), 1e-3)
        worst = max(worst, float(err.max()))
    return worst


def _laplacian_report(g):
    return spc.eig_sym(gc.normalized_laplacian(g).toarray())


class TestExactIdentities:
    def test_criterion_01_boundary_free_model_equals_gcn(self):
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            g = random_graph(rng, int(rng.integers(5, 31)))
            cfg = ModelConfig(
                in_dim=2, hidden=8, out_dim=3, layers=2, activation="tanh",
                norm="batch", dropout=0.0, use_beta=False, use_gamma=False,
            )
            gbn = GbnModel.init(cfg, rng, indicator_override="all_interior")
            gcn = GcnModel.from_gbn(gbn)
            x0 = rng.standard_normal((g.n, 2))
            ya, _ = gbn.forward(g, x0)
            yb, _ = gcn.forward(g, x0)
            worst = max(worst, float(np.abs(ya.values - yb.values).max()))
        dt = time.perf_counter() - t0
        check(
            1,
            worst <= 1e-6 and dt < 5.0,
            f"max |gbn - gcn| = {worst:.2e} over 20 graphs (bar 1e-6); {dt:.1f}s",
        )

    def test_criterion_02_matrix_and_elementwise_layers_agree(self):
        t0 = time.perf_counter()
        worst = 0.0
        for trial in range(50):
            rng = np.random.default_rng(1000 + trial)
            n = int(rng.integers(4, 16))
            g = random_graph(rng, n, 0.35)
            ind = rng.uniform(0.02, 0.98, n)
            p = rng.uniform(0.0, 2.0, n)
            h = rng.standard_normal((n, 3))
            gamma = rng.standard_normal((n, 3))
            got = gbn_propagate(g, ind, p, h, gamma, "identity")

            neigh = [[] for _ in range(n)]
            for a, b in g.edges:
                neigh[a].append(b)
                neigh[b].append(a)
            hat = np.array(
                [
                    sum(ind[i] * ind[j] + (1 - ind[i]) * (1 - ind[j]) for j in neigh[i])
                    for i in range(n)
                ]
            )
            r = np.where(hat > 1e-12, 1.0 / np.sqrt(np.maximum(hat, 1e-300)), 0.0)
            want = np.zeros_like(h)
            for i in range(n):
                for j in neigh[i]:
                    want[i] += ind[i] * r[i] * r[j] * h[j]
                    want[i] += (1 - ind[i]) * p[i] * r[i] * ind[j] * r[j] * h[j]
            want += gamma
            worst = max(worst, float(np.abs(got - want).max()))
        dt = time.perf_counter() - t0
        check(
            2,
            worst <= 1e-10 and dt < 5.0,
            f"max matrix-vs-elementwise diff = {worst:.2e} over 50 soft partitions "
            f"(bar 1e-10); {dt:.1f}s",
        )

    def test_criterion_03_gradient_suite(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(303)

        def wsum(out, w):
            return ad.sum_all(ad.mul(out, ad.tensor(w)))

        a34 = rng.standard_normal((3, 4))
        b34 = rng.standard_normal((3, 4))
        w34 = rng.standard_normal((3, 4))
        a43 = rng.standard_normal((4, 3))
        b35 = rng.standard_normal((3, 5))
        w45 = rng.standard_normal((4, 5))
        x53 = rng.standard_normal((5, 3))
        s51 = rng.standard_normal((5, 1))
        w53 = rng.standard_normal((5, 3))
        mat = sp.random(6, 5, density=0.4, random_state=7, format="csr")
        x54 = rng.standard_normal((5, 4))
        w64 = rng.standard_normal((6, 4))
        pos34 = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        pos41 = rng.uniform(0.5, 3.0, (4, 1))
        w41 = rng.standard_normal((4, 1))
        x64 = rng.standard_normal((6, 4)) * 3.0 + 1.0
        gain14 = rng.uniform(0.5, 1.5, (1, 4))
        bias14 = rng.standard_normal((1, 4))
        wn64 = rng.standard_normal((6, 4))
        pred52 = rng.standard_normal((5, 2))
        targ52 = rng.standard_normal((5, 2))
        logit63 = rng.standard_normal((6, 3))
        label6 = rng.integers(0, 3, 6)
        rows = np.array([0, 2, 4])

        def activate_worst():
            worst = 0.0
            for kind in ad.ACTIVATIONS:
                x = a34 if kind != "relu" else np.where(np.abs(a34) < 0.05, 0.5, a34)
                worst = max(
                    worst,
                    _grad_worst(
                        lambda t, k=kind: wsum(ad.activate(t[0], k), w34), [x]
                    ),
                )
            return worst

        def normalize_worst():
            worst = 0.0
            for kind in ad.NORM_KINDS:
                worst = max(
                    worst,
                    _grad_worst(
                        lambda t, k=kind: wsum(ad.normalize(t[0], t[1], t[2], k), wn64),
                        [x64, gain14, bias14],
                    ),
                )
            return worst

        checks = {
            "matmul": lambda: _grad_worst(
                lambda t: wsum(ad.matmul(t[0], t[1]), w45), [a43, b35]
            ),
            "spmm": lambda: max(
                _grad_worst(lambda t: wsum(ad.spmm(mat, t[0]), w64), [x54]),
                _grad_worst(
                    lambda t: wsum(ad.spmm(mat.toarray(), t[0]), w64), [x54]
                ),
            ),
            "add": lambda: max(
                _grad_worst(lambda t: wsum(ad.add(t[0], t[1]), w34), [a34, b34]),
                _grad_worst(
                    lambda t: wsum(ad.add(t[0], t[1]), w34), [a34, np.array(0.7)]
                ),
            ),
            "sub": lambda: _grad_worst(
                lambda t: wsum(ad.sub(t[0], t[1]), w34), [a34, b34]
            ),
            "mul": lambda: max(
                _grad_worst(lambda t: wsum(ad.mul(t[0], t[1]), w34), [a34, b34]),
                _grad_worst(
                    lambda t: wsum(ad.mul(t[1], t[0]), w34), [a34, np.array(0.7)]
                ),
            ),
            "scale": lambda: _grad_worst(
                lambda t: wsum(ad.scale(t[0], -2.5), w34), [a34]
            ),
            "row_mul": lambda: _grad_worst(
                lambda t: wsum(ad.row_mul(t[0], t[1]), w53), [x53, s51]
            ),
            "recip": lambda: _grad_worst(
                lambda t: wsum(ad.recip(t[0]), w34), [pos34]
            ),
            "rsqrt_or_zero": lambda: _grad_worst(
                lambda t: wsum(ad.rsqrt_or_zero(t[0]), w41), [pos41]
            ),
            "activate": activate_worst,
            "dropout": lambda: _grad_worst(
                lambda t: wsum(
                    ad.dropout(t[0], 0.4, np.random.default_rng(5), training=True),
                    w34,
                ),
                [a34],
            ),
            "normalize": normalize_worst,
            "mse": lambda: _grad_worst(lambda t: ad.mse(t[0], targ52), [pred52]),
            "masked_mse": lambda: _grad_worst(
                lambda t: ad.masked_mse(t[0], targ52, np.array([0, 3])), [pred52]
            ),
            "cross_entropy": lambda: max(
                _grad_worst(lambda t: ad.cross_entropy(t[0], label6), [logit63]),
                _grad_worst(
                    lambda t: ad.cross_entropy(t[0], label6, rows), [logit63]
                ),
            ),
            "sum_all": lambda: _grad_worst(lambda t: ad.sum_all(t[0]), [a34]),
            "pick": lambda: _grad_worst(lambda t: ad.pick(t[0], 2, 1), [a34]),
        }
        non_ops = {"Tensor", "Tape", "tensor", "backward", "ACTIVATIONS", "NORM_KINDS"}
        assert set(checks) == set(ad.__all__) - non_ops
        worst_op = max(fn() for fn in checks.values())

        # full two-layer model: every parameter group against central differences
        rng = np.random.default_rng(7)
        g = random_graph(rng, 6, 0.4)
        cfg = ModelConfig(
            in_dim=2, hidden=3, out_dim=1, layers=2, activation="tanh",
            norm="batch", dropout=0.0,
        )
        model = GbnModel.init(cfg, rng)
        x0 = rng.standard_normal((6, 2))
        target = rng.standard_normal((6, 1))
        rows = np.array([0, 3, 5])
        with ad.Tape():
            out, _ = model.forward(g, x0)
            loss = ad.masked_mse(out, target, rows)
            ad.backward(loss)
        params = [p for _, p in model.named_parameters()]
        analytic = [p.grad for p in params]

        def loss_value(_arrays):
            out2, _ = model.forward(g, x0)
            return float(ad.masked_mse(out2, target, rows).values)

        numeric = fd_gradient(loss_value, [p.values for p in params])
        worst_model = 0.0
        for a, n in zip(analytic, numeric):
            err = np.abs(a - n) / np.maximum(np.abs(n), 1e-3)
            worst_model = max(worst_model, float(err.max()))

        dt = time.perf_counter() - t0
        check(
            3,
            worst_op <= 1e-4 and worst_model <= 1e-4 and dt < 60.0,
            f"worst rel err: ops {worst_op:.2e} ({len(checks)} ops), "
            f"two-layer model {worst_model:.2e} (bar 1e-4); {dt:.1f}s",
        )


class TestSpectralOracles:
    def test_criterion_04_heat_kernel_oracle(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(404)
        worst_series = 0.0
        worst_semi = 0.0
        for _ in range(10):
            g = random_graph(rng, int(rng.integers(3, 31)))
            lap = gc.normalized_laplacian(g).toarray()
            rep = spc.eig_sym(lap)
            for t in (0.1, 0.5, 1.0):
                series = np.eye(g.n)
                term = np.eye(g.n)
                for k in range(1, 41):
                    term = term @ (-t * lap) / k
                    series = series + term
                diff = np.abs(spc.heat_kernel(rep, t) - series).max()
                worst_series = max(worst_series, float(diff))
            for s, t in ((0.1, 0.5), (0.5, 0.5), (0.1, 1.0)):
                prod = spc.heat_kernel(rep, s) @ spc.heat_kernel(rep, t)
                diff = np.abs(prod - spc.heat_kernel(rep, s + t)).max()
                worst_semi = max(worst_semi, float(diff))
        dt = time.perf_counter() - t0
        check(
            4,
            worst_series <= 1e-8 and worst_semi <= 1e-8 and dt < 30.0,
            f"eigen-expansion vs series {worst_series:.2e}, semigroup "
            f"{worst_semi:.2e} over 10 graphs (bar 1e-8); {dt:.1f}s",
        )

    def test_criterion_05_cylinder_gap_ordering(self):
        t0 = time.perf_counter()
        gaps = {
            (m, r): spc.cylinder_gap_experiment(m, r)
            for (m, r) in ((20, 6), (40, 6), (30, 8), (20, 5))
        }
        required = [gaps[(20, 6)], gaps[(40, 6)], gaps[(30, 8)]]
        ordered = all(g.ordered for g in required)
        margin = min(g.margin for g in required)
        narrower_raises_dirichlet = gaps[(20, 5)].dirichlet > gaps[(20, 6)].dirichlet
        longer_lowers_neumann = gaps[(40, 6)].neumann < gaps[(20, 6)].neumann
        dt = time.perf_counter() - t0
        check(
            5,
            ordered
            and margin > 1e-9
            and narrower_raises_dirichlet
            and longer_lowers_neumann
            and dt < 60.0,
            f"ordering holds on all three tubes, min margin {margin:.2e} "
            f"(bar 1e-9); dirichlet(20,5)={gaps[(20, 5)].dirichlet:.4f} > "
            f"dirichlet(20,6)={gaps[(20, 6)].dirichlet:.4f}; "
            f"neumann(40,6)={gaps[(40, 6)].neumann:.4f} < "
            f"neumann(20,6)={gaps[(20, 6)].neumann:.4f}; {dt:.1f}s",
        )

    def test_criterion_06_eigenmode_energy_decay_rate(self):
        t0 = time.perf_counter()
        worst = 0.0
        for g in (gc.path_graph(10), gc.complete_graph(5)):
            rep = _laplacian_report(g)
            lam = rep.eigenvalues[1]
            trace = spc.source_term_energy_experiment(
                g, [spc.ModeSource(mode=1, amplitude=1.0)], steps=1000, dt=0.001
            )
            expected = trace.energies[0] * np.exp(-2.0 * lam * trace.times)
            rel = np.abs(trace.energies - expected) / expected
            worst = max(worst, float(rel.max()))
        dt = time.perf_counter() - t0
        check(
            6,
            worst < 0.02 and dt < 10.0,
            f"max relative deviation from exp(-2 lambda t) = {worst:.4f} on the "
            f"10-path and 5-clique (bar 0.02); {dt:.1f}s",
        )

    def test_criterion_07_polynomial_source_decay(self):
        t0 = time.perf_counter()
        g = gc.path_graph(10)
        schedule = [spc.ModeSource(mode=1, amplitude=1.0, kind="decaying", a=3.0, b=0.5)]
        trace = spc.source_term_energy_experiment(g, schedule, steps=5000, dt=0.01)
        slope = spc.loglog_slope(trace, 5.0, 50.0)

        control = spc.source_term_energy_experiment(
            g, [spc.ModeSource(mode=1, amplitude=1.0)], steps=2000, dt=0.005
        )
        log_e = np.log(control.energies)
        early = (log_e[400] - log_e[0]) / (control.times[400] - control.times[0])
        late = (log_e[-1] - log_e[-401]) / (control.times[-1] - control.times[-401])
        log_linear = abs(early - late) <= 1e-3 * abs(late)
        dt = time.perf_counter() - t0
        check(
            7,
            -1.3 <= slope <= -0.7 and log_linear and dt < 30.0,
            f"driven log-log slope {slope:.3f} (band [-1.3, -0.7]); zero-source "
            f"log slopes {early:.4f} vs {late:.4f}; {dt:.1f}s",
        )


class TestOperatorBounds:
    def test_criterion_10_frozen_linear_jacobian_bound(self):
        t0 = time.perf_counter()
        worst_excess = -np.inf
        min_series_step = np.inf
        for n, seed in ((10, 21), (12, 22)):
            rng = np.random.default_rng(seed)
            g = random_graph(rng, n, 0.3)
            x0 = rng.standard_normal((n, 2))
            model = frozen_linear_gbn(g, layers=4, seed=seed)
            for K in (1, 2, 4):
                for i, j in ((0, 1), (2, 5), (7, 3)):
                    probe = jacobian_probe(model, g, x0, i, j, K)
                    worst_excess = max(worst_excess, probe.norm - probe.bound)
            series = propagation_bound_series(model, g, x0, K=6)
            min_series_step = min(
                min_series_step, float(np.diff(series, axis=0).min())
            )
        dt = time.perf_counter() - t0
        check(
            10,
            worst_excess <= 1e-9 and min_series_step >= -1e-12 and dt < 60.0,
            f"max (norm - bound) = {worst_excess:.2e} over 18 probes (bar 0); "
            f"min bound-series increment {min_series_step:.2e}; {dt:.1f}s",
        )

    def test_criterion_12_forward_cost_linear_in_depth(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(3030)
        g = random_graph(rng, 1000, 0.004)
        x0 = rng.standard_normal((1000, 4))
        times = {}
        for depth in (8, 64):
            cfg = ModelConfig(
                in_dim=4, hidden=16, out_dim=2, layers=depth, activation="tanh",
                norm="layer", dropout=0.0,
            )
            model = GbnModel.init(cfg, np.random.default_rng(1))
            model.forward(g, x0)
            best = np.inf
            for _ in range(5):
                tic = time.perf_counter()
                model.forward(g, x0)
                best = min(best, time.perf_counter() - tic)
            times[depth] = best
        ratio = times[64] / times[8]
        dt = time.perf_counter() - t0
        check(
            12,
            6.0 <= ratio <= 10.0 and dt < 60.0,
            f"K=64/K=8 forward wall-time ratio = {ratio:.2f} on a 1000-node "
            f"sparse graph (band [6, 10]); {dt:.1f}s",
        )


class TestTrainedModels:
    def test_criterion_08_depth_energy_retention(self):
        t0 = time.perf_counter()
        data = gen_community(seed=0)
        g, feats, labels, split = data.graph, data.features, data.labels, data.split

        gcn_ratios = []
        for seed in (0, 1, 2):
            cfg = ModelConfig(
                in_dim=feats.shape[1], hidden=16, out_dim=2, layers=64,
                activation="tanh", norm="none", dropout=0.0,
            )
            gcn = GcnModel.init(cfg, np.random.default_rng(seed))
            curve = energy_curve(gcn, g, feats)
            gcn_ratios.append(float(curve[-1] / curve[0]))
        gcn_collapsed = max(gcn_ratios) < 1e-4

        def gbn_run(depth, seed):
            cfg = TrainConfig(
                task="classification", n_layers=depth, hid_dim=16,
                activation="tanh", norm="none", lr=1e-2, epochs=40, seed=seed,
                patience=40,
            )
            return train_classify(cfg, g, feats, labels, split, "gbn")

        acc4 = [gbn_run(4, s).final_test for s in (0, 1, 2)]
        deep = [gbn_run(256, s) for s in (0, 1, 2)]
        acc256 = [r.final_test for r in deep]
        ratios = []
        gamma_floor = np.inf
        for rep in deep:
            curve = energy_curve(rep.model, g, feats)
            ratios.append(float(curve[-1] / curve[0]))
            x_enc = rep.model.encoder.apply(ad.tensor(feats))
            _, _, gamma, _ = rep.model.coefficients(x_enc)
            gamma_floor = min(gamma_floor, float(np.abs(gamma.values).max()))
        retained = min(ratios) > 1e-3
        acc_close = np.mean(acc256) >= np.mean(acc4) - 0.05
        dt = time.perf_counter() - t0
        check(
            8,
            gcn_collapsed and retained and acc_close and gamma_floor > 0 and dt < 1800.0,
            f"gcn depth-64 energy ratio {max(gcn_ratios):.2e} (bar 1e-4); gbn "
            f"depth-256 retention {min(ratios):.2e} (floor 1e-3), max|gamma| "
            f"{gamma_floor:.2e}; mean acc 4/256 = {np.mean(acc4):.3f}/"
            f"{np.mean(acc256):.3f} (gap bar 0.05); {dt:.0f}s",
        )

    def test_criterion_11_bottleneck_case_study(self):
        t0 = time.perf_counter()
        case = gen_bottleneck(5, 3, seed=1)

        def run(kind, seed):
            cfg = TrainConfig(
                task="bottleneck", n_layers=8, hid_dim=64, activation="tanh",
                norm="layer", lr=3e-3, epochs=4000, seed=seed, patience=1000,
            )
            return train_bottleneck(cfg, case, model_kind=kind).final_test

        gbn = float(np.mean([run("gbn", s) for s in (0, 1, 2)]))
        gcn = float(np.mean([run("gcn", s) for s in (0, 1, 2)]))
        ratio = gbn / gcn
        dt = time.perf_counter() - t0
        check(
            11,
            ratio <= 0.5 and dt < 600.0,
            f"swap-target MAE: gbn {gbn:.4f} vs gcn {gcn:.4f}, ratio {ratio:.3f} "
            f"(bar 0.5) over 3 seeds at depth 8; {dt:.0f}s",
        )

    def test_criterion_09_ring_and_line_transfer(self):
        t0 = time.perf_counter()
        split10 = gen_transfer_split("ring", 10, counts=(100, 30, 30), seed=5)

        def run10(kind, seed):
            cfg = TrainConfig(
                task="transfer", n_layers=10, hid_dim=64, activation="tanh",
                norm="none", lr=1e-3, epochs=600, seed=seed, patience=600,
            )
            return train_transfer(cfg, split10, model_kind=kind).final_test

        gbn10 = float(np.mean([run10("gbn", s) for s in range(5)]))
        gcn10 = float(np.mean([run10("gcn", s) for s in range(5)]))
        near = gbn10 <= 0.25 * gcn10

        split50 = gen_transfer_split("line", 50, counts=(50, 20, 20), seed=5)
        const = constant_predictor_mse(split50[2])

        def run50(kind):
            cfg = TrainConfig(
                task="transfer", n_layers=50, hid_dim=32, activation="tanh",
                norm="none", lr=1e-3, epochs=400, seed=0, patience=400,
            )
            return train_transfer(cfg, split50, model_kind=kind).final_test

        gcn50 = run50("gcn")
        gbn50 = run50("gbn")
        gcn_stuck = abs(gcn50 - const) <= 0.2 * const
        gbn_beats = gbn50 <= const / 2.0
        dt = time.perf_counter() - t0
        check(
            9,
            near and gcn_stuck and gbn_beats and dt < 2700.0,
            f"distance 10: gbn {gbn10:.5f} vs gcn {gcn10:.5f} over 5 seeds "
            f"(bar 0.25x); distance 50: gcn {gcn50:.4f} within 20% of constant "
            f"{const:.4f}, gbn {gbn50:.4f} <= {const / 2.0:.4f}; {dt:.0f}s",
        )

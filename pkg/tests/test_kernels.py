import math

import numpy as np
import pytest

from attnlab.instrumentation import RunCounters, norm_rel_error
from attnlab.kernels import (
    MODE_LOG,
    MODE_PAPER,
    Alg1State,
    Alg2State,
    AttnProblem,
    FlashDState,
    PwlTables,
    SkipConfig,
    alg1_step,
    alg2_finalize,
    alg2_step,
    flashd_step,
    naive_attention,
    reference_attention,
    run_kernel,
    score,
    skip_weight_value,
)
from attnlab.precision import BF16, FP8E4M3, PREC_FP64, Precision
from attnlab.tensorio import GenSpec, generate
from oracles import dot_mp, prefix_softmax_mp, round_oracle, softmax_attention_mp
from oracles import BF16_SPEC

BF16_PREC = Precision(BF16)
FP8_PREC = Precision(FP8E4M3)


def scores_problem(score_values, d=4, seed=0):
    """Problem whose per-key scores are exactly the given values.

    Keys are score_i * q / |q|^2, so q . k_i == score_i up to rounding.
    q is a power-of-two vector to keep the construction exact.
    """
    score_values = np.asarray(score_values, dtype=np.float64)
    q = np.zeros(d)
    q[0] = 2.0  # |q|^2 = 4; k_i = s_i/4 * e_0, exact for s_i with low bits free
    keys = np.zeros((score_values.size, d))
    keys[:, 0] = score_values / 4.0 * 2.0
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((score_values.size, d))
    return AttnProblem(queries=q[None, :], keys=keys, values=values)


def drive_flashd(problem, qi=0, mode=MODE_PAPER, skip=None, tables=None, prec=PREC_FP64):
    """Yield the FlashDState after each step for one query."""
    q = problem.queries[qi]
    st = FlashDState.initial(problem.d, mode)
    for i in range(problem.n_keys):
        s = score(q, problem.keys[i], prec)
        st = flashd_step(st, s, prec.round(problem.values[i]), skip, tables, prec)
        yield st


class TestScore:
    def test_matches_high_precision_dot(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            d = int(rng.integers(1, 40))
            q = rng.standard_normal(d)
            k = rng.standard_normal(d)
            got = score(q, k)
            want = dot_mp(q, k)
            scale = float(np.sum(np.abs(q * k))) + 1e-30
            assert abs(got - want) <= 4 * d * 2.2e-16 * scale

    def test_counts_ops(self):
        rc = RunCounters()
        score(np.ones(5), np.ones(5), PREC_FP64, rc)
        assert rc.ops.mul == 5
        assert rc.ops.add == 4
        assert rc.ops.div == 0

    def test_emulated_fold_matches_scalar_oracle(self):
        # operands arrive already rounded; run_kernel rounds inputs up front
        q = BF16_PREC.round(np.array([1.7, -0.3, 2.9]))
        k = BF16_PREC.round(np.array([0.4, 1.1, -2.2]))
        got = score(q, k, BF16_PREC)
        rq = [round_oracle(x, BF16_SPEC) for x in q.tolist()]
        rk = [round_oracle(x, BF16_SPEC) for x in k.tolist()]
        acc = round_oracle(rq[0] * rk[0], BF16_SPEC)
        for i in (1, 2):
            p = round_oracle(rq[i] * rk[i], BF16_SPEC)
            acc = round_oracle(acc + p, BF16_SPEC)
        assert got == acc

    def test_wide_accumulate_rounds_once(self):
        wide = Precision(BF16, wide_accumulate=True)
        q = wide.round(np.array([1.7, -0.3, 2.9]))
        k = wide.round(np.array([0.4, 1.1, -2.2]))
        got = score(q, k, wide)
        rq = [round_oracle(x, BF16_SPEC) for x in q.tolist()]
        rk = [round_oracle(x, BF16_SPEC) for x in k.tolist()]
        exact = math.fsum(a * b for a, b in zip(rq, rk))
        assert got == round_oracle(exact, BF16_SPEC)


class TestReferenceKernel:
    def test_matches_mpmath_softmax(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            p = generate(GenSpec(seed=seed, n_keys=32, d=6))
            out = reference_attention(p, 0)
            scores = p.keys @ p.queries[0]
            want = softmax_attention_mp(scores, p.values)
            assert norm_rel_error(out[None, :], want[None, :]) <= 1e-13

    def test_single_key_returns_value(self):
        p = generate(GenSpec(seed=3, n_keys=1, d=8))
        out = reference_attention(p, 0)
        assert np.array_equal(out, p.values[0])


class TestSingleStepExactness:
    @pytest.mark.parametrize("kind", ["reference", "alg1", "alg2", "flashd"])
    def test_n1_returns_v1_bitwise(self, kind):
        p = generate(GenSpec(seed=4, n_keys=1, d=16))
        res = run_kernel(p, kind)
        assert res.outputs[0].tobytes() == p.values[0].tobytes()


class TestEqualScores:
    def test_flashd_weights_are_reciprocal_rank(self):
        p = scores_problem([2.0] * 10, d=4)
        for i, st in enumerate(drive_flashd(p), start=1):
            assert st.w == pytest.approx(1.0 / i, rel=1e-14)

    def test_output_is_running_mean(self):
        p = scores_problem([2.0] * 10, d=4)
        states = list(drive_flashd(p))
        mean = p.values.mean(axis=0)
        assert np.allclose(states[-1].o, mean, rtol=1e-13, atol=1e-13)


class TestWeightIdentity:
    @pytest.mark.parametrize("seed", range(5))
    def test_lockstep_with_alg1(self, seed):
        p = generate(GenSpec(seed=seed, n_keys=40, d=8))
        q = p.queries[0]
        a1 = Alg1State.initial(p.d)
        fd = FlashDState.initial(p.d)
        for i in range(p.n_keys):
            s = score(q, p.keys[i])
            a1 = alg1_step(a1, s, p.values[i])
            fd = flashd_step(fd, s, p.values[i])
            w_from_a1 = math.exp(s - a1.m) / a1.l
            assert abs(fd.w - w_from_a1) <= 1e-12 * max(abs(w_from_a1), 1.0), i


class TestCrossStateInvariant:
    @pytest.mark.parametrize("seed", range(3))
    def test_alg2_output_is_alg1_output_scaled_by_l(self, seed):
        p = generate(GenSpec(seed=seed, n_keys=32, d=8))
        q = p.queries[0]
        a1 = Alg1State.initial(p.d)
        a2 = Alg2State.initial(p.d)
        for i in range(p.n_keys):
            s = score(q, p.keys[i])
            a1 = alg1_step(a1, s, p.values[i])
            a2 = alg2_step(a2, s, p.values[i])
            assert a2.l == pytest.approx(a1.l, rel=1e-12)
            scaled = a1.o * a1.l
            assert np.allclose(a2.o, scaled, rtol=1e-11, atol=1e-12 * max(1.0, a1.l))

    def test_finalize_before_step_raises(self):
        with pytest.raises(ValueError):
            alg2_finalize(Alg2State.initial(4))


class TestPrefixSoftmax:
    def test_flashd_state_is_prefix_softmax(self):
        p = generate(GenSpec(seed=11, n_keys=24, d=4))
        q = p.queries[0]
        scores = [score(q, p.keys[i]) for i in range(p.n_keys)]
        for n, st in enumerate(drive_flashd(p), start=1):
            want = prefix_softmax_mp(scores, p.values, n)
            assert norm_rel_error(st.o[None, :], want[None, :]) <= 1e-12, n


class TestConvexHull:
    @pytest.mark.parametrize(
        "spec",
        [
            GenSpec(seed=0, n_keys=48, d=6),
            GenSpec(seed=1, n_keys=48, d=6, distribution="adversarial", params=(30.0,)),
            GenSpec(seed=2, n_keys=48, d=3, distribution="uniform", params=(-2.0, 5.0)),
        ],
        ids=["gaussian", "adversarial", "uniform"],
    )
    def test_output_stays_in_hull_of_seen_values(self, spec):
        p = generate(spec)
        for n, st in enumerate(drive_flashd(p), start=1):
            seen = p.values[:n]
            spread = float(seen.max() - seen.min()) + 1e-30
            lo = seen.min(axis=0) - 1e-12 * spread
            hi = seen.max(axis=0) + 1e-12 * spread
            assert np.all(st.o >= lo), n
            assert np.all(st.o <= hi), n

    def test_hull_holds_with_pwl_tables(self, pwl_tables):
        p = generate(GenSpec(seed=3, n_keys=48, d=6))
        for n, st in enumerate(drive_flashd(p, tables=pwl_tables), start=1):
            seen = p.values[:n]
            spread = float(seen.max() - seen.min()) + 1e-30
            assert np.all(st.o >= seen.min(axis=0) - 1e-12 * spread)
            assert np.all(st.o <= seen.max(axis=0) + 1e-12 * spread)


class TestRunningSumInvariant:
    def test_l_at_least_one_after_first_step(self):
        p = generate(GenSpec(seed=5, n_keys=32, d=4, distribution="adversarial", params=(20.0,)))
        q = p.queries[0]
        a1 = Alg1State.initial(p.d)
        for i in range(p.n_keys):
            a1 = alg1_step(a1, score(q, p.keys[i]), p.values[i])
            assert a1.l >= 1.0


class TestSkipSemantics:
    def test_low_skip_keeps_output_bitwise(self):
        skip = SkipConfig(enabled=True)
        p = scores_problem([5.0, -5.0], d=4)  # difference -10
        states = list(drive_flashd(p, skip=skip))
        assert states[1].o.tobytes() == states[0].o.tobytes()
        assert states[1].w == skip_weight_value()
        assert states[1].lnw == -10.0  # carried log-weight is the saturated argument

    def test_high_skip_copies_value_exactly(self):
        skip = SkipConfig(enabled=True)
        p = scores_problem([0.0, 20.0], d=4)
        states = list(drive_flashd(p, skip=skip))
        assert states[1].o.tobytes() == p.values[1].tobytes()
        assert states[1].w == 1.0
        assert states[1].lnw == 0.0

    def test_thresholds_are_strict_inequalities(self):
        # from a fresh state lnw == 0, so z equals the score difference;
        # landing exactly on a threshold must not skip
        skip = SkipConfig(enabled=True, lo=-6.0, hi=11.0)
        for diffs in ([0.0, -6.0], [0.0, 11.0]):
            rc = RunCounters()
            p = scores_problem(diffs)
            q = p.queries[0]
            st = FlashDState.initial(p.d)
            for i in range(p.n_keys):
                st = flashd_step(st, score(q, p.keys[i]), p.values[i], skip, None, PREC_FP64, rc)
            assert rc.skips.skipped_low == 0, diffs
            assert rc.skips.skipped_high == 0, diffs

    def test_first_step_never_skips(self):
        skip = SkipConfig(enabled=True)
        rc = RunCounters()
        p = scores_problem([50.0, 50.5])
        q = p.queries[0]
        st = FlashDState.initial(p.d)
        for i in range(p.n_keys):
            st = flashd_step(st, score(q, p.keys[i]), p.values[i], skip, None, PREC_FP64, rc)
        assert rc.skips.skipped_low == 0
        assert rc.skips.skipped_high == 0

    def test_low_skip_saves_value_loads(self):
        skip = SkipConfig(enabled=True)
        p = scores_problem([5.0, -5.0, -16.0], d=4)
        rc_on = RunCounters()
        run_kernel(p, "flashd", skip=skip, counters=rc_on)
        rc_off = RunCounters()
        run_kernel(p, "flashd", counters=rc_off)
        assert rc_on.skips.skipped_low == 2
        assert rc_off.ops.vec_loads - rc_on.ops.vec_loads == 2 * p.d

    def test_skip_config_validation(self):
        with pytest.raises(ValueError):
            SkipConfig(enabled=True, lo=3.0, hi=-1.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_deviation_within_documented_bound(self, seed):
        spec = GenSpec(seed=seed, n_keys=64, d=8, distribution="adversarial", params=(40.0,))
        p = generate(spec)
        skip = SkipConfig(enabled=True)

        off = run_kernel(p, "flashd")
        rc = RunCounters()
        on = run_kernel(p, "flashd", skip=skip, counters=rc)
        assert rc.skips.skipped_low + rc.skips.skipped_high > 0, "skip never fired"

        # loose analytic bound: every skipped update moves the output by at
        # most sigma(lo) times the largest value-to-output gap seen skip-off
        max_gap = 0.0
        for n, st in enumerate(drive_flashd(p)):
            if n + 1 < p.n_keys:
                gap = float(np.max(np.abs(p.values[n + 1] - st.o)))
                max_gap = max(max_gap, gap)
        sigma_lo = 1.0 / (1.0 + math.exp(-skip.lo))  # sigmoid at the low threshold
        bound = p.n_keys * sigma_lo * max_gap
        deviation = float(np.max(np.abs(on.outputs - off.outputs)))
        assert deviation <= bound


class TestLogMode:
    def test_agrees_with_paper_mode_on_moderate_scores(self):
        p = generate(GenSpec(seed=6, n_keys=64, d=8))
        paper = run_kernel(p, "flashd", mode=MODE_PAPER)
        log = run_kernel(p, "flashd", mode=MODE_LOG)
        assert norm_rel_error(log.outputs, paper.outputs) <= 1e-12

    def test_survives_adversarial_scores(self):
        p = generate(GenSpec(seed=7, n_keys=64, d=8, distribution="adversarial", params=(1e4,)))
        res = run_kernel(p, "flashd", mode=MODE_LOG)
        assert np.isfinite(res.outputs).all()
        ref = run_kernel(p, "reference")
        assert norm_rel_error(res.outputs, ref.outputs) <= 1e-10

    def test_naive_softmax_overflows_where_log_mode_does_not(self):
        p = generate(GenSpec(seed=7, n_keys=64, d=8, distribution="adversarial", params=(1e4,)))
        naive = naive_attention(p, 0)
        assert not np.isfinite(naive).all()


class TestOpCounts:
    def test_flashd_update_ops_per_step(self):
        p = generate(GenSpec(seed=8, n_keys=16, d=8))
        rc = RunCounters()
        run_kernel(p, "flashd", counters=rc)
        n, d = 16, 8
        assert rc.update_ops.mul == n * d
        assert rc.update_ops.add == n * d
        assert rc.update_ops.sub == n * d
        assert rc.update_ops.div == 0

    def test_alg2_update_ops_per_step(self):
        p = generate(GenSpec(seed=8, n_keys=16, d=8))
        rc = RunCounters()
        run_kernel(p, "alg2", counters=rc)
        n, d = 16, 8
        assert rc.update_ops.mul == 2 * n * d
        assert rc.update_ops.add == n * d
        assert rc.update_ops.sub == 0

    def test_division_and_max_elimination(self):
        p = generate(GenSpec(seed=8, n_keys=16, d=8, n_queries=3))
        rc_fd = RunCounters()
        run_kernel(p, "flashd", counters=rc_fd)
        assert rc_fd.ops.div == 0
        assert rc_fd.ops.max_cmp == 0
        rc_a2 = RunCounters()
        run_kernel(p, "alg2", counters=rc_a2)
        assert rc_a2.ops.div == 8 * 3  # d per query, finalize only
        rc_a1 = RunCounters()
        run_kernel(p, "alg1", counters=rc_a1)
        assert rc_a1.ops.div == 2 * 16 * 3  # two per step

    def test_vec_loads_full_without_skip(self):
        p = generate(GenSpec(seed=9, n_keys=12, d=4, n_queries=2))
        for kind in ("reference", "alg1", "alg2", "flashd"):
            rc = RunCounters()
            run_kernel(p, kind, counters=rc)
            assert rc.ops.vec_loads == 12 * 4 * 2, kind

    def test_nonlinearity_counts_paper_vs_log(self):
        p = generate(GenSpec(seed=9, n_keys=12, d=4))
        rc_p = RunCounters()
        run_kernel(p, "flashd", mode=MODE_PAPER, counters=rc_p)
        assert rc_p.ops.sigmoid_eval == 11  # every step after the first
        assert rc_p.ops.ln == 11
        assert rc_p.ops.exp == 0
        rc_l = RunCounters()
        run_kernel(p, "flashd", mode=MODE_LOG, counters=rc_l)
        assert rc_l.ops.sigmoid_eval == 11
        assert rc_l.ops.exp == 11
        assert rc_l.ops.ln == 0

    def test_counter_conservation_with_skip(self):
        p = generate(GenSpec(seed=10, n_keys=64, d=8, distribution="adversarial", params=(40.0,)))
        rc_on = RunCounters()
        run_kernel(p, "flashd", skip=SkipConfig(enabled=True), counters=rc_on)
        rc_off = RunCounters()
        run_kernel(p, "flashd", counters=rc_off)
        for field in ("mul", "add", "sub", "div", "vec_loads", "sigmoid_eval", "ln", "exp"):
            assert getattr(rc_on.ops, field) <= getattr(rc_off.ops, field), field

    def test_counter_equality_when_nothing_skips(self):
        # equal scores keep the sigmoid argument at ln(1/i), inside the
        # window for any stream shorter than e^6 steps: no skip can fire
        p = scores_problem([1.0] * 24, d=4)
        rc_on = RunCounters()
        run_kernel(p, "flashd", skip=SkipConfig(enabled=True), counters=rc_on)
        rc_off = RunCounters()
        run_kernel(p, "flashd", counters=rc_off)
        assert rc_on.skips.skipped_low + rc_on.skips.skipped_high == 0
        assert rc_on.ops == rc_off.ops


class TestReducedPrecision:
    @pytest.mark.parametrize("prec", [BF16_PREC, FP8_PREC], ids=lambda p: p.fmt.name)
    @pytest.mark.parametrize("kind", ["reference", "alg1", "alg2", "flashd"])
    def test_outputs_finite_on_unit_gaussian(self, prec, kind):
        p = generate(GenSpec(seed=12, n_keys=24, d=8))
        res = run_kernel(p, kind, prec=prec)
        assert np.isfinite(res.outputs).all()

    def test_every_output_value_is_representable(self):
        p = generate(GenSpec(seed=13, n_keys=24, d=8))
        res = run_kernel(p, "flashd", prec=BF16_PREC)
        assert np.array_equal(res.outputs, BF16_PREC.round(res.outputs))

    def test_bf16_flashd_tracks_fp64_loosely(self):
        p = generate(GenSpec(seed=14, n_keys=32, d=8))
        lo = run_kernel(p, "flashd", prec=BF16_PREC)
        hi = run_kernel(p, "flashd")
        assert norm_rel_error(lo.outputs, hi.outputs) <= 0.15

    def test_pwl_bf16_flashd_is_finite_and_in_hull(self, pwl_tables):
        p = generate(GenSpec(seed=15, n_keys=32, d=8))
        res = run_kernel(p, "flashd", prec=BF16_PREC, tables=pwl_tables)
        assert np.isfinite(res.outputs).all()
        spread = float(p.values.max() - p.values.min())
        assert res.outputs.max() <= p.values.max() + 0.05 * spread
        assert res.outputs.min() >= p.values.min() - 0.05 * spread


class TestRunKernelApi:
    def test_unknown_kind(self):
        p = generate(GenSpec(seed=0, n_keys=2, d=2))
        with pytest.raises(ValueError):
            run_kernel(p, "alg3")

    def test_unknown_mode(self):
        p = generate(GenSpec(seed=0, n_keys=2, d=2))
        with pytest.raises(ValueError):
            run_kernel(p, "flashd", mode="fast")

    def test_multi_query_shape(self):
        p = generate(GenSpec(seed=0, n_keys=8, d=4, n_queries=3))
        res = run_kernel(p, "flashd")
        assert res.outputs.shape == (3, 4)

    def test_queries_are_independent(self):
        p = generate(GenSpec(seed=16, n_keys=16, d=4, n_queries=3))
        full = run_kernel(p, "flashd").outputs
        for qi in range(3):
            single = AttnProblem(
                queries=p.queries[qi : qi + 1], keys=p.keys, values=p.values
            )
            assert np.array_equal(run_kernel(single, "flashd").outputs[0], full[qi])

    def test_problem_shape_validation(self):
        with pytest.raises(ValueError):
            AttnProblem(queries=np.ones((1, 3)), keys=np.ones((4, 2)), values=np.ones((4, 2)))
        with pytest.raises(ValueError):
            AttnProblem(queries=np.ones((1, 2)), keys=np.ones((4, 2)), values=np.ones((3, 2)))

    def test_runtime_is_reported(self):
        p = generate(GenSpec(seed=0, n_keys=8, d=4))
        assert run_kernel(p, "reference").runtime_ns >= 0

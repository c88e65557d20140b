"""Loss, gradient, and extractor tests.

Oracles: a high-precision evaluation of the textbook cross-entropy form
(mpmath, 60 digits) for the numerically stable BCE; central finite
differences for every analytic gradient, sampled away from the absolute
value's kink; a hand-rolled conjugate-gradient solver for the ridge normal
equations; and direct double-loop evaluations of the loss reductions.
"""

import io
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdmark.keyspace import (
    BaseSecret,
    KeyConfig,
    derive_frame_messages,
    random_key,
)
from spdmark.objective import (
    DEFAULT_RIDGE_LAMBDA,
    LUMA_WEIGHTS,
    LinearExtractor,
    LogitVector,
    LossWeights,
    bce_logits,
    bit_accuracy,
    fit_extractor,
    imperceptibility_loss,
    loss_gradients,
    loss_report,
    luminance,
    mean_squared_error,
    read_extractor,
    recovery_loss,
    write_extractor,
)
from spdmark.spd_core import (
    ToyFrame,
    generate_video,
    init_dictionary,
    init_toy_decoder,
    random_condition,
    video_to_array,
)

SECRET = BaseSecret(b"objective-module-test-secret")


def bce_reference(logit: float, bit: int) -> float:
    """Textbook -[b log(sigma) + (1-b) log(1-sigma)] at 60 digits."""
    with mpmath.workdps(60):
        sigma = 1 / (1 + mpmath.e ** (-mpmath.mpf(logit)))
        loss = -(bit * mpmath.log(sigma) + (1 - bit) * mpmath.log(1 - sigma))
        return float(loss)


def random_video(rng, frames=3, side=4):
    return rng.normal(0.5, 0.2, (frames, 3, side, side))


class TestBceLogits:
    def test_zero_logits_give_log_two(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            target = rng.integers(0, 2, 12)
            assert bce_logits(np.zeros(12), target) == pytest.approx(
                math.log(2), abs=1e-15
            )

    def test_saturated_correct_prediction(self):
        assert bce_logits(np.full(28, 20.0), np.ones(28)) < 1e-8
        assert bce_logits(np.full(28, -20.0), np.zeros(28)) < 1e-8

    def test_unit_logit_matches_closed_form(self):
        expected = bce_reference(1.0, 1)
        assert expected == pytest.approx(math.log1p(math.exp(-1.0)), rel=1e-15)
        assert bce_logits(np.array([1.0]), np.array([1.0])) == pytest.approx(
            expected, rel=1e-14
        )

    def test_matches_high_precision_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            logit = float(rng.uniform(-30, 30))
            bit = int(rng.integers(0, 2))
            stable = bce_logits(np.array([logit]), np.array([float(bit)]))
            exact = bce_reference(logit, bit)
            assert stable == pytest.approx(exact, rel=1e-12, abs=1e-15)

    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=16),
        st.lists(st.floats(-50, 50), min_size=1, max_size=16),
        st.integers(0, 2**16 - 1),
    )
    @settings(max_examples=200, deadline=None)
    def test_convex_in_logits(self, first, second, bit_seed):
        size = min(len(first), len(second))
        s1 = np.array(first[:size])
        s2 = np.array(second[:size])
        bits = np.array([(bit_seed >> i) & 1 for i in range(size)], dtype=float)
        mid = bce_logits((s1 + s2) / 2, bits)
        ends = (bce_logits(s1, bits) + bce_logits(s2, bits)) / 2
        assert mid <= ends + 1e-12

    def test_accepts_logit_vector_and_frame_message(self):
        cfg = KeyConfig.from_layout(2, 4)
        schedule = derive_frame_messages(SECRET, random_key(cfg, 0), 1)
        vec = LogitVector(np.zeros(cfg.message_bits))
        assert bce_logits(vec, schedule[0]) == pytest.approx(math.log(2))

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            bce_logits(np.array([np.inf]), np.array([1.0]))
        with pytest.raises(ValueError):
            LogitVector(np.array([np.nan]))
        with pytest.raises(ValueError):
            bce_logits(np.zeros(3), np.zeros(4))
        with pytest.raises(ValueError):
            bce_logits(np.zeros(2), np.array([0.0, 0.5]))


class TestRecoveryLoss:
    def test_zero_extractor_gives_log_two(self):
        extractor = LinearExtractor(np.zeros((6, 48)), np.zeros(6))
        video = np.random.default_rng(2).uniform(0, 1, (4, 3, 4, 4))
        schedule = [np.random.default_rng(t).integers(0, 2, 6) for t in range(4)]
        assert recovery_loss(video, extractor, schedule) == pytest.approx(math.log(2))

    def test_saturated_extractor_drives_loss_to_zero(self):
        bits = np.array([1, 0, 1, 1, 0, 0], dtype=float)
        extractor = LinearExtractor(np.zeros((6, 48)), 40.0 * (2 * bits - 1))
        video = np.zeros((3, 3, 4, 4))
        assert recovery_loss(video, extractor, [bits] * 3) < 1e-8

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            extractor = LinearExtractor(rng.normal(0, 1, (5, 48)), rng.normal(0, 1, 5))
            video = rng.uniform(0, 1, (2, 3, 4, 4))
            schedule = [rng.integers(0, 2, 5) for _ in range(2)]
            assert recovery_loss(video, extractor, schedule) >= 0.0

    def test_length_mismatch_rejected(self):
        extractor = LinearExtractor(np.zeros((6, 48)), np.zeros(6))
        video = np.zeros((3, 3, 4, 4))
        with pytest.raises(ValueError):
            recovery_loss(video, extractor, [np.zeros(6)] * 2)


class TestLuminance:
    def test_white_frame_is_unit(self):
        assert sum(LUMA_WEIGHTS) == pytest.approx(1.0, abs=1e-15)
        y = luminance(np.ones((3, 4, 4)))
        np.testing.assert_allclose(y, 1.0, atol=1e-12)

    def test_black_frame_is_zero(self):
        assert luminance(np.zeros((3, 4, 4))).max() == 0.0

    def test_pure_green_uses_green_coefficient(self):
        frame = np.zeros((3, 2, 2))
        frame[1] = 1.0
        np.testing.assert_array_equal(luminance(frame), np.full((2, 2), 0.587))

    def test_accepts_toy_frame(self):
        frame = ToyFrame(np.ones((3, 2, 2)), 1)
        np.testing.assert_allclose(luminance(frame), 1.0, atol=1e-12)

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(ValueError):
            luminance(np.zeros((4, 2, 2)))


class TestImperceptibility:
    def test_identical_videos_score_zero(self):
        video = random_video(np.random.default_rng(4))
        assert imperceptibility_loss(video, video.copy()) == 0.0

    def test_static_offset_hits_only_perceptual_term(self):
        video = random_video(np.random.default_rng(5))
        offset = 0.25
        shifted = video + offset
        weights = LossWeights(lambda_ps=3.0, lambda_tc=7.0)
        loss = imperceptibility_loss(video, shifted, weights)
        assert loss == pytest.approx(weights.lambda_ps * offset**2, rel=1e-12)

    def test_single_flicker_raises_temporal_term(self):
        video = random_video(np.random.default_rng(6), frames=4)
        flickered = video.copy()
        flickered[2] += 0.1
        only_tc = imperceptibility_loss(
            video, flickered, LossWeights(0.0, 1.0)
        )
        assert only_tc > 0.0
        # The flicker perturbs exactly the two differences touching frame 2.
        assert only_tc == pytest.approx(2 * 0.1 / 3, rel=1e-10)

    def test_matches_direct_double_loop(self):
        rng = np.random.default_rng(7)
        clean = random_video(rng, frames=5)
        marked = random_video(rng, frames=5)
        weights = LossWeights(0.7, 1.3)

        ps_terms = []
        for t in range(5):
            ps_terms.append(np.mean((clean[t] - marked[t]) ** 2))
        tc_terms = []
        for t in range(4):
            dy_clean = luminance(clean[t + 1]) - luminance(clean[t])
            dy_marked = luminance(marked[t + 1]) - luminance(marked[t])
            tc_terms.append(np.mean(np.abs(dy_clean - dy_marked)))
        expected = weights.lambda_ps * np.mean(ps_terms) + weights.lambda_tc * np.mean(
            tc_terms
        )
        assert imperceptibility_loss(clean, marked, weights) == pytest.approx(
            expected, rel=1e-12
        )

    def test_default_distance_is_symmetric(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(3, 4, 4))
        b = rng.normal(size=(3, 4, 4))
        assert mean_squared_error(a, b) == mean_squared_error(b, a)

    def test_temporal_term_ignores_shared_static_raster(self):
        rng = np.random.default_rng(9)
        clean = random_video(rng, frames=4)
        marked = random_video(rng, frames=4)
        raster = rng.normal(0, 0.5, (3, 4, 4))
        weights = LossWeights(0.0, 1.0)
        base = imperceptibility_loss(clean, marked, weights)
        shifted = imperceptibility_loss(clean + raster, marked + raster, weights)
        assert shifted == pytest.approx(base, abs=1e-12)

    def test_custom_distance_is_used(self):
        rng = np.random.default_rng(10)
        clean = random_video(rng)
        marked = random_video(rng)
        tc_only = imperceptibility_loss(clean, marked, LossWeights(1.0, 1.0), distance=lambda a, b: 0.0)
        reference = imperceptibility_loss(clean, marked, LossWeights(0.0, 1.0))
        assert tc_only == pytest.approx(reference, rel=1e-14)

    def test_shape_and_length_validation(self):
        video = random_video(np.random.default_rng(11))
        with pytest.raises(ValueError):
            imperceptibility_loss(video, video[:, :, :2, :])
        with pytest.raises(ValueError):
            imperceptibility_loss(video[:1], video[:1])

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_ps=-0.1)


def make_instance(seed, frames=3, side=4, bits=6):
    """Random gradient-check instance kept away from the |.| kink."""
    rng = np.random.default_rng(seed)
    while True:
        clean = random_video(rng, frames, side)
        marked = random_video(rng, frames, side)
        gap = np.diff(luminance_video(clean), axis=0) - np.diff(
            luminance_video(marked), axis=0
        )
        if np.abs(gap).min() > 1e-3:
            break
    features = 3 * side * side
    extractor = LinearExtractor(
        rng.normal(0, 0.2, (bits, features)), rng.normal(0, 0.2, bits)
    )
    schedule = [rng.integers(0, 2, bits).astype(float) for _ in range(frames)]
    weights = LossWeights(float(rng.uniform(0.2, 2.0)), float(rng.uniform(0.2, 2.0)))
    return clean, marked, extractor, schedule, weights


def luminance_video(video):
    return np.stack([luminance(frame) for frame in video])


def total_loss(clean, marked, extractor, schedule, weights):
    return imperceptibility_loss(clean, marked, weights) + recovery_loss(
        marked, extractor, schedule
    )


class TestLossGradients:
    def test_zero_at_joint_minimum(self):
        video = random_video(np.random.default_rng(12))
        extractor = LinearExtractor(np.zeros((6, 48)), np.zeros(6))
        schedule = [np.zeros(6) for _ in range(3)]
        grads = loss_gradients(video, video.copy(), extractor, schedule)
        assert np.abs(grads["ps"]).max() == 0.0
        assert np.abs(grads["tc"]).max() == 0.0
        assert np.abs(grads["rec"]).max() == 0.0
        assert np.abs(grads["total"]).max() == 0.0

    def test_finite_differences_over_many_instances(self):
        step = 1e-4
        worst = 0.0
        for seed in range(50):
            clean, marked, extractor, schedule, weights = make_instance(seed)
            grads = loss_gradients(clean, marked, extractor, schedule, weights)
            flat_grad = grads["total"].ravel()
            probe = np.random.default_rng(1000 + seed)
            for position in probe.choice(marked.size, size=12, replace=False):
                bumped = marked.copy().ravel()
                bumped[position] += step
                plus = total_loss(
                    clean, bumped.reshape(marked.shape), extractor, schedule, weights
                )
                bumped[position] -= 2 * step
                minus = total_loss(
                    clean, bumped.reshape(marked.shape), extractor, schedule, weights
                )
                numeric = (plus - minus) / (2 * step)
                rel = abs(numeric - flat_grad[position]) / max(
                    1.0, abs(flat_grad[position])
                )
                worst = max(worst, rel)
        assert worst <= 1e-5

    def test_temporal_gradient_linear_in_weight(self):
        clean, marked, extractor, schedule, _ = make_instance(99)
        one = loss_gradients(clean, marked, extractor, schedule, LossWeights(1.0, 1.0))
        two = loss_gradients(clean, marked, extractor, schedule, LossWeights(1.0, 2.0))
        np.testing.assert_array_equal(two["tc"], 2.0 * one["tc"])
        np.testing.assert_array_equal(two["ps"], one["ps"])

    def test_recovery_gradient_matches_manual_loop(self):
        clean, marked, extractor, schedule, weights = make_instance(7)
        grads = loss_gradients(clean, marked, extractor, schedule, weights)
        frames, bits = len(schedule), extractor.message_bits
        for t in range(frames):
            logits = extractor.logits(marked[t])
            sigma = 1 / (1 + np.exp(-logits))
            expected = extractor.weight.T @ (sigma - schedule[t]) / (bits * frames)
            np.testing.assert_allclose(
                grads["rec"][t].ravel(), expected, rtol=1e-12, atol=1e-15
            )

    def test_components_sum_to_total(self):
        clean, marked, extractor, schedule, weights = make_instance(21)
        grads = loss_gradients(clean, marked, extractor, schedule, weights)
        np.testing.assert_array_equal(
            grads["total"], grads["ps"] + grads["tc"] + grads["rec"]
        )

    def test_validation_errors(self):
        clean, marked, extractor, schedule, weights = make_instance(33)
        with pytest.raises(ValueError):
            loss_gradients(clean[:2], marked, extractor, schedule, weights)
        with pytest.raises(ValueError):
            loss_gradients(clean, marked, extractor, schedule[:-1], weights)
        short = LinearExtractor(np.zeros((3, 48)), np.zeros(3))
        with pytest.raises(ValueError):
            loss_gradients(clean, marked, short, schedule, weights)


def conjugate_gradient(matrix, rhs, iterations=5000, tol=1e-13):
    x = np.zeros_like(rhs)
    residual = rhs - matrix @ x
    direction = residual.copy()
    rs = residual @ residual
    for _ in range(iterations):
        if math.sqrt(rs) < tol:
            break
        step = matrix @ direction
        alpha = rs / (direction @ step)
        x += alpha * direction
        residual -= alpha * step
        rs_next = residual @ residual
        direction = residual + (rs_next / rs) * direction
        rs = rs_next
    return x


class TestFitExtractor:
    def test_identity_recoverable_design(self):
        rng = np.random.default_rng(13)
        bits = 8
        videos, schedules = [], []
        for _ in range(2):
            schedule = [rng.integers(0, 2, bits).astype(float) for _ in range(10)]
            video = np.zeros((10, 3, 4, 4))
            for t, message in enumerate(schedule):
                video[t].ravel()[:bits] = 2 * message - 1
            videos.append(video)
            schedules.append(schedule)
        extractor = fit_extractor(videos, schedules, ridge_lambda=1e-9)
        assert bit_accuracy(extractor, videos, schedules) == 1.0

    def test_huge_ridge_collapses_to_chance(self):
        rng = np.random.default_rng(14)
        videos = [rng.uniform(0, 1, (40, 3, 4, 4)) for _ in range(10)]
        schedules = [
            [rng.integers(0, 2, 8).astype(float) for _ in range(40)] for _ in range(10)
        ]
        extractor = fit_extractor(videos, schedules, ridge_lambda=1e9)
        assert np.abs(extractor.weight).max() < 1e-5
        accuracy = bit_accuracy(extractor, videos, schedules)
        assert 0.4 <= accuracy <= 0.62

    def test_matches_conjugate_gradient_solver(self):
        rng = np.random.default_rng(15)
        video = rng.normal(0.5, 0.3, (40, 3, 2, 2))
        schedule = [rng.integers(0, 2, 5).astype(float) for _ in range(40)]
        ridge = 0.5
        extractor = fit_extractor([video], [schedule], ridge_lambda=ridge)

        features = 12
        design = np.hstack(
            [video.reshape(40, features), np.ones((40, 1))]
        )
        gram = design.T @ design
        gram[np.arange(features), np.arange(features)] += ridge
        targets = 2 * np.stack(schedule) - 1
        for bit in range(5):
            solution = conjugate_gradient(gram, design.T @ targets[:, bit])
            np.testing.assert_allclose(
                extractor.weight[bit], solution[:features], atol=1e-6
            )
            assert extractor.bias[bit] == pytest.approx(solution[features], abs=1e-6)

    def test_deterministic(self):
        rng = np.random.default_rng(16)
        videos = [rng.uniform(0, 1, (6, 3, 4, 4)) for _ in range(3)]
        schedules = [
            [rng.integers(0, 2, 6).astype(float) for _ in range(6)] for _ in range(3)
        ]
        first = fit_extractor(videos, schedules)
        second = fit_extractor(videos, schedules)
        np.testing.assert_array_equal(first.weight, second.weight)
        np.testing.assert_array_equal(first.bias, second.bias)

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(ValueError):
            fit_extractor([], [])
        video = np.zeros((2, 3, 4, 4))
        schedule = [np.zeros(4), np.zeros(4)]
        with pytest.raises(ValueError):
            fit_extractor([video], [schedule, schedule])
        with pytest.raises(ValueError):
            fit_extractor([video], [schedule[:1]])
        other = np.zeros((2, 3, 2, 2))
        with pytest.raises(ValueError):
            fit_extractor([video, other], [schedule, schedule])
        with pytest.raises(ValueError):
            fit_extractor([video], [schedule], ridge_lambda=-1.0)

    def test_tie_at_zero_decodes_to_zero(self):
        extractor = LinearExtractor(np.zeros((4, 12)), np.zeros(4))
        assert extractor.decode(np.ones((3, 2, 2))) == (0, 0, 0, 0)


class TestSerialization:
    def test_round_trip_preserves_behavior(self):
        rng = np.random.default_rng(17)
        extractor = LinearExtractor(
            rng.normal(0, 1, (6, 48)), rng.normal(0, 1, 6), ridge_lambda=0.25
        )
        buffer = io.BytesIO()
        write_extractor(buffer, extractor)
        buffer.seek(0)
        loaded = read_extractor(buffer)
        assert loaded.message_bits == 6
        assert loaded.num_features == 48
        assert loaded.ridge_lambda == 0.25
        np.testing.assert_allclose(loaded.weight, extractor.weight, atol=1e-6)
        np.testing.assert_allclose(loaded.bias, extractor.bias, atol=1e-6)

    def test_truncated_stream_rejected(self):
        extractor = LinearExtractor(np.zeros((2, 12)), np.zeros(2))
        buffer = io.BytesIO()
        write_extractor(buffer, extractor)
        payload = buffer.getvalue()
        with pytest.raises(ValueError):
            read_extractor(io.BytesIO(payload[:-4]))
        with pytest.raises(ValueError):
            read_extractor(io.BytesIO(payload.split(b"\n")[0]))


class TestLossReport:
    def test_report_keys_and_total(self):
        clean, marked, extractor, schedule, weights = make_instance(18)
        report = loss_report(clean, marked, extractor, schedule, weights)
        assert set(report) == {"ps", "tc", "rec", "total"}
        assert report["total"] == pytest.approx(
            report["ps"] + report["tc"] + report["rec"], rel=1e-14
        )
        assert report["ps"] + report["tc"] == pytest.approx(
            imperceptibility_loss(clean, marked, weights), rel=1e-12
        )
        assert report["rec"] == pytest.approx(
            recovery_loss(marked, extractor, schedule), rel=1e-12
        )


class TestLearnability:
    """Reduced-size end-to-end checks of the extractor on generated videos.

    The corpus shares one condition vector across videos.  The displacement
    a given mask adds to the hidden state is linear in that state, so its
    pixel signature points along a fixed direction only when the condition
    is fixed; fresh per-video conditions randomize the direction's sign and
    no single linear map can decode across videos.
    """

    def _corpus(self, dictionary, decoder, condition_for, count, frames, offset):
        cfg = dictionary.key_config()
        videos, schedules = [], []
        for index in range(count):
            key = random_key(cfg, offset + index)
            schedule = derive_frame_messages(SECRET, key, frames)
            generated = generate_video(
                decoder,
                dictionary,
                schedule,
                latent_seed=offset + index,
                condition=condition_for(offset + index),
            )
            videos.append(video_to_array(generated))
            schedules.append(schedule)
        return videos, schedules

    def test_holdout_accuracy_shared_condition_corpus(self):
        cfg = KeyConfig.from_layout(14, 4)
        dictionary = init_dictionary(cfg, init_seed=101)
        decoder = init_toy_decoder(seed=202)
        shared = random_condition(64, 7)
        train = self._corpus(dictionary, decoder, lambda _: shared, 40, 6, 0)
        held = self._corpus(dictionary, decoder, lambda _: shared, 16, 6, 10_000)
        extractor = fit_extractor(*train)
        assert bit_accuracy(extractor, *train) >= 0.98
        assert bit_accuracy(extractor, *held) >= 0.9

    def test_fresh_conditions_defeat_a_single_linear_map(self):
        cfg = KeyConfig.from_layout(14, 4)
        dictionary = init_dictionary(cfg, init_seed=101)
        decoder = init_toy_decoder(seed=202)
        fresh = lambda seed: random_condition(64, seed)
        train = self._corpus(dictionary, decoder, fresh, 40, 6, 0)
        held = self._corpus(dictionary, decoder, fresh, 16, 6, 10_000)
        extractor = fit_extractor(*train)
        assert bit_accuracy(extractor, *held) <= 0.65

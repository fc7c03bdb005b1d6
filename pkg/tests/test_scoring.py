import json

import numpy as np
import pytest

from clustering import ClusterAssignment
from geometry import GeoPoint, PlanarPoint, Projection
from gmm import ClusterModel, FlowModel, GaussianComponent, MixtureModel, build_weight_tables, mixture_log_pdf
from scoring import (
    auxiliary_weight,
    classify,
    complete_log_score,
    flags_label,
    load_flow_model,
    parse_flags,
    predict,
    predict_destination_1,
    predict_destination_2,
    prediction_trace,
    predictions_to_frame,
    save_flow_model,
    score_vector,
    simple_log_score,
)

ORIGIN = GeoPoint(-8.6110, 41.1456)


def flow_model(clusters, destinations, a_emp=None, a_wd=None, a_h=None, counts=None):
    """Modèle construit à la main : clusters = liste de [(poids, moyenne, covariance), ...]."""
    K = len(clusters)
    counts = counts or [1] * K
    models = tuple(
        ClusterModel(
            MixtureModel(tuple(GaussianComponent(w, mu, cov) for w, mu, cov in comps), 0.0, 1),
            dest,
            n,
        )
        for comps, dest, n in zip(clusters, destinations, counts)
    )
    uniform = 1.0 / K
    return FlowModel(
        models,
        np.full(K, uniform) if a_emp is None else a_emp,
        np.full((7, K), uniform) if a_wd is None else a_wd,
        np.full((24, K), uniform) if a_h is None else a_h,
        ORIGIN,
    )


@pytest.fixture
def two_clusters():
    cov = 2500.0 * np.eye(2)
    return flow_model(
        [[(1.0, [0.0, 0.0], cov)], [(1.0, [100.0, 0.0], cov)]],
        [[-500.0, 0.0], [600.0, 0.0]],
    )


@pytest.fixture
def three_clusters():
    return flow_model(
        [
            [(0.5, [0.0, 0.0], 900.0 * np.eye(2)), (0.5, [300.0, 0.0], 900.0 * np.eye(2))],
            [(1.0, [0.0, 2000.0], [[4000.0, 500.0], [500.0, 2500.0]])],
            [(1.0, [2000.0, -500.0], 1600.0 * np.eye(2))],
        ],
        [[600.0, 100.0], [-300.0, 2600.0], [2500.0, -1400.0]],
        a_emp=np.array([0.5, 0.3, 0.2]),
    )


class TestFlags:

    def test_parse(self):
        assert parse_flags(None) == frozenset()
        assert parse_flags("none") == frozenset()
        assert parse_flags("all") == {"emp", "weekday", "hour"}
        assert parse_flags("hour, emp") == {"emp", "hour"}
        assert parse_flags(["weekday"]) == {"weekday"}

    def test_unknown(self):
        with pytest.raises(ValueError):
            parse_flags("emp,moon")

    def test_label_is_canonical(self):
        assert flags_label(parse_flags("hour,emp")) == "emp+hour"
        assert flags_label(frozenset()) == "none"


class TestWeights:

    def test_empty_flags(self, two_clusters):
        assert auxiliary_weight(1, 8, 3, None, two_clusters) == 1.0

    def test_empiric_ratio(self, make_trajectory, two_clusters):
        ts = [make_trajectory([[0, 0], [1, 0]], trip_id=str(i)) for i in range(10)]
        labels = ClusterAssignment([1, 1, 1] + [2] * 7, 2)
        a_emp, a_wd, a_h = build_weight_tables(ts, labels, smoothing=0.0)
        f = FlowModel(two_clusters.clusters, a_emp, a_wd, a_h, ORIGIN)
        assert auxiliary_weight(1, 0, 1, {"emp"}, f) == pytest.approx(0.3)

    def test_emp_and_hour_against_counts(self, make_trajectory, three_clusters):
        hours = [8, 8, 9, 8, 17, 17]
        ts = [make_trajectory([[0, 0], [1, 0]], trip_id=str(i), hour=h) for i, h in enumerate(hours)]
        labels = ClusterAssignment([1, 1, 1, 2, 2, 3], 3)

        raw = FlowModel(three_clusters.clusters, *build_weight_tables(ts, labels, 0.0), ORIGIN)
        assert auxiliary_weight(1, 8, 1, "emp,hour", raw) == pytest.approx((3 / 6) * (2 / 3))
        assert auxiliary_weight(3, 8, 1, "emp,hour", raw) == 0.0
        assert auxiliary_weight(3, 17, 1, "emp,hour", raw) == pytest.approx((1 / 6) * (1 / 2))

        smoothed = FlowModel(three_clusters.clusters, *build_weight_tables(ts, labels, 1.0), ORIGIN)
        assert auxiliary_weight(1, 8, 1, "emp,hour", smoothed) == pytest.approx((4 / 9) * (3 / 6))
        assert auxiliary_weight(3, 8, 1, "emp,hour", smoothed) == pytest.approx((2 / 9) * (1 / 6))

    def test_unobserved_stratum_uniform_without_smoothing(self, make_trajectory):
        ts = [make_trajectory([[0, 0], [1, 0]], trip_id=str(i), hour=8) for i in range(4)]
        _, a_wd, a_h = build_weight_tables(ts, ClusterAssignment([1, 2, 1, 2], 2), smoothing=0.0)
        assert np.allclose(a_h[3], [0.5, 0.5])
        assert np.allclose(a_wd[6], [0.5, 0.5])

    def test_tables_normalized(self, small_city):
        _, ts, labels = small_city
        a_emp, a_wd, a_h = build_weight_tables(ts, ClusterAssignment(labels, 3), smoothing=1.0)
        assert a_emp.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(a_wd.sum(axis=1), 1.0, atol=1e-9)
        assert np.allclose(a_h.sum(axis=1), 1.0, atol=1e-9)

    def test_invalid_table_rejected(self, two_clusters):
        with pytest.raises(ValueError):
            FlowModel(two_clusters.clusters, [0.6, 0.6], two_clusters.a_wd, two_clusters.a_h, ORIGIN)


class TestScores:

    def test_single_point(self, make_trajectory, three_clusters):
        t = make_trajectory([[120.0, -40.0]])
        for cluster in three_clusters.clusters:
            expected = mixture_log_pdf(PlanarPoint(120.0, -40.0), cluster.mixture)
            assert simple_log_score(t, cluster) == expected

    def test_additive_over_concatenation(self, make_trajectory, three_clusters):
        rng = np.random.default_rng(0)
        a, b = rng.normal(0, 300, size=(7, 2)), rng.normal(0, 300, size=(5, 2))
        t1, t2, t12 = make_trajectory(a), make_trajectory(b), make_trajectory(np.vstack([a, b]))
        for cluster in three_clusters.clusters:
            joined = simple_log_score(t12, cluster)
            assert joined == pytest.approx(simple_log_score(t1, cluster) + simple_log_score(t2, cluster), rel=1e-12)

    def test_own_support_scores_higher(self, make_trajectory, three_clusters):
        t = make_trajectory([[0.0, 1900.0], [50.0, 2000.0], [-30.0, 2100.0]])
        scores = [simple_log_score(t, c) for c in three_clusters.clusters]
        assert int(np.argmax(scores)) == 1

    def test_empty_flags_bit_identical(self, make_trajectory, three_clusters):
        t = make_trajectory([[10.0, 20.0], [200.0, 50.0], [900.0, 300.0]])
        for m in range(1, 4):
            assert complete_log_score(t, m, None, three_clusters) == simple_log_score(t, three_clusters.clusters[m - 1])
        _, _, plain = classify(t, three_clusters)
        assert np.array_equal(plain.log_scores, [simple_log_score(t, c) for c in three_clusters.clusters])

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            log_scores = rng.normal(-500.0, 50.0, size=5)
            shift = rng.uniform(-100.0, 100.0)
            a, b = score_vector(log_scores), score_vector(log_scores + shift)
            assert np.allclose(a.normalized, b.normalized, rtol=0.0, atol=1e-12)
            assert np.argmax(a.log_scores) == np.argmax(b.log_scores)
            assert a.normalized.sum() == pytest.approx(1.0, abs=1e-9)

    def test_hour_weight_flips_guess(self, make_trajectory):
        a_h = np.full((24, 2), 0.5)
        a_h[17] = [0.1, 0.9]
        cov = 2500.0 * np.eye(2)
        f = flow_model([[(1.0, [0.0, 0.0], cov)], [(1.0, [100.0, 0.0], cov)]], [[0, 0], [100, 0]], a_h=a_h)
        t = make_trajectory([[45.0, 0.0]], hour=17)
        assert classify(t, f)[0] == 1
        assert classify(t, f, "hour")[0] == 2


class TestClassify:

    def test_single_cluster(self, make_trajectory):
        f = flow_model([[(1.0, [0.0, 0.0], np.eye(2))]], [[10.0, 10.0]])
        l_guess, ranked, scores = classify(make_trajectory([[400.0, 0.0], [500.0, 0.0]]), f)
        assert (l_guess, ranked) == (1, [1])
        assert scores.normalized == pytest.approx([1.0])

    def test_symmetric_tie(self, make_trajectory):
        cov = 400.0 * np.eye(2)
        f = flow_model([[(1.0, [-100.0, 0.0], cov)], [(1.0, [100.0, 0.0], cov)]], [[-200.0, 0.0], [200.0, 0.0]])
        t = make_trajectory([[0.0, 0.0]])
        l_guess, ranked, scores = classify(t, f)
        assert (l_guess, ranked) == (1, [1, 2])
        assert scores.normalized[0] == scores.normalized[1]
        assert scores.normalized[0] == pytest.approx(0.5, abs=1e-12)
        midpoint = Projection(ORIGIN).project(predict_destination_2(t, f))
        assert midpoint.x == pytest.approx(0.0, abs=1e-6)
        assert midpoint.y == pytest.approx(0.0, abs=1e-6)

    def test_ranked_descending(self, make_trajectory, three_clusters):
        t = make_trajectory([[1900.0, -400.0], [2050.0, -550.0]])
        l_guess, ranked, scores = classify(t, three_clusters)
        assert l_guess == ranked[0] == 3
        assert sorted(ranked) == [1, 2, 3]
        ordered = [scores.log_scores[m - 1] for m in ranked]
        assert ordered == sorted(ordered, reverse=True)


class TestPrediction:

    def test_single_cluster_destination(self, make_trajectory):
        f = flow_model([[(1.0, [0.0, 0.0], np.eye(2))]], [[250.0, -120.0]])
        t = make_trajectory([[0.0, 0.0], [30.0, 0.0]])
        expected = Projection(ORIGIN).unproject(PlanarPoint(250.0, -120.0))
        for rule in (predict_destination_1, predict_destination_2):
            g = rule(t, f)
            assert g.lon == pytest.approx(expected.lon, abs=1e-12)
            assert g.lat == pytest.approx(expected.lat, abs=1e-12)

    def test_rule_1_uses_argmax_destination(self, make_trajectory, three_clusters):
        t = make_trajectory([[0.0, 1900.0], [50.0, 2000.0]])
        g = predict_destination_1(t, three_clusters)
        p = Projection(ORIGIN).project(g)
        assert (p.x, p.y) == pytest.approx((-300.0, 2600.0), abs=1e-6)

    def test_rule_1_ignores_non_argmax_weights(self, make_trajectory, three_clusters):
        t = make_trajectory([[0.0, 1900.0], [50.0, 2000.0]])
        other = FlowModel(three_clusters.clusters, [0.5, 0.3, 0.2][::-1], three_clusters.a_wd,
                          three_clusters.a_h, ORIGIN)
        assert predict_destination_1(t, three_clusters, "emp") == predict_destination_1(t, other, "emp")

    def test_rule_2_inside_convex_hull(self, random_trajectories, three_clusters):
        projection = Projection(ORIGIN)
        (ax, ay), (bx, by), (cx, cy) = three_clusters.destinations
        det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        for t in random_trajectories(100, seed=12, scale=800.0):
            for flags in (None, "all"):
                p = projection.project(predict_destination_2(t, three_clusters, flags))
                l1 = ((by - cy) * (p.x - cx) + (cx - bx) * (p.y - cy)) / det
                l2 = ((cy - ay) * (p.x - cx) + (ax - cx) * (p.y - cy)) / det
                for coord in (l1, l2, 1.0 - l1 - l2):
                    assert coord >= -1e-9

    def test_rule_2_converges_with_completion(self, make_trajectory, three_clusters):
        xy = np.column_stack([np.linspace(0.0, 300.0, 30), np.zeros(30)])
        t = make_trajectory(xy)
        target = three_clusters.destinations[0]
        projection = Projection(ORIGIN)
        errors = []
        for result in prediction_trace(t, three_clusters, completions=(0.0, 0.5, 1.0)):
            p = projection.project(result.destination_2)
            errors.append(np.hypot(p.x - target[0], p.y - target[1]))
        assert errors[-1] <= errors[0] + 1e-9
        assert errors[-1] < 1.0

    def test_prediction_record(self, make_trajectory, three_clusters):
        t = make_trajectory([[0.0, 0.0], [100.0, 0.0], [200.0, 0.0]], trip_id="q1")
        result = predict(t, three_clusters, "emp", completion=0.5)
        assert result.trip_id == "q1"
        assert result.completion == 0.5
        assert [m for m, _ in result.top_clusters][0] == 1
        assert len(result.top_clusters) == 3
        frame = predictions_to_frame([result])
        assert list(frame.columns[:6]) == ["trip_id", "completion", "pred1_lon", "pred1_lat", "pred2_lon", "pred2_lat"]
        assert frame.loc[0, "top1_cluster"] == 1

    def test_trace_completions(self, make_trajectory, three_clusters):
        t = make_trajectory(np.column_stack([np.linspace(0, 500, 11), np.zeros(11)]))
        trace = prediction_trace(t, three_clusters)
        assert [r.completion for r in trace] == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]


class TestModelFile:

    def test_round_trip(self, tmp_path, make_trajectory, three_clusters):
        path = tmp_path / "model.json"
        save_flow_model(three_clusters, path)
        back = load_flow_model(path)
        assert back.K == 3
        assert back.origin == ORIGIN
        assert np.array_equal(back.a_emp, three_clusters.a_emp)
        assert np.array_equal(back.destinations, three_clusters.destinations)
        for a, b in zip(back.clusters, three_clusters.clusters):
            assert np.array_equal(a.mixture.means, b.mixture.means)
            assert np.array_equal(a.mixture.covariances, b.mixture.covariances)
        t = make_trajectory([[10.0, 20.0], [200.0, 50.0]])
        assert np.array_equal(classify(t, back, "all")[2].log_scores, classify(t, three_clusters, "all")[2].log_scores)

    def test_rejects_other_format(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"format": "something-else", "version": 1}))
        with pytest.raises(ValueError):
            load_flow_model(path)

    def test_rejects_other_version(self, tmp_path, three_clusters):
        path = tmp_path / "model.json"
        save_flow_model(three_clusters, path)
        payload = json.loads(path.read_text())
        payload["version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError):
            load_flow_model(path)

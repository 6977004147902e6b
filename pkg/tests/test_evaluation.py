import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csou import evaluation as ev
from csou.scene import SceneConfig, SparseScene, cell_to_position, embed_scene


def det(x, y, conf):
    return ev.Detection(x=x, y=y, confidence=conf)


def brute_force_ap(conf, tp, n_truth):
    """Threshold sweep recomputed from scratch at every distinct confidence."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if n_truth == 0:
        return 1.0 if conf.size == 0 else 0.0
    if conf.size == 0:
        return 0.0
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(conf.tolist()), reverse=True):
        keep = conf >= t
        recall = tp[keep].sum() / n_truth
        precision = tp[keep].sum() / keep.sum()
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


class TestExtraction:
    def grid(self, fill=0.0):
        return np.full((33, 33), fill)

    def test_single_bright_cell(self):
        g = self.grid()
        g[22, 13] = 100.0
        out = ev.extract_targets(g, 3)
        assert len(out) == 1
        assert (out[0].x, out[0].y) == (4.0, 7.0)
        assert out[0].confidence == 100.0

    def test_threshold_is_strict(self):
        g = self.grid()
        g[5, 5] = 49.0
        assert ev.extract_targets(g, 3) == []
        g[5, 5] = 50.0
        assert ev.extract_targets(g, 3) == []
        g[5, 5] = 50.001
        assert len(ev.extract_targets(g, 3)) == 1

    def test_two_isolated_peaks(self):
        g = self.grid()
        g[4, 4] = 120.0
        g[20, 25] = 80.0
        out = ev.extract_targets(g, 3)
        assert len(out) == 2
        assert {d.confidence for d in out} == {120.0, 80.0}

    def test_plateau_resolves_to_first_raster_cell(self):
        g = self.grid()
        g[10, 10] = g[10, 11] = 200.0
        out = ev.extract_targets(g, 3)
        assert len(out) == 1
        assert (out[0].x, out[0].y) == cell_to_position(10, 10, 3)

    def test_diagonal_plateau_also_dedupes(self):
        g = self.grid()
        g[7, 7] = g[8, 8] = 99.0
        assert len(ev.extract_targets(g, 3)) == 1

    def test_shoulder_pixels_stay_quiet(self):
        g = self.grid()
        g[16, 16] = 150.0
        g[16, 17] = 120.0  # bright but not a local max
        out = ev.extract_targets(g, 3)
        assert len(out) == 1
        assert out[0].confidence == 150.0

    def test_corner_peak_fires(self):
        g = self.grid()
        g[0, 0] = 75.0
        out = ev.extract_targets(g, 3)
        assert len(out) == 1
        assert (out[0].x, out[0].y) == (0.0, 0.0)  # clamped center

    def test_threshold_override(self):
        g = self.grid()
        g[9, 9] = 30.0
        assert ev.extract_targets(g, 3) == []
        assert len(ev.extract_targets(g, 3, threshold=20.0)) == 1

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            ev.extract_targets(np.zeros((2, 3, 3)), 3)

    def test_exact_cell_reconstructions_stay_within_the_cell_radius(self, rng):
        # detections from a perfectly re-embedded scene sit at cell centers,
        # at most half a cell diagonal from the continuous truth
        cfg = SceneConfig()
        bound = math.sqrt(2.0) / (2 * cfg.c) + 1e-12
        for _ in range(20):
            k = rng.integers(1, 5)
            scene = SparseScene(
                x=rng.uniform(1, 10, k), y=rng.uniform(1, 10, k),
                s=rng.uniform(60, 255, k),
            )
            try:
                grid = embed_scene(scene, cfg)
            except Exception:
                continue  # collision draw; irrelevant here
            dets = ev.extract_targets(grid, cfg.c)
            for xt, yt in zip(scene.x, scene.y):
                best = min(math.hypot(d.x - xt, d.y - yt) for d in dets)
                assert best <= bound


class TestMatching:
    def test_exact_hit_is_tp(self):
        conf, tp, n = ev.match_detections([det(3.0, 4.0, 90)], [3.0], [4.0], 0.05)
        assert tp.tolist() == [True] and n == 1

    def test_no_truth_everything_fp(self):
        conf, tp, n = ev.match_detections([det(1, 1, 70)], [], [], 0.25)
        assert tp.tolist() == [False] and n == 0

    def test_confidence_wins_a_contested_truth(self):
        d = [det(5.0, 5.0, 60), det(5.02, 5.0, 95)]
        conf, tp, _ = ev.match_detections(d, [5.01], [5.0], 0.25)
        # output rows are confidence-ordered: the 95 gets the truth
        assert conf.tolist() == [95, 60]
        assert tp.tolist() == [True, False]

    def test_each_claims_nearest_unmatched(self):
        d = [det(2.0, 2.0, 90), det(2.2, 2.0, 80)]
        conf, tp, _ = ev.match_detections(d, [2.01, 2.19], [2.0, 2.0], 0.1)
        assert tp.tolist() == [True, True]

    def test_radius_is_a_hard_gate(self):
        d = [det(0.0, 0.0, 99)]
        _, tp, _ = ev.match_detections(d, [0.3], [0.4], 0.49)
        assert tp.tolist() == [False]
        _, tp, _ = ev.match_detections(d, [0.3], [0.4], 0.51)
        assert tp.tolist() == [True]

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_tp_count_never_exceeds_either_side(self, seed):
        r = np.random.default_rng(seed)
        nd, nt = int(r.integers(0, 6)), int(r.integers(0, 4))
        d = [det(r.uniform(0, 3), r.uniform(0, 3), r.uniform(1, 9)) for _ in range(nd)]
        _, tp, n = ev.match_detections(d, r.uniform(0, 3, nt), r.uniform(0, 3, nt), 0.5)
        assert tp.sum() <= min(nd, nt)
        assert n == nt


class TestAveragePrecision:
    def test_all_tp(self):
        assert ev.average_precision([9, 8, 7], [1, 1, 1], 3) == 1.0

    def test_all_fp(self):
        assert ev.average_precision([9, 8], [0, 0], 5) == 0.0

    def test_three_prediction_case(self):
        ap = ev.average_precision([0.9, 0.8, 0.7], [True, False, True], 2)
        assert ap == 0.5 * 1.0 + 0.5 * (2 / 3)
        assert ap == pytest.approx(0.8333, abs=5e-5)

    def test_vacuous_conventions(self):
        assert ev.average_precision([], [], 0) == 1.0
        assert ev.average_precision([5.0], [False], 0) == 0.0
        assert ev.average_precision([], [], 3) == 0.0

    def test_confidence_ties_enter_together(self):
        # one TP and one FP at the same confidence form a single PR step
        ap = ev.average_precision([0.9, 0.9], [True, False], 2)
        assert ap == 0.5 * 0.5

    def test_input_order_is_irrelevant(self):
        a = ev.average_precision([0.7, 0.9, 0.8], [1, 1, 0], 2)
        b = ev.average_precision([0.9, 0.8, 0.7], [1, 0, 1], 2)
        assert a == b

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force_sweep(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(0, 12))
        conf = r.choice([0.9, 0.8, 0.7, 0.6], size=n)  # force duplicates
        tp = r.random(n) < 0.5
        n_truth = int(tp.sum() + r.integers(0, 4))
        got = ev.average_precision(conf, tp, n_truth)
        want = brute_force_ap(conf, tp, n_truth)
        assert got == pytest.approx(want, abs=1e-12)
        assert 0.0 <= got <= 1.0


def toy_samples():
    """Three small samples with mixed hits, misses and clutter."""
    return [
        ([det(2.0, 3.0, 220), det(6.0, 6.0, 90)], [2.02, 8.0], [3.0, 8.0]),
        ([det(1.0, 1.0, 150)], [1.01], [1.0]),
        ([det(4.0, 4.0, 60), det(4.3, 4.0, 55)], [4.05], [4.0]),
    ]


class TestDatasetScoring:
    def test_deltas_must_increase(self):
        with pytest.raises(ValueError):
            ev.evaluate_detections(toy_samples(), deltas=(0.1, 0.1))

    def test_report_bookkeeping(self):
        rep = ev.evaluate_detections(toy_samples(), method="toy")
        assert rep.method == "toy"
        assert rep.deltas == ev.DELTAS_DEFAULT
        assert rep.cso_map == float(np.mean(rep.ap))
        n_truth = sum(len(s[1]) for s in toy_samples())
        n_det = sum(len(s[0]) for s in toy_samples())
        for i in range(len(rep.deltas)):
            assert rep.tp[i] + rep.fn[i] == n_truth
            assert rep.tp[i] + rep.fp[i] == n_det
        assert all(b >= a for a, b in zip(rep.ap, rep.ap[1:]))

    def test_matches_a_brute_force_evaluator(self):
        rep = ev.evaluate_detections(toy_samples(), method="toy")
        for i, delta in enumerate(rep.deltas):
            confs, flags, n_truth = [], [], 0
            for dets, tx, ty in toy_samples():
                taken = [False] * len(tx)
                for d in sorted(dets, key=lambda d: -d.confidence):
                    dists = [
                        math.hypot(d.x - x, d.y - y) if not t else math.inf
                        for x, y, t in zip(tx, ty, taken)
                    ]
                    hit = bool(dists) and min(dists) <= delta
                    if hit:
                        taken[dists.index(min(dists))] = True
                    confs.append(d.confidence)
                    flags.append(hit)
                n_truth += len(tx)
            assert rep.ap[i] == pytest.approx(
                brute_force_ap(confs, flags, n_truth), abs=1e-12
            )

    def test_extended_radius_set(self):
        rep = ev.evaluate_detections(toy_samples(), deltas=ev.DELTAS_EXTENDED)
        assert rep.deltas == tuple(round(0.05 * i, 2) for i in range(1, 11))
        assert len(rep.ap) == 10

    def test_perfect_grids_score_one(self, rng):
        cfg = SceneConfig()
        grids, scenes = [], []
        for _ in range(4):
            rows = rng.choice(np.arange(6, 27), size=3, replace=False)
            cols = rng.choice(np.arange(6, 27), size=3, replace=False)
            xy = [cell_to_position(r, c, cfg.c) for r, c in zip(rows, cols)]
            scenes.append(SparseScene(
                x=[p[0] for p in xy], y=[p[1] for p in xy], s=[200.0] * 3
            ))
            grids.append(embed_scene(scenes[-1], cfg))
        rep = ev.evaluate_grids(grids, scenes, cfg.c)
        assert rep.ap == [1.0] * 5
        assert rep.cso_map == 1.0
        assert rep.fn == [0] * 5 and rep.fp == [0] * 5

    def test_blank_grids_score_zero(self):
        cfg = SceneConfig()
        scenes = [SparseScene(x=[3.0], y=[4.0], s=[100.0])]
        rep = ev.evaluate_grids([np.zeros((33, 33))], scenes, cfg.c)
        assert rep.ap == [0.0] * 5
        assert rep.cso_map == 0.0


class TestReportWriters:
    def reports(self):
        return [ev.evaluate_detections(toy_samples(), method="m%d" % i) for i in range(2)]

    def test_csv_layout_and_determinism(self, tmp_path):
        reps = self.reports()
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        ev.write_report_csv(reps, a)
        ev.write_report_csv(reps, b)
        assert a.read_bytes() == b.read_bytes()
        lines = a.read_text().splitlines()
        assert lines[0] == "method,delta,ap,tp,fp,fn,cso_map"
        assert len(lines) == 1 + 2 * len(ev.DELTAS_DEFAULT)
        first = lines[1].split(",")
        assert first[0] == "m0" and float(first[1]) == 0.05

    def test_json_round_trip(self, tmp_path):
        reps = self.reports()
        path = tmp_path / "r.json"
        ev.write_report_json(reps, path)
        back = json.loads(path.read_text())
        assert [r["method"] for r in back] == ["m0", "m1"]
        assert back[0]["ap"] == pytest.approx(reps[0].ap)
        assert back[0]["cso_map"] == pytest.approx(reps[0].cso_map)
        assert back[1]["tp"] == reps[1].tp

    def test_svg_is_emitted_deterministically(self, tmp_path):
        rep = self.reports()[0]
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        ev.write_pr_svg(rep, a)
        ev.write_pr_svg(rep, b)
        text = a.read_text()
        assert text.startswith("<svg")
        assert text.rstrip().endswith("</svg>")
        assert text.count("<polyline") == sum(1 for r, _ in rep.curves if r.size)
        assert "mAP" in text
        assert a.read_bytes() == b.read_bytes()

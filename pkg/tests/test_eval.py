"""Evaluation tests: distance oracles, a brute-force ranking oracle, protocol
behavior (usual vs merged gallery), and result export."""

import json

import numpy as np
import pytest
from oracles import bruteforce_cmc_map, feature_set

from asanet import data as D
from asanet import evaluate as E
from asanet.errors import ConfigError, DomainError, ProtocolError
from asanet.evaluate import cmc_map, distance_matrix
from asanet.model import AsaNet, ModelConfig


class TestDistanceMatrix:
    def test_identical_rows_zero(self):
        f = np.array([[1.0, 2.0], [0.5, -1.0]])
        d = distance_matrix(f, f)
        np.testing.assert_allclose(np.diag(d), 0.0, atol=1e-12)

    def test_orthogonal_cosine_one(self):
        d = distance_matrix(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]]))
        np.testing.assert_allclose(d, [[1.0]], atol=1e-12)

    def test_against_double_loop(self):
        rng = np.random.default_rng(12)
        q = rng.standard_normal((4, 5))
        g = rng.standard_normal((6, 5))
        for metric in ("cosine", "euclidean"):
            got = distance_matrix(q, g, metric)
            expect = np.zeros((4, 6))
            for i in range(4):
                for j in range(6):
                    if metric == "cosine":
                        expect[i, j] = 1 - q[i] @ g[j] / (
                            np.linalg.norm(q[i]) * np.linalg.norm(g[j]))
                    else:
                        expect[i, j] = np.sum((q[i] - g[j]) ** 2)
            np.testing.assert_allclose(got, expect, atol=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(DomainError):
            distance_matrix(np.zeros((1, 3)), np.ones((2, 3)))

    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            distance_matrix(np.ones((1, 2)), np.ones((1, 2)), "manhattan")


class TestCmcMapHandCase:
    def test_hand_example(self):
        # q0 (id A at 0.0) ranks the line gallery as match, miss, match, miss:
        # AP = (1/1 + 2/3)/2 = 5/6. q1 (id B at 3.4) sees its match at rank 2:
        # AP = 1/2. mAP = 2/3, CMC = [0.5, 1, 1, 1].
        gallery = feature_set([[1.0], [2.0], [3.0], [4.0]], ids=["A", "X", "A", "B"])
        query = feature_set([[0.0], [3.4]], ids=["A", "B"], tids=[50, 51])
        result = cmc_map(query, gallery, setup="usual", same_camera_rule=False,
                         metric="euclidean")
        assert result.mean_ap == pytest.approx(2 / 3, abs=1e-12)
        np.testing.assert_allclose(result.cmc, [0.5, 1.0, 1.0, 1.0], atol=0)
        np.testing.assert_allclose(result.per_query_ap, [5 / 6, 0.5], atol=1e-12)

    def test_cmc_monotone_and_bounded(self):
        rng = np.random.default_rng(5)
        gallery = feature_set(rng.standard_normal((20, 4)), ids=rng.integers(0, 5, 20))
        query = feature_set(rng.standard_normal((6, 4)), ids=rng.integers(0, 5, 6),
                            tids=np.arange(600, 606))
        res = cmc_map(query, gallery, same_camera_rule=False)
        assert (np.diff(res.cmc) >= 0).all()
        assert res.cmc[-1] == 1.0
        assert 0.0 <= res.mean_ap <= 1.0
        assert ((res.per_query_ap >= 0) & (res.per_query_ap <= 1)).all()

    def test_perfect_ranking_map_one(self):
        gallery = feature_set([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]], ids=[0, 0, 1])
        query = feature_set([[1.0, 0.05]], ids=[0], tids=[99])
        res = cmc_map(query, gallery, same_camera_rule=False)
        assert res.mean_ap == 1.0


class TestRankingOracle:
    @pytest.mark.parametrize("seed", range(40))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        nq = int(rng.integers(1, 21))
        ng = int(rng.integers(2, 51))
        d = 4
        n_ids = int(rng.integers(2, 8))
        gallery = feature_set(rng.standard_normal((ng, d)),
                              ids=rng.integers(0, n_ids, ng),
                              cams=rng.integers(0, 2, ng),
                              tids=np.arange(ng))
        query = feature_set(rng.standard_normal((nq, d)),
                            ids=rng.integers(0, n_ids, nq),
                            cams=rng.integers(0, 2, nq),
                            tids=np.arange(1000, 1000 + nq))
        setup = "mixing" if seed % 2 else "usual"
        rule = bool(seed % 3 == 0)
        try:
            res = cmc_map(query, gallery, setup=setup, same_camera_rule=rule)
        except ProtocolError:
            with pytest.raises(ProtocolError):
                bruteforce_cmc_map(query, gallery, setup, rule)
            return
        cmc, mean_ap, evaluated = bruteforce_cmc_map(query, gallery, setup, rule)
        assert res.num_queries_evaluated == evaluated
        assert res.mean_ap == mean_ap
        np.testing.assert_array_equal(res.cmc, cmc)


class TestProtocols:
    def _sets_with_unmatched(self):
        rng = np.random.default_rng(8)
        # ids 0 and 1 exist in the gallery; id 2 only appears as two queries
        gallery = feature_set(rng.standard_normal((6, 3)),
                              ids=[0, 0, 1, 1, 0, 1],
                              cams=[0, 1, 0, 1, 1, 0],
                              tids=np.arange(6))
        query = feature_set(rng.standard_normal((4, 3)),
                            ids=[0, 1, 2, 2],
                            cams=[0, 0, 0, 1],
                            tids=[100, 101, 102, 103])
        return query, gallery

    def test_usual_drops_unmatched_mixing_keeps(self):
        query, gallery = self._sets_with_unmatched()
        usual = cmc_map(query, gallery, setup="usual", same_camera_rule=False)
        mixing = cmc_map(query, gallery, setup="mixing", same_camera_rule=False)
        assert usual.num_queries_evaluated == 2
        assert mixing.num_queries_evaluated == 4
        assert usual.num_queries_evaluated < mixing.num_queries_evaluated

    def test_mixing_never_ranks_query_against_itself(self):
        query, gallery = self._sets_with_unmatched()
        mixing = cmc_map(query, gallery, setup="mixing", same_camera_rule=False)
        for qid, ranked in zip(mixing.query_ids, mixing.ranked_lists):
            assert qid not in ranked

    def test_mixing_degenerate_gallery_equals_query(self):
        rng = np.random.default_rng(9)
        feats = rng.standard_normal((6, 3))
        ids = [0, 0, 1, 1, 2, 2]
        query = feature_set(feats, ids=ids, tids=np.arange(6))
        gallery = feature_set(feats.copy(), ids=ids, tids=np.arange(6))
        res = cmc_map(query, gallery, setup="mixing", same_camera_rule=False)
        assert res.cmc[-1] == 1.0
        assert res.num_queries_evaluated == 6

    def test_same_camera_rule_excludes(self):
        # the only same-id gallery entry shares the query's camera
        gallery = feature_set([[1.0, 0.0], [0.0, 1.0]], ids=[0, 1], cams=[0, 0])
        query = feature_set([[1.0, 0.1]], ids=[0], cams=[0], tids=[10])
        with pytest.raises(ProtocolError):
            cmc_map(query, gallery, setup="usual", same_camera_rule=True)
        res = cmc_map(query, gallery, setup="usual", same_camera_rule=False)
        assert res.num_queries_evaluated == 1

    def test_empty_after_filtering(self):
        gallery = feature_set([[1.0, 0.0]], ids=[5])
        query = feature_set([[1.0, 0.0]], ids=[0], tids=[1])
        with pytest.raises(ProtocolError):
            cmc_map(query, gallery, setup="usual", same_camera_rule=False)


@pytest.fixture(scope="module")
def setup_model():
    ds = D.gen_dataset(seed=4, num_identities=4, tracklets_per_identity=6,
                       image=(32, 16), frames_per_tracklet=8)
    model = AsaNet(ModelConfig(channels=8, frames_per_clip=2, image_height=32,
                               image_width=16, num_identities=4), seed=2)
    return ds, model


class TestExtractFeatures:
    def test_shape_and_determinism(self, setup_model):
        ds, model = setup_model
        a = E.extract_features(model, ds, "query", seed=5)
        b = E.extract_features(model, ds, "query", seed=5)
        assert a.features.shape == (len(ds.split("query")), 8)
        assert (a.features == b.features).all()
        assert np.isfinite(a.features).all()
        assert (np.linalg.norm(a.features, axis=1) > 0).all()

    def test_cross_dataset_geometry_check(self, setup_model):
        _, model = setup_model
        other = D.gen_dataset(seed=5, num_identities=4, tracklets_per_identity=6,
                              image=(64, 32), palette="b")
        with pytest.raises(ConfigError):
            E.cross_dataset_eval(model, other)

    def test_cross_dataset_same_data_reduces_to_eval(self, setup_model):
        ds, model = setup_model
        a = E.evaluate_dataset(model, ds, seed=3)
        b = E.cross_dataset_eval(model, ds, seed=3)
        assert a.mean_ap == b.mean_ap
        np.testing.assert_array_equal(a.cmc, b.cmc)


class TestPoseRatio:
    def test_pose_blind_features_ratio_one(self):
        # orthogonal unit vectors: every pair is equidistant, so pose labels
        # carry no structure and the ratio is exactly 1
        feats = np.eye(3)
        ratio = E.intra_identity_pose_ratio(feats, [0, 0, 0], [0, 0, 1])
        assert ratio == pytest.approx(1.0, abs=1e-12)

    def test_pose_clustered_features_ratio_below_one(self):
        feats = np.array([[1.0, 0.0], [0.99, 0.01], [0.0, 1.0], [0.01, 0.99]])
        ratio = E.intra_identity_pose_ratio(feats, [0, 0, 0, 0], [0, 0, 1, 1])
        assert ratio < 0.1

    def test_needs_both_pair_kinds(self):
        with pytest.raises(ProtocolError):
            E.intra_identity_pose_ratio(np.eye(3), [0, 0, 1], [0, 0, 0])


class TestExport:
    def _result(self):
        gallery = feature_set([[1.0], [2.0], [3.0], [4.0]], ids=["A", "X", "A", "B"])
        query = feature_set([[0.0], [3.4]], ids=["A", "B"], tids=[50, 51])
        return cmc_map(query, gallery, setup="usual", same_camera_rule=False,
                       metric="euclidean")

    def test_files_and_schema(self, tmp_path):
        res = self._result()
        metrics = E.export_results(res, tmp_path)
        parsed = json.loads((tmp_path / "metrics.json").read_text())
        assert parsed["mAP"] == pytest.approx(metrics["mAP"])
        assert set(parsed["cmc"]) == {"1", "5", "10", "20"}
        cmc_rows = (tmp_path / "cmc.csv").read_text().strip().splitlines()
        assert cmc_rows[0] == "rank,value"
        assert len(cmc_rows) == 1 + len(res.cmc)
        ranked_rows = (tmp_path / "ranked_lists.csv").read_text().strip().splitlines()
        assert len(ranked_rows) == 1 + res.num_queries_evaluated

    def test_flat_cmc_gives_horizontal_svg_line(self, tmp_path):
        res = self._result()
        res.cmc[:] = 1.0
        E.export_results(res, tmp_path)
        svg = (tmp_path / "cmc.svg").read_text()
        line = svg.split('points="')[1].split('"')[0]
        ys = {pt.split(",")[1] for pt in line.split()}
        assert len(ys) == 1

    def test_feature_dump_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        fs = feature_set(rng.standard_normal((5, 3)), ids=[0, 1, 2, 0, 1])
        E.save_features(fs, tmp_path)
        loaded = E.load_features(tmp_path)
        assert (loaded.features == fs.features).all()
        assert (loaded.identities == fs.identities).all()
        assert (loaded.tracklet_ids == fs.tracklet_ids).all()

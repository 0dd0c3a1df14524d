import numpy as np
import pytest

import mtpb


def tiny_config():
    return mtpb.config(
        "default",
        seed=3,
        data={"synthetic": {"num_cities": 3, "nodes_per_city": 4, "days": 3}, "few_shot_days": 1},
        model={
            "layers": {"d": 8, "d_q": 8, "heads": 2, "ffn": 16, "encoder_depth": 1},
            "window_len": 48,
            "patch_len": 4,
        },
        pretrain={"epochs": 1},
        patterns={"scales": [1, 2], "k": 3},
        transfer={"horizon": 12, "tcn_blocks": 2},
        meta={"meta_epochs": 1, "batch_size": 2, "update_step": 1},
        finetune={"epochs": 1, "train_stride": 48},
        evaluate={"horizons_min": [10, 60], "eval_stride": 96},
    )


def test_synthetic_corpus_shapes():
    cities, labels = mtpb.generate_synthetic(num_cities=2, nodes=5, days=2, seed=1)
    assert len(cities) == 2
    assert cities[0].speed.shape == (2 * 288, 5)
    assert cities[0].adjacency.shape == (5, 5)
    assert len(labels[1]) == 5
    assert np.all((cities[0].speed >= 0) & (cities[0].speed <= 100))


def test_city_round_trip(tmp_path):
    cities, _ = mtpb.generate_synthetic(num_cities=1, nodes=3, days=1)
    mtpb.save_city(cities[0], tmp_path / "c")
    back = mtpb.load_city(tmp_path / "c")
    np.testing.assert_allclose(back.speed, cities[0].speed)


def test_config_rejects_unknown_keys():
    cfg = mtpb.config("desk")
    assert cfg["model"]["layers"]["d"] == 32
    cfg["meta"]["gama"] = 1
    with pytest.raises(ValueError):
        mtpb.config_hash(cfg)


def test_metrics_and_reconstruction():
    m = mtpb.compute_metrics([np.full((1, 1), 3.0)], [np.full((1, 1), 1.0)], [5])
    h = m["horizons"][0]
    assert h["rmse"] == pytest.approx(2.0) and h["mae"] == pytest.approx(2.0)
    assert h["mape"] == pytest.approx(200.0)

    rng = np.random.default_rng(0)
    a = mtpb.row_stochastic(rng.random((4, 4)))
    ap = mtpb.row_stochastic(rng.random((4, 4)))
    c, a_hat, _ = mtpb.reconstruct_graph(np.zeros((4, 3)), a, ap, 10.0)
    np.testing.assert_array_equal(c, 0.5 * (a + ap))
    np.testing.assert_array_equal(a_hat, a_hat.T)


def test_kmeans_recovers_directions():
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(3, 6))
    pts = np.repeat(dirs, 30, axis=0) + 0.01 * rng.normal(size=(90, 6))
    labels = np.repeat(np.arange(3), 30)
    _, assign, inertia = mtpb.kmeans_cosine(pts, 3, seed=2)
    assert mtpb.adjusted_rand_index(list(assign), list(labels)) == 1.0
    assert all(b <= a + 1e-12 for a, b in zip(inertia, inertia[1:]))


def test_tiny_pipeline_is_deterministic(tmp_path):
    cfg = tiny_config()
    a = mtpb.run(cfg, tmp_path / "a")
    b = mtpb.run(cfg, tmp_path / "b")
    assert [s["status"] for s in a["stages"]] == ["ok"] * 6
    assert a["model"] == b["model"]
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    ha = mtpb.run_ha_baseline(cfg, tmp_path / "ha")
    assert ha["horizons"] == a["ha"]["horizons"]


def test_stage_failure_names_the_stage(tmp_path):
    cfg = tiny_config()
    cfg["data"]["target_city"] = "nowhere"
    with pytest.raises(mtpb.StageError, match="data"):
        mtpb.run(cfg, tmp_path / "x")

from skipalign.experiment import ToyExperimentConfig, judge, run_toy_experiment


def _arms(skip, dense, packed):
    return {"skip": {"accuracy": skip}, "dense": {"accuracy": dense}, "packed": {"accuracy": packed}}


def test_judge_needs_three_wins_and_packed_parity():
    assert judge(_arms([1, 1, 1, 0], [0, 0, 0, 0], [0.5] * 4))["passed"]
    assert not judge(_arms([1, 1, 0, 0], [0, 0, 0, 0], [0] * 4))["passed"]
    assert not judge(_arms([0.5] * 4, [0] * 4, [0.6] * 4))["passed"]


def test_eval_distances_stay_inside_buckets():
    cfg = ToyExperimentConfig(eval_per_bucket=5)
    d = cfg.eval_distances()
    assert len(d) == 5 * (len(cfg.bucket_edges) - 1)
    assert min(d) > cfg.bucket_edges[0] and max(d) <= cfg.bucket_edges[-1]


def test_tiny_run_matches_steps_and_writes_artifacts(tmp_path):
    cfg = ToyExperimentConfig(n_train=64, max_len=128, pack_len=512, L=512, epochs=1, eval_per_bucket=2,
                              bucket_edges=(128, 320, 512), in_range=(16, 128),
                              model={"layers": 1, "heads": 2, "model_dim": 16, "head_dim": 8, "max_position": 512})
    res = run_toy_experiment(cfg, tmp_path)
    steps = {n: a["steps"] for n, a in res["arms"].items()}
    assert steps["packed"] == steps["dense"] == steps["skip"]
    for name in ("dense", "packed", "skip"):
        assert (tmp_path / name / "model.pt").exists()
    assert (tmp_path / "toy_experiment.json").exists()
    assert set(res) >= {"passed", "skip_mean", "packed_mean", "seconds"}

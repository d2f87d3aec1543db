import json
import os

import numpy as np
import pytest

from conftest import small_config
from idsgan import data as D
from idsgan import pipeline as P
from idsgan.checkpoint import load_checkpoint
from idsgan.errors import PrerequisiteError, ShapeError, UsageError

REPORT_FILES = ["confusion_matrix.csv", "metrics.json", "metrics.txt", "training_curves.csv"]


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    from conftest import asset
    out = tmp_path_factory.mktemp("run")
    config = small_config(out, [asset("toy_binary.csv")])
    baseline, augmented, rows = P.run_pipeline(config)
    return config, baseline, augmented, rows


def test_run_writes_every_artifact(full_run):
    config, baseline, augmented, rows = full_run
    out = config.out_dir
    for name in ["prepared.npz", "preprocessing.json", "config.json", "baseline.ckpt", "gans.ckpt",
                 "synthetic.npz", "augmented.ckpt", "reports/comparison.csv"]:
        assert os.path.exists(os.path.join(out, name)), name
    for run in ("baseline", "augmented"):
        for name in REPORT_FILES:
            assert os.path.exists(os.path.join(out, "reports", run, name))
    assert not os.path.exists(os.path.join(out, "INCOMPLETE"))
    assert rows[0][0] == "accuracy"
    assert baseline.composition == {"real": 400, "synthetic": 0}
    assert augmented.composition == {"real": 400, "synthetic": 40}


def test_curves_match_epochs(full_run):
    config = full_run[0]
    from idsgan.metrics import load_curves
    curves = load_curves(os.path.join(config.out_dir, "reports", "baseline", "training_curves.csv"))
    assert [c["epoch"] for c in curves] == [1, 2]


def test_same_seed_gives_identical_reports(full_run, tmp_path):
    from conftest import asset
    first = full_run[0]
    second = small_config(tmp_path / "second", [asset("toy_binary.csv")])
    P.run_pipeline(second)
    for run in ("baseline", "augmented"):
        for name in REPORT_FILES:
            a = os.path.join(first.out_dir, "reports", run, name)
            b = os.path.join(second.out_dir, "reports", run, name)
            assert read(a) == read(b), (run, name)
    assert read(os.path.join(first.out_dir, "reports", "comparison.csv")) == \
        read(os.path.join(second.out_dir, "reports", "comparison.csv"))


def test_different_seed_changes_results(full_run, tmp_path):
    from conftest import asset
    other = small_config(tmp_path, [asset("toy_binary.csv")], seed=12)
    P.run_stage("prepare", other)
    a = P.load_arrays(os.path.join(full_run[0].out_dir, "prepared.npz"))
    b = P.load_arrays(os.path.join(other.out_dir, "prepared.npz"))
    assert a["train_X"].tobytes() != b["train_X"].tobytes()


def test_stage_rerun_is_idempotent(full_run):
    config = full_run[0]
    path = os.path.join(config.out_dir, "baseline.ckpt")
    before = read(path)
    P.run_stage("train", config)
    assert read(path) == before


def test_test_split_isolation(full_run):
    config = full_run[0]
    train, test, pre = P.load_prepared(config)
    table = D.dedupe(D.load_csv(config.inputs[0]))
    raw, _ = D.numeric_matrix(table, pre["selection"]["names"])
    scaler = D.ScalerState.from_dict(pre["scaler"])
    scaled = D.apply_minmax(raw, scaler)
    train_rows = {r.tobytes() for r in train.X}
    test_rows = {r.tobytes() for r in test.X}
    assert not train_rows & test_rows
    # scaler bounds are exactly the train-split extremes
    in_train = np.array([r.tobytes() in train_rows for r in scaled])
    np.testing.assert_array_equal(scaler.mins, raw[in_train].min(axis=0))
    np.testing.assert_array_equal(scaler.maxs, raw[in_train].max(axis=0))
    # synthetic rows only come from GANs fitted on training rows
    ckpt = load_checkpoint(os.path.join(config.out_dir, "gans.ckpt"))
    assert set(ckpt.gans) == {"0", "1"}
    audit = {a["stage"]: a for a in pre["audit"]}
    assert audit["fit_minmax"]["rows"] == "train" and audit["select_features"]["rows"] == "train"


def test_width_mismatch_guard(full_run):
    config = full_run[0]
    ckpt = load_checkpoint(os.path.join(config.out_dir, "baseline.ckpt"))
    wrong = D.Dataset(np.zeros((3, 7)), [0, 1, 0], ckpt.state["class_names"])
    with pytest.raises(ShapeError):
        P.evaluate_checkpoint(ckpt, wrong)
    renamed = D.Dataset(np.zeros((3, 8)), [0, 1, 0], ["x", "y"])
    with pytest.raises(ShapeError):
        P.evaluate_checkpoint(ckpt, renamed)


def test_synth_before_gan(tmp_path, toy_binary_csv):
    config = small_config(tmp_path, [toy_binary_csv])
    P.run_stage("prepare", config)
    with pytest.raises(PrerequisiteError) as info:
        P.run_stage("synth", config)
    assert info.value.stage == "gan"


def test_train_before_prepare(tmp_path, toy_binary_csv):
    with pytest.raises(PrerequisiteError):
        P.run_stage("train", small_config(tmp_path, [toy_binary_csv]))


def test_zero_synthetic_rows(tmp_path, toy_binary_csv):
    config = small_config(tmp_path, [toy_binary_csv], synthetic_per_class=0)
    baseline, augmented, rows = P.run_pipeline(config)
    assert load_checkpoint(os.path.join(tmp_path, "gans.ckpt")).gans == {}
    synth = P.load_arrays(os.path.join(tmp_path, "synthetic.npz"))
    assert synth["X"].shape == (0, 8)
    assert augmented.composition == {"real": 400, "synthetic": 0}


def test_per_class_counts_by_name(tmp_path, toy_imbalanced_csv):
    config = small_config(tmp_path, [toy_imbalanced_csv], synthetic_per_class={"attack": 30})
    P.run_stage("prepare", config)
    P.run_stage("gan", config)
    P.run_stage("synth", config)
    synth = P.load_arrays(os.path.join(tmp_path, "synthetic.npz"))
    assert synth["y"].tolist() == [0] * 30
    assert synth["X"].min() >= 0 and synth["X"].max() <= 1


def test_resolve_synthetic_counts():
    config = P.PipelineConfig(synthetic_per_class={"b": 5, 0: 2, "2": 0})
    assert P.resolve_synthetic_counts(config, ["a", "b", "c"]) == {0: 2, 1: 5}
    with pytest.raises(UsageError):
        P.resolve_synthetic_counts(P.PipelineConfig(synthetic_per_class={"zz": 1}), ["a"])
    assert P.resolve_synthetic_counts(P.PipelineConfig(synthetic_per_class=3), ["a", "b"]) == {0: 3, 1: 3}


def test_reuse_mode(tmp_path, toy_binary_csv):
    config = small_config(tmp_path, [toy_binary_csv], retrain_mode="reuse")
    _, augmented, _ = P.run_pipeline(config)
    assert len(augmented.history) == 2


def test_failed_stage_leaves_marker(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,label\n1,x\n2\n")
    config = small_config(tmp_path / "out", [str(bad)])
    with pytest.raises(P.StageError) as info:
        P.run_stage("prepare", config)
    assert info.value.stage == "prepare"
    assert "line 3" in open(os.path.join(config.out_dir, "INCOMPLETE")).read()


def test_seed_offsets():
    config = P.PipelineConfig(seed=40)
    assert config.seed_for("split") == 40
    assert config.seed_for("retrain_train") == 44
    assert config.seed_for("gan", 3) == 143
    assert config.seed_for("synth", 1) == 241
    assert config.seed_for("subsample") == 40 + 7919


def test_config_validation():
    with pytest.raises(UsageError, match="unknown config keys"):
        P.PipelineConfig.from_dict({"epochs": 3})
    with pytest.raises(UsageError):
        P.PipelineConfig(dataset="arff")
    with pytest.raises(UsageError):
        P.PipelineConfig(retrain_mode="warm")


def test_load_config_yaml(tmp_path, toy_binary_csv):
    import shutil
    shutil.copy(toy_binary_csv, tmp_path / "data.csv")
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("dataset: csv\ninputs: [data.csv]\ntrain: {epochs: 3}\ngan: {epochs: 7}\nseed: 5\n")
    config = P.load_config(str(cfg))
    assert config.inputs == [str(tmp_path / "data.csv")]
    assert config.train.epochs == 3 and config.gan.epochs == 7 and config.seed == 5


def test_config_digest(tmp_path, toy_binary_csv):
    import shutil
    a = tmp_path / "a.csv"
    shutil.copy(toy_binary_csv, a)
    c1 = small_config(tmp_path / "x", [str(a)])
    c2 = small_config(tmp_path / "y", [str(a)])
    assert P.config_digest(c1) == P.config_digest(c2)
    assert P.config_digest(c1) != P.config_digest(small_config(tmp_path / "x", [str(a)], seed=1))
    before = P.config_digest(c1)
    a.write_text(a.read_text() + "0,0,0,0,0,0,0,0,normal\n")
    assert P.config_digest(c1) != before


def test_preprocessing_json_contents(full_run):
    config = full_run[0]
    with open(os.path.join(config.out_dir, "preprocessing.json")) as fh:
        pre = json.load(fh)
    assert pre["class_names"] == ["attack", "normal"]
    assert len(pre["selection"]["indices"]) == 8
    assert [a["stage"] for a in pre["audit"]][:2] == ["load", "dedupe"]


def test_staged_run_matches_run_all(full_run, tmp_path):
    config = full_run[0]
    staged = small_config(tmp_path, config.inputs)
    P.run_stage("prepare", staged)
    P.run_stage("train", staged)
    for name in ("prepared.npz", "baseline.ckpt"):
        assert read(os.path.join(tmp_path, name)) == read(os.path.join(config.out_dir, name))


def test_evaluate_reproduces_recorded_report(full_run):
    config = full_run[0]
    path = os.path.join(config.out_dir, "reports", "baseline", "metrics.json")
    before = read(path)
    P.run_stage("evaluate", config)
    assert read(path) == before


def test_kdd_format_through_stages(tmp_path, kdd_fixture):
    config = small_config(tmp_path, [kdd_fixture], dataset="kdd", synthetic_per_class=0)
    for stage in ("prepare", "train", "evaluate"):
        P.run_stage(stage, config)
    report = json.load(open(os.path.join(tmp_path, "reports", "baseline", "metrics.json")))
    assert report["class_names"] == D.KDD_CLASSES
    ckpt = load_checkpoint(os.path.join(tmp_path, "baseline.ckpt"))
    assert ckpt.models["classifier"].input_shape == (30, 1)
    assert ckpt.models["classifier"].class_count == 5


def test_cicids_format_through_stages(tmp_path):
    rng = np.random.default_rng(0)
    header = [f" Feature {i}" for i in range(77)] + [" Fwd Header Length", " Label"]
    header[40] = " Fwd Header Length"
    lines = [",".join(header)]
    labels = ["BENIGN", "DDoS", "PortScan", "Benign"]
    for i in range(120):
        cells = [f"{v:.3f}" for v in rng.uniform(size=78)]
        if i == 7:
            cells[3] = "Infinity"
        lines.append(",".join(cells + [labels[i % 4]]))
    path = tmp_path / "cic.csv"
    path.write_text("\n".join(lines) + "\n")
    config = small_config(tmp_path / "out", [str(path)], dataset="cicids")
    with pytest.warns(UserWarning, match="dropped 1"):
        P.run_stage("prepare", config)
    train, test, pre = P.load_prepared(config)
    assert train.width == 78 and train.class_names == D.CICIDS_CLASSES
    assert "Fwd Header Length.1" in pre["selection"]["names"]
    assert len(train) + len(test) == 119
    P.run_stage("train", config)
    model = load_checkpoint(os.path.join(config.out_dir, "baseline.ckpt")).models["classifier"]
    assert model.input_shape == (78, 1) and model.class_count == 1

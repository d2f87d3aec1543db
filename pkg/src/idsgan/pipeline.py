"""End-to-end run: prepare, train, GANs, synthesize, augment, retrain, evaluate, compare.

Each stage reads the artifacts of the stages before it from the output
directory and writes its own, so stages can be re-run one at a time:

========== ======================= ==============================
stage      reads                   writes
========== ======================= ==============================
prepare    input files             prepared.npz, preprocessing.json, config.json
train      prepared.npz            baseline.ckpt
gan        prepared.npz            gans.ckpt
synth      gans.ckpt               synthetic.npz
retrain    prepared, synthetic     augmented.ckpt
evaluate   checkpoints, prepared   reports/<run>/...
report     reports/*/metrics.json  reports/comparison.csv
========== ======================= ==============================

Stage seeds are fixed offsets from the master seed (see ``SEED_OFFSETS``).
"""

import hashlib
import json
import logging
import os
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as D
from . import metrics as M
from .checkpoint import Checkpoint, _write_array, load_checkpoint, save_checkpoint
from .errors import PrerequisiteError, ShapeError, UsageError
from .gan import GanConfig, generate_synthetic, train_gan
from .nn import TrainConfig, TrainHistory, build_cnn_attention, predict_classes, train_classifier

log = logging.getLogger(__name__)

SEED_OFFSETS = {
    "split": 0,
    "subsample": 7919,
    "baseline_init": 1,
    "baseline_train": 2,
    "retrain_init": 3,
    "retrain_train": 4,
    "gan": 100,        # + class index
    "synth": 200,      # + class index
}

STAGES = ("prepare", "train", "gan", "synth", "retrain", "evaluate", "report")

DEFAULT_CLASS_COUNT = {"kdd": 5, "cicids": 1}


@dataclass
class PipelineConfig:
    dataset: str = "csv"
    inputs: list = field(default_factory=list)
    feature_width: int = None
    class_count: int = None
    split_ratio: float = 0.8
    max_rows: int = None
    label_column: str = None
    drop_columns: list = field(default_factory=list)
    categorical: list = None
    head: str = None
    attention_mode: str = "scaled_dot"
    attention_placement: str = "after_pool"
    train: TrainConfig = field(default_factory=TrainConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    synthetic_per_class: object = 1000
    retrain_mode: str = "reinit"
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.gan, dict):
            self.gan = GanConfig(**self.gan)
        if self.dataset not in D.SCHEMAS:
            raise UsageError(f"dataset must be one of {sorted(D.SCHEMAS)}, got {self.dataset!r}")
        if not 0.0 < self.split_ratio < 1.0:
            raise UsageError("split_ratio must be strictly between 0 and 1")
        if self.retrain_mode not in ("reinit", "reuse"):
            raise UsageError("retrain_mode must be 'reinit' or 'reuse'")
        if isinstance(self.inputs, str):
            self.inputs = [self.inputs]
        if self.dataset == "kdd" and self.feature_width not in (None, 30):
            log.warning("kdd normally uses 30 features; using %s", self.feature_width)
        if self.dataset == "cicids" and self.feature_width not in (None, 78):
            log.warning("cicids normally uses 78 features; using %s", self.feature_width)

    def seed_for(self, stage, offset=0):
        return self.seed + SEED_OFFSETS[stage] + offset

    def to_dict(self):
        d = asdict(self)
        d["inputs"] = list(self.inputs)
        return d

    @classmethod
    def from_dict(cls, d, base_dir=None):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if base_dir is not None:
            d["inputs"] = [p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))
                           for p in ([d["inputs"]] if isinstance(d.get("inputs"), str) else d.get("inputs", []))]
        try:
            return cls(**d)
        except TypeError as exc:
            raise UsageError(f"invalid config: {exc}") from exc


def load_config(path):
    import yaml

    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a mapping")
    return PipelineConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config):
    """Hash of everything that determines results: config minus paths, plus input contents."""
    d = config.to_dict()
    d.pop("out_dir")
    d["inputs"] = [_file_digest(p) for p in config.inputs if os.path.exists(p)]
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- artifacts


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.cause = exc


def _path(config, name):
    return os.path.join(config.out_dir, name)


def _require(config, name, stage):
    p = _path(config, name)
    if not os.path.exists(p):
        raise PrerequisiteError(f"{name} not found in {config.out_dir}; run '{stage}' first", stage)
    return p


def save_arrays(path, arrays):
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w") as zf:
        for name in sorted(arrays):
            _write_array(zf, name, np.asarray(arrays[name]))
    os.replace(tmp, path)


def load_arrays(path):
    with np.load(path, allow_pickle=False) as npz:
        return {k: npz[k] for k in npz.files}


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_prepared(config):
    arrays = load_arrays(_require(config, "prepared.npz", "prepare"))
    with open(_require(config, "preprocessing.json", "prepare")) as fh:
        pre = json.load(fh)
    names = pre["class_names"]
    feats = pre["selection"].get("names")
    train = D.Dataset(arrays["train_X"], arrays["train_y"], names, arrays["train_provenance"], feats)
    test = D.Dataset(arrays["test_X"], arrays["test_y"], names, None, feats)
    return train, test, pre


def output_units(config, class_names):
    if config.class_count:
        return config.class_count
    if config.dataset in DEFAULT_CLASS_COUNT:
        return DEFAULT_CLASS_COUNT[config.dataset]
    return 1 if len(class_names) == 2 else len(class_names)


def resolve_synthetic_counts(config, class_names):
    spec = config.synthetic_per_class
    if spec is None:
        return {}
    if isinstance(spec, int):
        return {i: spec for i in range(len(class_names)) if spec > 0}
    out = {}
    for key, n in dict(spec).items():
        if isinstance(key, str) and key in class_names:
            idx = class_names.index(key)
        else:
            try:
                idx = int(key)
            except ValueError:
                raise UsageError(f"synthetic_per_class: unknown class {key!r}") from None
        if not 0 <= idx < len(class_names):
            raise UsageError(f"synthetic_per_class: class index {idx} out of range")
        if int(n) > 0:
            out[idx] = int(n)
    return out


# ---------------------------------------------------------------- stages


def stage_prepare(config):
    if not config.inputs:
        raise UsageError("no input files configured")
    prepared = D.prepare_dataset(
        config.dataset, config.inputs, feature_width=config.feature_width,
        ratio=config.split_ratio, seed=config.seed_for("split"), max_rows=config.max_rows,
        drop_columns=config.drop_columns, label_column=config.label_column,
        categorical=config.categorical, subsample_seed=config.seed_for("subsample"))
    os.makedirs(config.out_dir, exist_ok=True)
    tr, te = prepared.train, prepared.test
    save_arrays(_path(config, "prepared.npz"), {
        "train_X": tr.X, "train_y": tr.y, "train_provenance": tr.provenance,
        "test_X": te.X, "test_y": te.y,
    })
    _write_json(_path(config, "preprocessing.json"), {
        "dataset": config.dataset,
        "class_names": tr.class_names,
        "encoder": prepared.encoder.to_dict(),
        "scaler": prepared.scaler.to_dict(),
        "selection": prepared.selection.to_dict(),
        "audit": prepared.audit,
    })
    _write_json(_path(config, "config.json"), config.to_dict())
    return prepared


def _preprocessing_state(pre):
    return {k: pre[k] for k in ("dataset", "class_names", "encoder", "scaler", "selection")}


def _new_model(config, width, class_names, seed):
    return build_cnn_attention(width, output_units(config, class_names), head=config.head,
                               attention_mode=config.attention_mode,
                               attention_placement=config.attention_placement, seed=seed)


def _train_run(config, model, train, test, seed):
    tc = TrainConfig(**{**asdict(config.train), "seed": seed})
    return train_classifier(model, train, test, tc,
                            log=lambda r: log.info("epoch %d loss %.4f acc %.4f val_acc %.4f",
                                                   r.epoch, r.train_loss, r.train_accuracy,
                                                   r.val_accuracy or float("nan")))


def stage_train(config):
    train, test, pre = load_prepared(config)
    model = _new_model(config, train.width, train.class_names, config.seed_for("baseline_init"))
    history = _train_run(config, model, train, test, config.seed_for("baseline_train"))
    state = {**_preprocessing_state(pre), "run": "baseline", "history": history.to_list(),
             "composition": train.composition()}
    save_checkpoint(Checkpoint({"classifier": model}, {}, state, config_digest(config)),
                    _path(config, "baseline.ckpt"))
    return model, history


def stage_gan(config):
    train, _, pre = load_prepared(config)
    counts = resolve_synthetic_counts(config, train.class_names)
    gans = {}
    for c in sorted(counts):
        rows = train.X[(train.y == c) & (train.provenance == D.REAL)]
        if len(rows) == 0:
            log.warning("class %s has no training rows; no GAN trained", train.class_names[c])
            continue
        gc = GanConfig(**{**asdict(config.gan), "seed": config.seed_for("gan", c)})
        log.info("training GAN for class %s on %d rows", train.class_names[c], len(rows))
        gans[str(c)] = train_gan(rows, gc)
    save_checkpoint(Checkpoint({}, gans, {"class_names": train.class_names, "counts": counts},
                               config_digest(config)), _path(config, "gans.ckpt"))
    return gans


def stage_synth(config):
    ckpt = load_checkpoint(_require(config, "gans.ckpt", "gan"))
    class_names = ckpt.state["class_names"]
    counts = resolve_synthetic_counts(config, class_names)
    X, y = [], []
    for c in sorted(counts):
        bundle = ckpt.gans.get(str(c))
        if bundle is None:
            continue
        rows = generate_synthetic(bundle, counts[c], seed=config.seed_for("synth", c))[..., 0]
        X.append(rows)
        y.append(np.full(len(rows), c, dtype=np.int64))
    width = None
    if not X:
        train, _, _ = load_prepared(config)
        width = train.width
    arrays = {
        "X": np.concatenate(X) if X else np.zeros((0, width)),
        "y": np.concatenate(y) if y else np.zeros(0, dtype=np.int64),
    }
    save_arrays(_path(config, "synthetic.npz"), arrays)
    return arrays


def load_synthetic(config):
    arrays = load_arrays(_require(config, "synthetic.npz", "synth"))
    return {int(c): arrays["X"][arrays["y"] == c] for c in np.unique(arrays["y"])}


def stage_retrain(config):
    train, test, pre = load_prepared(config)
    combined = D.augment(train, load_synthetic(config))
    if config.retrain_mode == "reuse":
        model = load_checkpoint(_require(config, "baseline.ckpt", "train")).models["classifier"]
    else:
        model = _new_model(config, train.width, train.class_names, config.seed_for("retrain_init"))
    history = _train_run(config, model, combined, test, config.seed_for("retrain_train"))
    state = {**_preprocessing_state(pre), "run": "augmented", "history": history.to_list(),
             "composition": combined.composition()}
    save_checkpoint(Checkpoint({"classifier": model}, {}, state, config_digest(config)),
                    _path(config, "augmented.ckpt"))
    return model, history


def evaluate_checkpoint(ckpt, dataset, label=""):
    """Score a saved classifier on ``dataset``; refuses mismatched widths or classes."""
    model = ckpt.models["classifier"]
    if model.input_shape[0] != dataset.width:
        raise ShapeError(f"checkpoint expects {model.input_shape[0]} features, data has {dataset.width}")
    if ckpt.state.get("class_names") not in (None, list(dataset.class_names)):
        raise ShapeError("checkpoint class names differ from the data's")
    y_pred = predict_classes(model, dataset.X)
    return M.evaluate(dataset.y, y_pred, dataset.class_names, label=label,
                      history=ckpt.state.get("history", []), config_digest=ckpt.config_digest,
                      composition=ckpt.state.get("composition", {}))


def stage_evaluate(config):
    _, test, _ = load_prepared(config)
    reports = {}
    for run in ("baseline", "augmented"):
        p = _path(config, f"{run}.ckpt")
        if not os.path.exists(p):
            continue
        report = evaluate_checkpoint(load_checkpoint(p), test, label=run)
        M.render_report(report, _path(config, os.path.join("reports", run)))
        reports[run] = report
    if not reports:
        raise PrerequisiteError("no trained checkpoint found; run 'train' first", "train")
    return reports


def report_from_files(directory, label):
    d = M.load_metrics(os.path.join(directory, "metrics.json"))
    names = d["class_names"]
    cm = M.ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64), names)
    return M.EvaluationReport(
        label=label, confusion=cm, accuracy=d["accuracy"],
        per_class=[M.ClassMetrics(**d["per_class"][n]) for n in names],
        macro=M.ClassMetrics(**d["macro"]), weighted=M.ClassMetrics(**d["weighted"]),
        history=M.load_curves(os.path.join(directory, "training_curves.csv")),
        config_digest=d["config_digest"], composition=d["composition"], warnings=d["warnings"])


def stage_report(config):
    reports = {}
    for run, stage in (("baseline", "train"), ("augmented", "retrain")):
        d = _path(config, os.path.join("reports", run))
        if not os.path.exists(os.path.join(d, "metrics.json")):
            raise PrerequisiteError(f"reports/{run} missing; run '{stage}' and 'evaluate' first", "evaluate")
        reports[run] = report_from_files(d, run)
    rows = M.render_comparison(reports["baseline"], reports["augmented"],
                               _path(config, os.path.join("reports", "comparison.csv")))
    return reports["baseline"], reports["augmented"], rows


STAGE_FUNCS = {
    "prepare": stage_prepare,
    "train": stage_train,
    "gan": stage_gan,
    "synth": stage_synth,
    "retrain": stage_retrain,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(name, config):
    """Run one stage, converting failures to :class:`StageError` and leaving a marker."""
    marker = _path(config, "INCOMPLETE")
    try:
        result = STAGE_FUNCS[name](config)
    except PrerequisiteError:
        raise
    except Exception as exc:
        os.makedirs(config.out_dir, exist_ok=True)
        with open(marker, "w") as fh:
            fh.write(f"stage '{name}' failed: {type(exc).__name__}: {exc}\n")
        raise StageError(name, exc) from exc
    return result


def run_pipeline(config):
    """All stages in order; returns ``(baseline report, augmented report, comparison rows)``."""
    marker = _path(config, "INCOMPLETE")
    os.makedirs(config.out_dir, exist_ok=True)
    with open(marker, "w") as fh:
        fh.write("run in progress\n")
    for name in STAGES:
        log.info("stage %s", name)
        result = run_stage(name, config)
    os.remove(marker)
    return result


def load_history(ckpt):
    return TrainHistory.from_list(ckpt.state.get("history", []))

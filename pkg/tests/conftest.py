from importlib import resources

import numpy as np
import pytest


def numeric_grads(f, arrays, eps=1e-3):
    """Central finite differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + eps
            fp = f()
            a[idx] = old - eps
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dividing by ~0."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.zeros_like(n) if a is None else a
        den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / den)) if a.size else 0.0)
    return worst


def asset(name):
    return str(resources.files("idsgan").joinpath("assets", name))


@pytest.fixture
def toy_binary_csv():
    return asset("toy_binary.csv")


@pytest.fixture
def toy_imbalanced_csv():
    return asset("toy_imbalanced.csv")


@pytest.fixture
def kdd_fixture(tmp_path):
    """A hand-written KDD-format file: no header, 41 features + dotted label."""
    base = ["0", "tcp", "http", "SF", "215", "45076"] + ["0"] * 16 + ["1", "1"] + ["0.00"] * 4 + \
        ["1.00", "0.00", "0.00", "0", "0", "0.00", "0.00", "0.00", "0.00", "0.00", "0.00", "0.00", "0.00"]
    assert len(base) == 41
    lines = []
    labels = ["normal.", "smurf.", "buffer_overflow.", "ipsweep.", "guess_passwd."]
    for i, lab in enumerate(labels * 4):
        row = list(base)
        row[1] = ["tcp", "udp", "icmp"][i % 3]
        row[4] = str(100 + 7 * i)
        row[22] = str(i % 5)
        lines.append(",".join(row + [lab]))
    p = tmp_path / "kdd_small.data"
    p.write_text("\n".join(lines) + "\n")
    return str(p)


def full_model_gradcheck(model, X, y, seed=5):
    """Per-parameter relative errors of backward() against central differences.

    ReLU is piecewise linear, and an eps stencil that straddles a kink measures
    a secant rather than the derivative.  The numeric side therefore re-uses the
    ReLU masks recorded at the base point, i.e. it differentiates the same
    linear piece that backward() differentiates.
    """
    from idsgan import nn
    from idsgan import tensor as T

    relu = T.relu
    kind = nn.loss_kind(model)
    targets = nn._targets(model, kind, np.asarray(y))
    masks = []

    def recording(x):
        masks.append(x.data > 0)
        return relu(x)

    T.relu = recording
    try:
        loss = T.loss(kind, nn.forward(model, X, training=True, seed=seed), targets)
    finally:
        T.relu = relu
    for p in model.params.values():
        p.grad = None
    T.backward(loss)

    keys = list(model.params)

    def f():
        it = iter(masks)
        T.relu = lambda x: T.Tensor(np.where(next(it), x.data, 0.0))
        try:
            with T.no_grad():
                return T.loss(kind, nn.forward(model, X, training=True, seed=seed), targets).item()
        finally:
            T.relu = relu

    num = numeric_grads(f, [model.params[k].data for k in keys])
    return {k: max_rel_error([model.params[k].grad], [n]) for k, n in zip(keys, num)}


def _table(width, units):
    return [
        ("Input Layer", (None, width, 1), 0),
        ("Conv1D", (None, width, 32), 128),
        ("Conv1D", (None, width, 64), 6208),
        ("GlobalAveragePooling1D", (None, 64), 0),
        ("Reshape", (None, 1, 64), 0),
        ("Attention", (None, 1, 64), 1),
        ("Dense", (None, 1, 128), 8320),
        ("Dropout", (None, 1, 128), 0),
        ("Dense", (None, 1, units), 128 * units + units),
    ]


# rows transcribed from the two published architecture tables
CICIDS_TABLE = _table(78, 1)
KDD_TABLE = _table(30, 5)


def separable_toy(seed=0):
    """200 points, 8 features; classes differ in overall level so w = ones separates them."""
    r = np.random.default_rng(seed)
    y = np.repeat([0, 1], 100)
    X = np.clip(r.normal(np.where(y[:, None] == 1, 0.7, 0.3), 0.08, size=(200, 8)), 0, 1)
    return X, y


SINGLE_POINT = np.array([0.15, 0.8, 0.35, 0.6, 0.05, 0.9, 0.5, 0.25])


def single_point_run(seed, epochs=500):
    """Train on 256 copies of one point; return (l_inf distance of the mean sample, bundle)."""
    from idsgan import gan

    real = np.tile(SINGLE_POINT, (256, 1))
    bundle = gan.train_gan(real, gan.GanConfig(epochs=epochs, seed=seed))
    mean = gan.generate_synthetic(bundle, 2000, seed=seed).mean(axis=0)[:, 0]
    return float(np.max(np.abs(mean - SINGLE_POINT))), bundle


def naive_scores(y_true, y_pred, k):
    """Per-sample counting oracle: accuracy, per-class (p, r, f1, support), macro and weighted means."""
    n = len(y_true)
    acc = sum(1 for t, p in zip(y_true, y_pred) if t == p) / n
    rows = []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append((prec, rec, f, tp + fn))
    macro = [sum(r[i] for r in rows) / k for i in range(3)]
    weighted = [sum(r[i] * r[3] for r in rows) / n for i in range(3)]
    return acc, rows, macro, weighted


def small_config(out_dir, inputs, **overrides):
    """A pipeline config small enough for a few-second end-to-end run."""
    from idsgan.gan import GanConfig
    from idsgan.nn import TrainConfig
    from idsgan.pipeline import PipelineConfig

    kw = dict(dataset="csv", inputs=list(inputs), out_dir=str(out_dir), seed=11,
              train=TrainConfig(epochs=2, batch_size=64), gan=GanConfig(epochs=5),
              synthetic_per_class=20)
    kw.update(overrides)
    return PipelineConfig(**kw)


# ---------------------------------------------------------------- acceptance reporting

_ACCEPTANCE = {}


@pytest.fixture
def note(request):
    """Attach a one-line detail to the current acceptance criterion."""
    def put(text):
        request.node.user_properties.append(("detail", text))
    return put


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    details = [v for k, v in item.user_properties if k == "detail"]
    detail = details[-1] if details else ""
    if rep.failed and call.excinfo is not None:
        reason = call.excinfo.exconly().splitlines()[0]
        detail = f"{detail}; {reason}" if detail else reason
    _ACCEPTANCE[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}: {detail}")

import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msav.data import MixupConfig, load_features
from msav.model import MultiSourceTransformer, tiny_config
from msav.tensor import ShapeError, Tensor, no_grad
from msav.training import (
    AdamState,
    TrainConfig,
    adam_step,
    categorical_cross_entropy,
    ema_update,
    ema_update_arrays,
    lr_at,
    train,
)
from tests.conftest import SMALL_SHAPES, overfit_configs


def small_model(seed=0):
    cfg = tiny_config(
        n_classes=3, spectral_bins=SMALL_SHAPES["spectral"][1], paudio_dim=SMALL_SHAPES["paudio"][1],
        pvisual_dim=SMALL_SHAPES["pvisual"][1],
    )
    return MultiSourceTransformer(cfg, seed=seed)


def small_train_cfg(**kw):
    base = dict(epochs=3, batch_size=4, warmup_steps=5, peak_lr=1e-3, seed=11)
    base.update(kw)
    return TrainConfig(**base)


# -- loss ------------------------------------------------------------------------------


def test_cross_entropy_examples():
    uniform = Tensor(np.full((3, 10), 0.1))
    assert categorical_cross_entropy(uniform, np.eye(10)[[0, 4, 9]]).item() == pytest.approx(math.log(10), abs=1e-6)
    perfect = np.eye(10)[[1, 2]]
    assert categorical_cross_entropy(Tensor(perfect), perfect).item() == pytest.approx(0.0, abs=1e-12)
    probs = np.zeros((1, 10))
    probs[0, :2] = [0.25, 0.75]
    soft = np.zeros((1, 10))
    soft[0, :2] = 0.5
    expected = -(0.5 * math.log(0.25) + 0.5 * math.log(0.75))
    assert categorical_cross_entropy(Tensor(probs), soft).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.83703, abs=1e-4)  # quoted value is rounded loosely; exact is 0.836988


def test_cross_entropy_shape_mismatch():
    with pytest.raises(ShapeError):
        categorical_cross_entropy(Tensor(np.full((2, 10), 0.1)), np.zeros((2, 9)))


# -- schedule --------------------------------------------------------------------------


def test_lr_schedule_anchor_values():
    cfg = TrainConfig()
    assert lr_at(675, cfg) == 0.00025
    assert lr_at(676, cfg) == pytest.approx(0.00024975, rel=1e-12)
    assert lr_at(0, cfg) == pytest.approx(0.00025 * math.exp(-5), rel=1e-12)
    assert lr_at(0, cfg) == pytest.approx(1.6845e-6, rel=1e-4)


def test_lr_schedule_monotone_then_continuous():
    cfg = TrainConfig()
    ramp = [lr_at(s, cfg) for s in range(676)]
    assert all(b > a for a, b in zip(ramp, ramp[1:]))
    assert abs(lr_at(676, cfg) - lr_at(675, cfg)) < 1e-6
    assert all(lr_at(s + 1, cfg) < lr_at(s, cfg) for s in range(675, 2000))


def test_geometric_warmup_shape():
    cfg = TrainConfig(warmup_shape="geometric")
    assert lr_at(0, cfg) == pytest.approx(0.00025 * math.exp(-5))
    assert lr_at(675, cfg) == 0.00025
    ratios = [lr_at(s + 1, cfg) / lr_at(s, cfg) for s in range(0, 675, 50)]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)


def test_lr_rejects_negative_step():
    with pytest.raises(ValueError):
        lr_at(-1, TrainConfig())


@pytest.mark.parametrize("kw", [dict(decay_rate=1.0), dict(ema_decay=0.0), dict(warmup_steps=0),
                                dict(batch_size=1), dict(warmup_shape="linear")])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- Adam --------------------------------------------------------------------------------


def scalar_param(v):
    return Tensor(np.array([v], dtype=np.float64), requires_grad=True)


def test_adam_first_step_is_lr_times_sign():
    cfg = TrainConfig()
    p = {"w": scalar_param(1.0)}
    adam_step(p, {"w": np.array([0.37])}, AdamState(), 1e-3, cfg)
    assert p["w"].data[0] == pytest.approx(1.0 - 1e-3, abs=1e-10)


def test_adam_zero_gradient_leaves_params():
    p = {"w": scalar_param(2.5)}
    adam_step(p, {"w": np.zeros(1)}, AdamState(), 1e-3, TrainConfig())
    assert p["w"].data[0] == 2.5


def test_adam_two_steps_match_unrolled_oracle():
    cfg = TrainConfig()
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    theta, m, v = 0.5, 0.0, 0.0
    grads = [0.3, -1.2]
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    p = {"w": scalar_param(0.5)}
    state = AdamState()
    for g in grads:
        adam_step(p, {"w": np.array([g])}, state, lr, cfg)
    assert abs(p["w"].data[0] - theta) < 1e-12
    assert state.t == 2


def test_adam_missing_gradient():
    with pytest.raises(ValueError, match="no gradient"):
        adam_step({"w": scalar_param(0.0)}, {"w": None}, AdamState(), 1e-3, TrainConfig())


# -- EMA -----------------------------------------------------------------------------------


def test_ema_single_update_and_closed_form():
    for k in (1, 10, 1000):
        t = {"x": np.zeros(1)}
        for _ in range(k):
            ema_update_arrays(t, {"x": np.ones(1)}, 0.999)
        assert abs(t["x"][0] - (1 - 0.999**k)) < 1e-10
    t = {"x": np.zeros(1)}
    ema_update_arrays(t, {"x": np.ones(1)}, 0.999)
    assert t["x"][0] == pytest.approx(0.001, abs=1e-15)


def test_ema_fixed_point_and_name_mismatch():
    student = small_model()
    teacher = copy.deepcopy(student)
    ema_update(teacher, student)
    for name, value in student.state_dict().items():
        assert teacher.state_dict()[name].tobytes() == value.tobytes()
    with pytest.raises(KeyError):
        ema_update_arrays({"a": np.zeros(1)}, {"b": np.zeros(1)}, 0.9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(0.5, 0.9999))
def test_ema_stays_in_convex_hull(values, decay):
    t = {"x": np.array([values[0]])}
    seen = [values[0]]
    for v in values:
        seen.append(v)
        ema_update_arrays(t, {"x": np.array([v])}, decay)
        assert min(seen) - 1e-9 <= t["x"][0] <= max(seen) + 1e-9


# -- training loop -----------------------------------------------------------------------


def test_zero_epochs_leaves_teacher_equal_to_student(small_corpus, tmp_path):
    model = small_model()
    initial = {k: v.copy() for k, v in model.state_dict().items()}
    result = train(small_corpus, small_corpus, model, small_train_cfg(epochs=0), out_dir=tmp_path)
    for name, value in result.teacher.state_dict().items():
        assert value.tobytes() == initial[name].tobytes()
        assert result.student.state_dict()[name].tobytes() == value.tobytes()
    assert result.steps == 0 and result.best_ce is None


def test_training_writes_log_checkpoints_and_report(small_corpus, tmp_path):
    result = train(small_corpus, small_corpus, small_model(), small_train_cfg(), out_dir=tmp_path)
    lines = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert len(lines) == 3
    assert set(lines[0]) == {"epoch", "step", "lr", "train_loss", "val_macro_ce", "val_accuracy"}
    for sub in ("best_ce", "best_acc", "final_student", "final_teacher"):
        assert (tmp_path / sub / "meta.json").exists()
    report = json.loads((tmp_path / "report.json").read_text())
    # best-retention, recomputed independently from the log
    best_ce = min(lines, key=lambda r: r["val_macro_ce"])
    assert report["best_macro_ce"]["macro_ce"] == best_ce["val_macro_ce"]
    assert report["best_accuracy"]["accuracy"] == max(r["val_accuracy"] for r in lines)
    assert result.steps == lines[-1]["step"]


def test_teacher_and_student_diverge_after_training(small_corpus):
    result = train(small_corpus, small_corpus, small_model(), small_train_cfg(epochs=1))
    s, t = result.student.state_dict(), result.teacher.state_dict()
    assert any(s[k].tobytes() != t[k].tobytes() for k in s)


def test_training_is_deterministic(small_corpus, tmp_path):
    runs = []
    for name in ("a", "b"):
        train(small_corpus, small_corpus, small_model(), small_train_cfg(), out_dir=tmp_path / name)
        runs.append(tmp_path / name)
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file())
    for rel in files:
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes(), rel


def test_class_count_mismatch(small_corpus):
    with pytest.raises(ValueError, match="classes"):
        train(small_corpus, small_corpus, MultiSourceTransformer(tiny_config(n_classes=4)), small_train_cfg())


def fixed_batch_loss(model, feats, idx):
    model.eval()
    with no_grad():
        probs = model(feats.spectral[idx], feats.paudio[idx], feats.pvisual[idx])
        loss = categorical_cross_entropy(probs, feats.one_hot(idx)).item()
    model.train()
    return loss


def test_fixed_batch_loss_halves_in_first_50_overfit_steps(tmp_path):
    from msav.data import synth_dataset

    feats = load_features(synth_dataset(tmp_path, seed=0))
    model_cfg, train_cfg = overfit_configs(epochs=5)  # 5 epochs x 10 batches = 50 steps
    model = MultiSourceTransformer(model_cfg, seed=0)
    idx = np.arange(0, 200, 10)  # one segment from each of the 20 files
    before = fixed_batch_loss(model, feats, idx)
    result = train(feats, feats, model, train_cfg, MixupConfig())
    assert result.steps == 50
    after = fixed_batch_loss(result.student, feats, idx)
    assert after <= 0.5 * before

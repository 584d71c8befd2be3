import json

import numpy as np
import pytest

from i2ckd import autodiff as ad
from i2ckd.data import DatasetSpec, as_arrays, generate
from i2ckd.losses import LossWeights, batch_channel_kld, total_loss
from i2ckd.nn import ConfigError, NetConfig, SegNetwork
from i2ckd.trainer import (
    SGD,
    DistillConfig,
    OptimConfig,
    TrainingError,
    distill_objective,
    distill_student,
    evaluate_network,
    load_checkpoint,
    poly_lr,
    save_checkpoint,
    sgd_step,
    train_network,
    train_networks,
    train_teacher,
)

SPEC = DatasetSpec(height=16, width=16, train_size=12, val_size=4, test_size=2)
TEACHER = NetConfig(widths=[6, 8], num_classes=5)
STUDENT = NetConfig(widths=[4], num_classes=5, projection=8)


@pytest.fixture(scope="module")
def data():
    return as_arrays(generate(SPEC, "train"))[:2], as_arrays(generate(SPEC, "val"))[:2]


@pytest.fixture(scope="module")
def teacher_dir(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("teacher")
    res = train_teacher(*data, TEACHER, OptimConfig(total_iter=6, batch_size=4), seed=0, eval_every=3)
    save_checkpoint(out, res.net, res.optimizer, {"iter": 6, "val_miou": res.final_miou})
    return out


def test_poly_lr_examples():
    cfg = OptimConfig(lr0=0.02, total_iter=2000)
    assert poly_lr(cfg, 0) == 0.02
    assert poly_lr(cfg, 2000) == 0.0
    assert poly_lr(cfg, 1000) == pytest.approx(0.02 * 0.5**0.9, abs=1e-15)
    assert poly_lr(cfg, 1000) == pytest.approx(0.010718, abs=1e-6)
    with pytest.raises(ValueError):
        poly_lr(cfg, 2001)


def test_poly_lr_monotone():
    cfg = OptimConfig(total_iter=50)
    lrs = [poly_lr(cfg, i) for i in range(51)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_sgd_step_hand_computed():
    p, v = [np.array([1.0])], [np.array([0.0])]
    p, v = sgd_step(p, [np.array([1.0])], v, 0.1, 0.9)
    assert p[0].tolist() == [0.9]
    p, v = sgd_step(p, [np.array([1.0])], v, 0.1, 0.9)
    # v = 0.9 * 1 + 1 = 1.9 ; p = 0.9 - 0.19
    assert v[0].tolist() == [1.9]
    assert p[0] == pytest.approx(0.71, abs=1e-15)


def test_sgd_step_plain_and_zero_grad():
    p, v = sgd_step([np.array([2.0, 3.0])], [np.array([1.0, -1.0])], [np.zeros(2)], 0.5, 0.0)
    assert p[0].tolist() == [1.5, 3.5]
    p, v = sgd_step([np.array([2.0])], [np.zeros(1)], [np.zeros(1)], 0.5, 0.9)
    assert p[0].tolist() == [2.0] and v[0].tolist() == [0.0]


def test_sgd_rejects_non_finite_and_leaves_state():
    net = SegNetwork(NetConfig(widths=[2], num_classes=2))
    opt = SGD(net.parameters, 0.9)
    before = {p.name: p.value.copy() for p in net.parameters}
    net.parameters[0].grad = np.full_like(net.parameters[0].value, np.nan)
    with pytest.raises(TrainingError):
        opt.step(0.1)
    for p in net.parameters:
        assert np.array_equal(p.value, before[p.name])


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(lr0=0.0)
    with pytest.raises(ConfigError):
        OptimConfig.from_dict({"lr": 0.1})


def test_checkpoint_round_trip_reproduces_miou(tmp_path, data):
    res = train_teacher(*data, TEACHER, OptimConfig(total_iter=1, batch_size=4), seed=0)
    save_checkpoint(tmp_path, res.net, res.optimizer, {"iter": 1, "val_miou": res.final_miou})
    net, manifest = load_checkpoint(tmp_path)
    assert evaluate_network(net, *data[1])[0] == res.final_miou
    assert manifest["training_state"]["val_miou"] == res.final_miou
    assert manifest["training_state"]["optimizer"]["momentum"] == 0.9
    assert len(manifest["training_state"]["optimizer"]["slots"]) == len(net.parameters)
    assert res.log[-1]["val_miou"] == res.final_miou


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")


def _dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_same_seed_bit_identical_checkpoints(tmp_path, data):
    optim = OptimConfig(total_iter=3, batch_size=4)
    for name in ("a", "b"):
        res = train_teacher(*data, TEACHER, optim, seed=7)
        save_checkpoint(tmp_path / name, res.net, res.optimizer, {"iter": 3, "val_miou": res.final_miou})
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")
    res = train_teacher(*data, TEACHER, optim, seed=8)
    save_checkpoint(tmp_path / "c", res.net, res.optimizer, {"iter": 3})
    assert _dir_bytes(tmp_path / "a")["block0.weight.stf"] != _dir_bytes(tmp_path / "c")["block0.weight.stf"]


def test_zero_weight_distill_matches_task_only(data, teacher_dir):
    optim = OptimConfig(total_iter=4, batch_size=4)
    teacher, _ = load_checkpoint(teacher_dir)
    teacher.freeze()
    zero = LossWeights(lambda_i2ckd=0.0, lambda_sm=0.0)
    a = train_network(SegNetwork(STUDENT, seed=1), *data, optim, zero, seed=1, teacher=teacher, eval_every=2)
    b = train_network(SegNetwork(STUDENT, seed=1), *data, optim, zero, seed=1, eval_every=2)
    for p, q in zip(a.net.parameters, b.net.parameters):
        assert np.array_equal(p.value, q.value)
    assert a.log == b.log


def test_lockstep_matches_separate_runs(data, teacher_dir):
    optim = OptimConfig(total_iter=3, batch_size=4)
    teacher, _ = load_checkpoint(teacher_dir)
    teacher.freeze()
    ws = [LossWeights(0.0, 0.0), LossWeights(0.0, 3.0), LossWeights(0.6, 3.0)]
    together = train_networks([SegNetwork(STUDENT, seed=2) for _ in ws], ws, *data, optim, 2, teacher=teacher)
    for w, res in zip(ws, together):
        alone = train_network(SegNetwork(STUDENT, seed=2), *data, optim, w, 2, teacher=teacher)
        for p, q in zip(res.net.parameters, alone.net.parameters):
            assert np.array_equal(p.value, q.value)
        assert res.log == alone.log


def test_distill_leaves_teacher_untouched(data, teacher_dir):
    before = _dir_bytes(teacher_dir)
    res = distill_student(*data, DistillConfig(str(teacher_dir), student=STUDENT, eval_every=1),
                          OptimConfig(total_iter=2, batch_size=4))
    assert _dir_bytes(teacher_dir) == before
    w = LossWeights()
    for rec in res.log:
        assert set(rec) == {"iter", "lr", "l_task", "l_sm", "l_i2ckd", "l_total", "val_miou"}
        assert rec["l_total"] == total_loss(rec, w)
        assert rec["l_sm"] > 0


def test_identical_networks_give_zero_sm():
    cfg = NetConfig(widths=[4], num_classes=3)
    teacher, student = SegNetwork(cfg, seed=5), SegNetwork(cfg, seed=5)
    x = np.random.default_rng(0).random((2, 3, 8, 8))
    with ad.no_grad():
        ft, st = teacher.forward(x)
    f, s = student.forward(x)
    masks = np.zeros((2, 8, 8), np.uint8)
    _, parts = distill_objective(f, s, masks, LossWeights(lambda_i2ckd=0.0), (ft.value, st.value))
    assert parts["l_sm"] == 0.0
    assert batch_channel_kld(st.value, s.value, 2.0)[0] == 0.0


def test_channel_mismatch_is_config_error(data, teacher_dir):
    with pytest.raises(ConfigError, match="channels"):
        distill_student(*data, DistillConfig(str(teacher_dir), student=NetConfig(widths=[4], num_classes=5)),
                        OptimConfig(total_iter=1))
    with pytest.raises(ConfigError, match="classes"):
        distill_student(*data, DistillConfig(str(teacher_dir), student=NetConfig(widths=[4], num_classes=3,
                                                                                  projection=8)),
                        OptimConfig(total_iter=1))


def test_distill_without_teacher_is_config_error(data):
    with pytest.raises(ConfigError):
        train_network(SegNetwork(STUDENT), *data, OptimConfig(total_iter=1), LossWeights(), seed=0)


def test_manifest_is_sorted_json(teacher_dir):
    text = (teacher_dir / "manifest.json").read_text()
    manifest = json.loads(text)
    assert text == json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    assert manifest["config"]["widths"] == [6, 8]


def test_identical_networks_leave_only_margin_hinges():
    from i2ckd.reference import prototypes_bruteforce

    cfg = NetConfig(widths=[4], num_classes=3)
    teacher, student = SegNetwork(cfg, seed=5), SegNetwork(cfg, seed=5)
    x = np.random.default_rng(1).random((2, 3, 6, 6))
    masks = np.random.default_rng(2).integers(0, 3, (2, 6, 6)).astype(np.uint8)
    with ad.no_grad():
        ft, st = teacher.forward(x)
    f, s = student.forward(x)
    margin = 0.5
    _, parts = distill_objective(f, s, masks, LossWeights(margin=margin), (ft.value, st.value))
    assert parts["l_sm"] == 0.0
    expected = []
    for b in range(2):
        protos, present = prototypes_bruteforce(ft.value[b].tolist(), masks[b].tolist(), 3)
        terms = [max(0.0, margin - float(np.linalg.norm(np.subtract(protos[c], protos[j]))))
                 for c in range(3) for j in range(3) if c != j and present[c] and present[j]]
        expected.append(sum(terms) / len(terms))
    assert parts["l_i2ckd"] == pytest.approx(sum(expected) / 2, rel=1e-12)

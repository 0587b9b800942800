import csv
import io
import json

import numpy as np
import pytest

from atrous_lab.config import OptimConfig, RunConfig
from atrous_lab.data import SynthConfig, generate_dataset
from atrous_lab.errors import ContractError, FormatError, NaNLossError
from atrous_lab.layers import Parameter
from atrous_lab.model import build_model
from atrous_lab.train import (
    AdamW,
    SWEEP_FIELDS,
    load_checkpoint,
    predict,
    rank_sweep,
    report_from_masks,
    save_checkpoint,
    sweep_csv,
    train,
)
from atrous_lab.verify import toy_config


@pytest.fixture(scope="module")
def toy_data():
    cfg = SynthConfig(size=16, length=(8, 14), radius=(1.0, 1.5), min_pixels=2)
    return generate_dataset(cfg, 6, 3), generate_dataset(cfg, 3, 4)


def toy(**changes) -> RunConfig:
    return toy_config().replace(**{"epochs": 2, "batch_size": 4, **changes}).validate()


# -- AdamW ----------------------------------------------------------------

def _param(value, grad):
    p = Parameter(np.array(value, dtype=np.float64))
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_adamw_zero_grad_no_decay_is_noop():
    p = _param([1.0, -2.0], [0.0, 0.0])
    AdamW([("p", p)], lr=0.1, weight_decay=0.0).step()
    assert p.data.tolist() == [1.0, -2.0]


def test_adamw_single_step_oracle():
    p = _param([1.0], [1.0])
    AdamW([("p", p)], lr=0.1, weight_decay=0.0).step()
    # m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    assert abs(p.data[0] - (1 - 0.1 / (1 + 1e-8))) <= 1e-15


def test_adamw_decoupled_decay():
    p = _param([2.0], [0.0])
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.01)
    for _ in range(3):
        opt.step()
        p.grad = np.zeros(1)
    assert abs(p.data[0] - 2.0 * (1 - 0.1 * 0.01) ** 3) <= 1e-15


def test_adamw_moments_only_for_trainable():
    a, b = _param([1.0], [1.0]), Parameter(np.ones(1), trainable=False)
    opt = AdamW([("a", a), ("b", b)], lr=0.1)
    opt.step()
    assert set(opt.m) == {"a"} and b.data[0] == 1.0
    assert all(np.all(v >= 0) for v in opt.v.values())


def test_adamw_missing_grad_is_contract_error():
    p = Parameter(np.ones(2))
    with pytest.raises(ContractError, match="p"):
        AdamW([("p", p)]).step()


# -- train ----------------------------------------------------------------

def test_zero_lr_keeps_everything_constant(toy_data):
    train_s, _ = toy_data
    cfg = toy(optim=OptimConfig(lr=0.0, weight_decay=0.01), bbox_max_shift=0)
    model = build_model(cfg)
    before = model.state_dict()
    res = train(cfg, train_s[:4], model=model)
    after = res.model.state_dict()
    params = {n for n, _ in model.named_parameters()}
    assert all(np.array_equal(before[n], after[n]) for n in params)
    assert res.history[0]["loss"] == res.history[1]["loss"]


def test_training_deterministic(toy_data):
    train_s, eval_s = toy_data
    cfg = toy(eval_every=1, optim=OptimConfig(lr=1e-2))
    a, b = train(cfg, train_s, eval_s), train(cfg, train_s, eval_s)
    assert a.history_json() == b.history_json()
    assert set(a.history[0]) == {"epoch", "loss", "dsc", "eval_dsc", "eval_hd"}
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_frozen_set_bit_identical_after_training(toy_data):
    cfg = toy(optim=OptimConfig(lr=1e-2))
    model = build_model(cfg)
    frozen = model.frozen_state()
    trainable = {n: p.data.copy() for n, p in model.trainable_parameters()}
    train(cfg, toy_data[0], model=model)
    assert all(np.array_equal(frozen[n], p.data) for n, p in model.named_parameters() if n in frozen)
    assert any(not np.array_equal(trainable[n], p.data) for n, p in model.trainable_parameters())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_batch_id(toy_data):
    cfg = toy()
    model = build_model(cfg)
    model.decoder.hyper2.weight.data[:] = np.nan
    with pytest.raises(NaNLossError, match="batch 0") as info:
        train(cfg, toy_data[0], model=model)
    assert info.value.batch_id == 0 and "sample ids" in str(info.value)


def test_empty_training_set_rejected():
    with pytest.raises(ContractError):
        train(toy(), [])


def test_size_mismatch_rejected():
    data = generate_dataset(SynthConfig(size=32), 2, 0)
    with pytest.raises(ContractError, match="32"):
        train(toy(), data)


# -- evaluation -----------------------------------------------------------

def test_oracle_and_empty_predictions(toy_data):
    _, eval_s = toy_data
    gts = [s.mask for s in eval_s]
    ids = [s.id for s in eval_s]
    perfect = report_from_masks(gts, gts, ids)
    assert perfect["mean_dsc"] == 1.0 and perfect["mean_hd"] == 0.0 and perfect["sentinel_count"] == 0
    empty = report_from_masks([np.zeros_like(g) for g in gts], gts, ids)
    assert all(r["dsc"] == 0.0 and r["hd_sentinel_flag"] for r in empty["samples"])
    assert empty["sentinel_count"] == len(gts)
    assert empty["samples"][0]["hd"] == pytest.approx(16 * np.sqrt(2))


def test_report_statistics():
    a = np.zeros((4, 4), np.uint8)
    a[1:3, 1:3] = 1
    b = a.copy()
    b[1, 1] = 0
    rep = report_from_masks([a, b], [a, a], ["x", "y"])
    d = [1.0, 2 * 3 / 7]
    assert rep["mean_dsc"] == pytest.approx(np.mean(d)) and rep["std_dsc"] == pytest.approx(np.std(d))
    assert rep["schema"] == "atrous-lab/eval-report/v1"
    json.dumps(rep)


def test_predict_shapes_and_range(toy_data):
    model = build_model(toy())
    _, eval_s = toy_data
    images = np.stack([s.image for s in eval_s])
    p = predict(model, images, [s.bbox for s in eval_s], batch_size=2)
    assert p.shape == (3, 16, 16) and np.all((p > 0) & (p < 1))


# -- checkpoints ----------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, toy_data):
    cfg = toy(optim=OptimConfig(lr=1e-2))
    res = train(cfg, toy_data[0])
    save_checkpoint(res.model, tmp_path, res.history)
    back = load_checkpoint(tmp_path)
    sa, sb = res.model.state_dict(), back.state_dict()
    assert sa.keys() == sb.keys()
    assert all(sa[k].dtype == sb[k].dtype and sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert back.cfg == res.model.cfg
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["adapter"]["rank"] == cfg.adapter.rank
    assert {e["kind"] for e in man["tensors"]} == {"parameter", "buffer"}
    imgs = np.stack([s.image for s in toy_data[1]])
    boxes = [s.bbox for s in toy_data[1]]
    assert np.array_equal(predict(res.model, imgs, boxes), predict(back, imgs, boxes))


def test_checkpoint_roundtrip_random_artifacts(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        cfg = toy_config().replace(seed=i)
        model = build_model(cfg)
        for _, p in model.named_parameters():
            p.data = rng.standard_normal(p.shape).astype(p.dtype)
        d = tmp_path / str(i)
        save_checkpoint(model, d)
        sa, sb = model.state_dict(), load_checkpoint(d).state_dict()
        assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_truncated_checkpoint_is_format_error(tmp_path):
    model = build_model(toy())
    save_checkpoint(model, tmp_path)
    f = sorted(tmp_path.glob("*.tsr"))[3]
    f.write_bytes(f.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


def test_checkpoint_manifest_errors(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest.json").write_text('{"schema": "other"}')
    with pytest.raises(FormatError, match="schema"):
        load_checkpoint(tmp_path)


# -- rank sweep -----------------------------------------------------------

def test_rank_sweep_rows_and_csv(toy_data):
    cfg = toy(epochs=1)
    rows = rank_sweep(cfg, [2, 4], toy_data[0][:4], toy_data[1])
    assert [r["rank"] for r in rows] == [2, 4]
    assert rows[0]["trainable_ratio"] < rows[1]["trainable_ratio"]
    assert rows == rank_sweep(cfg, [2, 4], toy_data[0][:4], toy_data[1])
    parsed = list(csv.DictReader(io.StringIO(sweep_csv(rows))))
    assert tuple(parsed[0]) == SWEEP_FIELDS and int(parsed[1]["rank"]) == 4


def test_rank_sweep_default_rank_set():
    data = generate_dataset(SynthConfig(), 2, 0)
    rows = rank_sweep(RunConfig(epochs=0), [2, 4, 16, 32, 64], data, data)
    ratios = [r["trainable_ratio"] for r in rows]
    assert all(a < b for a, b in zip(ratios, ratios[1:]))
    assert all(0 <= r["final_dsc"] <= 1 for r in rows)


def test_rank_sweep_empty_ranks():
    with pytest.raises(ContractError):
        rank_sweep(toy(), [], [])

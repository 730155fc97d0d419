import csv
import json

import numpy as np
import pytest

from ds2net import diffcore as dc
from ds2net.diffcore import NumericError, Tensor
from ds2net.losses import seg_ce
from ds2net.optim import poly_lr
from ds2net.synthdata import SplitArrays
from ds2net.trainer import (
    AblationRow,
    ConfigError,
    DS2Net,
    RunConfig,
    RunData,
    TrainState,
    _generator_forward,
    check_ladder,
    default_ladder,
    ensemble_predict,
    ensemble_probs,
    evaluate,
    evaluate_arrays,
    load_ladder,
    predict_proba,
    run_ablation,
    sample_batch,
    train,
    train_step,
)
from ds2net.losses import disc_loss

FAST = dict(widths=(4, 8, 8), head_hidden=8, batch_size=2, iterations=6, eval_interval=3, checkpoint_interval=3, log_interval=1)


def small_cfg(**kw):
    base = dict(FAST, image_size=32, symmetric=False, feature_align=False, ddsm=False, dusm=False)
    base.update(kw)
    return RunConfig(**base)


def full_cfg(**kw):
    base = dict(FAST)
    base.update(kw)
    return RunConfig(**base)


def batch(data_root, cfg, t=0):
    d = RunData.load(data_root, cfg)
    xs, ys = sample_batch(d.source_train, cfg.seed, t, 0, cfg.batch_size, cfg.augment)
    xt, _ = sample_batch(d.target_train, cfg.seed, t, 1, cfg.batch_size, cfg.augment)
    return xs, ys, xt


# -- configuration -----------------------------------------------------------------

def test_unknown_key_named():
    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfig.from_dict({"learning_rate": 0.1})


@pytest.mark.parametrize(
    "kw",
    [
        dict(lambda_Es=-1.0),
        dict(symmetric=False),
        dict(image_size=100),
        dict(image_size=64),
        dict(source_domain="B", target_domain="B"),
        dict(eval_interval=0),
        dict(widths=(8, 8)),
        dict(source_domain="C"),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        RunConfig().replace(**kw)


def test_config_json_round_trip_and_hash(tmp_path):
    cfg = RunConfig(seed=3, widths=(8, 16, 32))
    (tmp_path / "c.json").write_text(cfg.to_json())
    back = RunConfig.from_json(tmp_path / "c.json")
    assert back == cfg and back.config_hash == cfg.config_hash
    assert cfg.replace(seed=4).config_hash != cfg.config_hash
    assert cfg.run_id == "ds2net-s3"


def test_model_blocks_follow_flags():
    m = DS2Net(small_cfg())
    assert m.E_t is None and m.selector is None and m.D_s is None
    full = DS2Net(full_cfg())
    groups = full.group_params()
    assert any(k.startswith("selector.") for k in groups["encoder"])
    assert all(k.split(".")[0] in ("D_s", "D_t") for k in groups["disc"])
    assert full.H_s.in_channels == full.cfg.channels + full.cfg.projected


def test_block_init_independent_of_other_flags():
    a = DS2Net(small_cfg(image_size=96))
    b = DS2Net(full_cfg())
    for (n, p) in a.E_s.named_parameters():
        np.testing.assert_array_equal(p.data, dict(b.E_s.named_parameters())[n].data)


# -- training step -------------------------------------------------------------------

def test_every_parameter_gets_a_gradient(tiny_data):
    cfg = full_cfg()
    state = TrainState.create(cfg)
    xs, ys, xt = batch(tiny_data, cfg)
    report, feats = _generator_forward(state, Tensor(xs), ys, Tensor(xt))
    report.objective.backward()
    g = state.model.group_params()
    for name, p in {**g["encoder"], **g["head"]}.items():
        assert p.grad is not None, name
    assert all(p.grad is None for p in g["disc"].values())
    (disc_loss(state.model.D_s, feats["ss"], feats["ts"]) + disc_loss(state.model.D_t, feats["tt"], feats["st"])).backward()
    assert all(p.grad is not None for p in g["disc"].values())


def test_phases_touch_only_their_parameters(tiny_data):
    cfg = full_cfg()
    state = TrainState.create(cfg)
    xs, ys, xt = batch(tiny_data, cfg)
    before = {k: state.param_digest(k) for k in ("encoder", "head", "disc")}
    disc_opt = state.optimizers.pop("disc")
    try:
        state.cfg = cfg.replace(feature_align=False)
        train_step(state, xs, ys, xt)
    finally:
        state.cfg = cfg
        state.optimizers["disc"] = disc_opt
    mid = {k: state.param_digest(k) for k in ("encoder", "head", "disc")}
    assert mid["disc"] == before["disc"]
    assert mid["encoder"] != before["encoder"] and mid["head"] != before["head"]

    # the critic phase alone: detached features, critic parameters only
    _, feats = _generator_forward(state, Tensor(xs), ys, Tensor(xt))
    for opt in state.optimizers.values():
        opt.zero_grad()
    (disc_loss(state.model.D_s, feats["ss"], feats["ts"]) + disc_loss(state.model.D_t, feats["tt"], feats["st"])).backward()
    state.optimizers["disc"].step()
    after = {k: state.param_digest(k) for k in ("encoder", "head", "disc")}
    assert after["encoder"] == mid["encoder"] and after["head"] == mid["head"]
    assert after["disc"] != mid["disc"]


def test_lambda_zero_degenerates_to_source_only(tiny_data):
    """The E_s/H_s path of the dual model follows the single model exactly."""
    single = TrainState.create(full_cfg(symmetric=False, feature_align=False, ddsm=False, dusm=False))
    dual = TrainState.create(full_cfg(ddsm=False, dusm=False, lambda_Es=0.0, lambda_Et=0.0))
    for t in range(3):
        xs, ys, xt = batch(tiny_data, dual.cfg, t)
        r1 = train_step(single, xs, ys, xt)
        r2 = train_step(dual, xs, ys, xt)
        assert r1.seg_ss == r2.seg_ss
    for part in ("E_s", "H_s"):
        a = dict(getattr(single.model, part).named_parameters())
        for n, p in getattr(dual.model, part).named_parameters():
            assert p.data.tobytes() == a[n].data.tobytes()


def test_two_sided_alignment_changes_only_encoder_update(tiny_data):
    one = TrainState.create(full_cfg(adv_two_sided=False))
    two = TrainState.create(full_cfg(adv_two_sided=True))
    xs, ys, xt = batch(tiny_data, one.cfg)
    r1, r2 = train_step(one, xs, ys, xt), train_step(two, xs, ys, xt)
    assert r1.seg_ss == r2.seg_ss and r1.adv_Et_gen != r2.adv_Et_gen
    assert one.param_digest("head") == two.param_digest("head")
    assert one.param_digest("encoder") != two.param_digest("encoder")


def test_two_sided_flag_inert_without_adversarial_weight(tiny_data):
    kw = dict(lambda_Es=0.0, lambda_Et=0.0)
    one = TrainState.create(full_cfg(adv_two_sided=False, **kw))
    two = TrainState.create(full_cfg(adv_two_sided=True, **kw))
    for t in range(2):
        xs, ys, xt = batch(tiny_data, one.cfg, t)
        train_step(one, xs, ys, xt)
        train_step(two, xs, ys, xt)
    for group in ("encoder", "head", "disc"):
        assert one.param_digest(group) == two.param_digest(group)


def test_small_lr_step_decreases_loss_on_its_batch(small_data):
    cfg = small_cfg(lr_encoder=1e-4, lr_head=1e-4, augment=False)
    state = TrainState.create(cfg)
    xs, ys, xt = batch(small_data, cfg)
    first = train_step(state, xs, ys, xt).seg_ss
    for _ in range(3):
        last = train_step(state, xs, ys, xt).seg_ss
    assert last < first


def test_nan_abort_names_op(small_data):
    cfg = small_cfg()
    state = TrainState.create(cfg)
    state.model.H_s.conv2.bias.data[:] = np.nan
    xs, ys, xt = batch(small_data, cfg)
    with pytest.raises(NumericError) as info:
        train_step(state, xs, ys, xt)
    assert info.value.op == "conv2d"


# -- inference --------------------------------------------------------------------------

def test_ensemble_of_equal_maps():
    p = np.random.default_rng(0).dirichlet([1, 1], size=(1, 4, 4)).transpose(0, 3, 1, 2)
    np.testing.assert_array_equal(ensemble_probs(p, p), p)


def _softmax(v):
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_ensemble_averages_probabilities_not_logits():
    # With two classes both rules share the argmax, so the counterexample uses three.
    la = np.array([4.0, 0.0, 0.0]).reshape(1, 3, 1, 1)
    lb = np.array([-4.0, 1.0, 0.0]).reshape(1, 3, 1, 1)
    by_logit = _softmax((la + lb) / 2).argmax(axis=1).item()
    got = ensemble_probs(_softmax(la), _softmax(lb)).argmax(axis=1).item()
    assert (got, by_logit) == (0, 1)


def test_two_class_ensemble_map_is_mean_probability():
    la = np.array([0.0, 3.0]).reshape(1, 2, 1, 1)
    lb = np.array([0.0, -1.0]).reshape(1, 2, 1, 1)
    p = ensemble_probs(_softmax(la), _softmax(lb))
    assert p[0, 1, 0, 0] == pytest.approx((1 / (1 + np.exp(-3)) + 1 / (1 + np.exp(1))) / 2)
    assert p[0, 1, 0, 0] != pytest.approx(_softmax((la + lb) / 2)[0, 1, 0, 0])


def test_ensemble_predict_binary_full_resolution():
    model = DS2Net(full_cfg())
    x = np.random.default_rng(1).uniform(size=(2, 3, 96, 96)).astype(np.float32)
    mask = ensemble_predict(model, x)
    assert mask.shape == (2, 96, 96) and set(np.unique(mask)) <= {0, 1}
    manual = (predict_proba(model, Tensor(x), "t") + predict_proba(model, Tensor(x), "s")) / 2
    np.testing.assert_array_equal(mask, manual.argmax(axis=1))


def test_untrained_model_near_chance(tiny_data):
    cfg = full_cfg()
    state = TrainState.create(cfg)
    data = RunData.load(tiny_data, cfg)
    row = evaluate(state, data.tests["B/test"], "B/test")
    assert row.miou < 0.55
    assert evaluate(state, data.tests["B/test"], "B/test") == row


def test_evaluate_empty_split():
    model = DS2Net(small_cfg())
    with pytest.raises(ValueError):
        evaluate_arrays(model, SplitArrays(np.zeros((0, 3, 32, 32), np.float32), np.zeros((0, 32, 32), np.uint8)))


# -- runs ---------------------------------------------------------------------------------

def _read(path):
    return path.read_bytes()


def test_run_outputs_and_lr_log(tiny_data, tmp_path):
    cfg = full_cfg()
    res = train(cfg, tiny_data, tmp_path)
    for name in ("config.json", "checkpoint.bin", "loss.csv", "metrics.csv"):
        assert (tmp_path / name).exists()
    assert json.loads((tmp_path / "config.json").read_text()) == cfg.to_dict()
    with (tmp_path / "loss.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["iteration"]) for r in rows] == list(range(1, 7))
    for r in rows:
        t = int(r["iteration"]) - 1
        assert float(r["lr_encoder"]) == poly_lr(cfg.lr_encoder, t, cfg.iterations)
        assert float(r["lr_disc"]) == poly_lr(cfg.lr_disc, t, cfg.iterations)
        total = float(r["seg_ss"]) + float(r["seg_st"]) + cfg.lambda_Es * float(r["adv_Es_gen"]) + cfg.lambda_Et * float(r["adv_Et_gen"])
        assert float(r["total"]) == pytest.approx(total, rel=1e-12)
    metrics = (tmp_path / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "run_id,config_hash,iteration,split,IoU_lesion,IoU_background,mIoU"
    assert len(metrics) == 1 + 2 * 2
    assert set(res.final) == {"A/test", "B/test"}


def test_run_deterministic(small_data, tmp_path):
    cfg = small_cfg()
    train(cfg, small_data, tmp_path / "a")
    train(cfg, small_data, tmp_path / "b")
    for name in ("metrics.csv", "loss.csv", "checkpoint.bin"):
        assert _read(tmp_path / "a" / name) == _read(tmp_path / "b" / name)


def test_resume_bitwise(tiny_data, tmp_path):
    cfg = full_cfg()
    train(cfg, tiny_data, tmp_path / "whole")
    part = train(cfg, tiny_data, tmp_path / "split", stop_at=3)
    assert part.state.iteration == 3
    train(cfg, tiny_data, tmp_path / "split", resume=True)
    for name in ("metrics.csv", "loss.csv", "checkpoint.bin"):
        assert _read(tmp_path / "whole" / name) == _read(tmp_path / "split" / name)


def test_resume_truncates_rows_past_checkpoint(small_data, tmp_path):
    cfg = small_cfg(checkpoint_interval=6)
    train(cfg, small_data, tmp_path / "whole")
    train(cfg, small_data, tmp_path / "x", stop_at=4)
    # the checkpoint is at 4, the metric row at 3 stays; an extra stale row is dropped
    with (tmp_path / "x" / "metrics.csv").open("a") as fh:
        fh.write("stale,h,5,A/test,0,0,0\n")
    train(cfg, small_data, tmp_path / "x", resume=True)
    assert _read(tmp_path / "whole" / "metrics.csv") == _read(tmp_path / "x" / "metrics.csv")


def test_resume_rejects_other_config(small_data, tmp_path):
    train(small_cfg(), small_data, tmp_path, stop_at=2)
    with pytest.raises(ConfigError):
        train(small_cfg(seed=9), small_data, tmp_path, resume=True)


def test_sample_batch_keyed_on_iteration(small_data):
    cfg = small_cfg()
    d = RunData.load(small_data, cfg).source_train
    a = sample_batch(d, 0, 5, 0, 3, True)
    b = sample_batch(d, 0, 5, 0, 3, True)
    c = sample_batch(d, 0, 6, 0, 3, True)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


# -- ablation --------------------------------------------------------------------------------

def test_default_ladder_rows():
    rows = default_ladder(RunConfig())
    assert [r.name for r in rows] == ["w/o-DA", "+Symmetric", "+FA", "+DDSM", "+DUSM"]
    assert [(r.symmetric, r.feature_align, r.ddsm, r.dusm) for r in rows] == [
        (False, False, False, False),
        (True, False, False, False),
        (True, True, False, False),
        (True, True, True, False),
        (True, True, True, True),
    ]


def test_load_ladder_formats(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps({"base": {"iterations": 10}}))
    assert [r.iterations for r in load_ladder(tmp_path / "a.json")] == [10] * 5
    (tmp_path / "b.json").write_text(json.dumps([{"name": "x", "symmetric": False, "feature_align": False, "ddsm": False, "dusm": False}]))
    assert [r.name for r in load_ladder(tmp_path / "b.json")] == ["x"]
    (tmp_path / "c.json").write_text(json.dumps({"rows": [{"bogus": 1}]}))
    with pytest.raises(ConfigError, match="bogus"):
        load_ladder(tmp_path / "c.json")


def test_ablation_table_and_failed_rows(tiny_data, tmp_path):
    base = full_cfg(iterations=2, eval_interval=2, checkpoint_interval=2)
    ladder = default_ladder(base)[:2] + [base.replace(name="broken", image_size=32, feature_align=False, ddsm=False, dusm=False)]
    rows = run_ablation(ladder, tiny_data, [0, 1], tmp_path)
    assert [r.name for r in rows] == ["w/o-DA", "+Symmetric", "broken"]
    assert not rows[2].ok and len(rows[0].ok) == 2
    with (tmp_path / "ablation.csv").open() as fh:
        table = list(csv.DictReader(fh))
    assert [(r["name"], r["seed"]) for r in table[:6]] == [
        ("w/o-DA", "0"), ("w/o-DA", "1"), ("+Symmetric", "0"), ("+Symmetric", "1"), ("broken", "0"), ("broken", "1")
    ]
    assert table[4]["status"] == "failed"
    md = (tmp_path / "ablation.md").read_text().splitlines()
    assert len(md) == 2 + 3 and "failed" in md[-1]

    # direct source-only run with the same seed reproduces the w/o-DA row
    direct = train(ladder[0].replace(seed=1), tiny_data, tmp_path / "direct")
    assert direct.final["B/test"].iou_lesion == rows[0].per_seed[1].iou_lesion


def _rows(table):
    from ds2net.metrics import MetricsRow

    names = ["w/o-DA", "+Symmetric", "+FA", "+DDSM", "+DUSM"]
    return [
        AblationRow(n, {s: MetricsRow("r", "h", 1, "B/test", v, 0.0, 0.0) for s, v in enumerate(vals)})
        for n, vals in zip(names, table)
    ]


def test_check_ladder_accepts_ordered_table():
    checks, summary = check_ladder(_rows([[0.10] * 3, [0.11] * 3, [0.5] * 3, [0.52, 0.5, 0.55], [0.6, 0.49, 0.6]]), [0, 1, 2])
    assert all(checks.values()) and "monotone seeds 2/3" in summary


def test_check_ladder_flags_each_violation():
    checks, _ = check_ladder(_rows([[0.10] * 3, [0.2] * 3, [0.11] * 3, [0.1] * 3, [0.09] * 3]), [0, 1, 2])
    assert not any(checks.values())

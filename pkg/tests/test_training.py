import dataclasses

import numpy as np
import pytest

from microseq.exceptions import BadMagic, ShapeMismatch, TruncatedFile, VersionMismatch
from microseq.preprocessing import prepare_case
from microseq.training import (
    AdamState,
    TrainConfig,
    accumulate_gradients,
    adam_step,
    case_gradient,
    class_targets,
    evaluate_cases,
    fit_prepared,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)
from microseq.model import init_params

from .oracles import adam_reference


def _scalar_params(value):
    p = init_params(1, 1, 1, 2, seed=0, use_ap=False)
    return p.with_weights({"x": np.array([value])})


def test_adam_three_steps_on_parabola():
    cfg = TrainConfig(lr=0.1)
    params = _scalar_params(1.0)
    state = AdamState({"x": np.zeros(1)}, {"x": np.zeros(1)})
    ours = []
    for _ in range(3):
        params, state = adam_step(params, {"x": 2 * params.weights["x"]}, state, cfg)
        ours.append(float(params.weights["x"][0]))
    ref = adam_reference(1.0, lambda t: 2 * t, 3, lr=0.1)
    np.testing.assert_allclose(ours, ref, atol=1e-12, rtol=0)
    assert state.t == 3


def test_adam_first_step_is_lr_times_sign():
    cfg = TrainConfig(lr=1e-3)
    params = _scalar_params(0.5)
    params = params.with_weights({"x": np.array([0.5, -0.2, 1.0])})
    state = AdamState({"x": np.zeros(3)}, {"x": np.zeros(3)})
    new, _ = adam_step(params, {"x": np.array([3.0, -0.01, 40.0])}, state, cfg)
    np.testing.assert_allclose(new.weights["x"] - params.weights["x"], [-1e-3, 1e-3, -1e-3], rtol=1e-5)


def test_adam_zero_gradient_and_shapes():
    params = _scalar_params(0.3)
    state = AdamState({"x": np.zeros(1)}, {"x": np.zeros(1)})
    new, st = adam_step(params, {"x": np.zeros(1)}, state, TrainConfig())
    assert new.weights["x"][0] == 0.3 and st.t == 1
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"x": np.zeros(2)}, state, TrainConfig())
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"y": np.zeros(1)}, state, TrainConfig())


def _cases(n_cases=6, d=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_cases):
        label = i % 2
        x = rng.normal(size=(int(rng.integers(5, 9)), d))
        x[-2:, label] += 2.0
        out.append(prepare_case(x, 0.0, True, f"k{i}", label))
    return out


SMALL = dict(d_k=6, h=5, target_len=6, accumulation_size=4)


def test_accumulation_equals_mean_of_case_gradients():
    cfg = TrainConfig(**SMALL)
    cases = _cases()
    params = init_model(4, 2, cfg)
    targets = class_targets(2, cfg)
    mean, _ = accumulate_gradients(params, cases, targets, cfg)
    per_case = [case_gradient(params, c, targets[c.label], cfg)[1] for c in cases]
    for name in mean:
        np.testing.assert_allclose(mean[name], np.mean([g[name] for g in per_case], axis=0), atol=1e-12, rtol=0)


def test_zero_lr_keeps_params():
    cfg = TrainConfig(lr=0.0, **SMALL)
    params = init_model(4, 2, cfg)
    new, state, stats = train_epoch(_cases(), params, AdamState.zeros(params), cfg)
    for name, W in params.weights.items():
        np.testing.assert_array_equal(new.weights[name], W)
    assert stats.steps == 2 and state.epoch == 1 and stats.total > 0


def test_train_epoch_is_deterministic():
    cfg = TrainConfig(lr=1e-2, **SMALL)
    params = init_model(4, 2, cfg)
    a = train_epoch(_cases(), params, AdamState.zeros(params), cfg)
    b = train_epoch(_cases(), params, AdamState.zeros(params), cfg)
    for name in a[0].weights:
        np.testing.assert_array_equal(a[0].weights[name], b[0].weights[name])
    assert a[2] == b[2]


def test_patience_zero_runs_one_epoch():
    cfg = TrainConfig(lr=1e-2, epochs=5, patience=0, **SMALL)
    res = fit_prepared(_cases(8), _cases(4, seed=1), 2, cfg, tau=0.0)
    assert len(res.history) == 1


def test_history_bounded_and_best_is_reproducible():
    cfg = TrainConfig(lr=1e-2, epochs=4, patience=10, **SMALL)
    train, val = _cases(8), _cases(6, seed=2)
    res = fit_prepared(train, val, 2, cfg, tau=0.0)
    assert len(res.history) <= 4
    report, _, _ = evaluate_cases(res.params, val, train, cfg)
    assert report.f1 == res.best_score
    assert res.history[res.best_epoch - 1].improved


def test_checkpoint_round_trip(tmp_path):
    cfg = TrainConfig(**SMALL)
    params = init_model(4, 2, cfg)
    _, state, _ = train_epoch(_cases(), params, AdamState.zeros(params), cfg)
    save_checkpoint(params, state, cfg, tmp_path / "m.mckpt", extra={"tau": 0.5})
    ck = load_checkpoint(tmp_path / "m.mckpt")
    for name, W in params.weights.items():
        assert ck.params.weights[name].tobytes() == W.tobytes()
        assert ck.state.m[name].tobytes() == state.m[name].tobytes()
    assert ck.state.t == state.t and ck.state.epoch == state.epoch
    assert ck.config == cfg and ck.extra == {"tau": 0.5}
    assert ck.params.arch() == params.arch()


def test_checkpoint_errors(tmp_path):
    cfg = TrainConfig(**SMALL)
    params = init_model(4, 2, cfg)
    path = tmp_path / "m.mckpt"
    save_checkpoint(params, None, cfg, path)
    raw = path.read_bytes()
    (tmp_path / "t.mckpt").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFile):
        load_checkpoint(tmp_path / "t.mckpt")
    (tmp_path / "b.mckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "b.mckpt")
    (tmp_path / "v.mckpt").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "v.mckpt")


def test_resume_equals_uninterrupted(tmp_path):
    cfg = TrainConfig(lr=1e-2, **SMALL)
    cases = _cases(8)
    p0 = init_model(4, 2, cfg)
    p1, s1, _ = train_epoch(cases, p0, AdamState.zeros(p0), cfg)
    straight, _, _ = train_epoch(cases, p1, s1, cfg)
    save_checkpoint(p1, s1, cfg, tmp_path / "r.mckpt")
    ck = load_checkpoint(tmp_path / "r.mckpt")
    resumed, _, _ = train_epoch(cases, ck.params, ck.state, ck.config)
    for name, W in straight.weights.items():
        assert np.max(np.abs(resumed.weights[name] - W)) <= 1e-15


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta1=0.999, beta2=0.9).validate()
    with pytest.raises(ValueError):
        TrainConfig(use_attention=False, use_ap=False).validate()
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    cfg = TrainConfig(lr=3e-4, use_align=False)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert dataclasses.asdict(cfg)["lr"] == 3e-4


def test_ablation_switches_change_what_is_trained():
    cases = _cases()
    base = TrainConfig(**SMALL)
    params = init_model(4, 2, base)
    targets = class_targets(2, base)
    full, _ = case_gradient(params, cases[1], targets[1], base)
    no_ref = dataclasses.replace(base, use_ideal_reference=False)
    raw, _ = case_gradient(params, cases[1], targets[1], no_ref)
    assert raw.l_dtw >= full.l_dtw
    no_align = dataclasses.replace(base, use_align=False)
    assert case_gradient(params, cases[1], targets[1], no_align)[0].l_align == 0.0
    const = dataclasses.replace(base, use_implicit_target=False)
    assert class_targets(2, const)[1].kind == "constant"
    no_wave = prepare_case(np.arange(12.0).reshape(3, 4), 0.0, use_wavelet=False)
    assert no_wave.X_stb is no_wave.X


def test_no_ap_model_trains_without_pooling_loss():
    cfg = TrainConfig(use_ap=False, **SMALL)
    params = init_model(4, 2, cfg)
    br, grads = case_gradient(params, _cases()[0], class_targets(2, cfg)[0], cfg)
    assert br.l_ap == 0.0 and br.l_align == 0.0
    assert not any(k.startswith("ap.") for k in grads)

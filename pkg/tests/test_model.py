import math
import zlib
from datetime import datetime

import numpy as np
import pytest

from tsbin.core import Panel, SynthSpec, TimeSeries, split_backtest, synth_panel
from tsbin.model import (
    AdamState,
    ModelConfig,
    ModelError,
    NetworkSpec,
    NonFiniteLossError,
    PlateauSchedule,
    StepInputs,
    TrainConfig,
    TrainedModel,
    adam_step,
    assemble_input,
    batch_loss,
    build_network_spec,
    embed,
    embedding_dim,
    forward,
    init_parameters,
    load_model,
    loss_and_gradients,
    make_batch,
    parameter_count,
    parameter_tensors,
    predict,
    save_model,
    train,
    training_arrays,
    unflatten,
)
from tsbin.model.autograd import Tensor, concat, shift, take
from tsbin.transform import build_pipeline


@pytest.fixture(scope="module")
def seasonal():
    return synth_panel(SynthSpec(n_series=6, length=120, period=12), seed=0)


def tiny_spec(arch="feed-forward", head="categorical", **kw):
    base = dict(
        architecture=arch, head=head, n_outputs=3 if head == "student-t" else kw.pop("bins", 3),
        context_length=kw.pop("context", 3), horizon=kw.pop("horizon", 2), input_mode="ms",
        hidden=kw.pop("hidden", (2,)), channels=kw.pop("channels", 1),
        n_layers=kw.pop("n_layers", 2 if arch == "dilated-cnn" else 0),
    )
    base.update(kw)
    return NetworkSpec(**base)


def random_batch(spec, rng, n=3):
    c, tau = spec.context_length, spec.horizon
    steps = c if spec.architecture == "feed-forward" else c + tau - 1
    if spec.discrete_input:
        values = np.stack([rng.integers(0, v, size=(n, steps)) for v in spec.token_counts], -1)
    else:
        values = rng.normal(size=(n, steps, 1))
    extras = rng.uniform(size=(n, steps, spec.n_covariates + len(spec.lags)))
    future = rng.uniform(size=(n, tau * spec.n_covariates)) if spec.architecture == "feed-forward" \
        else np.zeros((n, 0))
    if spec.head == "categorical":
        targets = rng.integers(0, spec.n_outputs, size=(n, tau))
    else:
        targets = rng.normal(size=(n, tau)) * 3
    from tsbin.model.training import Batch
    return Batch(StepInputs(values, extras, future), targets, rng.uniform(0.5, 2.0, size=n),
                 [("x", i) for i in range(n)])


# ---------------------------------------------------------------------------
# dimensions


@pytest.mark.parametrize("b, e", [(1024, 6), (16, 2), (2, 2), (81, 3), (82, 4), (1, 1)])
def test_embedding_dim(b, e):
    assert embedding_dim(b) == e


def test_input_widths(seasonal):
    hyb = build_pipeline(seasonal, "hyb(16,128,1024)", "grb(1024)")
    spec = build_network_spec(hyb, ModelConfig(), 24, 12, "H")
    assert spec.value_width == 2 + 4 + 6 == 12
    ms = build_network_spec(build_pipeline(seasonal, "ms", "ms"),
                            ModelConfig(architecture="dilated-cnn"), 24, 12, "H")
    assert ms.feature_width == 1 + 2  # value plus hour-of-day and day-of-week
    pit = build_network_spec(build_pipeline(seasonal, "pit", "grb(64)"), ModelConfig(), 24, 12)
    assert pit.value_width == embedding_dim(1024)


def test_assembled_features_have_constant_width(seasonal):
    pipe = build_pipeline(seasonal, "hyb(16,64)", "grb(64)")
    spec = build_network_spec(pipe, ModelConfig(architecture="dilated-cnn", lags=(12,)), 24, 12)
    rng = np.random.default_rng(0)
    params = parameter_tensors(spec, init_parameters(spec, rng))
    feats = embed(spec, params, assemble_input(pipe, spec, seasonal.series[0], 0, 40))
    assert feats.shape == (1, 40, 2 + 3 + 2 + 1)


def test_assemble_rejects_unfitted_series(seasonal):
    pipe = build_pipeline(seasonal, "grb(16)", "grb(16)")
    spec = build_network_spec(pipe, ModelConfig(), 24, 12)
    stranger = TimeSeries("stranger", datetime(2020, 1, 1), "H", np.ones(50))
    with pytest.raises(ModelError, match="stranger"):
        assemble_input(pipe, spec, stranger)


def test_parameter_count_hand_counted():
    # feed-forward, grb(1024) in/out, context 48, tau 24, no covariates
    ff = NetworkSpec("feed-forward", "categorical", 1024, 48, 24, "grb",
                     token_counts=(1024,), embedding_dims=(6,))
    hand = 1024 * 6 + (48 * 6 * 40 + 40) + (40 * 40 + 40) + (40 * 24 * 1024 + 24 * 1024)
    assert parameter_count(ff) == hand
    # dilated cnn, ms input with 2 covariates, student-t head, 6 layers of 16 channels
    cnn = NetworkSpec("dilated-cnn", "student-t", 3, 48, 24, "ms", n_covariates=2, n_layers=6)
    c = 16
    layer = 2 * (c * 2 * c) + 2 * c + (c * c + c)  # two taps, bias, skip
    hand = (3 * c + c) + 6 * layer + 5 * (c * c + c) + (c * 3 + 3)
    assert parameter_count(cnn) == hand


def test_cnn_layers_cover_context(seasonal):
    pipe = build_pipeline(seasonal, "grb(16)", "grb(16)")
    for context in (1, 2, 8, 9, 48, 64, 65):
        spec = build_network_spec(pipe, ModelConfig(architecture="dilated-cnn"), context, 4)
        assert spec.receptive_field >= context
        assert spec.receptive_field == 2 ** spec.n_layers
        assert spec.n_layers == 1 or 2 ** (spec.n_layers - 1) < context


# ---------------------------------------------------------------------------
# forward


def test_zero_weights_give_uniform_probabilities():
    spec = tiny_spec(bins=5, horizon=4)
    params = parameter_tensors(spec, np.zeros(parameter_count(spec)))
    batch = random_batch(spec, np.random.default_rng(0))
    logits = forward(spec, params, batch.inputs).data
    assert logits.shape == (3, 4, 5)
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    np.testing.assert_allclose(probs, 0.2, rtol=1e-15)


def cnn_outputs(spec, flat, values):
    inputs = StepInputs(values, np.zeros(values.shape[:2] + (0,)), np.zeros((1, 0)))
    return forward(spec, parameter_tensors(spec, flat, False), inputs).data[0]


def test_cnn_causality():
    spec = tiny_spec("dilated-cnn", channels=4, n_layers=3)
    rng = np.random.default_rng(1)
    flat = init_parameters(spec, rng)
    x = rng.normal(size=(1, 20, 1))
    base = cnn_outputs(spec, flat, x)
    for t in range(20):
        y = x.copy()
        y[0, t, 0] += 1.0
        out = cnn_outputs(spec, flat, y)
        np.testing.assert_array_equal(out[:t], base[:t])
        assert np.any(out[t] != base[t])


@pytest.mark.parametrize("n_layers", [1, 2, 3, 4])
def test_receptive_field_by_perturbation(n_layers):
    spec = tiny_spec("dilated-cnn", channels=3, n_layers=n_layers)
    flat = init_parameters(spec, np.random.default_rng(2))
    length = 40
    x = np.random.default_rng(3).normal(size=(1, length, 1))
    base = cnn_outputs(spec, flat, x)[-1]
    influential = []
    for t in range(length):
        y = x.copy()
        y[0, t, 0] += 1.0
        if np.any(cnn_outputs(spec, flat, y)[-1] != base):
            influential.append(t)
    assert len(influential) == 2 ** n_layers
    assert influential == list(range(length - 2 ** n_layers, length))


def test_feature_width_mismatch_is_rejected():
    spec = tiny_spec()
    params = parameter_tensors(spec, np.zeros(parameter_count(spec)))
    bad = StepInputs(np.zeros((1, 3, 1)), np.zeros((1, 3, 2)), np.zeros((1, 0)))
    with pytest.raises(ModelError):
        forward(spec, params, bad)


# ---------------------------------------------------------------------------
# gradients


def fd_check(spec, rng, points=20, h=1e-6, rtol=1e-4):
    n = parameter_count(spec)
    assert n <= 50
    for _ in range(points):
        flat = rng.normal(scale=0.7, size=n)
        batch = random_batch(spec, rng)
        _, grad = loss_and_gradients(spec, flat, batch)
        fd = np.empty(n)
        for k in range(n):
            up, dn = flat.copy(), flat.copy()
            up[k] += h
            dn[k] -= h
            fd[k] = (batch_loss(spec, up, batch) - batch_loss(spec, dn, batch)) / (2 * h)
        err = np.linalg.norm(fd - grad) / max(np.linalg.norm(fd), np.linalg.norm(grad), 1e-12)
        assert err < rtol


GRAD_SPECS = {
    "ff-cat": dict(arch="feed-forward", head="categorical"),
    "ff-st": dict(arch="feed-forward", head="student-t"),
    "cnn-cat": dict(arch="dilated-cnn", head="categorical"),
    "cnn-st": dict(arch="dilated-cnn", head="student-t"),
    "cnn-wide": dict(arch="dilated-cnn", head="student-t", channels=2, n_layers=1),
    "ff-emb-cov": dict(arch="feed-forward", head="categorical", input_mode="grb",
                       token_counts=(4,), embedding_dims=(2,), n_covariates=1, context=2,
                       horizon=1),
    "cnn-hyb-lag": dict(arch="dilated-cnn", head="categorical", input_mode="hyb",
                        token_counts=(3, 2), embedding_dims=(1, 1), lags=(2,), n_layers=1),
}


@pytest.mark.parametrize("name", sorted(GRAD_SPECS))
def test_gradients_match_finite_differences(name):
    kw = dict(GRAD_SPECS[name])
    arch, head = kw.pop("arch"), kw.pop("head")
    fd_check(tiny_spec(arch, head, **kw), np.random.default_rng(zlib.crc32(name.encode())),
             points=5)


def test_pit_gradients_match_finite_differences():
    spec = tiny_spec(input_mode="pit", pit_hidden=2, pit_out=1, context=2, horizon=1)
    fd_check(spec, np.random.default_rng(9), points=5)


def test_duplicated_window_keeps_mean_loss():
    spec = tiny_spec()
    rng = np.random.default_rng(4)
    flat = rng.normal(size=parameter_count(spec))
    one = random_batch(spec, rng, n=1)
    from tsbin.model.training import Batch
    two = Batch(StepInputs(*(np.concatenate([a, a]) for a in
                             (one.inputs.values, one.inputs.extras, one.inputs.future))),
                np.concatenate([one.targets] * 2), np.concatenate([one.series_scale] * 2),
                one.window_ids * 2)
    l1, g1 = loss_and_gradients(spec, flat, one)
    l2, g2 = loss_and_gradients(spec, flat, two)
    assert l1 == pytest.approx(l2, rel=1e-14)
    np.testing.assert_allclose(g1, g2, rtol=1e-12)


def test_unused_embedding_rows_get_zero_gradient():
    spec = tiny_spec(input_mode="grb", token_counts=(10,), embedding_dims=(2,))
    rng = np.random.default_rng(5)
    batch = random_batch(spec, rng)
    batch.inputs.values[:] = rng.integers(0, 4, size=batch.inputs.values.shape)
    _, grad = loss_and_gradients(spec, rng.normal(size=parameter_count(spec)), batch)
    emb = grad[:20].reshape(10, 2)
    assert np.all(emb[4:] == 0)
    assert np.any(emb[:4] != 0)


def test_non_finite_loss_names_windows():
    spec = tiny_spec()
    batch = random_batch(spec, np.random.default_rng(6))
    flat = np.full(parameter_count(spec), np.nan)
    with pytest.raises(NonFiniteLossError) as info:
        loss_and_gradients(spec, flat, batch)
    assert info.value.window_ids == [("x", 0), ("x", 1), ("x", 2)]


def test_autograd_primitives_accumulate():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = take(table, np.array([[0, 2, 0]]))
    out.backward(np.ones((1, 3, 2)))
    np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])

    x = Tensor(np.arange(8.0).reshape(1, 4, 2), requires_grad=True)
    y = concat([shift(x, 1), x], axis=-1)
    np.testing.assert_array_equal(y.data[0, :, :2], [[0, 0], [0, 1], [2, 3], [4, 5]])
    y.backward(np.ones((1, 4, 4)))
    np.testing.assert_array_equal(x.grad[0], [[2, 2], [2, 2], [2, 2], [1, 1]])


# ---------------------------------------------------------------------------
# optimizer and schedule


def test_adam_zero_gradient_is_fixed_point():
    params = np.array([1.0, -2.0, 3.0])
    state = AdamState.zeros(3)
    for _ in range(5):
        new, state = adam_step(state, params, np.zeros(3), 0.1)
        np.testing.assert_array_equal(new, params)


def test_adam_constant_gradient_step_tends_to_lr():
    g = np.array([0.3, -5.0, 1e-3])
    params, state = np.zeros(3), AdamState.zeros(3)
    for _ in range(200):
        prev = params
        params, state = adam_step(state, params, g, 0.01)
    np.testing.assert_allclose(params - prev, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_first_step_closed_form():
    params, state = adam_step(AdamState.zeros(2), np.array([1.0, 1.0]), np.array([2.0, -4.0]), 0.5)
    # bias correction makes the first step lr * g / (|g| + eps)
    np.testing.assert_allclose(params, [1 - 0.5 * 2 / (2 + 1e-8), 1 + 0.5 * 4 / (4 + 1e-8)])


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(10, 5))
    runs = []
    for _ in range(2):
        p, s = np.ones(5), AdamState.zeros(5)
        for g in grads:
            p, s = adam_step(s, p, g, 1e-2)
        runs.append(p.tobytes())
    assert runs[0] == runs[1]


def test_plateau_schedule_halves_once():
    sched = PlateauSchedule(1e-2, 0.5, 5, 1e-5)
    sched.step(1.0)
    rates = [sched.step(1.0) for _ in range(5)]
    assert rates == [1e-2] * 4 + [5e-3]
    assert sched.step(0.5) == 5e-3


def test_plateau_schedule_floor():
    sched = PlateauSchedule(1e-4, 0.5, 1, 1e-5)
    for _ in range(20):
        sched.step(1.0)
    assert sched.lr == 1e-5


def test_train_config_validation():
    with pytest.raises(ModelError):
        TrainConfig(lr_decay_factor=1.0)
    with pytest.raises(ModelError):
        TrainConfig(batch_size=0)
    assert TrainConfig(horizon=7).context == 14


# ---------------------------------------------------------------------------
# training and prediction


def constant_setup():
    donor = synth_panel(SynthSpec(n_series=4, length=60, period=12), seed=1)
    pipe = build_pipeline(donor, "grb(16)", "grb(16)")
    consts = Panel(tuple(TimeSeries(f"c{k}", datetime(2020, 1, 1), "H", np.full(40, v))
                         for k, v in enumerate([2.0, 7.0, 0.5])), "H")
    for ts in consts:
        pipe = pipe.with_series(ts)
    return consts, pipe


def test_constant_series_become_perfectly_predictable():
    consts, pipe = constant_setup()
    cfg = TrainConfig(epochs=30, batches_per_epoch=10, horizon=4, batch_size=8)
    model = train(consts, pipe, ModelConfig(), cfg)
    assert model.log[0]["loss"] > 5
    assert model.log[-1]["loss"] < 0.01


def test_training_is_deterministic(seasonal):
    pipe = build_pipeline(seasonal, "grb(16)", "grb(16)")
    cfg = TrainConfig(epochs=3, batches_per_epoch=4, horizon=6, seed=5)
    for arch in ("feed-forward", "dilated-cnn"):
        a = train(seasonal, pipe, ModelConfig(architecture=arch), cfg)
        b = train(seasonal, pipe, ModelConfig(architecture=arch), cfg)
        assert a.log == b.log
        assert a.parameters.tobytes() == b.parameters.tobytes()
        c = train(seasonal, pipe, ModelConfig(architecture=arch), TrainConfig(
            epochs=3, batches_per_epoch=4, horizon=6, seed=6))
        assert c.parameters.tobytes() != a.parameters.tobytes()


def test_smoothed_training_loss_decreases():
    panel = synth_panel(SynthSpec(n_series=10, length=120, period=12), seed=3)
    pipe = build_pipeline(panel, "grb(32)", "grb(32)")
    model = train(panel, pipe, ModelConfig(), TrainConfig(epochs=30, batches_per_epoch=10,
                                                          horizon=12))
    losses = np.array([e["loss"] for e in model.log])
    blocks = losses.reshape(-1, 5).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


def test_windows_need_enough_history(seasonal):
    pipe = build_pipeline(seasonal, "grb(16)", "grb(16)")
    spec = build_network_spec(pipe, ModelConfig(), 200, 24)
    with pytest.raises(ModelError, match="observations"):
        training_arrays(seasonal, pipe, spec)
    spec = build_network_spec(pipe, ModelConfig(), 12, 6)
    arrays = training_arrays(seasonal, pipe, spec)
    with pytest.raises(ModelError, match="exceeds"):
        make_batch(spec, arrays, [(0, 120 - 17)])


def degenerate_model(pipe, arch, bucket):
    spec = build_network_spec(pipe, ModelConfig(architecture=arch), 12, 6)
    flat = np.zeros(parameter_count(spec))
    views = unflatten(spec, flat)
    views["out_b"].reshape(-1, spec.n_outputs)[:, bucket] = 1e3
    return TrainedModel(spec, pipe, flat, TrainConfig(horizon=6, context_length=12))


@pytest.mark.parametrize("arch", ["feed-forward", "dilated-cnn"])
def test_degenerate_head_gives_identical_paths(seasonal, arch):
    pipe = build_pipeline(seasonal, "grb(16)", "grb(16)")
    model = degenerate_model(pipe, arch, 5)
    ts = seasonal.series[2]
    fc = predict(model, ts, num_samples=30)
    assert fc.sample_paths.shape == (30, 6)
    expected = pipe.inverse(ts.item_id, np.array([5]))[0]
    assert np.all(fc.sample_paths == expected)


def test_rollout_uses_one_draw_per_step_and_path(seasonal):
    pipe = build_pipeline(seasonal, "grb(16)", "grb(16)")
    model = degenerate_model(pipe, "dilated-cnn", 3)
    rng = np.random.default_rng(11)
    predict(model, seasonal.series[0], num_samples=7, rng=rng)
    ref = np.random.default_rng(11)
    ref.random(7 * 6)
    assert rng.random() == ref.random()


@pytest.fixture(scope="module")
def trained_pair(seasonal):
    split = split_backtest(seasonal, 6)
    out = {}
    for arch in ("feed-forward", "dilated-cnn"):
        pipe = build_pipeline(split.train, "grb(32)", "grb(32)")
        cfg = TrainConfig(epochs=4, batches_per_epoch=5, horizon=6, seed=2)
        out[arch] = (split, train(split.train, pipe, ModelConfig(architecture=arch), cfg))
    return out


@pytest.mark.parametrize("arch", ["feed-forward", "dilated-cnn"])
def test_forecasts_scale_with_the_series(trained_pair, arch):
    split, model = trained_pair[arch]
    ts = split.train.series[1]
    big = TimeSeries(ts.item_id, ts.start, ts.freq, ts.values * 10)
    a = predict(model, ts, num_samples=20)
    b = predict(model.with_series(big), big, num_samples=20)
    np.testing.assert_allclose(b.sample_paths, 10 * a.sample_paths, rtol=1e-12)


@pytest.mark.parametrize("arch", ["feed-forward", "dilated-cnn"])
def test_save_load_round_trip(tmp_path, trained_pair, arch):
    split, model = trained_pair[arch]
    path = save_model(model, tmp_path / "model.bin")
    assert path.name == "model.bin"
    again = load_model(path)
    assert again.parameters.tobytes() == model.parameters.tobytes()
    assert again.spec == model.spec
    assert again.log == model.log
    assert again.pipeline.to_dict() == model.pipeline.to_dict()
    ts = split.train.series[0]
    assert (predict(again, ts).sample_paths.tobytes()
            == predict(model, ts).sample_paths.tobytes())
    save_model(again, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_predict_rejects_short_series_and_covariate_shortfall(trained_pair):
    split, model = trained_pair["dilated-cnn"]
    ts = split.train.series[0]
    short = TimeSeries(ts.item_id, ts.start, ts.freq, ts.values[:5])
    with pytest.raises(ModelError, match="context"):
        predict(model, short)
    with pytest.raises(ModelError, match="covariates"):
        predict(model, ts, covariates=np.zeros((len(ts), model.spec.n_covariates)))


def test_studentt_model_trains_and_predicts(seasonal):
    pipe = build_pipeline(seasonal, "ms", "ms")
    model = train(seasonal, pipe, ModelConfig(architecture="dilated-cnn"),
                  TrainConfig(epochs=3, batches_per_epoch=5, horizon=6))
    assert all(math.isfinite(e["loss"]) for e in model.log)
    fc = predict(model, seasonal.series[0], num_samples=15)
    assert fc.sample_paths.shape == (15, 6)
    assert np.all(np.isfinite(fc.sample_paths))

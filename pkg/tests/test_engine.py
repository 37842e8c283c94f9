import numpy as np
import pytest

from conftest import conv_net, dense_net, max_rel_err, pooled_net, toy_six, units
from milr.engine import (
    PlanError,
    RecoveryError,
    StateMismatchError,
    backward_pass,
    decode_state,
    detect,
    encode_state,
    forward_linear,
    golden_input,
    golden_output,
    initialize,
    plan_recovery,
    recover,
    solve_bias_params,
    solve_conv_params,
    solve_dense_params,
)
from milr.io import FormatError, TruncatedError
from milr.linalg import conv2d
from milr.network import Bias, Conv2D, Flatten, Input, Network, ReLU, build_network


# --- planning ----------------------------------------------------------------------


def test_mnist_plan():
    net = build_network("mnist")
    ckpts, plans = plan_recovery(net, itemsize=4)
    assert ckpts == [0, 3, 6, 11, 14, 16]
    assert plans[8].solve == "partial-crc"
    assert (plans[12].solve, plans[12].n_dummy) == ("dummy", 6399)
    assert plans[12].backward == plans[15].backward == "none"
    assert plans[15].n_dummy == 255


def test_checkpoint_slack():
    # dense1 backward dummies (6144 values) undercut its input checkpoint (6400) by 4%
    net = build_network("mnist")
    ckpts, plans = plan_recovery(net, itemsize=4, checkpoint_slack=0.0)
    assert ckpts == [0, 3, 6, 16]
    assert (plans[12].backward, plans[12].n_dummy_backward) == ("dummy", 6144)
    assert (plans[15].n_dummy, plans[15].n_dummy_backward) == (255, 246)


def test_cifar_small_deep_conv_is_partial():
    net = build_network("cifar-small")
    _, plans = plan_recovery(net)
    deep = [k for k, layer in enumerate(net.layers) if layer.kind == "conv" and layer.filters.shape[2] == 128]
    assert deep and all(plans[k].solve == "partial-crc" for k in deep)


def test_parameter_free_network():
    net = Network([Input((3, 3, 1)), ReLU(), Flatten(), ReLU()], np.float32)
    state = initialize(net)
    assert state.partials == {} and state.checkpoint_ids == [0, 3]
    assert not detect(net, state)


def test_pool_forces_checkpoint():
    net = pooled_net()
    ckpts, _ = plan_recovery(net)
    assert 3 in ckpts  # input of the pooling layer


def test_infeasible_override():
    with pytest.raises(PlanError):
        plan_recovery(dense_net(6, 4, lead=6), overrides={4: {"backward": "native"}})
    with pytest.raises(PlanError):
        plan_recovery(dense_net(6, 4), overrides={1: {"solve": "full"}})


def test_partial_checkpoint_sizes():
    net = build_network("mnist")
    state = initialize(net, sidecar_dtype=np.float32)
    # conv: one value per filter instead of G*G per filter
    assert state.partials[4].shape == (32,)
    assert state.partials[8].shape == (64,)
    assert state.partials[12].shape == (256,)
    assert state.partials[2].shape == ()
    stored = sum(a.nbytes for a in state.checkpoints.values())
    stored += sum(a.nbytes for a in state.partials.values())
    stored += sum(g.nbytes for g in state.crc.values())
    stored += sum(a.nbytes for a in state.dummy_outputs.values())
    stored += sum(a.nbytes for a in state.backward_outputs.values())
    assert state.plan_cost_bytes == stored + 16


def test_rank_deficient_golden_rows_get_dummies():
    # 1-channel input: conv2's 32 golden input channels span only ~10 dimensions
    state = initialize(build_network("mnist"))
    assert state.plans[4].solve == "dummy" and state.plans[4].n_dummy == 1


# --- detection ---------------------------------------------------------------------


def test_clean_network_not_flagged(mnist32):
    state = initialize(mnist32)
    assert detect(mnist32, state).layers == []


def test_single_flip_flags_only_that_layer():
    net = dense_net(20, 8, np.float32, lead=12)
    state = initialize(net)
    net.layers[4].weights.view(np.uint32)[3, 5] ^= np.uint32(1 << 20)
    log = detect(net, state)
    assert log.layers == [4]
    assert (log.entries[0].left, log.entries[0].right) == (0, 5)


def test_bias_equal_and_opposite_change_is_invisible():
    net = dense_net(4, 3, np.float32)
    net.layers[2].values[:] = [0.5, 0.75, -0.25]
    state = initialize(net)
    net.layers[2].values[0] += 0.125
    net.layers[2].values[1] -= 0.125
    assert detect(net, state).layers == []
    net.layers[2].values[2] += 0.125
    assert detect(net, state).layers == [2]


def test_nan_is_flagged():
    net = dense_net(4, 3, np.float32)
    state = initialize(net)
    net.layers[1].weights[0, 0] = np.nan
    assert detect(net, state).layers == [1]


def test_crc_localization_in_detect(mnist32):
    state = initialize(mnist32, sidecar_dtype=np.float32)
    mnist32.layers[8].filters[1, 2, 17, 40] = 3.0
    log = detect(mnist32, state)
    assert log.layers == [8]
    assert log.entries[0].crc_coords.tolist() == [[1, 2, 17, 40]]


def test_exact_mode_flags_low_bit_flip():
    net = dense_net(64, 8, np.float32)
    state = initialize(net, detect_rtol=0)
    net.layers[1].weights.view(np.uint32)[10, 3] ^= np.uint32(1)
    assert detect(net, state).layers == [1]


# --- backward pass -----------------------------------------------------------------


def test_bias_backward_exact():
    net = dense_net(4, 3)
    state = initialize(net)
    x = units(5, (2, 3))
    assert np.array_equal(backward_pass(net, state, 2, x + net.layers[2].values), x + net.layers[2].values - net.layers[2].values)


def test_dense_backward_native():
    net = dense_net(4, 6, lead=4)
    state = initialize(net)
    k = 4
    assert state.plans[k].backward == "native"
    x = units(6, (3, 4))
    back = backward_pass(net, state, k, forward_linear(net, x, k, k + 1))
    assert max_rel_err(back, x) <= 1e-8


def test_dense_backward_with_dummy_columns():
    net = dense_net(6, 4, lead=6)
    state = initialize(net)
    k = 4
    assert (state.plans[k].backward, state.plans[k].n_dummy_backward) == ("dummy", 2)
    back = backward_pass(net, state, k, golden_output(net, state, k))
    assert max_rel_err(back, golden_input(net, state, k)) <= 1e-8


def test_conv_backward_with_dummy_filters():
    layers = [
        Input((7, 7, 2)),
        Conv2D(units(1, (3, 3, 2, 3), scale=0.4)),
        Bias(units(2, (3,), scale=0.1)),
        Conv2D(units(3, (2, 2, 3, 5), scale=0.4)),
    ]
    net = Network(layers, np.float64)
    state = initialize(net, overrides={3: {"backward": "dummy"}})
    plan = state.plans[3]
    assert (plan.backward, plan.n_dummy_backward) == ("dummy", 2 * 2 * 3 - 5)
    back = backward_pass(net, state, 3, golden_output(net, state, 3))
    assert max_rel_err(back, golden_input(net, state, 3)) <= 1e-8


def test_pool_backward_is_plan_error():
    net = pooled_net()
    state = initialize(net)
    with pytest.raises(PlanError):
        backward_pass(net, state, 4, np.zeros((1, 4, 4, 4)))


# --- solvers -----------------------------------------------------------------------


def test_solve_dense_consistent():
    a = units(1, (8, 4))
    w = units(2, (4, 3))
    sol = solve_dense_params(a, a @ w)
    assert sol.full_rank and max_rel_err(sol.params, w) <= 1e-8


def test_solve_dense_with_dummy_rows():
    a = units(1, (2, 4))
    d = units(3, (2, 4))
    w = units(2, (4, 3))
    sol = solve_dense_params(a, a @ w, d, d @ w)
    assert sol.full_rank and max_rel_err(sol.params, w) <= 1e-8
    assert not solve_dense_params(a, a @ w).full_rank


def test_solve_conv_full_f32():
    x = units(4, (8, 8, 1))
    w = units(5, (3, 3, 1, 2), np.float32)
    out = conv2d(x, w.astype(np.float64))
    sol = solve_conv_params(x, out, w.shape)
    assert sol.full_rank
    assert max_rel_err(sol.params.astype(np.float32), w) <= 1e-6


def test_solve_conv_partial():
    x = units(6, (4, 4, 1))  # G = 2, four equations per filter
    w = units(7, (3, 3, 1, 2))
    out = conv2d(x, w)
    bad = w.copy()
    coords = np.array([[0, 0, 0, 0], [1, 2, 0, 0], [2, 1, 0, 0]])
    for c in coords:
        bad[tuple(c)] = 9.0
    sol = solve_conv_params(x, out, w.shape, mode="partial", flagged=coords, current=bad)
    assert max_rel_err(sol.params, w) <= 1e-10
    too_many = np.array([[i // 3, i % 3, 0, 1] for i in range(5)])
    with pytest.raises(RecoveryError):
        solve_conv_params(x, out, w.shape, mode="partial", flagged=too_many, current=bad)


def test_solve_bias():
    values = np.array([0.5, -1.0, 2.0])
    out = np.broadcast_to(values, (1, 4, 4, 3))
    assert np.array_equal(solve_bias_params(np.zeros_like(out), out), values)
    x = units(8, (5, 3))
    got = [solve_bias_params(x[i : i + 1], x[i : i + 1] + values) for i in range(5)]
    for g in got:
        np.testing.assert_allclose(g, values, rtol=0, atol=1e-15)


# --- recovery ----------------------------------------------------------------------


def test_recover_nothing_is_noop(mnist32):
    state = initialize(mnist32, sidecar_dtype=np.float32)
    before = mnist32.copy()
    report = recover(mnist32, state)
    assert report.outcomes == [] and mnist32.same_params(before)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-10)])
def test_recover_dense_layer(dtype, tol):
    net = dense_net(12, 5, dtype, lead=9)
    pristine = net.copy()
    state = initialize(net)
    net.layers[4].weights[:] = units(99, (9, 5), dtype)
    report = recover(net, state)
    assert report.status(4) == "recovered" and report.healed
    assert max_rel_err(net.layers[4].weights, pristine.layers[4].weights) <= tol
    assert not detect(net, state)


def test_two_errors_in_bracket_never_claimed_healed():
    net = toy_six()
    state = initialize(net)
    net.layers[1].filters[0, 0, 0, 0] = 5.0
    net.layers[5].weights[3, 3] = -5.0
    report = recover(net, state)
    assert {o.status for o in report.outcomes} <= {"degraded", "failed"}
    assert not report.healed


def test_dummy_equals_checkpoint_oracle():
    net = dense_net(6, 4, lead=6)
    pristine = net.copy()
    results = []
    for override in (None, {4: {"backward": "checkpoint"}}):
        trial = pristine.copy()
        state = initialize(trial, overrides=override)
        trial.layers[1].weights[:] = 0.5
        assert recover(trial, state).status(1) == "recovered"
        results.append(trial.layers[1].weights.copy())
    np.testing.assert_allclose(results[0], results[1], rtol=0, atol=1e-10)
    assert max_rel_err(results[0], pristine.layers[1].weights) <= 1e-10


def test_partial_crc_recovery_in_mnist(mnist32):
    pristine = mnist32.copy()
    state = initialize(mnist32)
    mnist32.layers[8].filters[0, 1, 3, 7] = -2.0
    mnist32.layers[8].filters[2, 2, 30, 63] = 4.0
    report = recover(mnist32, state)
    assert report.status(8) == "recovered"
    assert mnist32.same_params(pristine)


def test_whole_partial_crc_layer_is_not_recoverable():
    net = conv_net(m=5, f=3, z=2, y=4, dtype=np.float32)
    state = initialize(net)
    assert state.plans[1].solve == "partial-crc"
    net.layers[1].filters[:] = 0.25
    report = recover(net, state)
    assert report.status(1) == "failed"


# --- sidecar file ------------------------------------------------------------------


@pytest.mark.parametrize("sidecar", [np.float32, np.float64])
def test_sidecar_round_trip_bitwise(sidecar):
    state = initialize(build_network("mnist"), seed=4, sidecar_dtype=sidecar)
    data = encode_state(state)
    back = decode_state(data)
    assert encode_state(back) == data
    assert back.plan_cost_bytes == state.plan_cost_bytes
    assert back.sidecar_dtype == np.dtype(sidecar)


def test_loaded_sidecar_heals(tmp_path):
    from milr.engine import load_state, save_state

    net = toy_six()
    save_state(initialize(net, seed=4), tmp_path / "net.milr")
    back = load_state(tmp_path / "net.milr")
    net.layers[5].weights[0, 0] = 2.0
    assert detect(net, back).layers == [5]
    assert recover(net, back).status(5) == "recovered"


def test_sidecar_errors():
    net = toy_six()
    data = encode_state(initialize(net))
    with pytest.raises(TruncatedError):
        decode_state(data[:-3])
    with pytest.raises(FormatError):
        decode_state(b"MILRWGT\0" + data[8:])
    with pytest.raises(StateMismatchError):
        detect(dense_net(4, 3), decode_state(data))

import json

import numpy as np
import pytest

from conftest import dense_net
from milr.faults import FaultSpec, bernoulli_positions, corrupt_layer, inject_bitflips, inject_whole_weight
from milr.linalg import Rng
from milr.network import build_network
from milr.secded import EccMemory, scrub


def test_zero_rate_is_noop():
    net = build_network("mnist")
    before = net.copy()
    assert inject_bitflips(net, 0.0, 1).flips == 0
    assert inject_whole_weight(net, 0.0, 1).words == 0
    assert net.same_params(before)


def test_rate_one_flips_everything_and_is_an_involution():
    net = dense_net(5, 3, np.float32)
    before = net.copy()
    report = inject_bitflips(net, 1.0, 3)
    assert report.flips == net.param_count() * 32
    w = net.layers[1].weights.view(np.uint32)
    assert np.array_equal(w, ~before.layers[1].weights.view(np.uint32))
    inject_bitflips(net, 1.0, 3)
    assert net.same_params(before)


def test_whole_weight_rate_one_twice_restores():
    net = dense_net(5, 3, np.float64)
    before = net.copy()
    inject_whole_weight(net, 1.0, 0)
    inject_whole_weight(net, 1.0, 0)
    assert net.same_params(before)


def test_replay_undoes():
    net = build_network("mnist", seed=2)
    before = net.copy()
    for inject, rate, seed in ((inject_bitflips, 1e-4, 5), (inject_whole_weight, 1e-4, 6)):
        report = inject(net, rate, seed)
        assert not net.same_params(before)
        report.replay(net)
        assert net.same_params(before)


def test_bitflip_count_binomial():
    net = build_network("mnist")
    report = inject_bitflips(net, 1e-4, 11)
    n = 1_669_290 * 32
    mean, sd = n * 1e-4, (n * 1e-4 * (1 - 1e-4)) ** 0.5
    assert abs(report.flips - mean) <= 4 * sd
    assert len(list(report.bit_flips())) == report.flips


def test_whole_weight_words_differ_in_all_bits():
    net = build_network("mnist", seed=3)
    before = net.copy()
    report = inject_whole_weight(net, 1e-4, 12)
    assert report.words > 0
    for k, i in zip(report.layer.tolist(), report.index.tolist()):
        a = net.layers[k].params.reshape(-1).view(np.uint32)[i]
        b = before.layers[k].params.reshape(-1).view(np.uint32)[i]
        assert bin(int(a ^ b)).count("1") == 32


def test_determinism():
    a, b = build_network("mnist"), build_network("mnist")
    ra, rb = inject_bitflips(a, 1e-5, 7), inject_bitflips(b, 1e-5, 7)
    assert ra.to_jsonl() == rb.to_jsonl() and a.same_params(b)


def test_jsonl():
    net = build_network("mnist")
    report = inject_bitflips(net, 1e-6, 8)
    lines = report.to_jsonl().splitlines()
    head = json.loads(lines[0])
    assert head["kind"] == "bitflip" and head["flips"] == report.flips
    assert len(lines) == report.words + 1


def test_ecc_bit_space_hits_check_bits():
    net = build_network("cifar-small", seed=1)
    pristine = net.copy()
    ecc = EccMemory.build(net)
    clean_checks = ecc.checks.copy()
    report = inject_bitflips(net, 1e-5, 9, ecc)
    assert report.check_mask.any()
    single = np.bitwise_count(report.data_mask) + np.bitwise_count(report.check_mask) == 1
    scrubbed = scrub(net, ecc)
    assert scrubbed.total_corrected == int(single.sum())
    if single.all():
        assert net.same_params(pristine) and np.array_equal(ecc.checks, clean_checks)


def test_single_bit_regime_scrubs_to_pristine():
    net = build_network("mnist", seed=4)
    pristine = net.copy()
    ecc = EccMemory.build(net)
    report = inject_bitflips(net, 1e-6, 10, ecc)
    assert (np.bitwise_count(report.data_mask) + np.bitwise_count(report.check_mask) == 1).all()
    scrub(net, ecc)
    assert net.same_params(pristine)


def test_corrupt_layer():
    net = build_network("mnist", seed=5)
    before = net.copy()
    report = corrupt_layer(net, 13, 4)
    new = net.layers[13].values.view(np.uint32)
    assert (new != before.layers[13].values.view(np.uint32)).all()
    assert report.replaced == 256 and report.layers_hit == [13]
    assert np.all(np.abs(net.layers[13].values) <= 1)
    again = before.copy()
    corrupt_layer(again, 13, 4)
    assert again.same_params(net)
    with pytest.raises(ValueError):
        corrupt_layer(net, 3, 0)


def test_corrupt_layer_resamples_collisions():
    net = dense_net(2, 2, np.float32)
    # force the first draw to collide with the current values
    first = Rng(21).units(4).astype(np.float32).reshape(2, 2)
    net.layers[1].weights[:] = first
    corrupt_layer(net, 1, 21)
    assert (net.layers[1].weights.view(np.uint32) != first.view(np.uint32)).all()


def test_geometric_positions_statistics():
    pos = bernoulli_positions(1_000_000, 0.01, Rng(1))
    assert np.all(np.diff(pos) > 0) and pos.max() < 1_000_000
    assert abs(pos.size - 10_000) <= 4 * (10_000 * 0.99) ** 0.5


def test_spec_validation():
    with pytest.raises(ValueError):
        FaultSpec("bitflip", 1.5)
    with pytest.raises(ValueError):
        FaultSpec("gamma-ray", 0.1)

import itertools

import numpy as np
import pytest

from fpgaconv.banks import (
    AddressError,
    BmgBank,
    ImageBankSet,
    OutputBankSet,
    PortBudgetError,
    WeightBankGrid,
    bank_accumulate,
    bank_read,
    image_map,
    output_map,
    preload_bias,
    weight_map,
)
from fpgaconv.golden import BiasVector, LayerSpec, conv2d_channel, conv2d_layer, requantize
from fpgaconv.tensor_io import dump_bank, restore_bank

from conftest import random_layer


def enumerate_image(spec):
    return {(c, i, j): image_map(c, i, j, spec)
            for c in range(spec.C) for i in range(spec.H) for j in range(spec.W)}


def enumerate_weights(spec):
    return {(k, c, m, n): weight_map(k, c, m, n, spec)
            for k in range(spec.K) for c in range(spec.C) for m in range(3) for n in range(3)}


def enumerate_output(spec):
    return {(k, i, j): output_map(k, i, j, spec)
            for k in range(spec.K) for i in range(spec.out_h) for j in range(spec.out_w)}


def assert_dense_bijection(mapping, banks, words_per_bank):
    targets = list(mapping.values())
    assert len(set(targets)) == len(targets)
    for bank in banks:
        addrs = sorted(a for b, a in targets if b == bank)
        assert addrs == list(range(words_per_bank))


# -- address map examples (each cross-checked against a full enumeration) ------

def test_image_map_examples():
    spec = LayerSpec(4, 4, 8, 4)
    table = enumerate_image(spec)
    assert table[(0, 0, 0)] == (0, 0)
    assert table[(2, 1, 3)] == (1, 7)
    assert_dense_bijection(table, range(4), spec.image_words_per_bank)
    assert image_map(3, 2, 2, LayerSpec(3, 3, 4, 4)) == (3, 8)


def test_weight_map_examples():
    assert weight_map(0, 0, 0, 0, LayerSpec(3, 3, 4, 4)) == ((0, 0), 0)
    spec = LayerSpec(3, 3, 8, 8)
    table = enumerate_weights(spec)
    # g = 3 // 2, j = 5 // 2, a = ((5 % 2) * 2 + 3 % 2) * 9 + 1 * 3 + 2
    assert table[(5, 3, 1, 2)] == ((1, 2), 32)
    spec = LayerSpec(3, 3, 4, 8)
    table = enumerate_weights(spec)
    assert table[(7, 3, 2, 2)] == ((3, 3), 17)


def test_output_map_examples():
    assert output_map(0, 0, 0, LayerSpec(4, 4, 4, 4)) == (0, 0)
    spec = LayerSpec(4, 4, 4, 8)
    table = enumerate_output(spec)
    assert table[(3, 1, 1)] == (1, 7)
    spec = LayerSpec(5, 5, 4, 8)
    assert enumerate_output(spec)[(7, 2, 2)] == (3, 17)


@pytest.mark.parametrize("fn,args", [
    (image_map, (4, 0, 0)), (image_map, (0, 3, 0)), (image_map, (0, 0, -1)),
    (weight_map, (4, 0, 0, 0)), (weight_map, (0, 0, 3, 0)),
    (output_map, (0, 1, 0)), (output_map, (4, 0, 0)),
])
def test_maps_reject_out_of_range(fn, args):
    with pytest.raises(AddressError):
        fn(*args, LayerSpec(3, 3, 4, 4))


def test_bijectivity_sample():
    for H, W, C, K in [(3, 3, 4, 4), (5, 7, 8, 12), (8, 8, 16, 16), (4, 6, 12, 4)]:
        spec = LayerSpec(H, W, C, K)
        assert_dense_bijection(enumerate_image(spec), range(4), spec.image_words_per_bank)
        assert_dense_bijection(enumerate_weights(spec), list(itertools.product(range(4), range(4))),
                               9 * (K // 4) * (C // 4))
        assert_dense_bijection(enumerate_output(spec), range(4), spec.out_h * spec.out_w * (K // 4))


def test_concurrent_kernels_in_distinct_weight_columns():
    spec = LayerSpec(3, 3, 8, 16)
    kq = spec.K // 4
    for step_k in range(kq):
        cols = {weight_map(p * kq + step_k, 0, 0, 0, spec)[0][1] for p in range(4)}
        assert cols == {0, 1, 2, 3}


# -- BmgBank ------------------------------------------------------------------

def test_read_after_write():
    bank = BmgBank(4, 8)
    bank.write(0, 17, cycle=0)
    assert bank_read(bank, 0, 1) == 17


def test_three_uses_in_one_cycle_exceed_budget():
    bank = BmgBank(4, 8)
    bank.read(0, 5)
    bank.read(1, 5)
    with pytest.raises(PortBudgetError):
        bank.read(2, 5)


def test_same_cycle_read_sees_pre_write_value():
    bank = BmgBank(4, 32)
    bank.write(2, 10, cycle=0)
    bank.write(2, 99, cycle=3)
    assert bank.read(2, 3) == 10
    assert bank.read(2, 4) == 99


def test_read_then_write_same_cycle():
    bank = BmgBank(4, 32)
    bank.write(1, 5, cycle=0)
    assert bank.read(1, 2) == 5
    bank.write(1, 6, cycle=2)
    assert bank.storage[1] == 6


def test_address_out_of_range():
    bank = BmgBank(4, 8)
    with pytest.raises(AddressError):
        bank.read(4, 0)
    with pytest.raises(AddressError):
        bank.write(-1, 0, 0)


def test_word_width_enforced():
    bank = BmgBank(2, 8)
    with pytest.raises(OverflowError):
        bank.write(0, 128, 0)


@pytest.mark.parametrize("start,delta,expected", [(10, 5, 15), (0, -7, -7)])
def test_accumulate(start, delta, expected):
    bank = BmgBank(1, 32)
    bank.load([start])
    bank_accumulate(bank, 0, delta, 0, 1)
    assert bank.storage[0] == expected
    assert bank.ledger.count(0) == 1 and bank.ledger.count(1) == 1


def test_accumulate_requires_ordered_cycles():
    bank = BmgBank(1, 32)
    with pytest.raises(ValueError):
        bank.accumulate(0, 1, 3, 3)


def test_accumulate_respects_port_budget():
    bank = BmgBank(4, 32)
    bank.accumulate(0, 1, 0, 1)
    bank.accumulate(1, 1, 0, 1)
    with pytest.raises(PortBudgetError):
        bank.accumulate(2, 1, 0, 2)


def test_bias_plus_channel_accumulation_matches_oracle(rng):
    image, kernels, bias = random_layer(rng, 6, 5, 8, 4)
    k, i, j = 2, 1, 2
    bank = BmgBank(1, 32)
    bank.load([int(bias.data[k])])
    for c in range(image.C):
        psum = int(conv2d_channel(image.data[c], kernels.data[k, c])[i, j])
        bank.accumulate(0, psum, 2 * c, 2 * c + 1)
    assert bank.storage[0] == conv2d_layer(image, kernels, bias).data[k, i, j]


def test_ledger_retire_keeps_peak():
    bank = BmgBank(4, 8)
    bank.read(0, 1)
    bank.read(0, 1)
    bank.read(0, 9)
    bank.ledger.retire_before(5)
    assert bank.ledger.uses == {9: 1}
    assert bank.ledger.peak == 2 and bank.ledger.total == 3


# -- bank sets ----------------------------------------------------------------

def test_preload_bias_zero():
    outs = preload_bias(OutputBankSet(LayerSpec(4, 4, 4, 4)), BiasVector.zeros(4))
    assert all(w == 0 for b in outs.banks for w in b.storage)


def test_preload_bias_one_pixel():
    outs = preload_bias(OutputBankSet(LayerSpec(3, 3, 4, 4)), BiasVector([1, 2, 3, 4]))
    assert [b.storage for b in outs.banks] == [[1], [2], [3], [4]]


def test_preload_bias_every_word(rng):
    spec = LayerSpec(5, 6, 4, 8)
    bias = BiasVector(rng.integers(-(2**15), 2**15 + 1, size=8))
    outs = preload_bias(OutputBankSet(spec), bias)
    for (k, i, j), (q, a) in enumerate_output(spec).items():
        assert outs.banks[q].storage[a] == bias.data[k]


def test_preload_bias_length_mismatch():
    with pytest.raises(ValueError):
        OutputBankSet(LayerSpec(3, 3, 4, 4)).preload_bias(BiasVector.zeros(8))


def test_image_round_trip_via_map(rng):
    spec = LayerSpec(5, 7, 8, 4, bank_capacity=200)
    image, _, _ = random_layer(rng, 5, 7, 8, 4)
    banks = ImageBankSet(spec)
    banks.load(image)
    rebuilt = np.zeros_like(image.data)
    for (c, i, j), (q, a) in enumerate_image(spec).items():
        rebuilt[c, i, j] = banks.banks[q].storage[a]
    assert np.array_equal(rebuilt, image.data)
    assert banks.gather() == image
    # slots past the image are redundant and untouched
    assert all(w == 0 for b in banks.banks for w in b.storage[spec.image_words_per_bank:])


def test_weight_round_trip_via_map(rng):
    spec = LayerSpec(3, 3, 8, 12)
    _, kernels, _ = random_layer(rng, 3, 3, 8, 12)
    grid = WeightBankGrid(spec)
    grid.load(kernels)
    rebuilt = np.zeros_like(kernels.data)
    for (k, c, m, n), ((g, j), a) in enumerate_weights(spec).items():
        rebuilt[k, c, m, n] = grid.bank(g, j).storage[a]
    assert np.array_equal(rebuilt, kernels.data)
    assert grid.gather() == kernels


def test_output_layout_is_next_layer_input_layout(rng):
    spec = LayerSpec(7, 6, 4, 8)
    image, kernels, bias = random_layer(rng, 7, 6, 4, 8)
    psums = conv2d_layer(image, kernels, bias)
    outs = OutputBankSet(spec)
    outs.load(psums)
    shift = 9
    nxt = ImageBankSet(LayerSpec(spec.out_h, spec.out_w, spec.K, 4))
    nxt.load(requantize(psums, shift))
    assert outs.requantized_words(shift) == [b.storage for b in nxt.banks]
    # and the maps agree coordinate by coordinate
    nspec = nxt.spec
    for k in range(spec.K):
        for i in range(spec.out_h):
            for j in range(spec.out_w):
                assert output_map(k, i, j, spec) == image_map(k, i, j, nspec)


def test_image_capacity_enforced():
    with pytest.raises(ValueError):
        LayerSpec(10, 10, 8, 4, bank_capacity=199)


@pytest.mark.parametrize("width", [8, 32])
def test_dump_restore(tmp_path, width):
    bank = BmgBank(6, width, "b")
    bank.load([-3, 0, 1, 127, -128, 5] if width == 8 else [-(2**31), 2**31 - 1, 0, -1, 7, 1 << 20])
    dump_bank(bank, tmp_path / "b")
    raw = (tmp_path / "b.bin").read_bytes()
    assert len(raw) == 6 * width // 8
    back = restore_bank(tmp_path / "b")
    assert back.storage == bank.storage and back.word_width == width and back.depth == 6

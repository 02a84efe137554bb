from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_parents, ulp_distance
from layermerge.recipe import (
    DiscreteRecipe,
    RecipeError,
    RecipeRecord,
    all_layer_recipe,
    apply_recipe,
    interpolate,
    load_recipe,
    merge_layer,
    modified_layers,
    n_dominated_layers,
    random_k_recipe,
    save_recipe,
    threshold,
)
from layermerge.tensor_store import Checkpoint, CheckpointError, LayerParamGroup, layer_params

finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)
alphas = st.floats(0.5, 1.0)


def test_threshold_boundary():
    assert threshold([0.49, 0.5, 0.51]) == (0, 1, 1)
    assert threshold([0.0] * 4) == (0,) * 4
    assert threshold([1.0] * 4) == (1,) * 4


def test_threshold_clamps_out_of_range():
    assert threshold([-3.0, 7.0]) == (0, 1)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=40))
def test_threshold_idempotent_on_binary(bits):
    assert threshold(bits) == tuple(bits)


def test_recipe_validation():
    with pytest.raises(RecipeError):
        DiscreteRecipe((0, 2), 1.0)
    with pytest.raises(RecipeError):
        DiscreteRecipe((0, 1), 0.4)
    with pytest.raises(RecipeError):
        DiscreteRecipe.from_n_dominated([5], 5, 1.0)


def test_merge_layer_hand_values():
    m = LayerParamGroup(0, (("w", np.array([2.0], np.float32)),))
    n = LayerParamGroup(0, (("w", np.array([1.0], np.float32)),))
    assert merge_layer(m, n, 1, 1.0).tensors[0][1][0] == 2.0
    assert merge_layer(m, n, 0, 1.0).tensors[0][1][0] == 1.0
    assert merge_layer(m, n, 1, 0.9).tensors[0][1][0] == np.float32(1.9)
    assert merge_layer(m, n, 0, 0.9).tensors[0][1][0] == np.float32(1.1)
    assert merge_layer(m, n, 0, 0.5).tensors[0][1][0] == merge_layer(m, n, 1, 0.5).tensors[0][1][0] == 1.5


def test_merge_layer_shape_mismatch():
    m = LayerParamGroup(0, (("w", np.zeros(2, np.float32)),))
    n = LayerParamGroup(0, (("w", np.zeros(3, np.float32)),))
    with pytest.raises(CheckpointError, match="shape mismatch"):
        merge_layer(m, n, 1, 0.9)


@given(finite32, finite32, alphas, st.integers(0, 1))
def test_interpolation_convex(a, b, alpha, gate):
    out = float(interpolate(np.float32(a), np.float32(b), gate, alpha))
    assert min(a, b) <= out <= max(a, b)


@given(st.lists(finite32, min_size=1, max_size=8), st.lists(finite32, min_size=1, max_size=8), alphas)
def test_gate_symmetry(xs, ys, alpha):
    n = min(len(xs), len(ys))
    a, b = np.array(xs[:n], np.float32), np.array(ys[:n], np.float32)
    assert np.array_equal(interpolate(a, b, 1, alpha), interpolate(b, a, 0, alpha))


def _oracle(m: float, n: float, gate: int, alpha: Fraction) -> Fraction:
    w_m = alpha if gate else 1 - alpha
    return w_m * Fraction(float(m)) + (1 - w_m) * Fraction(float(n))


@settings(max_examples=300)
@given(finite32, finite32, st.sampled_from([0.5, 0.6, 0.7, 0.8, 0.9, 1.0]), st.integers(0, 1))
def test_interpolation_against_exact_rational(a, b, alpha, gate):
    out = interpolate(np.float32(a), np.float32(b), gate, alpha)
    exact = _oracle(a, b, gate, Fraction(str(alpha)))
    nearest = np.float32(float(exact))  # the correctly rounded value, up to double rounding
    if alpha in (0.5, 1.0):
        assert ulp_distance(out, nearest) == 0
    else:
        assert ulp_distance(out, nearest) <= 1


def test_identity_recipe_byte_identical():
    m, n = random_parents(0)
    merged = apply_recipe(m, n, DiscreteRecipe((1,) * m.layer_count, 1.0))
    assert merged.to_bytes() == m.to_bytes()


def test_all_zero_gates_alpha_one_gives_n_attention():
    m, n = random_parents(1)
    merged = apply_recipe(m, n, all_layer_recipe(m.layer_count, 1.0))
    for name in merged.names():
        expected = n if name in m.attention_names() else m
        assert merged.raw(name) == expected.raw(name), name


def test_alpha_half_invariant_to_gates():
    m, n = random_parents(2)
    a = apply_recipe(m, n, DiscreteRecipe((0, 1, 0, 1, 1, 0), 0.5))
    b = apply_recipe(m, n, DiscreteRecipe((1, 1, 0, 0, 0, 1), 0.5))
    assert a.to_bytes() == b.to_bytes()


def test_non_attention_tensors_copied_from_m():
    m, n = random_parents(3)
    merged = apply_recipe(m, n, DiscreteRecipe((0, 1, 0, 1, 0, 1), 0.8))
    assert merged.raw("embed.weight") == m.raw("embed.weight")
    assert merged.raw("layers.0.mlp.weight") == m.raw("layers.0.mlp.weight")


def test_apply_recipe_errors():
    m, n = random_parents(4, num_layers=6)
    short, _ = random_parents(4, num_layers=5)
    with pytest.raises(CheckpointError, match="layer-count mismatch"):
        apply_recipe(m, short, DiscreteRecipe((1,) * 6, 1.0))
    with pytest.raises(CheckpointError):
        apply_recipe(m, n, DiscreteRecipe((1,) * 5, 1.0))


def test_modified_layers():
    assert modified_layers(DiscreteRecipe((1, 0, 1), 1.0)) == {1}
    assert modified_layers(DiscreteRecipe((1, 0, 1), 0.9)) == {0, 1, 2}
    assert n_dominated_layers(DiscreteRecipe((1, 0, 1), 0.9)) == {1}
    assert modified_layers(DiscreteRecipe((1,) * 5, 1.0)) == set()


@pytest.mark.parametrize("gates,alpha", [((1, 0, 1, 1, 0, 0), 1.0), ((1, 0, 1, 1, 0, 0), 0.9), ((0,) * 6, 0.7)])
def test_modified_layers_matches_actual_change(gates, alpha):
    m, n = random_parents(5)
    recipe = DiscreteRecipe(gates, alpha)
    merged = apply_recipe(m, n, recipe)
    changed = {
        i
        for i in range(m.layer_count)
        if any(merged.raw(name) != m.raw(name) for name in m.layer_names(i))
    }
    assert changed == modified_layers(recipe)


def test_all_layer_recipe():
    assert all_layer_recipe(28, 0.9).gates == (0,) * 28
    m, n = random_parents(6)
    avg = apply_recipe(m, n, all_layer_recipe(m.layer_count, 0.5))
    name = m.layer_names(2)[0]
    expected = ((m.f32(name).astype(np.float64) + n.f32(name)) / 2).astype(np.float32)
    assert np.array_equal(avg.f32(name), expected)


def test_random_k_recipe():
    r = random_k_recipe(28, 11, 1.0, seed=3)
    assert len(n_dominated_layers(r)) == 11
    assert r == random_k_recipe(28, 11, 1.0, seed=3)
    assert random_k_recipe(28, 0, 1.0, seed=3).is_identity
    with pytest.raises(RecipeError):
        random_k_recipe(28, 29, 1.0, seed=3)
    with pytest.raises(RecipeError):
        random_k_recipe(28, -1, 1.0, seed=3)


def test_random_k_uniform_marginals():
    counts = np.zeros(10)
    for seed in range(2000):
        for i in n_dominated_layers(random_k_recipe(10, 3, 1.0, seed)):
            counts[i] += 1
    # each layer is picked with probability 3/10; 2000 draws give sd ~ 20.5
    assert np.all(np.abs(counts - 600) < 100)


def test_recipe_file_field_order(tmp_path):
    record = RecipeRecord(DiscreteRecipe((1, 0), 0.9), 0.5, 0.6, 0.5, 1.0, 0.6, 10, 7, (0.7, 0.2))
    path = tmp_path / "r.json"
    save_recipe(record, path)
    text = path.read_text()
    keys = ["alpha", "gates", "discrete", "objective", "acc_tp", "acc_tr", "lambda", "base_tp", "evals_used", "seed"]
    positions = [text.index(f'"{k}"') for k in keys]
    assert positions == sorted(positions)
    assert load_recipe(path) == record


def test_recipe_file_errors(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"alpha": 0.9}')
    with pytest.raises(RecipeError, match="malformed"):
        load_recipe(path)
    path.write_text('{"alpha": 0.9, "discrete": [1, 0], "gates": [0.1]}')
    with pytest.raises(RecipeError, match="length"):
        load_recipe(path)

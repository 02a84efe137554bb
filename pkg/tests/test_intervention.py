import math

import numpy as np
import pytest

from layermerge.intervention import (
    DEFAULT_KAPPAS,
    MaskSpec,
    degradation,
    mask_checkpoint,
    mask_sweep,
    masked_forward,
    proxy_scorer,
)
from layermerge.toy import ProxyTaskSuite, ToyAttentionModel, proxy_eval, wired_toy_model


def _tiny_model(layers):
    """d=2, vocab 2; token 0 embeds to [1, 1], positions are zero, readout is identity."""
    embed = np.array([[1.0, 1.0], [0.0, 0.0]])
    return ToyAttentionModel(embed, np.zeros((4, 2)), layers, np.eye(2))


def _layer(v, o):
    zero = np.zeros((2, 2))
    return {"q": zero, "k": zero, "v": np.asarray(v, float), "o": np.asarray(o, float)}


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec({0}, 1.5)
    with pytest.raises(IndexError):
        MaskSpec({4}, 0.5).kappas(4)
    assert MaskSpec({1, 3}, 0.2).kappas(4).tolist() == [1.0, 0.2, 1.0, 0.2]


def test_kappa_one_is_bitwise_identity():
    model = ToyAttentionModel.random(3, num_layers=5, dim=8, vocab=12, n_ctx=10)
    tokens = np.arange(10) % 12
    plain = model.run(model.add_positions(model.embed_tokens(tokens)))
    masked = masked_forward(model, MaskSpec({0, 2, 4}, 1.0), tokens)
    assert masked.tobytes() == plain.tobytes()


def test_kappa_zero_everywhere_leaves_embedding_and_readout():
    model = ToyAttentionModel.random(4, num_layers=3, dim=6, vocab=10, n_ctx=8)
    tokens = [1, 4, 2, 9]
    out = masked_forward(model, MaskSpec(range(3), 0.0), tokens)
    expected = (model.embed[tokens] + model.pos[:4]) @ model.readout.T
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_hand_computed_two_layer_instance():
    # one position: attention is 1 on itself, so each layer adds kappa * h Wv^T Wo^T
    # h0 = [1, 1]; layer 0 (kappa 0.5): out = [1, 2] -> [1.5, 2]; layer 1: out = h -> [3, 4]
    model = _tiny_model([_layer([[1, 0], [0, 2]], np.eye(2)), _layer(np.eye(2), np.eye(2))])
    logits = masked_forward(model, MaskSpec({0}, 0.5), [0])
    assert logits.tolist() == [[3.0, 4.0]]


def test_single_layer_output_is_linear_in_kappa():
    model = ToyAttentionModel.random(5, num_layers=1, dim=6, vocab=10, n_ctx=8)
    tokens = [3, 1, 7, 2, 5]
    at = {k: masked_forward(model, MaskSpec({0}, k), tokens) for k in (0.0, 0.3, 1.0)}
    np.testing.assert_allclose(at[0.3], 0.7 * at[0.0] + 0.3 * at[1.0], rtol=1e-12, atol=1e-12)


def test_degradation_examples():
    assert degradation(0.5, 0.4) == pytest.approx(0.2, abs=1e-15)
    assert degradation(45.3, 45.3 * (1 - 0.517)) == pytest.approx(0.517, abs=1e-12)
    assert 45.3 * (1 - 0.517) == pytest.approx(21.88, abs=0.005)
    assert degradation(0.5, 0.6) < 0
    with pytest.raises(ZeroDivisionError):
        degradation(0.0, 0.1)


def test_mask_checkpoint_matches_activation_masking():
    model = ToyAttentionModel.random(6, num_layers=6, dim=8, vocab=12, n_ctx=12)
    ck = model.to_checkpoint()
    exact = ToyAttentionModel.from_checkpoint(ck)
    tokens = np.arange(12) % 12
    masked = ToyAttentionModel.from_checkpoint(mask_checkpoint(ck, {1, 4}, 0.3))
    got = masked.run(masked.add_positions(masked.embed_tokens(tokens)))
    want = masked_forward(exact, MaskSpec({1, 4}, 0.3), tokens)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)
    assert mask_checkpoint(ck, {1, 4}, 1.0) == ck
    with pytest.raises(ValueError, match="no tensors"):
        mask_checkpoint(ck, {1}, 0.5, out_role="absent")


def test_empty_layer_set_gives_zero_degradation():
    model = wired_toy_model()
    suite = ProxyTaskSuite.generate(seed=0, n_tp=20, n_tr=40)
    curve = mask_sweep(proxy_scorer(model, suite, []), DEFAULT_KAPPAS, "TR-proxy")
    assert all(d == 0.0 for values in curve.deltas.values() for d in values)


def test_single_point_grid():
    curve = mask_sweep(lambda k: {"TP": 0.6, "TR": 0.4}, [1.0])
    assert curve.kappas == [1.0] and curve.deltas == {"TP": [0.0], "TR": [0.0]}


def test_reasoning_layers_hurt_reasoning_more():
    layers = (2, 5, 7, 9)
    model = wired_toy_model(12, layers)
    suite = ProxyTaskSuite.generate(seed=1)
    base = proxy_eval(model, suite)
    assert base.acc_tp == 1.0 and base.acc_tr == 1.0
    curve = mask_sweep(proxy_scorer(model, suite, layers), DEFAULT_KAPPAS, "TR-proxy", layers)
    j = curve.kappas.index(0.0)
    assert curve.deltas["TR-proxy"][j] > curve.deltas["TP-proxy"][j]
    assert curve.deltas["TP-proxy"][j] == 0.0
    assert curve.layers == [2, 5, 7, 9]


def test_others_metric_and_csv():
    def score_at(k):
        return {"TR": 0.5 * k + 0.1, "A": 0.8, "B": 0.4 + 0.2 * k}

    curve = mask_sweep(score_at, [1.0, 0.0], "TR")
    assert curve.scores["Others"] == [pytest.approx(0.7), pytest.approx(0.6)]
    assert curve.deltas["Others"][1] == pytest.approx(1 / 7)
    text = curve.to_csv(["layers: 1 2"])
    lines = text.splitlines()
    assert lines[0] == "# layers: 1 2" and lines[1] == "metric,kappa,score,delta"
    assert len(lines) == 2 + 4 * 2
    # a single non-reasoning metric gets no aggregate
    assert "Others" not in mask_sweep(lambda k: {"TR": 1.0, "A": 1.0}, [0.0], "TR").scores


def test_failed_grid_point_is_recorded():
    def score_at(k):
        if k == 0.4:
            raise RuntimeError("evaluator crashed")
        return {"TP": 0.9, "TR": 0.2 + 0.6 * k}

    curve = mask_sweep(score_at, DEFAULT_KAPPAS)
    j = curve.kappas.index(0.4)
    assert "evaluator crashed" in curve.errors[0.4]
    assert math.isnan(curve.scores["TR"][j]) and math.isnan(curve.deltas["TR"][j])
    assert curve.deltas["TR"][curve.kappas.index(0.0)] == pytest.approx(0.75)
    with pytest.raises(RuntimeError, match="unmasked"):
        mask_sweep(lambda k: 1 / 0, [0.5])


def test_kappa_grid_validation():
    with pytest.raises(ValueError):
        mask_sweep(lambda k: {"TP": 1.0}, [])
    with pytest.raises(ValueError):
        mask_sweep(lambda k: {"TP": 1.0}, [1.2])

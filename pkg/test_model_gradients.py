"""Finite-difference checks of the hand-written backward passes, plus model shape invariants."""

import numpy as np
import pytest

from core.errors import ModelInputError
from model.attention import LANE_BIAS, GATLayer, apply_lane_bias, gat_attention, lane_codes
from model.decoder import GaussianDecoder
from model.encoder import _lstm_backward, _lstm_forward, bilstm_encode
from model.inputs import ModelInput, anchor_velocity, constant_velocity_path
from model.network import LaneAwareGAT, ModelConfig
from model.params import ParamStore
from training.losses import LOG_2PI, gaussian_nll, nll_loss, ttc_hinge_terms

H = 1e-5


def compare(analytic, numeric, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def _scene(rng, n=4, t=5, codes=(0, 1, 2, 3, 3)):
    src = np.array([1, 2, 3, 0, 2][:len(codes)], dtype=np.int64)
    dst = np.array([0, 0, 1, 2, 3][:len(codes)], dtype=np.int64)
    attr = rng.normal(size=(len(codes), 5))
    attr[:, 4] = np.asarray(codes, dtype=np.float64)
    return ModelInput(
        nodes=tuple(range(1, n + 1)),
        histories=rng.normal(size=(n, t, 6)),
        edge_src=src,
        edge_dst=dst,
        edge_attr=attr,
        anchor_xy=np.zeros((n, 2)),
        anchor_velocity=rng.normal(size=(n, 2)),
        decode_rows=np.array([0, 2], dtype=np.int64),
    )


def _weighted_loss(model, inp, weights):
    outputs, _ = model.forward(inp)
    return sum(float(np.sum(outputs[h] * w)) for h, w in weights.items())


def _numeric(model, inp, weights, name, idx):
    values = model.store.values[name]
    old = values.flat[idx]
    values.flat[idx] = old + H
    up = _weighted_loss(model, inp, weights)
    values.flat[idx] = old - H
    down = _weighted_loss(model, inp, weights)
    values.flat[idx] = old
    return (up - down) / (2 * H)


@pytest.mark.parametrize("variant", ["gat", "gatv2"])
def test_network_gradients(micro_config, rng, variant):
    config = ModelConfig(**{**micro_config.to_dict(), "attention_variant": variant,
                            "horizons": micro_config.horizons})
    model = LaneAwareGAT(config, seed=3)
    inp = _scene(rng)
    outputs, cache = model.forward(inp)
    weights = {h: rng.normal(size=o.shape) for h, o in outputs.items()}
    grads = model.store.zeros_like()
    model.backward(weights, cache, grads)

    for name in model.store.names():
        size = model.store[name].size
        picks = rng.choice(size, size=min(size, 4), replace=False)
        numeric = [_numeric(model, inp, weights, name, int(i)) for i in picks]
        compare(grads[name].flat[picks], numeric)


def test_lane_bias_gradient_only_for_present_codes(micro_config, rng):
    model = LaneAwareGAT(micro_config, seed=0)
    inp = _scene(rng, codes=(0, 2, 2, 0, 0))
    outputs, cache = model.forward(inp)
    grads = model.store.zeros_like()
    model.backward({h: np.ones_like(o) for h, o in outputs.items()}, cache, grads)
    assert grads[LANE_BIAS][1] == 0.0 and grads[LANE_BIAS][3] == 0.0
    assert grads[LANE_BIAS][2] != 0.0


def test_frozen_encoder_gets_no_gradient(micro_config, rng):
    model = LaneAwareGAT(micro_config, seed=0)
    before = model.count_parameters()
    frozen = model.freeze_encoder()
    assert frozen and model.encoder_frozen()
    assert model.count_parameters() == before - sum(model.store[n].size for n in frozen)
    inp = _scene(rng)
    outputs, cache = model.forward(inp)
    grads = model.store.zeros_like()
    model.backward({h: np.ones_like(o) for h, o in outputs.items()}, cache, grads)
    for name in frozen:
        assert not grads[name].any()
    assert grads["gat1.W"].any()


def test_default_parameter_count():
    model = LaneAwareGAT(ModelConfig())
    store = model.store

    def total(prefix):
        return sum(store[n].size for n in store.names() if n.startswith(prefix))

    assert total("encoder.") == 52864
    assert total("gat") == 35328
    assert total(LANE_BIAS) == 4
    assert total("decoder.") == 214722
    assert model.count_parameters() == 302918


def test_output_shapes(micro_config, rng):
    model = LaneAwareGAT(micro_config, seed=0)
    outputs, _ = model.forward(_scene(rng))
    assert outputs["1s"].shape == (2, 2, 5)
    assert outputs["3s"].shape == (2, 3, 5)
    preds = model.predict(_scene(rng))
    assert len(preds) == 2
    p = preds[0]["3s"]
    assert p.steps == 3
    assert (p.sigma > 0).all() and (np.abs(p.rho) < 1).all()
    assert p.rows().shape == (3, 5)


def test_isolated_nodes_attend_to_themselves(micro_config, rng):
    model = LaneAwareGAT(micro_config, seed=0)
    inp = _scene(rng, codes=())
    outputs, _ = model.forward(inp)
    assert all(np.isfinite(o).all() for o in outputs.values())


def test_non_finite_history_rejected(micro_config, rng):
    model = LaneAwareGAT(micro_config, seed=0)
    inp = _scene(rng)
    inp.histories[1, 2, 0] = np.nan
    with pytest.raises(ModelInputError):
        model.forward(inp)


def test_bad_lane_code_rejected(micro_config, rng):
    model = LaneAwareGAT(micro_config, seed=0)
    inp = _scene(rng)
    inp.edge_attr[0, 4] = 4
    with pytest.raises(ModelInputError):
        model.forward(inp)
    with pytest.raises(ModelInputError):
        lane_codes(np.array([[0, 0, 0, 0, 1.5]]))


def test_apply_lane_bias():
    edge = np.array([1.0, 2.0, 3.0, 4.0, 3.0])
    out = apply_lane_bias(edge, np.array([0.0, 0.0, 0.0, 1.0]))
    np.testing.assert_allclose(out, [1.0, 2.0, 3.0, 4.0, 4.0])
    assert edge[4] == 3.0


@pytest.mark.parametrize("variant", ["gat", "gatv2"])
def test_attention_score_increases_with_merge_bias(rng, variant):
    head_dim, embed = 3, 5
    W = rng.normal(size=(head_dim, embed))
    a = np.ones(3 * head_dim)
    We = np.ones((head_dim, 5))
    h_i, h_j = rng.normal(size=embed), rng.normal(size=embed)
    edge = np.array([0.5, -0.2, 0.1, 0.3, 3.0])
    scores = [gat_attention(h_i, h_j, apply_lane_bias(edge, np.array([0.0, 0.0, 0.0, lam])), W, a, We, variant)
              for lam in (0.0, 0.5, 1.0, 2.0)]
    assert all(b > s for s, b in zip(scores, scores[1:]))


def test_gat_layer_matches_single_edge_score(rng):
    store = ParamStore()
    store.add(LANE_BIAS, np.array([0.0, 0.3, 0.0, 1.0]))
    layer = GATLayer(1, 4, heads=1, head_dim=4, edge_dim=5)
    layer.init_params(store, rng)
    h = rng.normal(size=(2, 4))
    attr = np.array([[0.2, 0.1, -0.3, 0.5, 1.0]])
    _, cache = layer.forward(store, h, np.array([1]), np.array([0]), attr)
    pre = cache[7]
    expected = gat_attention(h[0], h[1], apply_lane_bias(attr[0], store[LANE_BIAS]), store["gat1.W"],
                             store["gat1.a"][0], store["gat1.We"], "gat", 0.2)
    # first row is the real edge; self-loops follow
    assert float(np.where(pre[0, 0] > 0, pre[0, 0], 0.2 * pre[0, 0])) == pytest.approx(expected)


def test_bilstm_encode_single_history(micro_config, rng):
    model = LaneAwareGAT(micro_config, seed=0)
    history = rng.normal(size=(7, 6))
    single = bilstm_encode(history, model.store, model.encoder)
    batched, _ = model.encoder.forward(model.store, np.stack([history, history * 0.5]))
    assert single.shape == (micro_config.embed_dim,)
    np.testing.assert_allclose(single, batched[0])


def test_gaussian_nll_gradient(rng):
    channels = rng.normal(scale=0.5, size=(3, 5))
    targets = rng.normal(size=(3, 2))
    _, grad = gaussian_nll(channels, targets)
    numeric = np.zeros_like(channels)
    for idx in np.ndindex(channels.shape):
        up, down = channels.copy(), channels.copy()
        up[idx] += H
        down[idx] -= H
        numeric[idx] = (gaussian_nll(up, targets)[0].sum() - gaussian_nll(down, targets)[0].sum()) / (2 * H)
    compare(grad, numeric)


def test_nll_loss_values():
    assert nll_loss([0, 0, 1, 1, 0], [0, 0]) == pytest.approx(LOG_2PI)
    assert nll_loss([0, 0, 1, 1, 0], [1, 0]) == pytest.approx(0.5 + LOG_2PI)
    assert nll_loss([0, 0, 2, 1, 0], [0, 0]) == pytest.approx(np.log(2.0) + LOG_2PI)


@pytest.mark.parametrize("row", [[0, 0, 0, 1, 0], [0, 0, 1, 1, 1.0], [np.nan, 0, 1, 1, 0]])
def test_nll_loss_rejects_invalid_rows(row):
    with pytest.raises(ModelInputError):
        nll_loss(row, [0, 0])


def test_ttc_hinge_gradient(rng):
    x_abs = np.array([
        [0.0, 2.0, 4.1, 6.3, 8.2],
        [10.0, 11.0, 12.05, 13.0, 14.1],
    ])
    src, dst = np.array([1]), np.array([0])
    hinge, backward = ttc_hinge_terms(x_abs, src, dst, threshold=3.0)
    assert (hinge > 0).all()
    weights = rng.uniform(0.5, 1.5, size=hinge.shape)
    grad = backward(weights)
    numeric = np.zeros_like(grad)
    for idx in np.ndindex(grad.shape):
        up, down = x_abs.copy(), x_abs.copy()
        up[idx[0], idx[1] + 1] += H
        down[idx[0], idx[1] + 1] -= H
        numeric[idx] = (np.sum(ttc_hinge_terms(up, src, dst)[0] * weights)
                        - np.sum(ttc_hinge_terms(down, src, dst)[0] * weights)) / (2 * H)
    compare(grad, numeric)


def _check_store(store, loss, grads, names, rng, picks=6):
    for name in names:
        values = store.values[name]
        chosen = rng.choice(values.size, size=min(values.size, picks), replace=False)
        numeric = []
        for idx in chosen:
            old = values.flat[idx]
            values.flat[idx] = old + H
            up = loss()
            values.flat[idx] = old - H
            down = loss()
            values.flat[idx] = old
            numeric.append((up - down) / (2 * H))
        compare(grads[name].flat[chosen], numeric)


def _check_input(x, loss, analytic):
    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + H
        up = loss()
        x[idx] = old - H
        down = loss()
        x[idx] = old
        numeric[idx] = (up - down) / (2 * H)
    compare(analytic, numeric)


def test_lstm_cell_gradients(rng):
    hidden, dim = 3, 2
    W = rng.normal(scale=0.5, size=(4 * hidden, dim + hidden))
    b = rng.normal(scale=0.1, size=4 * hidden)
    xs = rng.normal(size=(4, 2, dim))
    weights = rng.normal(size=(2, hidden))

    def loss():
        return float(np.sum(_lstm_forward(W, b, xs)[0] * weights))

    _, steps = _lstm_forward(W, b, xs)
    dW, db = _lstm_backward(W, weights, steps, dim)
    _check_input(W, loss, dW)
    _check_input(b, loss, db)


@pytest.mark.parametrize("variant", ["gat", "gatv2"])
def test_gat_layer_gradients(rng, variant):
    store = ParamStore()
    store.add(LANE_BIAS, np.array([0.1, 0.2, -0.1, 1.0]))
    layer = GATLayer(1, 5, heads=2, head_dim=3, edge_dim=5, variant=variant)
    layer.init_params(store, rng)
    inp = _scene(rng)
    h = rng.normal(size=(4, 5))
    weights = rng.normal(size=(4, 6))

    def loss():
        out, _ = layer.forward(store, h, inp.edge_src, inp.edge_dst, inp.edge_attr)
        return float(np.sum(out * weights))

    _, cache = layer.forward(store, h, inp.edge_src, inp.edge_dst, inp.edge_attr)
    grads = store.zeros_like()
    d_h = layer.backward(store, weights, cache, grads)
    _check_store(store, loss, grads, store.names(), rng)
    _check_input(h, loss, d_h)


def test_decoder_head_gradients(rng):
    store = ParamStore()
    decoder = GaussianDecoder("1s", 3, in_dim=4, hidden=5)
    decoder.init_params(store, rng)
    h = rng.normal(size=(2, 4))
    weights = rng.normal(size=(2, 3, 5))

    def loss():
        return float(np.sum(decoder.forward(store, h)[0] * weights))

    _, cache = decoder.forward(store, h)
    grads = store.zeros_like()
    d_h = decoder.backward(store, weights, cache, grads)
    _check_store(store, loss, grads, store.names(), rng)
    _check_input(h, loss, d_h)


@pytest.mark.parametrize("variant", ["gat", "gatv2"])
def test_attention_weights_normalized_per_receiver(rng, variant):
    store = ParamStore()
    store.add(LANE_BIAS, np.array([0.0, 0.0, 0.0, 1.0]))
    layer = GATLayer(1, 5, heads=2, head_dim=3, edge_dim=5, variant=variant)
    layer.init_params(store, rng)
    inp = _scene(rng, n=5)
    _, cache = layer.forward(store, rng.normal(size=(5, 5)), inp.edge_src, inp.edge_dst, inp.edge_attr)
    dst, alpha = cache[2], cache[8]
    assert alpha.shape == (len(inp.edge_src) + 5, 2)
    totals = np.zeros((5, 2))
    np.add.at(totals, dst, alpha)
    np.testing.assert_allclose(totals, 1.0, atol=1e-12)
    assert (alpha > 0).all()


@pytest.mark.parametrize("variant", ["gat", "gatv2"])
def test_gat_layer_permutation_equivariant(rng, variant):
    store = ParamStore()
    store.add(LANE_BIAS, np.array([0.0, 0.4, 0.2, 1.0]))
    layer = GATLayer(1, 5, heads=2, head_dim=3, edge_dim=5, variant=variant)
    layer.init_params(store, rng)
    inp = _scene(rng)
    h = rng.normal(size=(4, 5))
    out, _ = layer.forward(store, h, inp.edge_src, inp.edge_dst, inp.edge_attr)

    perm = np.array([2, 0, 3, 1])
    inverse = np.argsort(perm)
    order = rng.permutation(len(inp.edge_src))
    permuted, _ = layer.forward(store, h[perm], inverse[inp.edge_src][order], inverse[inp.edge_dst][order],
                                inp.edge_attr[order])
    np.testing.assert_allclose(permuted, out[perm], atol=1e-6)


def test_anchor_velocity_reads_last_frames():
    histories = np.zeros((2, 3, 6))
    histories[0, :, 1] = [3.5, 3.6, 3.8]
    histories[0, -1, 2] = 24.0
    histories[1, -1, 2] = 15.0
    np.testing.assert_allclose(anchor_velocity(histories), [[24.0, 2.0], [15.0, 0.0]])
    path = constant_velocity_path(np.array([[20.0, -1.0]]), 3)
    np.testing.assert_allclose(path[0], [[2.0, -0.1], [4.0, -0.2], [6.0, -0.3]])


@pytest.mark.parametrize("prior", ["cv", "none"])
def test_means_are_offsets_from_kinematic_prior(micro_config, rng, prior):
    config = ModelConfig(**{**micro_config.to_dict(), "kinematic_prior": prior, "horizons": micro_config.horizons})
    model = LaneAwareGAT(config, seed=1)
    for name in model.store.names():
        if name.startswith("decoder.") and name.split(".")[-1] in ("W2", "b2"):
            model.store.values[name][:] = 0.0
    inp = _scene(rng)
    outputs, _ = model.forward(inp)
    for horizon, steps in config.horizons:
        expected = np.zeros((2, steps, 2))
        if prior == "cv":
            expected = constant_velocity_path(inp.anchor_velocity[inp.decode_rows], steps)
        np.testing.assert_allclose(outputs[horizon][:, :, :2], expected, atol=1e-12)
        assert not outputs[horizon][:, :, 2:].any()


def test_unknown_kinematic_prior_rejected():
    with pytest.raises(ValueError):
        ModelConfig(kinematic_prior="ca")

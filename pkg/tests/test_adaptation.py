import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import TINY_ADAPT, TINY_ARCH, assert_close, random_images, tiny_model
from taskadapt.adaptation import (AdaptationConfig, AdaptationNetworks, class_representation, encode_ar,
                                  encode_global, generate_classifier, generate_film)
from taskadapt.engine import episode_objective, task_logits
from taskadapt.episodes import Episode
from taskadapt.tensor import Tensor, ops
from taskadapt.tensor.random import make_rng


def _nets(seed=0, mode="ar"):
    return tiny_model(mode, seed).nets


def _relu_linear(layer, h):
    return ops.relu(ops.add(ops.matmul(h, layer.weight), layer.bias))


def _residual(layer, h):
    return ops.add(h, ops.add(ops.matmul(h, layer.weight), layer.bias))


# -- global encoder ------------------------------------------------------------

def test_global_single_image_is_its_encoding(rng):
    enc = _nets().global_encoder
    x = Tensor(random_images(rng, 1))
    assert np.array_equal(encode_global(x, enc).data, enc.encode_instances(x).data[0])
    assert encode_global(x, enc).shape == (TINY_ADAPT.d_global,)


def test_global_permutation_invariant(rng):
    enc = _nets().global_encoder
    x = random_images(rng, 7)
    perm = rng.permutation(7)
    assert_close(encode_global(Tensor(x[perm]), enc).data, encode_global(Tensor(x), enc).data, 1e-12)


def test_global_duplicated_context(rng):
    enc = _nets().global_encoder
    x = random_images(rng, 4)
    doubled = np.concatenate([x, x])
    assert_close(encode_global(Tensor(doubled), enc).data, encode_global(Tensor(x), enc).data, 1e-12)


def test_global_empty_context_rejected():
    with pytest.raises(ValueError):
        encode_global(Tensor(np.zeros((0, 3, 8, 8))), _nets().global_encoder)


def test_global_encoder_train_mode_records_stats(rng):
    enc = _nets().global_encoder
    stats = []
    encode_global(Tensor(random_images(rng, 5)), enc, train=True, stats=stats)
    assert len(stats) == len(TINY_ADAPT.encoder_channels)


# -- auto-regressive encoder --------------------------------------------------------

def _ar_oracle(acts, enc):
    h = ops.global_avg_pool(acts)
    h = _relu_linear(enc.fc_in, h)
    h = ops.relu(_residual(enc.res1, h))
    h = ops.relu(_residual(enc.res2, h))
    h = _residual(enc.res3, h)
    return _relu_linear(enc.fc_out, ops.mean(h, axis=0))


def test_ar_encoder_permutation_invariant(rng):
    enc = _nets().ar_encoders[1]
    acts = rng.standard_normal((6, 4, 4, 4))
    perm = rng.permutation(6)
    assert_close(encode_ar(Tensor(acts[perm]), enc).data, encode_ar(Tensor(acts), enc).data, 1e-12)


def test_ar_encoder_single_instance(rng):
    enc = _nets().ar_encoders[0]
    acts = Tensor(rng.standard_normal((1, 4, 8, 8)))
    h = ops.global_avg_pool(acts)
    for layer in (enc.fc_in,):
        h = _relu_linear(layer, h)
    h = _residual(enc.res3, ops.relu(_residual(enc.res2, ops.relu(_residual(enc.res1, h)))))
    assert_close(encode_ar(acts, enc).data, _relu_linear(enc.fc_out, ops.reshape(h, (4,))).data, 1e-12)


def test_ar_encoder_matches_composed_oracle(rng):
    enc = _nets(seed=2).ar_encoders[1]
    acts = Tensor(rng.standard_normal((5, 4, 4, 4)))
    out = encode_ar(acts, enc)
    assert out.shape == (4,)
    assert_close(out.data, _ar_oracle(acts, enc).data, 1e-12)


def test_ar_encoder_empty_rejected():
    with pytest.raises(ValueError):
        encode_ar(Tensor(np.zeros((0, 4, 2, 2))), _nets().ar_encoders[0])


# -- FiLM generators ---------------------------------------------------------------

def _h_oracle(net, z):
    h = _relu_linear(net.fc_in, z)
    h = ops.relu(_residual(net.res1, h))
    h = ops.relu(_residual(net.res2, h))
    return _residual(net.res3, h)


def test_zero_gates_give_identity_film(rng):
    gen = _nets().film_generators[0]
    for pair in gen.pairs():
        pair.r_gamma.data = np.zeros_like(pair.r_gamma.data)
        pair.r_beta.data = np.zeros_like(pair.r_beta.data)
    for _ in range(5):
        (g1, b1), (g2, b2) = generate_film(Tensor(rng.standard_normal(8) * 10), Tensor(rng.standard_normal(4)), gen)
        for g, b in ((g1, b1), (g2, b2)):
            assert np.all(g.data == 1.0) and np.all(b.data == 0.0)


def test_zero_h_output_gives_identity_film(rng):
    gen = _nets().film_generators[1]
    for pair in gen.pairs():
        for net in (pair.h_gamma, pair.h_beta):
            for _, p in net.named_parameters():
                p.data = np.zeros_like(p.data)
        pair.r_gamma.data = rng.standard_normal(pair.r_gamma.shape)
    (g1, b1), (g2, b2) = generate_film(Tensor(rng.standard_normal(8)), Tensor(rng.standard_normal(4)), gen)
    assert np.all(g1.data == 1.0) and np.all(b2.data == 0.0)


def test_film_generator_matches_composed_oracle(rng):
    gen = _nets(seed=4).film_generators[1]
    for pair in gen.pairs():
        pair.r_gamma.data = rng.standard_normal(pair.r_gamma.shape)
        pair.r_beta.data = rng.standard_normal(pair.r_beta.shape)
    zg, zar = Tensor(rng.standard_normal(8)), Tensor(rng.standard_normal(4))
    z = ops.concat([zg, zar])
    out = generate_film(zg, zar, gen)
    for (g, b), pair in zip(out, gen.pairs()):
        assert g.shape == b.shape == (6,)
        assert_close(g.data, 1.0 + pair.r_gamma.data * _h_oracle(pair.h_gamma, z).data, 1e-12)
        assert_close(b.data, pair.r_beta.data * _h_oracle(pair.h_beta, z).data, 1e-12)


def test_film_generator_dim_mismatch(rng):
    with pytest.raises(ValueError, match="expects input of length"):
        generate_film(Tensor(np.ones(8)), Tensor(np.ones(5)), _nets().film_generators[0])


# -- class representations and classifier generator ----------------------------------

def test_class_rep_single_and_duplicate(rng):
    f = rng.standard_normal((1, 6))
    assert np.array_equal(class_representation(Tensor(f), [0], 0).data, f[0])
    two = np.vstack([f, f])
    assert np.array_equal(class_representation(Tensor(two), [1, 1], 1).data, f[0])


def test_class_rep_matches_mean_oracle(rng):
    feats = rng.standard_normal((9, 6))
    labels = np.array([0, 1, 2, 1, 0, 1, 2, 2, 1])
    for c in range(3):
        rows = [feats[i] for i in range(9) if labels[i] == c]
        expect = [sum(r[j] for r in rows) / len(rows) for j in range(6)]
        assert_close(class_representation(Tensor(feats), labels, c).data, expect, 1e-12)


def test_class_rep_empty_class():
    with pytest.raises(ValueError, match="class 2 has no context examples"):
        class_representation(Tensor(np.ones((2, 3))), [0, 1], 2)


def test_classifier_zeroed_final_layer_passes_z_through(rng):
    gen = _nets().classifier
    gen.w_fc3.weight.data = np.zeros_like(gen.w_fc3.weight.data)
    gen.w_fc3.bias.data = np.zeros_like(gen.w_fc3.bias.data)
    z = rng.standard_normal(6)
    w, _ = generate_classifier(Tensor(z), gen)
    assert np.array_equal(w.data, z)


def test_classifier_deterministic_and_matches_oracle(rng):
    gen = _nets(seed=5).classifier
    z = Tensor(rng.standard_normal(6))
    w1, b1 = generate_classifier(z, gen)
    w2, b2 = generate_classifier(z, gen)
    assert np.array_equal(w1.data, w2.data) and np.array_equal(b1.data, b2.data)

    def elu_lin(layer, h):
        return ops.elu(ops.add(ops.matmul(h, layer.weight), layer.bias))

    h = elu_lin(gen.w_fc2, elu_lin(gen.w_fc1, z))
    w_expect = ops.add(z, ops.add(ops.matmul(h, gen.w_fc3.weight), gen.w_fc3.bias))
    hb = elu_lin(gen.b_fc2, elu_lin(gen.b_fc1, z))
    b_expect = ops.add(ops.matmul(hb, gen.b_fc3.weight), gen.b_fc3.bias)
    assert_close(w1.data, w_expect.data, 1e-12)
    assert_close(b1.data, b_expect.data, 1e-12)
    assert b1.shape == (1,)


def test_classifier_dim_mismatch():
    with pytest.raises(ValueError, match="class representation must have length"):
        generate_classifier(Tensor(np.ones(5)), _nets().classifier)


# -- adapt -------------------------------------------------------------------------

def _context(rng, way=3, shots=(2, 1, 3)):
    y = np.concatenate([np.full(s, c) for c, s in enumerate(shots[:way])])
    return random_images(rng, y.size), y


@pytest.mark.parametrize("mode", ["ar", "no_ar", "no_film"])
def test_adapt_shapes_scale_with_way(rng, mode):
    model = tiny_model(mode, r_scale=0.5)
    for way in (2, 3):
        x, y = _context(rng, way)
        task = model.adapt(x, y)
        assert task.weights.shape == (way, TINY_ARCH.feature_dim)
        assert task.biases.shape == (way,) and task.way == way
        task.psi_f.validate(TINY_ARCH)


def test_no_film_mode_uses_identity(rng):
    x, y = _context(rng)
    task = tiny_model("no_film", r_scale=0.5).adapt(x, y)
    assert task.psi_f.is_identity() and task.global_rep is None


def test_no_ar_generators_see_zero_ar_input(rng):
    model = tiny_model("no_ar", r_scale=0.5)
    x, y = _context(rng)
    task = model.adapt(x, y)
    expect = model.nets.film_from_global(task.global_rep, model.extractor)
    for (g, b), (ge, be) in zip(task.psi_f.arrays(), expect.arrays()):
        assert np.array_equal(g, ge) and np.array_equal(b, be)


@pytest.mark.parametrize("mode", ["ar", "no_ar", "no_film"])
def test_adapt_permutation_invariant(mode):
    model = tiny_model(mode, seed=1, r_scale=0.5)
    rng = make_rng(11, "perm", mode)
    for _ in range(5):
        x, y = _context(rng)
        perm = rng.permutation(y.size)
        a, b = model.adapt(x, y), model.adapt(x[perm], y[perm])
        assert_close(a.weights.data, b.weights.data, 1e-10)
        assert_close(a.biases.data, b.biases.data, 1e-10)
        for (g1, b1), (g2, b2) in zip(a.psi_f.arrays(), b.psi_f.arrays()):
            assert_close(g1, g2, 1e-10)
            assert_close(b1, b2, 1e-10)


def test_adapt_relabel_swaps_columns(rng):
    model = tiny_model("ar", r_scale=0.5)
    x, y = _context(rng)
    swap = np.array([1, 0, 2])
    a, b = model.adapt(x, y), model.adapt(x, swap[y])
    assert np.array_equal(b.weights.data, a.weights.data[swap])
    assert np.array_equal(b.biases.data, a.biases.data[swap])
    for (g1, b1), (g2, b2) in zip(a.psi_f.arrays(), b.psi_f.arrays()):
        assert np.array_equal(g1, g2) and np.array_equal(b1, b2)


def test_zero_gates_match_no_film_predictions(rng):
    full = tiny_model("ar", seed=2)
    for pair in full.nets.pair_generators():
        pair.r_gamma.data = np.zeros_like(pair.r_gamma.data)
        pair.r_beta.data = np.zeros_like(pair.r_beta.data)
    x, y = _context(rng)
    t = random_images(rng, 4)
    a = full.adapt(x, y)
    assert a.psi_f.is_identity()
    b = full.nets.adapt(Tensor(x), y, full.extractor, "no_film")
    assert np.array_equal(full.predict(t, a), full.predict(t, b))


@pytest.mark.parametrize("y, match", [(np.array([0, 0, 0]), "at least 2 classes"),
                                      (np.array([0, 2, 2]), "class 1 has no context examples")])
def test_adapt_rejects_bad_context(rng, y, match):
    with pytest.raises(ValueError, match=match):
        tiny_model().adapt(random_images(rng, 3), y)


def test_adapt_rejects_unknown_mode(rng):
    x, y = _context(rng)
    model = tiny_model()
    with pytest.raises(ValueError, match="unknown adaptation mode"):
        model.nets.adapt(Tensor(x), y, model.extractor, "joint")


def test_target_images_never_reach_global_encoder(rng, monkeypatch):
    model = tiny_model("ar")
    seen = []
    original = model.nets.global_encoder.encode_instances

    def spy(x, *args, **kwargs):
        seen.append(x.shape[0])
        return original(x, *args, **kwargs)

    monkeypatch.setattr(model.nets.global_encoder, "encode_instances", spy)
    ep = Episode(*_context(rng), random_images(rng, 9), np.repeat([0, 1, 2], 3), 3)
    model.predict_episode(ep)
    assert seen == [6]


# -- penalty ------------------------------------------------------------------------

def test_penalty_is_weighted_sum_of_gate_norms():
    nets = tiny_model("ar", r_scale=0.3).nets
    expect = sum(float(np.sum(p.r_gamma.data ** 2) + np.sum(p.r_beta.data ** 2)) for p in nets.pair_generators())
    assert nets.penalty().item() == pytest.approx(TINY_ADAPT.penalty * expect, rel=1e-12)
    assert len(nets.pair_generators()) == 2 * len(TINY_ARCH.blocks())


def test_zero_penalty_weight_equals_plain_loss(rng):
    model = tiny_model("ar", r_scale=0.3)
    cfg = AdaptationConfig(**{**TINY_ADAPT.to_dict(), "penalty": 0.0})
    plain = AdaptationNetworks(TINY_ARCH, cfg)
    plain.load_state_dict(model.nets.state_dict())
    ep = Episode(*_context(rng), random_images(rng, 6), np.array([0, 1, 2, 0, 1, 2]), 3)
    task = plain.adapt(Tensor(ep.context_x), ep.context_y, model.extractor)
    nll = ops.cross_entropy(task_logits(ep.target_x, model.extractor, task), ep.target_y)
    assert episode_objective(ep, model.extractor, plain).item() == nll.item()


def test_adaptation_config_validation():
    with pytest.raises(ValueError, match="unknown adaptation mode"):
        AdaptationConfig(mode="fancy")
    with pytest.raises(ValueError, match="d_global"):
        AdaptationConfig(d_global=32, encoder_channels=(16, 64))
    assert AdaptationConfig.from_dict(AdaptationConfig().to_dict()) == AdaptationConfig()


@given(st.lists(st.integers(0, 2), min_size=3, max_size=9).filter(lambda v: set(v) == {0, 1, 2}),
       st.integers(0, 1000))
def test_class_reps_are_class_means_for_any_labelling(labels, seed):
    model = tiny_model("no_film")
    rng = np.random.default_rng(seed)
    x = random_images(rng, len(labels))
    task = model.adapt(x, labels)
    feats = model.extractor.extract(Tensor(x)).data
    for c in range(3):
        assert_close(task.class_reps.data[c], feats[np.asarray(labels) == c].mean(axis=0), 1e-12)

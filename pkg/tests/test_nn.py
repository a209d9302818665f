import json

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from distill_lab.distill import VanillaKdConfig, one_hot, prokd_phase1_loss, vanilla_kd_loss
from distill_lab.errors import (CheckpointError, CheckpointIntegrityError, CheckpointVersionError,
                                ContractError, DomainError, ShapeError)
from distill_lab.nn import (Activation, Checkpoint, MlpModel, MlpSpec, SgdConfig, SgdState,
                            accuracy, backward, forward, init_model, load_checkpoint,
                            save_checkpoint, sgd_step)
from distill_lab.numerics import cross_entropy, finite_difference_check, softmax

seeds = st.integers(min_value=0, max_value=2**32 - 1)

# Coordinates with |gradient| below this are compared absolutely.
GRADIENT_FLOOR = 1e-4

GRADIENT_SPECS = [
    MlpSpec(3, (5,), 4, Activation.TANH),
    MlpSpec(3, (4, 4), 3, Activation.TANH),
    MlpSpec(2, (), 3, Activation.TANH),
]


def _loss_and_grad(model, x, logits_loss):
    logits, cache = forward(model, x)
    loss, d_logits = logits_loss(logits)
    return loss, backward(model, cache, d_logits).flatten()


def _check_gradient(spec, seed, logits_loss):
    rng = np.random.default_rng(seed)
    model = init_model(spec, seed)
    model.biases = [rng.normal(scale=0.1, size=b.shape) for b in model.biases]
    x = rng.normal(size=(5, spec.input_dim))
    _, grad = _loss_and_grad(model, x, logits_loss)

    def loss_fn(flat):
        logits, _ = forward(model.with_flat(flat), x)
        return logits_loss(logits)[0]

    return finite_difference_check(loss_fn, model.flatten(), grad, floor=GRADIENT_FLOOR)


def test_parameter_count():
    spec = MlpSpec(3, (5,), 4)
    assert spec.parameter_count() == 3 * 5 + 5 + 5 * 4 + 4
    assert init_model(spec, 0).flatten().size == spec.parameter_count()
    assert MlpSpec(3, (), 1, use_bias=False).parameter_count() == 3


def test_spec_rejects_zero_width_and_classifier_check():
    with pytest.raises(DomainError):
        MlpSpec(3, (0,), 2)
    with pytest.raises(DomainError):
        MlpSpec(3, (4,), 1).require_classifier()


def test_spec_round_trip():
    spec = MlpSpec(3, (5, 2), 4, Activation.TANH, use_bias=False)
    assert MlpSpec.from_dict(spec.to_dict()) == spec


def test_init_is_deterministic():
    spec = MlpSpec(4, (8,), 3)
    a, b = init_model(spec, 7), init_model(spec, 7)
    assert a.parameter_bytes() == b.parameter_bytes()
    assert a.parameter_bytes() != init_model(spec, 8).parameter_bytes()
    assert all(np.all(bias == 0) for bias in a.biases)


def test_model_shape_validation():
    spec = MlpSpec(2, (3,), 2)
    with pytest.raises(ShapeError):
        MlpModel(spec, [np.zeros((2, 3)), np.zeros((2, 2))], [np.zeros(3), np.zeros(2)])


def test_forward_rejects_wrong_input_width():
    model = init_model(MlpSpec(3, (4,), 2), 0)
    with pytest.raises(ShapeError):
        forward(model, np.zeros((2, 5)))


@pytest.mark.parametrize("spec", GRADIENT_SPECS)
@given(seed=seeds)
@settings(max_examples=10)
def test_cross_entropy_backprop(spec, seed):
    labels = one_hot(np.arange(5) % spec.output_dim, spec.output_dim)
    error = _check_gradient(spec, seed, lambda z: cross_entropy(labels, softmax(z)))
    assert error < 1e-5


@pytest.mark.parametrize("spec", GRADIENT_SPECS)
@given(seed=seeds, alpha=st.sampled_from([0.0, 0.5, 1.0]),
       temperature=st.sampled_from([1.0, 2.0, 4.0]))
@settings(max_examples=10)
def test_vanilla_kd_backprop(spec, seed, alpha, temperature):
    rng = np.random.default_rng(seed + 1)
    labels = one_hot(np.arange(5) % spec.output_dim, spec.output_dim)
    z_t = rng.normal(size=(5, spec.output_dim))
    cfg = VanillaKdConfig(alpha, temperature)
    error = _check_gradient(spec, seed, lambda z: vanilla_kd_loss(labels, z, z_t, cfg))
    assert error < 1e-5


@pytest.mark.parametrize("spec", GRADIENT_SPECS)
@given(seed=seeds, temperature=st.integers(min_value=1, max_value=10))
@settings(max_examples=10)
def test_prokd_phase1_backprop(spec, seed, temperature):
    z_t = np.random.default_rng(seed + 2).normal(scale=3.0, size=(5, spec.output_dim))
    error = _check_gradient(spec, seed, lambda z: prokd_phase1_loss(z, z_t, temperature))
    assert error < 1e-5


def test_backward_rejects_stale_cache():
    model = init_model(MlpSpec(2, (3,), 2), 0)
    x = np.ones((4, 2))
    logits, cache = forward(model, x)
    grads = backward(model, cache, np.ones_like(logits))
    sgd_step(model, grads, SgdConfig(0.1))
    with pytest.raises(ContractError):
        backward(model, cache, np.ones_like(logits))
    with pytest.raises(ContractError):
        backward(init_model(model.spec, 0), cache, np.ones_like(logits))


def test_backward_shape_check():
    model = init_model(MlpSpec(2, (3,), 2), 0)
    _, cache = forward(model, np.ones((4, 2)))
    with pytest.raises(ShapeError):
        backward(model, cache, np.ones((4, 3)))


@pytest.mark.parametrize("momentum", [0.0, 0.5, 0.9])
def test_sgd_step_respects_clip(momentum):
    spec = MlpSpec(3, (4,), 2)
    model = init_model(spec, 0)
    cfg = SgdConfig(learning_rate=0.1, grad_clip=1.0, momentum=momentum)
    state = SgdState()
    x = np.random.default_rng(0).normal(size=(8, 3))
    for _ in range(5):
        before = model.flatten()
        logits, cache = forward(model, x)
        grads = backward(model, cache, 1000.0 * np.ones_like(logits)).scaled(1.0)
        sgd_step(model, grads, cfg, state)
        assert np.linalg.norm(model.flatten() - before) <= 0.1 * 1.0 + 1e-12


def test_sgd_step_plain_update():
    model = init_model(MlpSpec(2, (), 2), 0)
    before = model.flatten()
    logits, cache = forward(model, np.ones((1, 2)))
    grads = backward(model, cache, np.ones_like(logits))
    sgd_step(model, grads, SgdConfig(0.5))
    np.testing.assert_allclose(model.flatten(), before - 0.5 * grads.flatten())
    assert model.version == 1


@pytest.mark.parametrize("kwargs", [
    {"learning_rate": 0.0},
    {"learning_rate": 0.1, "grad_clip": 0.0},
    {"learning_rate": 0.1, "momentum": 1.0},
])
def test_sgd_config_validation(kwargs):
    with pytest.raises(DomainError):
        SgdConfig(**kwargs)


def test_accuracy_of_a_hand_built_separator():
    spec = MlpSpec(1, (), 2)
    model = MlpModel(spec, [np.array([[-1.0, 1.0]])], [np.zeros(2)])
    x = np.array([[-2.0], [-1.0], [1.0], [3.0]])
    assert accuracy(model, x, [0, 0, 1, 1]) == 1.0
    assert accuracy(model, x, [1, 1, 1, 1]) == 0.5


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        hidden = tuple(int(h) for h in rng.integers(1, 6, size=rng.integers(0, 3)))
        spec = MlpSpec(int(rng.integers(1, 5)), hidden, int(rng.integers(2, 5)),
                       Activation(rng.choice(['relu', 'tanh'])), bool(rng.integers(0, 2)))
        model = init_model(spec, i)
        model.weights = [w * 10.0 ** rng.integers(-5, 5) for w in model.weights]
        path = save_checkpoint(Checkpoint(i + 1, model, 0.5, i), tmp_path / f"ckpt_{i}.json")
        loaded = load_checkpoint(path)
        assert loaded.epoch == i + 1
        assert loaded.seed == i
        assert loaded.dev_metric == 0.5
        assert loaded.model.spec == spec
        assert loaded.model.parameter_bytes() == model.parameter_bytes()


@pytest.fixture
def saved_checkpoint(tmp_path):
    model = init_model(MlpSpec(2, (3,), 2), 0)
    return save_checkpoint(Checkpoint(1, model, None, 0), tmp_path / "ckpt.json")


def _rewrite(path, mutate):
    payload = json.loads(path.read_text())
    mutate(payload)
    path.write_text(json.dumps(payload))


def test_checkpoint_crc_detects_tampering(saved_checkpoint):
    _rewrite(saved_checkpoint, lambda p: p['weights'][0][0].__setitem__(0, 42.0))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(saved_checkpoint)


def test_checkpoint_rejects_wrong_magic(saved_checkpoint):
    _rewrite(saved_checkpoint, lambda p: p.__setitem__('magic', 'SOMETHING-ELSE'))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(saved_checkpoint)


def test_checkpoint_rejects_unknown_version(saved_checkpoint):
    _rewrite(saved_checkpoint, lambda p: p.__setitem__('version', 99))
    with pytest.raises(CheckpointVersionError) as excinfo:
        load_checkpoint(saved_checkpoint)
    assert excinfo.value.supported == (1,)
    assert "1" in str(excinfo.value)


def test_checkpoint_rejects_garbage(saved_checkpoint):
    saved_checkpoint.write_bytes(b"\x00\x01 not json")
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(saved_checkpoint)


def test_checkpoint_missing_file_names_path(tmp_path):
    with pytest.raises(CheckpointError) as excinfo:
        load_checkpoint(tmp_path / "absent.json")
    assert not isinstance(excinfo.value, CheckpointIntegrityError)
    assert "absent.json" in str(excinfo.value)


def test_checkpoint_epoch_must_be_positive():
    with pytest.raises(DomainError):
        Checkpoint(0, init_model(MlpSpec(1, (), 2), 0))

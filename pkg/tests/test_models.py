import numpy as np
import pytest

from rtta import fileformat
from rtta import tensor as T
from rtta.adaptation import OptimizerState, sgd_momentum_step
from rtta.models import (
    BatchNormState, ModelSpec, build_model, forward, fork_teacher_student, from_bytes,
    load_checkpoint, predict, save_checkpoint, to_bytes, watch_params,
)


def test_build_is_deterministic():
    spec = ModelSpec.cnn((4, 8), 5, (3, 8, 8))
    assert to_bytes(build_model(spec, 7)) == to_bytes(build_model(spec, 7))
    assert to_bytes(build_model(spec, 7)) != to_bytes(build_model(spec, 8))


def test_mlp_output_dimension():
    ckpt = build_model(ModelSpec.mlp((4, 8, 3)), 0)
    for n in (1, 2, 17):
        assert forward(ckpt, np.zeros((n, 4))).shape == (n, 3)


def test_fresh_bn_state():
    ckpt = build_model(ModelSpec.cnn((4,), 3, (3, 4, 4)), 0)
    for st in ckpt.bn.values():
        np.testing.assert_array_equal(st.running_mean, 0.0)
        np.testing.assert_array_equal(st.running_var, 1.0)


def test_single_class_spec():
    ckpt = build_model(ModelSpec.mlp((4, 3, 1)), 0)
    assert forward(ckpt, np.ones((5, 4))).shape == (5, 1)


@pytest.mark.parametrize("bad", [
    lambda: ModelSpec("mlp", (4, 3), 2, (4,)),
    lambda: ModelSpec.mlp((4, 0, 3)),
    lambda: ModelSpec.cnn((4,), 3, (3, 5, 5)),
    lambda: ModelSpec("resnet", (4,), 3, (3, 4, 4)),
])
def test_invalid_specs_rejected(bad):
    with pytest.raises(ValueError):
        bad()


def test_forward_shape_mismatch():
    ckpt = build_model(ModelSpec.mlp((4, 8, 3)), 0)
    with pytest.raises(T.ShapeError, match="forward"):
        forward(ckpt, np.zeros((2, 5)))


def test_frozen_eval_is_pure(tiny_mlp):
    x = np.random.default_rng(0).normal(size=(6, 4))
    before = to_bytes(tiny_mlp)
    a = forward(tiny_mlp, x).values
    b = forward(tiny_mlp, x).values
    np.testing.assert_array_equal(a, b)
    assert to_bytes(tiny_mlp) == before


@pytest.mark.parametrize("mode", ["tta_adaptive", "train"])
def test_adaptive_bn_ema(mode):
    # a width-2 MLP whose first layer is the identity exposes the batch to BN directly
    ckpt = build_model(ModelSpec.mlp((2, 2, 2)), 0, momentum=0.25)
    ckpt.params["fc0.weight"] = np.eye(2)
    ckpt.params["fc0.bias"] = np.zeros(2)
    x = np.array([[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]])
    st = ckpt.bn["bn0"]
    m0, v0 = st.running_mean.copy(), st.running_var.copy()
    forward(ckpt, x, mode)
    np.testing.assert_allclose(st.running_mean, 0.75 * m0 + 0.25 * x.mean(0), rtol=0, atol=1e-15)
    np.testing.assert_allclose(st.running_var, 0.75 * v0 + 0.25 * x.var(0, ddof=1), rtol=0, atol=1e-14)


def test_bn_state_validation():
    with pytest.raises(ValueError):
        BatchNormState(np.zeros(2), np.ones(2), momentum=0.0)
    with pytest.raises(ValueError):
        BatchNormState(np.zeros(2), np.ones(2), mode="bogus")


def test_fork_copies_are_identical_and_isolated(tiny_mlp):
    teacher, student = fork_teacher_student(tiny_mlp)
    x = np.random.default_rng(1).normal(size=(5, 4))
    np.testing.assert_array_equal(forward(teacher, x).values, forward(student, x).values)
    assert to_bytes(teacher) == to_bytes(student)

    frozen = to_bytes(teacher)
    with T.Tape() as tape:
        params = watch_params(tape, student)
        loss = T.sum(forward(student, x, "train", params))
    grads = tape.backprop(loss, params)
    student.params = sgd_momentum_step(student.params, grads, OptimizerState(), 0.1)
    student.bn["bn0"].running_mean[:] = 42.0
    assert to_bytes(teacher) == frozen


def test_predict_ties_go_to_lowest_index():
    ckpt = build_model(ModelSpec.mlp((2, 3)), 0)
    ckpt.params["fc0.weight"] = np.zeros((2, 3))
    ckpt.params["fc0.bias"] = np.array([0.0, 1.0, 1.0])
    assert list(predict(ckpt, np.ones((4, 2)))) == [1, 1, 1, 1]


def test_checkpoint_round_trip(tmp_path):
    ckpt = build_model(ModelSpec.cnn((4, 8), 5, (3, 8, 8)), 2)
    ckpt.bn["bn1"].running_var = np.random.default_rng(0).uniform(0.1, 3, 8)
    ckpt.provenance = "unit test"
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert to_bytes(back) == to_bytes(ckpt)
    assert back.spec == ckpt.spec and back.provenance == "unit test"
    for k in ckpt.params:
        assert back.params[k].tobytes() == ckpt.params[k].tobytes()


def test_checkpoint_header_and_corruption():
    data = to_bytes(build_model(ModelSpec.mlp((2, 3)), 0))
    assert data[:4] == b"RTTA"
    assert int.from_bytes(data[4:8], "little") == fileformat.VERSION
    with pytest.raises(fileformat.FormatError):
        from_bytes(b"XXXX" + data[4:])
    with pytest.raises(fileformat.FormatError):
        from_bytes(data[:-3])
    with pytest.raises(fileformat.FormatError):
        from_bytes(data + b"\0")

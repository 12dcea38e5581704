# tests/test_model.py
import numpy as np
import pytest

from core.contrastive import triplet_objective
from core.errors import ShapeError
from core.model import (EmbedderSpec, Nonlinearity, ParamVector, backward, embed, euclidean_distance, forward,
                        init_params)


def _numeric_gradient(fn, theta: ParamVector, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros(theta.size)
    for i in range(theta.size):
        up = theta.values.copy()
        down = theta.values.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (fn(theta.with_values(up)) - fn(theta.with_values(down))) / (2 * h)
    return grad


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


class TestEmbedderSpec:
    def test_param_count(self):
        spec = EmbedderSpec(input_dim=32, hidden_dims=(64,), output_dim=16)
        assert spec.param_count == 32 * 64 + 64 + 64 * 16 + 16

    def test_layout_is_contiguous(self):
        spec = EmbedderSpec(input_dim=5, hidden_dims=(4, 3), output_dim=2)
        offset = 0
        for slot in spec.layout():
            assert slot.offset == offset
            offset += slot.size
        assert offset == spec.param_count

    def test_hidden_dims_from_ini_text(self):
        assert EmbedderSpec(hidden_dims="8, 4").hidden_dims == (8, 4)

    def test_linear_model(self):
        spec = EmbedderSpec(input_dim=3, hidden_dims=(), output_dim=2)
        assert spec.param_count == 3 * 2 + 2


class TestForward:
    def test_descriptors_are_unit_length(self, small_embedder, small_theta):
        x = np.random.default_rng(0).normal(size=(10, 4))
        out = embed(small_theta, small_embedder, x)
        assert out.shape == (10, 3)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0)

    def test_single_vector_input(self, small_embedder, small_theta):
        batch = forward(small_theta, small_embedder, np.ones(4), ids=(42,))
        assert batch.matrix.shape == (1, 3)
        assert batch.ids == (42,)

    def test_zero_descriptor_does_not_divide_by_zero(self):
        spec = EmbedderSpec(input_dim=2, hidden_dims=(), output_dim=2)
        theta = ParamVector(np.zeros(spec.param_count), spec.layout())
        out = embed(theta, spec, np.ones((1, 2)))
        assert np.all(np.isfinite(out))

    def test_wrong_feature_width(self, small_embedder, small_theta):
        with pytest.raises(ShapeError):
            embed(small_theta, small_embedder, np.ones((2, 5)))

    def test_parameters_for_another_spec(self, small_theta):
        with pytest.raises(ShapeError):
            embed(small_theta, EmbedderSpec(input_dim=4, hidden_dims=(7,), output_dim=3), np.ones((1, 4)))


class TestParamVector:
    def test_init_is_deterministic_per_seed(self, small_embedder):
        a = init_params(small_embedder, 3)
        b = init_params(small_embedder, 3)
        c = init_params(small_embedder, 4)
        assert np.array_equal(a.values, b.values)
        assert a.checksum() == b.checksum()
        assert not np.array_equal(a.values, c.values)

    def test_biases_start_at_zero(self, small_theta):
        assert not small_theta.view("dense0.bias").any()
        assert small_theta.view("dense0.weight").shape == (6, 4)

    def test_values_are_read_only(self, small_theta):
        with pytest.raises(ValueError):
            small_theta.values[0] = 1.0

    def test_layout_size_mismatch(self, small_embedder):
        with pytest.raises(ShapeError):
            ParamVector(np.zeros(small_embedder.param_count + 1), small_embedder.layout())

    def test_with_values_shape_checked(self, small_theta):
        with pytest.raises(ShapeError):
            small_theta.with_values(np.zeros(3))

    def test_bytes_are_bit_exact(self, small_theta):
        restored = ParamVector.from_bytes(small_theta.to_bytes())
        assert restored.layout == small_theta.layout
        assert restored.values.tobytes() == small_theta.values.tobytes()

    def test_save_and_load(self, tmp_path, small_theta):
        path = tmp_path / "theta.pvec"
        small_theta.save(path)
        assert ParamVector.load(path).checksum() == small_theta.checksum()

    def test_bad_magic(self):
        with pytest.raises(ShapeError):
            ParamVector.from_bytes(b"NOPE" + bytes(16))

    def test_unknown_layer(self, small_theta):
        with pytest.raises(KeyError):
            small_theta.view("dense9.weight")


class TestGradients:
    @pytest.mark.parametrize("trial", range(20))
    def test_triplet_objective_matches_finite_differences(self, trial):
        rng = np.random.default_rng(100 + trial)
        spec = EmbedderSpec(input_dim=5, hidden_dims=(4,), output_dim=3, nonlinearity=Nonlinearity.TANH)
        theta = init_params(spec, seed=trial)
        x = rng.normal(size=(8, 5))
        triplet_rows = [(0, 1, (2, 3)), (4, 5, (6, 7))]
        # margin large enough that every hinge term stays active
        margin = 10.0

        loss, grad = triplet_objective(theta, spec, x, triplet_rows, margin)
        numeric = _numeric_gradient(lambda t: triplet_objective(t, spec, x, triplet_rows, margin)[0], theta)
        assert loss > 0
        assert _relative_error(grad.values, numeric) < 1e-5

    @pytest.mark.parametrize("nonlinearity", list(Nonlinearity))
    @pytest.mark.parametrize("normalize", [True, False])
    def test_backward_matches_finite_differences(self, nonlinearity, normalize):
        rng = np.random.default_rng(7)
        spec = EmbedderSpec(input_dim=4, hidden_dims=(5, 3), output_dim=3, nonlinearity=nonlinearity,
                            l2_normalize_output=normalize)
        theta = init_params(spec, seed=2)
        x = rng.normal(size=(3, 4))
        upstream = rng.normal(size=(3, 3))

        grad = backward(theta, spec, x, upstream)
        numeric = _numeric_gradient(lambda t: float(np.sum(upstream * embed(t, spec, x))), theta)
        assert _relative_error(grad.values, numeric) < 1e-5

    def test_upstream_shape_checked(self, small_embedder, small_theta):
        with pytest.raises(ShapeError):
            backward(small_theta, small_embedder, np.ones((2, 4)), np.ones((3, 3)))


def test_euclidean_distance():
    assert euclidean_distance([0.0, 3.0], [4.0, 0.0]) == 5.0
    with pytest.raises(ShapeError):
        euclidean_distance([0.0], [0.0, 1.0])

import numpy as np
import pytest

from fluseq import autodiff as ad
from fluseq import layers
from fluseq import params as params_util
from fluseq.errors import ConfigError, DimensionError, DomainError
from oracles import fd_gradients, max_rel_error


def zero_lstm(input_dim, hidden):
    return layers.LstmParams(
        w=np.zeros((4 * hidden, input_dim)),
        r=np.zeros((4 * hidden, hidden)),
        b=np.zeros(4 * hidden),
    )


def bound_constant(params):
    return params_util.bind(params, None)


class TestLstmCell:
    def test_zero_fixed_point(self):
        p = bound_constant(zero_lstm(2, 3))
        state = layers.lstm_cell_forward(
            ad.tensor([0.0, 0.0]), layers.zero_state(3), p
        )
        assert np.array_equal(state.y.data, np.zeros(3))
        assert np.array_equal(state.c.data, np.zeros(3))

    def test_unit_previous_cell(self):
        # zero params, c_prev = 1: gates are 0.5, block input 0,
        # so c = 0.5 and y = 0.5 * tanh(0.5)
        p = bound_constant(zero_lstm(2, 3))
        prev = layers.LstmState(y=ad.tensor(np.zeros(3)), c=ad.tensor(np.ones(3)))
        state = layers.lstm_cell_forward(ad.tensor([0.0, 0.0]), prev, p)
        assert np.allclose(state.c.data, 0.5, atol=1e-15)
        assert np.allclose(state.y.data, 0.5 * np.tanh(0.5), atol=1e-15)
        assert state.y.data[0] == pytest.approx(0.23105857863000487, abs=1e-12)

    def test_gradients_match_fd_for_every_parameter(self, rng):
        p = layers.init_lstm(rng, 3, 4)
        x = rng.uniform(-1, 1, size=3)
        prev_y = rng.uniform(-1, 1, size=4)
        prev_c = rng.uniform(-1, 1, size=4)

        def loss():
            bound = bound_constant(p)
            state = layers.lstm_cell_forward(
                ad.tensor(x), layers.LstmState(ad.tensor(prev_y), ad.tensor(prev_c)), bound
            )
            return ad.sum_all(state.y).item()

        fd = fd_gradients(loss, [p.w, p.r, p.b])
        tape = ad.Tape()
        bound = params_util.bind(p, tape)
        state = layers.lstm_cell_forward(
            ad.tensor(x), layers.LstmState(ad.tensor(prev_y), ad.tensor(prev_c)), bound
        )
        grads = tape.backward(ad.sum_all(state.y))
        for tensor_, want in zip((bound.w, bound.r, bound.b), fd):
            assert max_rel_error(grads[tensor_], want) < 1e-6

    def test_dimension_error_names_input(self):
        p = bound_constant(zero_lstm(2, 3))
        with pytest.raises(DimensionError, match="input"):
            layers.lstm_cell_forward(ad.tensor([1.0]), layers.zero_state(3), p)

    def test_gate_views_match_stacked_blocks(self, rng):
        p = layers.init_lstm(rng, 2, 3)
        assert np.array_equal(p.w_z, p.w[0:3])
        assert np.array_equal(p.w_in, p.w[3:6])
        assert np.array_equal(p.w_for, p.w[6:9])
        assert np.array_equal(p.w_out, p.w[9:12])
        assert np.array_equal(p.b_for, np.ones(3))  # forget bias offset

    def test_from_gates_names_offending_gate(self):
        good = {g: np.zeros((3, 2)) for g in ("z", "in", "for", "out")}
        rec = {g: np.zeros((3, 3)) for g in ("z", "in", "for", "out")}
        biases = {g: np.zeros(3) for g in ("z", "in", "for", "out")}
        bad_rec = dict(rec)
        bad_rec["for"] = np.zeros((2, 3))
        with pytest.raises(DimensionError, match="'for'"):
            layers.LstmParams.from_gates(
                input_weights=good, recurrent_weights=bad_rec, biases=biases
            )

    def test_gate_ranges(self, rng):
        for _ in range(25):
            p = layers.init_lstm(rng, 3, 5)
            x = rng.uniform(-3, 3, size=3)
            prev = layers.LstmState(
                ad.tensor(rng.uniform(-1, 1, size=5)),
                ad.tensor(rng.uniform(-2, 2, size=5)),
            )
            state = layers.lstm_cell_forward(ad.tensor(x), prev, bound_constant(p))
            assert np.all(np.abs(state.y.data) < 1.0)


class TestLstmSequence:
    def test_length_one_equals_single_cell(self, rng):
        p = layers.init_lstm(rng, 2, 3)
        x = rng.uniform(-1, 1, size=(1, 2))
        seq_y, seq_c = layers.lstm_sequence_forward(ad.tensor(x), bound_constant(p))
        cell = layers.lstm_cell_forward(
            ad.tensor(x[0]), layers.zero_state(3), bound_constant(p)
        )
        assert np.array_equal(seq_y.data[0], cell.y.data)
        assert np.array_equal(seq_c.data[0], cell.c.data)

    def test_zero_params_all_states_zero(self, rng):
        x = rng.uniform(-1, 1, size=(6, 2))
        seq_y, seq_c = layers.lstm_sequence_forward(
            ad.tensor(x), bound_constant(zero_lstm(2, 3))
        )
        assert np.array_equal(seq_y.data, np.zeros((6, 3)))

    def test_sequence_equals_iterated_cell_exactly(self, rng):
        p = bound_constant(layers.init_lstm(rng, 2, 4))
        x = rng.uniform(-1, 1, size=(8, 2))
        seq_y, seq_c = layers.lstm_sequence_forward(ad.tensor(x), p)
        state = layers.zero_state(4)
        for t in range(8):
            state = layers.lstm_cell_forward(ad.tensor(x[t]), state, p)
            assert np.array_equal(seq_y.data[t], state.y.data)
            assert np.array_equal(seq_c.data[t], state.c.data)

    def test_empty_sequence_rejected(self, rng):
        p = bound_constant(layers.init_lstm(rng, 2, 3))
        with pytest.raises(DomainError):
            layers.lstm_sequence_forward(ad.tensor(np.zeros((0, 2))), p)

    def test_bptt_through_ten_steps_matches_fd(self, rng):
        p = layers.init_lstm(rng, 2, 3)
        x = rng.uniform(-1, 1, size=(10, 2))

        def loss():
            seq_y, _ = layers.lstm_sequence_forward(ad.tensor(x), bound_constant(p))
            return ad.sum_all(seq_y).item()

        fd = fd_gradients(loss, [p.w, p.r, p.b], eps=1e-6)
        tape = ad.Tape()
        bound = params_util.bind(p, tape)
        seq_y, _ = layers.lstm_sequence_forward(ad.tensor(x), bound)
        grads = tape.backward(ad.sum_all(seq_y))
        for tensor_, want in zip((bound.w, bound.r, bound.b), fd):
            assert max_rel_error(grads[tensor_], want) < 1e-5

    def test_every_parameter_receives_gradient(self, rng):
        p = layers.init_lstm(rng, 2, 3)
        x = rng.uniform(-1, 1, size=(6, 2))
        tape = ad.Tape()
        bound = params_util.bind(p, tape)
        seq_y, _ = layers.lstm_sequence_forward(ad.tensor(x), bound)
        weights = ad.tensor(rng.uniform(0.5, 1.5, size=seq_y.data.shape))
        grads = tape.backward(ad.sum_all(ad.hadamard(seq_y, weights)))
        for name, tensor_ in params_util.iter_named_arrays(bound):
            magnitude = np.abs(grads[tensor_])
            assert magnitude.max() > 0, f"dead parameter block {name}"
            assert np.all(magnitude.sum(axis=-1) > 0), f"dead rows in {name}"


class TestBidirectionalStack:
    def test_paper_shape(self, rng):
        stack = [
            layers.BiLstmLayer(
                fwd=layers.init_lstm(rng, 2 if i == 0 else 64, 32),
                bwd=layers.init_lstm(rng, 2 if i == 0 else 64, 32),
            )
            for i in range(3)
        ]
        x = rng.uniform(0, 1, size=(10, 2))
        out, last_fwd, last_bwd = layers.bidirectional_stack_forward(
            ad.tensor(x), params_util.bind(stack, None)
        )
        assert out.data.shape == (10, 64)
        assert last_fwd.data.shape == (32,)
        assert last_bwd.data.shape == (32,)

    def test_single_layer_zero_params(self, rng):
        stack = [layers.BiLstmLayer(fwd=zero_lstm(2, 3), bwd=zero_lstm(2, 3))]
        x = rng.uniform(-1, 1, size=(5, 2))
        out, _, _ = layers.bidirectional_stack_forward(
            ad.tensor(x), params_util.bind(stack, None)
        )
        assert np.array_equal(out.data, np.zeros((5, 6)))

    def test_reversal_symmetry(self, rng):
        """Reversing the input and swapping direction params reverses the
        output rows exactly."""
        fwd = layers.init_lstm(rng, 2, 3)
        bwd = layers.init_lstm(rng, 2, 3)
        x = rng.uniform(-1, 1, size=(7, 2))
        out1, _, _ = layers.bidirectional_stack_forward(
            ad.tensor(x), params_util.bind([layers.BiLstmLayer(fwd, bwd)], None)
        )
        out2, _, _ = layers.bidirectional_stack_forward(
            ad.tensor(x[::-1].copy()),
            params_util.bind([layers.BiLstmLayer(bwd, fwd)], None),
        )
        # forward pass of the swapped run equals the reversed backward pass
        swapped = np.concatenate(
            [out2.data[::-1, 3:], out2.data[::-1, :3]], axis=1
        )
        assert np.array_equal(out1.data, swapped)

    def test_constant_input_not_constant_output(self, rng):
        stack = [layers.BiLstmLayer(layers.init_lstm(rng, 2, 3), layers.init_lstm(rng, 2, 3))]
        x = np.tile([0.3, 0.7], (6, 1))
        out, _, _ = layers.bidirectional_stack_forward(
            ad.tensor(x), params_util.bind(stack, None)
        )
        assert not np.allclose(out.data[0], out.data[3])

    def test_width_mismatch_is_config_error(self, rng):
        stack = [
            layers.BiLstmLayer(layers.init_lstm(rng, 2, 3), layers.init_lstm(rng, 2, 3)),
            layers.BiLstmLayer(layers.init_lstm(rng, 5, 3), layers.init_lstm(rng, 5, 3)),
        ]
        with pytest.raises(ConfigError, match="layer 1"):
            layers.bidirectional_stack_forward(
                ad.tensor(np.zeros((4, 2))), params_util.bind(stack, None)
            )


class TestDense:
    def test_identity_passthrough(self):
        p = bound_constant(
            layers.DenseParams(w=np.eye(3), b=np.zeros(3), activation="identity")
        )
        x = ad.tensor([1.0, -2.0, 3.0])
        assert np.array_equal(layers.dense_forward(x, p).data, x.data)

    def test_zero_weights_tanh(self):
        p = bound_constant(
            layers.DenseParams(w=np.zeros((2, 3)), b=np.zeros(2), activation="tanh")
        )
        out = layers.dense_forward(ad.tensor([1.0, 1.0, 1.0]), p)
        assert np.array_equal(out.data, np.zeros(2))

    def test_hand_case(self):
        p = bound_constant(
            layers.DenseParams(w=np.array([[1.0]]), b=np.array([1.0]), activation="tanh")
        )
        out = layers.dense_forward(ad.tensor([0.0]), p)
        assert out.data[0] == pytest.approx(np.tanh(1.0), abs=1e-15)
        assert out.data[0] == pytest.approx(0.7615941559557649, abs=1e-12)

    def test_unknown_activation_rejected(self):
        with pytest.raises(ConfigError):
            layers.DenseParams(w=np.eye(2), b=np.zeros(2), activation="relu")


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = ad.tensor(rng.uniform(-1, 1, size=20))
        out = layers.dropout_apply(x, 0.0, rng, training=True)
        assert np.array_equal(out.data, x.data)

    def test_inference_is_identity(self, rng):
        x = ad.tensor(rng.uniform(-1, 1, size=20))
        out = layers.dropout_apply(x, 0.5, rng, training=False)
        assert out is x

    def test_inverted_scaling_is_unbiased(self, rng):
        x = ad.tensor(np.ones(100_000))
        out = layers.dropout_apply(x, 0.2, rng, training=True)
        assert 0.99 <= out.data.mean() <= 1.01

    def test_zeroed_fraction_near_rate(self, rng):
        n, rate = 10_000, 0.2
        out = layers.dropout_apply(ad.tensor(np.ones(n)), rate, rng, training=True)
        zeroed = np.count_nonzero(out.data == 0) / n
        sigma = np.sqrt(rate * (1 - rate) / n)
        assert abs(zeroed - rate) <= 3 * sigma

    def test_invalid_rate_rejected(self, rng):
        with pytest.raises(DomainError):
            layers.dropout_apply(ad.tensor([1.0]), 1.0, rng, training=True)
        with pytest.raises(DomainError):
            layers.dropout_apply(ad.tensor([1.0]), -0.1, rng, training=True)

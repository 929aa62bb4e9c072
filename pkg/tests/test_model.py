import numpy as np
import pytest

from fluseq import autodiff as ad
from fluseq import data as data_mod
from fluseq import model
from fluseq import params as params_util
from fluseq import training
from fluseq.errors import (
    CheckpointCorruptError,
    CheckpointDimError,
    CheckpointVersionError,
    ConfigError,
    DomainError,
)
from fluseq.layers import LstmState
from oracles import fd_gradients, max_rel_error

SMALL = model.Architecture(
    feature_dim=2,
    encoder_layers=2,
    encoder_hidden=4,
    decoder_hidden=8,
    in_len=6,
    out_len=3,
    simple_hidden=5,
)


def small_params(seed=0, variant="seq2seq_attention"):
    return model.init_params(np.random.default_rng(seed), SMALL, variant)


def zeroed(params):
    for _, arr in params_util.iter_named_arrays(params):
        arr[...] = 0.0
    return params


class TestArchitecture:
    def test_paper_defaults(self):
        arch = model.Architecture()
        assert (arch.encoder_layers, arch.encoder_hidden) == (3, 32)
        assert arch.decoder_hidden == 64
        assert (arch.in_len, arch.out_len) == (10, 4)

    def test_decoder_width_tied_to_encoder(self):
        with pytest.raises(ConfigError, match="2\\*encoder_hidden"):
            model.Architecture(encoder_hidden=32, decoder_hidden=100).validate()

    def test_positive_dims_required(self):
        with pytest.raises(ConfigError):
            model.Architecture(in_len=0).validate()


class TestEncode:
    def test_paper_annotation_shape(self, rng):
        arch = model.Architecture()
        params = model.init_params(rng, arch, "seq2seq_attention")
        bound = model.bind(params, None)
        H, s0 = model.encode(ad.tensor(rng.uniform(0, 1, (10, 2))), bound)
        assert H.data.shape == (10, 64)
        assert s0.y.data.shape == (64,)
        assert np.array_equal(s0.c.data, np.zeros(64))

    def test_zero_params(self, rng):
        params = zeroed(small_params())
        bound = model.bind(params, None)
        H, s0 = model.encode(ad.tensor(rng.uniform(0, 1, (6, 2))), bound)
        assert np.array_equal(H.data, np.zeros((6, 8)))
        assert np.array_equal(s0.y.data, np.zeros(8))

    def test_feature_dim_mismatch(self, rng):
        bound = model.bind(small_params(), None)
        with pytest.raises(ConfigError):
            model.encode(ad.tensor(rng.uniform(0, 1, (6, 3))), bound)

    def test_first_layer_receives_gradient(self, rng):
        params = small_params()
        tape = ad.Tape()
        bound = model.bind(params, tape)
        H, _ = model.encode(ad.tensor(rng.uniform(0, 1, (6, 2))), bound)
        grads = tape.backward(ad.sum_all(H))
        g = grads[bound.encoder[0].fwd.w]
        assert np.abs(g).max() > 1e-8


class TestAttention:
    def test_zero_score_vector_gives_uniform(self, rng):
        params = small_params()
        params.attention.v[...] = 0.0
        bound = model.bind(params, None)
        H = ad.tensor(rng.uniform(-1, 1, (6, 8)))
        s = LstmState(ad.tensor(rng.uniform(-1, 1, 8)), ad.tensor(np.zeros(8)))
        alpha = model.attention_weights(s, H, bound)
        assert np.allclose(alpha.data, 1 / 6, atol=1e-15)

    def test_single_annotation(self, rng):
        bound = model.bind(small_params(), None)
        H = ad.tensor(rng.uniform(-1, 1, (1, 8)))
        s = LstmState(ad.tensor(rng.uniform(-1, 1, 8)), ad.tensor(np.zeros(8)))
        assert np.array_equal(model.attention_weights(s, H, bound).data, [1.0])

    def test_identical_rows_give_uniform(self, rng):
        bound = model.bind(small_params(), None)
        row = rng.uniform(-1, 1, 8)
        H = ad.tensor(np.tile(row, (5, 1)))
        s = LstmState(ad.tensor(rng.uniform(-1, 1, 8)), ad.tensor(np.zeros(8)))
        alpha = model.attention_weights(s, H, bound)
        assert np.allclose(alpha.data, 0.2, atol=1e-12)

    def test_context_one_hot_selects_row(self, rng):
        H = ad.tensor(rng.uniform(-1, 1, (4, 8)))
        alpha = ad.tensor([0.0, 0.0, 1.0, 0.0])
        assert np.array_equal(model.context_vector(alpha, H).data, H.data[2])

    def test_context_uniform_equal_rows(self, rng):
        row = rng.uniform(-1, 1, 8)
        H = ad.tensor(np.tile(row, (5, 1)))
        ctx = model.context_vector(ad.tensor(np.full(5, 0.2)), H).data
        assert np.allclose(ctx, row, atol=1e-15)

    def test_context_hand_case(self):
        ctx = model.context_vector(
            ad.tensor([0.25, 0.75]), ad.tensor([[0.0, 4.0], [4.0, 0.0]])
        )
        assert np.array_equal(ctx.data, [3.0, 1.0])


class TestDecodeStep:
    def test_zero_params_uniform_alpha_zero_output(self, rng):
        params = zeroed(small_params())
        bound = model.bind(params, None)
        H = ad.tensor(np.zeros((6, 8)))
        s = LstmState(ad.tensor(np.zeros(8)), ad.tensor(np.zeros(8)))
        pred, _, alpha = model.decode_step(ad.tensor([0.3]), s, H, bound)
        assert pred.data[0] == 0.0
        assert np.allclose(alpha.data, 1 / 6, atol=1e-15)

    def test_deterministic_in_inference(self, rng):
        bound = model.bind(small_params(3), None)
        H = ad.tensor(rng.uniform(-1, 1, (6, 8)))
        s = LstmState(ad.tensor(rng.uniform(-1, 1, 8)), ad.tensor(np.zeros(8)))
        first = model.decode_step(ad.tensor([0.5]), s, H, bound)
        second = model.decode_step(ad.tensor([0.5]), s, H, bound)
        assert np.array_equal(first[0].data, second[0].data)
        assert np.array_equal(first[2].data, second[2].data)

    def test_gradient_reaches_score_vector(self, rng):
        params = small_params(4)
        window = rng.uniform(0, 1, (6, 2))

        def loss():
            bound = model.bind(params, None)
            H, s0 = model.encode(ad.tensor(window), bound)
            pred, _, _ = model.decode_step(ad.tensor([0.5]), s0, H, bound)
            return ad.sum_all(pred).item()

        fd = fd_gradients(loss, [params.attention.v])[0]
        tape = ad.Tape()
        bound = model.bind(params, tape)
        H, s0 = model.encode(ad.tensor(window), bound)
        pred, _, _ = model.decode_step(ad.tensor([0.5]), s0, H, bound)
        grads = tape.backward(ad.sum_all(pred))
        got = grads[bound.attention.v]
        assert np.abs(got).max() > 0
        assert max_rel_error(got, fd) < 1e-5


class TestTeacherForcingSelect:
    def test_threshold_zero_always_model(self, rng):
        for _ in range(100):
            k = float(rng.uniform())
            assert model.teacher_forcing_select(k, 0.0, "model", "teacher") == "model"

    def test_threshold_one_always_teacher(self, rng):
        for _ in range(100):
            k = float(rng.uniform())
            if k < 1.0:
                assert (
                    model.teacher_forcing_select(k, 1.0, "model", "teacher")
                    == "teacher"
                )

    def test_teacher_fraction_concentrates(self):
        rng = np.random.default_rng(99)
        draws = rng.uniform(size=100_000)
        teacher = sum(
            model.teacher_forcing_select(k, 0.8, 0, 1) for k in draws
        )
        assert 0.795 <= teacher / draws.size <= 0.805

    def test_threshold_out_of_range(self):
        with pytest.raises(ConfigError):
            model.teacher_forcing_select(0.5, 1.5, 0, 1)


class TestForecast:
    def test_horizon_one_is_single_step(self, rng):
        params = small_params(5)
        window = rng.uniform(0, 1, (6, 2))
        fc = model.forecast(window, params, horizon=1)
        bound = model.bind(params, None)
        H, s0 = model.encode(ad.tensor(window), bound)
        pred, _, alpha = model.decode_step(ad.tensor([window[-1, 0]]), s0, H, bound)
        assert fc.values[0] == pred.data[0]
        assert np.array_equal(fc.attention_maps[0], alpha.data)

    def test_zero_params_zero_predictions(self, rng):
        params = zeroed(small_params())
        fc = model.forecast(rng.uniform(0, 1, (6, 2)), params, horizon=3)
        assert np.array_equal(fc.values, np.zeros(3))

    def test_attention_maps_normalized(self, rng):
        for trial in range(20):
            params = small_params(trial)
            fc = model.forecast(rng.uniform(0, 1, (6, 2)), params, horizon=3)
            assert fc.attention_maps.shape == (3, 6)
            assert np.all(fc.attention_maps >= 0)
            assert np.max(np.abs(fc.attention_maps.sum(axis=1) - 1)) < 1e-9

    def test_invalid_horizon(self, rng):
        with pytest.raises(DomainError):
            model.forecast(rng.uniform(0, 1, (6, 2)), small_params(), horizon=0)

    def test_plain_variant_has_no_maps(self, rng):
        params = small_params(6, variant="seq2seq")
        fc = model.forecast(rng.uniform(0, 1, (6, 2)), params, horizon=3)
        assert fc.attention_maps is None

    def test_inference_is_pure(self, rng):
        params = small_params(7)
        window = rng.uniform(0, 1, (6, 2))
        a = model.forecast(window, params, horizon=3)
        b = model.forecast(window, params, horizon=3)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.attention_maps, b.attention_maps)


class TestSimpleLstm:
    def test_zero_params_zeros(self, rng):
        params = zeroed(small_params(variant="simple_lstm"))
        out = model.simple_lstm_forecast(rng.uniform(0, 1, (6, 2)), params, horizon=3)
        assert np.array_equal(out, np.zeros(3))

    def test_horizon_one_is_readout_of_final_state(self, rng):
        params = small_params(8, variant="simple_lstm")
        window = rng.uniform(0, 1, (6, 2))
        out = model.simple_lstm_forecast(window, params, horizon=1)
        from fluseq.layers import dense_forward, lstm_sequence_forward

        bound = model.bind(params, None)
        seq_y, _ = lstm_sequence_forward(ad.tensor(window), bound.lstm)
        expected = dense_forward(ad.row(seq_y, 5), bound.readout)
        assert out[0] == expected.data[0]

    def test_overfits_constant_series(self):
        arch = model.Architecture(
            feature_dim=2, encoder_layers=1, encoder_hidden=4, decoder_hidden=8,
            in_len=6, out_len=3, simple_hidden=8,
        )
        params = model.init_params(np.random.default_rng(0), arch, "simple_lstm")
        window = np.full((6, 2), 0.4)
        sample = data_mod.WindowSample(
            input=window, target=np.full(3, 0.4), origin_week=""
        )
        config = training.TrainConfig(
            epochs=500, batch_size=4, dropout_rate=0.0, teacher_threshold=1.0,
            seed=1, validation_fraction=0.0, early_stop_patience=0,
        )
        best, history = training.train(params, [sample] * 4, config)
        preds = model.simple_lstm_forecast(window, best, horizon=3)
        assert float(np.mean((preds - 0.4) ** 2)) < 1e-4


class TestTeacherIndependence:
    def test_full_teacher_makes_step_one_gradient_independent_of_later_steps(
        self, rng
    ):
        """With the teacher always fed, the gradient of the first step's loss
        must not depend on whether later steps run."""
        params = small_params(9)
        window = rng.uniform(0, 1, (6, 2))
        target = rng.uniform(0, 1, 3)

        def step_one_grads(total_steps):
            tape = ad.Tape()
            bound = model.bind(params, tape)
            H, s0 = model.encode(ad.tensor(window), bound)
            preds, _ = model.decode_sequence(
                bound,
                H,
                s0,
                ad.tensor([window[-1, 0]]),
                total_steps,
                next_input=lambda idx, pred: ad.tensor([target[idx]]),
            )
            loss = training.mse_loss(preds[0], np.array([target[0]]))
            grads = tape.backward(loss)
            return {
                name: grads[t].copy()
                for name, t in params_util.iter_named_arrays(bound)
            }

        short = step_one_grads(1)
        full = step_one_grads(3)
        for name in short:
            assert np.array_equal(short[name], full[name]), name


class TestCheckpoint:
    def test_save_load_save_identical_bytes(self, tmp_path, rng):
        params = small_params(11)
        scaler = data_mod.ScalerParams(
            mins=np.array([0.1, 2.0]), maxs=np.array([5.0, 99.0])
        )
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        model.checkpoint_save(first, params, SMALL, scaler=scaler, config={"seed": 3})
        loaded = model.checkpoint_load(first)
        model.checkpoint_save(
            second, loaded.params, loaded.arch, scaler=loaded.scaler, config=loaded.config
        )
        assert first.read_bytes() == second.read_bytes()

    def test_roundtrip_forecast_bit_exact(self, tmp_path, rng):
        params = small_params(12)
        window = rng.uniform(0, 1, (6, 2))
        path = tmp_path / "m.ckpt"
        model.checkpoint_save(path, params, SMALL)
        loaded = model.checkpoint_load(path)
        assert np.array_equal(
            model.forecast(window, params, horizon=3).values,
            model.forecast(window, loaded.params, horizon=3).values,
        )

    def test_wrong_version_tag(self, tmp_path):
        path = tmp_path / "m.ckpt"
        model.checkpoint_save(path, small_params(), SMALL)
        payload = path.read_bytes()
        path.write_bytes(payload.replace(b"checkpoint v1", b"checkpoint v9", 1))
        with pytest.raises(CheckpointVersionError):
            model.checkpoint_load(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"something else entirely\n")
        with pytest.raises(CheckpointCorruptError):
            model.checkpoint_load(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.ckpt"
        model.checkpoint_save(path, small_params(), SMALL)
        payload = path.read_bytes()
        path.write_bytes(payload[:-16])
        with pytest.raises(CheckpointCorruptError):
            model.checkpoint_load(path)

    def test_scaler_and_config_roundtrip(self, tmp_path):
        scaler = data_mod.ScalerParams(
            mins=np.array([0.25, 1.5]), maxs=np.array([4.75, 88.0])
        )
        snapshot = {"train": {"seed": 7}, "note": "x"}
        path = tmp_path / "m.ckpt"
        model.checkpoint_save(path, small_params(), SMALL, scaler=scaler, config=snapshot)
        loaded = model.checkpoint_load(path)
        assert np.array_equal(loaded.scaler.mins, scaler.mins)
        assert np.array_equal(loaded.scaler.maxs, scaler.maxs)
        assert loaded.config == snapshot
        assert loaded.variant == "seq2seq_attention"

    def test_variant_roundtrip(self, tmp_path):
        for variant in model.VARIANTS:
            params = small_params(13, variant=variant)
            path = tmp_path / f"{variant}.ckpt"
            model.checkpoint_save(path, params, SMALL)
            assert model.checkpoint_load(path).variant == variant

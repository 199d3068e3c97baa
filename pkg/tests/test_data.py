import numpy as np
import pytest

from modules.data import (
    SeriesTensor,
    SplitSpec,
    SynthSpec,
    Tone,
    load_dataset,
    make_windows,
    parse_synth_spec,
    save_dataset,
    synth_generate,
)
from modules.errors import FormatError, InvalidConfig, ParseError


class TestCsv:
    def test_nodes_are_columns(self, tmp_path):
        path = tmp_path / "tiny.csv"
        path.write_text("a,b\n1,2\n3,4\n5,6\n", encoding="utf-8")
        series = load_dataset(path, "csv")
        assert series.data.shape == (2, 3, 1)
        np.testing.assert_array_equal(series.data[:, :, 0], [[1, 3, 5], [2, 4, 6]])
        assert series.node_ids == ["a", "b"]
        assert series.missing_mask is None

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ParseError):
            load_dataset(path, "csv")

    def test_non_numeric_cell_reports_position(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n3,x\n", encoding="utf-8")
        with pytest.raises(ParseError) as info:
            load_dataset(path, "csv")
        assert info.value.row == 3
        assert info.value.column == 2

    def test_blank_cells_become_mask(self, tmp_path):
        path = tmp_path / "gaps.csv"
        path.write_text("a,b\n1,2\n,4\n5,6\n", encoding="utf-8")
        series = load_dataset(path, "csv")
        assert series.missing_mask is not None
        assert not series.missing_mask[0, 1, 0]
        assert np.isnan(series.target()[0, 1])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope.csv", "csv")


class TestBinary:
    def test_round_trip_is_bit_identical(self, tmp_path, rng):
        data = rng.standard_normal((4, 30, 2)).astype(np.float32)
        mask = rng.random((4, 30, 2)) > 0.1
        path = tmp_path / "series.sttc"
        save_dataset(SeriesTensor(data, missing_mask=mask), path, "binary")
        loaded = load_dataset(path, "binary")
        assert loaded.data.tobytes() == data.tobytes()
        np.testing.assert_array_equal(loaded.missing_mask, mask)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sttc"
        path.write_bytes(b"NOTSTT" + bytes(16))
        with pytest.raises(FormatError):
            load_dataset(path, "binary")

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "short.sttc"
        save_dataset(SeriesTensor(rng.standard_normal((2, 5)).astype(np.float32)), path, "binary")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_dataset(path, "binary")


class TestSplitsAndWindows:
    def test_floor_bounds(self):
        assert SplitSpec((0.6, 0.2, 0.2)).bounds(101) == [(0, 60), (60, 80), (80, 101)]

    def test_ratios_must_sum_to_one(self):
        with pytest.raises(InvalidConfig):
            SplitSpec((0.5, 0.2, 0.2))

    def test_window_count(self):
        series = SeriesTensor(np.zeros((2, 100)))
        assert len(make_windows(series, 12, 12, (0, 100))) == 77
        assert len(make_windows(series, 12, 12, (0, 24))) == 1

    def test_segment_too_short(self):
        with pytest.raises(InvalidConfig):
            make_windows(SeriesTensor(np.zeros((1, 30))), 12, 12, (0, 23))

    def test_windows_stay_inside_segment_with_absolute_origins(self):
        series = SeriesTensor(np.arange(200, dtype=float)[None, :])
        windows = make_windows(series, 12, 12, (50, 100))
        assert windows[0].origin_index == 50
        assert windows[-1].origin_index == 100 - 24
        np.testing.assert_array_equal(windows[0].input[0, :, 0], np.arange(50, 62))
        np.testing.assert_array_equal(windows[0].label[0], np.arange(62, 74))

    def test_label_of_o_ends_where_input_of_o_plus_horizon_ends(self):
        windows = make_windows(SeriesTensor(np.zeros((1, 100))), 12, 12, (0, 100))
        for o in range(len(windows) - 12):
            assert windows[o].label_last_index == windows[o + 12].input_last_index

    def test_masked_entries_become_nan(self):
        mask = np.ones((1, 30, 1), dtype=bool)
        mask[0, 14, 0] = False
        windows = make_windows(SeriesTensor(np.ones((1, 30)), missing_mask=mask), 12, 12, (0, 30))
        assert np.isnan(windows[0].label[0, 2])
        assert not windows[0].label_mask[0, 2]


class TestSynth:
    def test_aliased_tone(self):
        with pytest.raises(InvalidConfig):
            SynthSpec(n_nodes=1, length=10, tones=[Tone(0.7, 1.0)])

    def test_stationary_segments_match(self):
        spec = SynthSpec(n_nodes=2, length=480, tones=[Tone(1 / 12, 3.0, 0.2)])
        values = synth_generate(spec).target()
        np.testing.assert_allclose(values[:, 0:12], values[:, 360:372], atol=1e-9)

    def test_fixed_seed_is_bit_identical(self):
        spec = SynthSpec(n_nodes=3, length=200, tones=[Tone(0.1, 1.0)], noise_std=0.5, node_spread=0.2)
        assert synth_generate(spec, 7).data.tobytes() == synth_generate(spec, 7).data.tobytes()
        assert synth_generate(spec, 7).data.tobytes() != synth_generate(spec, 8).data.tobytes()

    def test_amplitude_grows_over_test_segment(self):
        spec = SynthSpec(n_nodes=1, length=1200, tones=[Tone(1 / 12, 5.0)], amp_drift_rate=1 / 240)
        values = synth_generate(spec).target()[0]
        test_start = SplitSpec(spec.split).bounds(spec.length)[2][0]
        amplitudes = [
            np.abs(np.fft.rfft(values[start:start + 12]))[1]
            for start in range(test_start, spec.length - 12, 12)
        ]
        assert np.all(np.diff(amplitudes) > 0)
        assert amplitudes[-1] / amplitudes[0] > 1.8
        train_amp = np.abs(np.fft.rfft(values[0:12]))[1]
        assert train_amp == pytest.approx(30.0, rel=1e-9)

    def test_phase_advances_over_test_segment_only(self):
        spec = SynthSpec(n_nodes=1, length=1200, tones=[Tone(1 / 12, 5.0)], phase_drift_rate=0.01)
        values = synth_generate(spec).target()[0]
        train, val, test = SplitSpec(spec.split).bounds(spec.length)

        def tone_bin(start):
            return np.fft.rfft(values[start:start + 12])[1]

        stationary = [tone_bin(start) for start in range(train[0], val[1] - 11, 12)]
        np.testing.assert_allclose(stationary, stationary[0], atol=1e-9)

        phases = np.unwrap([np.angle(tone_bin(start)) for start in range(test[0], spec.length - 11, 12)])
        np.testing.assert_allclose(np.diff(phases), 0.12, atol=0.02)
        assert phases[-1] - phases[0] > 1.5
        amplitudes = [np.abs(tone_bin(start)) for start in range(test[0], spec.length - 11, 12)]
        np.testing.assert_allclose(amplitudes, 30.0, rtol=0.02)

    def test_parse_bundled_spec(self, root_dir):
        spec = parse_synth_spec(root_dir / "config" / "synth" / "drift-amp.spec")
        assert spec.n_nodes == 8
        assert spec.length == 2400
        assert [t.freq for t in spec.tones] == pytest.approx([1 / 12, 1 / 6])
        # amplitude doubles across the 480-step test segment
        assert spec.amp_drift_rate * 480 == pytest.approx(1.0, rel=1e-6)

    def test_parse_rejects_unknown_key(self, tmp_path):
        path = tmp_path / "bad.spec"
        path.write_text("n_nodes = 1\nlength = 10\ntones = 0.1:1\nwobble = 3\n", encoding="utf-8")
        with pytest.raises(InvalidConfig):
            parse_synth_spec(path)

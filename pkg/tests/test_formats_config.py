import numpy as np
import pytest

from eventsve.config import PipelineConfig, config_from_dict, dump_config, load_config
from eventsve.errors import ConfigError, InputError, ParseError
from eventsve.formats import (read_json, read_measurements, read_pfm, read_png, save_mosaic, load_mosaic,
                              write_json, write_measurements, write_pfm, write_png8, write_png16)
from eventsve.stereo import ParticleMeasurement
from eventsve.sve import RawSveMosaic


def test_pfm_round_trip(tmp_path):
    img = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "a.pfm", img)
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)


def test_pfm_rows_stored_bottom_up(tmp_path):
    write_pfm(tmp_path / "a.pfm", np.array([[1.0], [2.0]]))
    payload = (tmp_path / "a.pfm").read_bytes().split(b"-1.0\n", 1)[1]
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), [2.0, 1.0])


def test_pfm_truncated(tmp_path):
    write_pfm(tmp_path / "a.pfm", np.ones((4, 4)))
    data = (tmp_path / "a.pfm").read_bytes()
    (tmp_path / "b.pfm").write_bytes(data[:-3])
    with pytest.raises(ParseError):
        read_pfm(tmp_path / "b.pfm")


def test_png_round_trips(tmp_path):
    rng = np.random.default_rng(1)
    a16 = rng.integers(0, 65536, (6, 9)).astype(float)
    a8 = rng.integers(0, 256, (6, 9)).astype(float)
    write_png16(tmp_path / "a.png", a16)
    write_png8(tmp_path / "b.png", a8)
    np.testing.assert_array_equal(read_png(tmp_path / "a.png"), a16)
    np.testing.assert_array_equal(read_png(tmp_path / "b.png"), a8)
    with pytest.raises(InputError):
        write_png8(tmp_path / "c.png", a16)


def test_mosaic_round_trip(tmp_path):
    taus = (1.0, 0.25, 0.0625, 0.015625)
    m = RawSveMosaic(np.arange(48.0).reshape(6, 8) * 1000, taus, 16)
    save_mosaic(tmp_path / "m.png", m)
    np.testing.assert_array_equal(load_mosaic(tmp_path / "m.png", taus).values, m.values)


def test_missing_files_are_input_errors(tmp_path):
    for reader in (read_pfm, read_png, read_json, read_measurements):
        with pytest.raises(InputError):
            reader(tmp_path / "absent")


def test_json_is_deterministic(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, 2]})
    write_json(tmp_path / "b.json", {"a": [1.5, 2], "b": 1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert read_json(tmp_path / "a.json") == {"a": [1.5, 2], "b": 1}


def test_bad_json_reports_offset(tmp_path):
    (tmp_path / "a.json").write_text('{"a": }')
    with pytest.raises(ParseError) as exc:
        read_json(tmp_path / "a.json")
    assert exc.value.offset == 6


def test_measurement_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    ms = [ParticleMeasurement(t_us=float(k), centroid_w=rng.normal(size=3), dh=rng.normal(), D=(1.0, 1.0),
                              S_f=(0.1, 0.1), S=(1.0, 1.0), re_left=rng.random(), re_right=rng.random(),
                              r_e=rng.random(), d_e=1.0, reprojection_error=rng.random()) for k in range(5)]
    write_measurements(tmp_path / "m.csv", ms)
    table = read_measurements(tmp_path / "m.csv")
    np.testing.assert_array_equal(table["x_mm"], [m.centroid_w[0] for m in ms])
    np.testing.assert_array_equal(table["re_mm"], [m.r_e for m in ms])
    np.testing.assert_array_equal(table["dh_mm"], [m.dh for m in ms])


def test_measurement_header_checked(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ParseError):
        read_measurements(tmp_path / "m.csv")


# -- config ------------------------------------------------------------------

def test_default_config_valid():
    assert load_config() == PipelineConfig().validate()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"fusion": {"sigma": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"extra": 1})


@pytest.mark.parametrize("data", [
    {"smoke": {"weights": [0.5, 0.5, 0.5, 0.5]}},
    {"smoke": {"M": 1}},
    {"sve": {"transmittances": [1.0, 0.5, 0.25]}},
    {"stereo": {"scale_mode": "guess"}},
    {"simulate": {"duration_us": 1500.0}},
    {"inputs": {"column_left": [[1, 2], [3, 4]]}},
])
def test_bounds_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data).validate()


def test_named_input_must_exist(tmp_path):
    with pytest.raises(InputError):
        config_from_dict({"inputs": {"events_left": "nope.bin"}}, base_dir=tmp_path).validate()


def test_dump_and_reload(tmp_path):
    cfg = config_from_dict({"seed": 7, "smoke": {"M": 3}}).validate()
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.config_hash() == cfg.config_hash()
    assert back.smoke.M == 3 and back.seed == 7


def test_relative_inputs_resolve_against_config_dir(tmp_path):
    (tmp_path / "ev.bin").write_bytes(b"")
    (tmp_path / "c.yaml").write_text("inputs:\n  events_left: ev.bin\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.resolve(cfg.inputs.events_left) == tmp_path / "ev.bin"

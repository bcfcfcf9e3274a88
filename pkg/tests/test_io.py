import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from bvseg import io
from bvseg.model import Hyperparams, SceneSpec
from bvseg.pipeline import FitConfig
from bvseg.var_loss import LossBreakdown


# --------------------------------------------------------------------------
# configuration


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("")
    cfg = io.parse_config(p)
    assert cfg.hyper == Hyperparams() and cfg.fit == FitConfig()
    assert cfg.hyper.lam == 100.0
    assert io.parse_config().hyper.lam == 100.0


def test_precedence_flag_over_file_over_default(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("lambda = 0\nphi_rho = 3.5\n")
    cfg = io.parse_config(p, {"lambda": "5"})
    assert cfg.hyper.lam == 5.0
    assert cfg.hyper.phi_rho == 3.5
    assert cfg.hyper.phi_upsilon == 2.0


def test_comments_and_blank_lines(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# header\n\nseed = 4   # trailing\n  K = 3\n")
    cfg = io.parse_config(p)
    assert (cfg.fit.seed, cfg.hyper.K) == (4, 3)


def test_constraint_error_names_the_field():
    with pytest.raises(io.ConfigError, match="constraint.*gamma_rho"):
        io.build_config({"gamma_rho": "-1"})
    with pytest.raises(io.ConfigError, match="constraint"):
        io.build_config({"lambda": "-0.5"})


def test_unknown_keys_listed():
    with pytest.raises(io.ConfigError, match="bogus, zeta"):
        io.build_config({"zeta": "1", "bogus": "2", "K": "2"})


def test_malformed_line_reports_number(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("K = 2\n# ok\nthis is not an assignment\n")
    with pytest.raises(io.ConfigError, match=r"c\.txt:3: malformed"):
        io.parse_config(p)
    with pytest.raises(io.ConfigError, match=":1:"):
        io.parse_assignments("lambda =\n")


def test_unparseable_value():
    with pytest.raises(io.ConfigError, match="K"):
        io.build_config({"K": "two"})
    with pytest.raises(io.ConfigError):
        io.build_config({"supervised": "maybe"})


def test_bool_spellings():
    assert io.build_config({"supervised": "yes"}).fit.supervised is True
    assert io.build_config({"exact_rho_expectation": "false"}).fit.exact_rho_expectation is False


def test_dump_parse_round_trip_defaults():
    cfg = io.RunConfig()
    assert io.build_config(io.parse_assignments(io.dump_config(cfg))) == cfg


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(0, 1e3), st.integers(1, 9), st.integers(0, 2 ** 31),
       st.floats(1e-6, 1.0), st.booleans(), st.sampled_from(["sum", "mean"]))
def test_dump_parse_round_trip(phi, lam, K, seed, lr, sup, red):
    cfg = io.build_config({"phi_rho": repr(phi), "lambda": repr(lam), "K": str(K),
                           "seed": str(seed), "learning_rate": repr(lr),
                           "supervised": io.format_value(sup), "ce_reduction": red})
    again = io.build_config(io.parse_assignments(io.dump_config(cfg)))
    assert again == cfg
    assert io.dump_config(again) == io.dump_config(cfg)


def test_every_field_has_a_key():
    assert set(io.CONFIG_KEYS) >= {"lambda", "K", "seed", "max_sweeps", "gamma_omega"}
    assert "lam" not in io.CONFIG_KEYS
    assert len(io.RunConfig().as_dict()) == len(io.CONFIG_KEYS)


def test_scene_spec_parsing():
    assert io.parse_scene_spec("") == SceneSpec()
    spec = io.parse_scene_spec("K = 3\nnoise_std = 0\n")
    assert spec.K == 3 and spec.noise_std == 0.0 and len(spec.levels) == 3
    spec = io.parse_scene_spec("K = 2\nlevels = 0.1, 0.9\n")
    assert spec.levels == (0.1, 0.9)
    with pytest.raises(io.ConfigError, match="unknown scene"):
        io.parse_scene_spec("colour = red")
    with pytest.raises(io.ConfigError, match="constraint"):
        io.parse_scene_spec("K = 3\nlevels = 0, 1\n")


# --------------------------------------------------------------------------
# raw maps


def test_raw_length_3x2():
    data = io.raw_to_bytes(np.zeros((2, 3)))
    assert len(data) == 4 + 8 + 24 == 36
    assert data[:4] == b"BSG1"
    assert struct.unpack("<II", data[4:12]) == (3, 2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(width=32, allow_nan=False)))
def test_raw_round_trip_bit_identical(a):
    back = io.raw_from_bytes(io.raw_to_bytes(a))
    assert back.dtype == np.float32
    assert back.tobytes() == a.astype("<f4").tobytes()


def test_raw_file_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    io.write_map(tmp_path / "a.bsg", a)
    np.testing.assert_array_equal(io.read_raw(tmp_path / "a.bsg"), a)
    np.testing.assert_array_equal(io.read_image(tmp_path / "a.bsg").data, a)


def test_raw_errors(tmp_path):
    data = io.raw_to_bytes(np.ones((2, 2)))
    with pytest.raises(io.FormatError, match="magic"):
        io.raw_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(io.FormatError, match="truncated"):
        io.raw_from_bytes(data[:7])
    with pytest.raises(io.FormatError, match="bytes"):
        io.raw_from_bytes(data[:-1])
    p = tmp_path / "bad.bsg"
    p.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(io.FormatError, match="magic"):
        io.read_image(p)
    with pytest.raises(ValueError):
        io.raw_to_bytes(np.zeros(3))


# --------------------------------------------------------------------------
# PNG


def test_png8_scaling(tmp_path):
    p = tmp_path / "a.png"
    Image.fromarray(np.array([[0, 255], [51, 102]], np.uint8)).save(p)
    g = io.read_image(p).data
    assert g[0, 0] == 0.0 and g[0, 1] == 1.0
    assert g[1, 0] == pytest.approx(0.2, abs=1e-15)


def test_png16_read(tmp_path):
    p = tmp_path / "a.png"
    Image.fromarray(np.array([[0, 65535], [32768, 1]], np.uint16)).save(p)
    g = io.read_image(p).data
    assert (g[0, 0], g[0, 1]) == (0.0, 1.0)
    assert g[1, 1] == pytest.approx(1 / 65535, rel=1e-15)


@pytest.mark.parametrize("mode", ["RGB", "RGBA", "LA"])
def test_non_grayscale_rejected(tmp_path, mode):
    p = tmp_path / "c.png"
    Image.new(mode, (3, 3)).save(p)
    with pytest.raises(io.FormatError, match="grayscale"):
        io.read_image(p)


def test_not_an_image(tmp_path):
    p = tmp_path / "x.png"
    p.write_bytes(b"hello world")
    with pytest.raises(io.FormatError):
        io.read_image(p)


def test_png16_map_and_sidecar(tmp_path):
    a = np.linspace(-2.0, 3.0, 12).reshape(3, 4)
    p = tmp_path / "m.png"
    io.write_map(p, a, "png16")
    scale = io.parse_assignments((tmp_path / "m.png.scale").read_text())
    lo, hi = float(scale["min"]), float(scale["max"])
    assert (lo, hi) == (-2.0, 3.0)
    back = io.read_image(p).data * (hi - lo) + lo
    np.testing.assert_allclose(back, a, atol=(hi - lo) / 65535)
    io.write_map(tmp_path / "c.png", np.full((2, 2), 4.0), "png16")
    assert np.all(io.read_image(tmp_path / "c.png").data == 0.0)
    with pytest.raises(ValueError):
        io.write_map(p, a, "jpeg")


def test_labels_round_trip(tmp_path):
    labels = np.random.default_rng(0).integers(0, 4, (6, 5))
    p = tmp_path / "l.png"
    io.write_labels(p, labels)
    np.testing.assert_array_equal(io.read_labels(p, K=4), labels)
    with pytest.raises(io.FormatError, match="out of range"):
        io.read_labels(p, K=2)
    with pytest.raises(ValueError):
        io.write_labels(p, np.full((2, 2), 300))
    Image.fromarray(np.zeros((2, 2), np.uint16)).save(tmp_path / "w.png")
    with pytest.raises(io.FormatError, match="8-bit"):
        io.read_labels(tmp_path / "w.png")


# --------------------------------------------------------------------------
# metrics


def _breakdown(v):
    return LossBreakdown(v, 2 * v, 3 * v, 4 * v, 5 * v, 6 * v, 7 * v, 0.0, 100.0)


def test_metrics_nine_significant_digits():
    hist = [_breakdown(1.0), _breakdown(math.pi)]
    text = io.metrics_json({"losses": io.loss_summary(hist)})
    data = json.loads(text)
    assert data["losses"]["sweeps"] == 2
    assert data["losses"]["final"]["L_y"] == 3.14159265
    assert data["losses"]["min_total"] == pytest.approx(100 * 28.0)
    assert set(data["losses"]["final"]) >= {"L_y", "L_ce", "total"}


def test_metrics_nonfinite_is_text():
    assert json.loads(io.metrics_json({"a": math.inf, "b": [1.0 / 3]})) == {"a": "inf", "b": [0.333333333]}

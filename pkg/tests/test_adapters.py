from pathlib import Path

import numpy as np
import pytest

from heatformant.adapters import load_broad_class_map, read_hillenbrand_table, read_timit_phn, read_vtr_fb

FIXTURES = Path(__file__).parent / "fixtures"


def test_broad_class_map():
    m = load_broad_class_map()
    assert m["jh"] == m["ch"] == "affricate"
    assert m["iy"] == "vowel" and m["n"] == "nasal" and m["s"] == "fricative"
    assert m["h#"] == "silence" and m["bcl"] == "stop" and m["w"] == "semivowel"
    assert set(m.values()) <= {"vowel", "semivowel", "nasal", "fricative", "affricate", "stop", "silence"}


def test_vtr_fb():
    tr = read_vtr_fb(FIXTURES / "sample.fb")
    assert tr.values.shape == (3, 3)
    np.testing.assert_allclose(tr.values[0], [500.0, 1500.0, 2500.0])
    np.testing.assert_allclose(tr.values[1], [520.0, 1480.0, 2510.0], atol=1e-3)
    assert tr.valid[2].tolist() == [False, True, True]


def test_vtr_fb_truncated(tmp_path):
    np.zeros(12, "<f4").tofile(tmp_path / "bad.fb")
    with pytest.raises(ValueError, match="whole number"):
        read_vtr_fb(tmp_path / "bad.fb")


def test_hillenbrand_table():
    recs = read_hillenbrand_table(FIXTURES / "vowdata_sample.dat")
    assert [r.group for r in recs] == ["men", "women", "children"]
    assert [r.vowel for r in recs] == ["ae", "iy", "uw"]
    assert recs[0].steady == (663.0, 2012.0, 2659.0)
    assert recs[0].points["50"] == (660.0, 2010.0, 2660.0)
    # 0 means "not measured".
    assert recs[1].steady[2] is None and recs[1].points["50"][2] is None


def test_hillenbrand_bad_line(tmp_path):
    (tmp_path / "v.dat").write_text("m01ae 1 2 3\n")
    with pytest.raises(ValueError, match=":1:"):
        read_hillenbrand_table(tmp_path / "v.dat")


def test_timit_phn():
    seg = read_timit_phn(FIXTURES / "sample.phn", num_frames=40)
    assert seg.intervals == (
        (0, 10, "silence"),
        (10, 15, "stop"),
        (15, 25, "vowel"),
        (25, 30, "nasal"),
        (30, 40, "silence"),
    )


def test_timit_unknown_phone(tmp_path):
    (tmp_path / "x.phn").write_text("0 160 zz\n")
    with pytest.raises(ValueError, match="unknown phone"):
        read_timit_phn(tmp_path / "x.phn", 5)

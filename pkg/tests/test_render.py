import numpy as np
import pytest

from seaseg.raster import IGNORE
from seaseg.render import IGNORE_COLOR, PALETTES, colorize, load_palette, parse_palette, read_ppm, render_map


def test_two_by_two_exact_colors(tmp_path):
    raster = np.array([[0, 1], [1, IGNORE]], np.uint8)
    data = render_map(raster, PALETTES["ice_water"], tmp_path / "m.ppm")
    assert data.startswith(b"P6\n2 2\n255\n")
    img = read_ppm(tmp_path / "m.ppm")
    assert img.shape == (2, 2, 3)
    assert tuple(img[0, 0]) == (16, 52, 140)
    assert tuple(img[0, 1]) == tuple(img[1, 0]) == (235, 238, 245)
    assert tuple(img[1, 1]) == IGNORE_COLOR == (96, 96, 96)


def test_rerender_bytewise_identical(tmp_path):
    raster = np.random.default_rng(0).integers(0, 6, (17, 23)).astype(np.uint8)
    a = render_map(raster, PALETTES["sod"], tmp_path / "a.ppm")
    b = render_map(raster, PALETTES["sod"], tmp_path / "b.ppm")
    assert a == b == (tmp_path / "a.ppm").read_bytes()
    assert len(a) == len(b"P6\n23 17\n255\n") + 17 * 23 * 3


def test_unmapped_code_rejected():
    with pytest.raises(ValueError, match=r"no color for code\(s\) \[7\]"):
        colorize(np.array([[0, 7]], np.uint8), PALETTES["ice_water"])
    with pytest.raises(ValueError, match="255"):
        colorize(np.array([[IGNORE]], np.uint8), {0: (0, 0, 0)})


def test_every_default_palette_covers_ignore():
    for name, pal in PALETTES.items():
        assert pal[IGNORE] == IGNORE_COLOR, name


def test_palette_file_parsing(tmp_path):
    p = tmp_path / "p.json"
    p.write_text('{"0": [1, 2, 3], "255": [4, 5, 6]}')
    assert load_palette(p) == {0: (1, 2, 3), 255: (4, 5, 6)}
    with pytest.raises(ValueError):
        parse_palette({"0": [1, 2]})
    with pytest.raises(ValueError):
        parse_palette({"0": [1, 2, 300]})


def test_read_ppm_rejects_other_formats(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "x.ppm")
    (tmp_path / "y.ppm").write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "y.ppm")

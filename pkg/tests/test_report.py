import numpy as np
import pytest

from lmcyclegan.data import read_ppm
from lmcyclegan.report import (format_metrics, mosaic, parse_metrics, plot_losses, plot_metrics, read_loss_log,
                               window_means, write_mosaic)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _log(tmp_path, n=40):
    p = tmp_path / "stage1.tsv"
    p.write_text("".join(f"{t}\tcycle\t{1.0 / (t + 1)!r}\n{t}\tlm_XY\t{0.5}\n" for t in range(n)))
    return p


def test_read_loss_log(tmp_path):
    curves = read_loss_log(_log(tmp_path))
    it, v = curves["cycle"]
    assert it.tolist() == list(range(40))
    assert v[3] == 0.25
    assert set(curves) == {"cycle", "lm_XY"}


def test_window_means():
    assert window_means(np.arange(100.0)) == (4.5, 94.5)
    assert window_means([3.0, 5.0]) == (3.0, 5.0)


def test_metrics_round_trip():
    m = {"fid_translated_Y": 12.345678901234, "lm_err_XY_px": 0.1}
    assert parse_metrics(format_metrics(m)) == m


def test_loss_figure(tmp_path):
    out = plot_losses(_log(tmp_path), tmp_path / "fig" / "losses.png", smooth=5, title="stage 1")
    assert out.read_bytes()[:8] == PNG_MAGIC


def test_metrics_figure(tmp_path):
    out = plot_metrics({"fid_a": 1.0, "fid_b": 2.0, "lm_err_px": 0.5}, tmp_path / "m.png")
    assert out.read_bytes()[:8] == PNG_MAGIC


def test_mosaic_layout(tmp_path):
    s = 8
    a = -np.ones((3, s, s), np.float32)
    b = np.ones((3, s, s), np.float32)
    m = mosaic([(a, b)] * 5, per_row=4, gap=2)
    assert m.shape == (2 * (s + 2) + 2, 4 * (2 * s + 4) + 2, 3)
    assert (m[2:2 + s, 2:2 + s] == 0).all()
    assert (m[2:2 + s, 2 + s + 2:2 + 2 * s + 2] == 255).all()
    p = write_mosaic(tmp_path / "m.ppm", [(a, b)])
    assert read_ppm(p).shape == (s + 4, 4 * (2 * s + 4) + 2, 3)
    with pytest.raises(ValueError):
        mosaic([])

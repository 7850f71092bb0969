import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from spectrascope.blocks import load_blocks
from spectrascope.cli import main
from spectrascope.knockout import AttributionScatter
from spectrascope.lanczos import SpectrumEstimate
from spectrascope.linop import save_matrix


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--ccm", "D=8,C=3,N=10,t=3", "--widths", "6,6", "--epochs", "5", "--out", str(out)]) == 0
    return out


def _matrix(tmp_path, n=40):
    a = np.random.default_rng(0).standard_normal((n, n))
    path = tmp_path / "m.csv"
    save_matrix(path, (a + a.T) / 2)
    return path


def test_spectrum_from_csv(tmp_path):
    path = _matrix(tmp_path)
    assert main(["spectrum", "--matrix", str(path), "--M", "30", "--K", "128", "--out", str(tmp_path)]) == 0
    est = SpectrumEstimate.load_json(tmp_path / "spectrum.json")
    assert est.M == 30 and len(est.grid) == 128
    ET.parse(tmp_path / "spectrum.svg")
    rows = (tmp_path / "spectrum.csv").read_text().splitlines()
    assert rows[0] == "x,density" and len(rows) == 129


def test_spectrum_synthetic_with_deflation(tmp_path):
    args = ["spectrum", "--synthetic", "spiked:n=120,spikes=5,4,3", "--deflate", "3", "--format", "json", "--out", str(tmp_path)]
    assert main(args) == 0
    data = json.loads((tmp_path / "spectrum.json").read_text())
    assert len(data["outliers"]) == 3
    assert not (tmp_path / "spectrum.svg").exists()


def test_spectrum_from_network_log_mode(tmp_path, trained):
    args = ["spectrum", "--mlp", str(trained / "model.mlp1"), "--data", str(trained / "data.blk"),
            "--quantity", "G", "--deflate", "3", "--log", "--M", "64", "--out", str(tmp_path)]
    assert main(args) == 0
    est = SpectrumEstimate.load_json(tmp_path / "spectrum.json")
    assert est.log_mode and len(est.outliers) == 3


@pytest.mark.parametrize("quantity", ["KFAC", "CFAC", "H", "Delta", "W", "Hess", "E"])
def test_spectrum_quantities(tmp_path, trained, quantity):
    args = ["spectrum", "--mlp", str(trained / "model.mlp1"), "--data", str(trained / "data.blk"),
            "--quantity", quantity, "--M", "20", "--K", "64", "--format", "json", "--out", str(tmp_path)]
    assert main(args) == 0


def test_attribute_parts(tmp_path, trained):
    base = ["attribute", "--mlp", str(trained / "model.mlp1"), "--data", str(trained / "data.blk"), "--C", "3"]
    assert main(base + ["--quantity", "G", "--part", "class+cross", "--top-k", "10", "--out", str(tmp_path)]) == 0
    sc = AttributionScatter.from_csv(tmp_path / "attribution.csv")
    assert len(sc.before) == 10 and sc.top_mask.sum() == 3
    ET.parse(tmp_path / "attribution.svg")
    assert main(base + ["--quantity", "H", "--layer", "2", "--part", "bogus", "--out", str(tmp_path)]) == 2


def test_attribute_zero_target_is_identity(tmp_path):
    path = _matrix(tmp_path, 12)
    save_matrix(tmp_path / "z.mtx", np.zeros((12, 12)))
    args = ["attribute", "--matrix", str(path), "--target", str(tmp_path / "z.mtx"), "--C", "2", "--out", str(tmp_path)]
    assert main(args) == 0
    sc = AttributionScatter.from_csv(tmp_path / "attribution.csv")
    assert np.array_equal(sc.before, sc.after)


def test_ccm_verify(tmp_path):
    assert main(["ccm-verify", "--D", "5", "--C", "3", "--alpha", "0.3", "--s", "4", "--mc", "500", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "ccm_verify.json").read_text())
    assert rep["max_abs_diff"] < 1e-10
    assert rep["monte_carlo_frobenius_err"] > 0
    assert set(rep) >= {"params", "closed_form", "dense_eig", "max_abs_diff", "monte_carlo_frobenius_err"}


def test_ccm_verify_grid(tmp_path):
    assert main(["ccm-verify", "--grid", "--format", "csv", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "ccm_verify.csv").read_text().splitlines()) == 49


def test_kfac_compare_and_decompose(tmp_path, trained):
    common = ["--mlp", str(trained / "model.mlp1"), "--data", str(trained / "data.blk"), "--out", str(tmp_path)]
    assert main(["kfac-compare", *common]) == 0
    rep = json.loads((tmp_path / "kfac_compare.json").read_text())
    assert len(rep["layers"]) == 3 and rep["last_layer_status"] in ("PASS", "WARN")
    assert main(["decompose", *common, "--quantity", "G"]) == 0
    rep = json.loads((tmp_path / "decompose.json").read_text())
    assert rep["relative_error"] < 1e-12


def test_train_outputs(trained):
    rows = (trained / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 5 * 3
    assert load_blocks(trained / "data.blk").data.shape == (10, 3, 8)


def test_exit_codes(tmp_path):
    assert main(["spectrum", "--matrix", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 4
    save_matrix(tmp_path / "c.csv", 2.0 * np.eye(10))
    assert main(["spectrum", "--matrix", str(tmp_path / "c.csv"), "--out", str(tmp_path)]) == 3
    assert main(["spectrum", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["spectrum", "--M", "notanumber"])
    assert info.value.code == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "spectrascope", "ccm-verify", "--format", "json", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "max_abs_diff" in res.stdout

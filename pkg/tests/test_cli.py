import json
import os
import subprocess
import sys

import numpy as np
import pytest

from smoothtails.cli import main

LOGNORMAL = """# lognormal similarity, alpha=1 beta=3
family=similarity
d=2
N=2
t.dist=lognormal
t.mu=-0.9241962407465937
t.sigma=0.6797779934458726
k.dist=haar
q.dist=gaussian
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfgs = {
        "ln": LOGNORMAL,
        "mx": "family=maxwell\nd=3\nN=2\n",
        "n1": "family=similarity\nd=2\nN=1\n",
        "bad": "family=similarity\nd=2\nN=2\nk.dist=matrix\nk.matrix=1,0.2,0,1\nt.dist=const\nt.value=0.5\n",
        "badkey": "family=diagonal\nd=2\nN=2\nbogus=1\n",
    }
    for k, v in cfgs.items():
        (root / f"{k}.cfg").write_text(v)
    return root


def run(work, *argv):
    return main([str(a) for a in argv])


def listing(path):
    return sorted(os.listdir(path))


@pytest.fixture(scope="module")
def pipeline(work):
    cfg = work / "ln.cfg"
    assert run(work, "spectrum", "--config", cfg, "--out", work / "sp", "--pool", 20000,
               "--grid", 32, "--s-hi", 4) == 0
    assert run(work, "simulate", "--config", cfg, "--out", work / "sim", "--M", 20000, "--sweeps", 10) == 0
    beta = json.loads((work / "sp" / "exponents.json").read_text())["beta"]
    return cfg, beta


def test_spectrum_outputs(work, pipeline):
    assert listing(work / "sp") == ["eigen_alpha.csv", "eigen_beta.csv", "exponents.json", "m_curve.csv",
                                    "manifest.json", "runtime.txt", "spectral_alpha.json", "spectral_beta.json"]
    ex = json.loads((work / "sp" / "exponents.json").read_text())
    assert ex["alpha"] == pytest.approx(1.0, abs=0.05) and ex["beta"] == pytest.approx(3.0, rel=0.05)
    man = json.loads((work / "sp" / "manifest.json").read_text())
    assert ex["manifest"] == man["manifest"]
    assert (work / "sp" / "m_curve.csv").read_text().startswith(f"# manifest={man['manifest']}")


def test_tails_and_constants(work, pipeline):
    cfg, beta = pipeline
    smp = work / "sim" / "samples.npy"
    assert run(work, "tails", "--config", cfg, "--out", work / "tl", "--samples", smp,
               "--beta", beta, "--directions", "radial;1,0") == 0
    tl = json.loads((work / "tl" / "tails.json").read_text())
    assert len(tl["reports"]) == 2
    assert run(work, "constants", "--config", cfg, "--out", work / "cs", "--samples", smp, "--beta", beta,
               "--spectral", work / "sp" / "spectral_beta.json", "--pool", 20000) == 0
    cs = json.loads((work / "cs" / "constants.json").read_text())
    for key in ("l_beta", "K", "m_beta", "sigma_S", "divergence_probe"):
        assert key in cs


def test_samples_csv_and_meta(work):
    out = work / "simcsv"
    assert run(work, "simulate", "--config", work / "ln.cfg", "--out", out, "--M", 1000,
               "--sweeps", 2, "--format", "csv") == 0
    meta = json.loads((out / "samples.csv.meta.json").read_text())
    data = np.loadtxt(out / "samples.csv", delimiter=",", comments="#", skiprows=1)
    assert data.shape == (1000, 2) and meta["generation"] == 2


def test_thread_count_does_not_change_outputs(work):
    outs = []
    for t in (1, 3):
        out = work / f"thr{t}"
        assert run(work, "simulate", "--config", work / "ln.cfg", "--out", out, "--M", 140000,
                   "--sweeps", 2, "--threads", t) == 0
        outs.append(out)
    for name in listing(outs[0]):
        if name != "runtime.txt":
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_config_error_exit_2_and_no_output(work):
    out = work / "never"
    assert run(work, "simulate", "--config", work / "badkey.cfg", "--out", out) == 2
    assert run(work, "spectrum", "--config", work / "n1.cfg", "--out", out) == 2
    assert not out.exists()


def test_provenance_mismatch_exit_4(work, pipeline):
    out = work / "prov"
    code = run(work, "tails", "--config", work / "mx.cfg", "--out", out,
               "--samples", work / "sim" / "samples.npy", "--beta", 3)
    assert code == 4 and not out.exists()


def test_beta_cross_check_warns(work, pipeline):
    cfg, beta = pipeline
    with pytest.warns(UserWarning, match="beta"):
        assert run(work, "tails", "--config", cfg, "--out", work / "tlw", "--samples",
                   work / "sim" / "samples.npy", "--beta", beta + 0.5,
                   "--exponents", work / "sp" / "exponents.json") == 0


@pytest.mark.parametrize("name,code", [("mx", 0), ("ln", 0), ("n1", 1), ("bad", 1)])
def test_validate(work, capsys, name, code):
    assert run(work, "validate", "--config", work / f"{name}.cfg") == code
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(ln.startswith(("PASS", "FAIL")) for ln in lines)
    if code:
        assert lines[0].startswith("FAIL  configuration")


def test_module_entry_point(work):
    p = subprocess.run([sys.executable, "-m", "smoothtails", "validate", "--config", str(work / "badkey.cfg")],
                       capture_output=True, text=True)
    assert p.returncode == 1 and "bogus" in p.stdout

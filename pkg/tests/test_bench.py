import configparser
import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cvclab.bench.cli import main
from cvclab.bench.config import ExperimentConfig, DataSpec, from_ini, load_config, to_ini
from cvclab.bench.datasets import FAMILIES, gen_dataset, ring_kgmm
from cvclab.bench.experiments import (
    run_ablation,
    run_edit,
    run_guidance_sweep,
    run_reconstruction,
)
from cvclab.bench.runner import execute, merge_reports, read_manifest, rerun, sha256
from cvclab.editors import CvcParams, GuidanceParams
from cvclab.errors import RejectedInput
from cvclab.nnvf import MlpVelocityNet, save_checkpoint
from cvclab.oracle import load_model

SMALL = ExperimentConfig(n_sources=6, seeds=(0, 1), steps=30)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gen_dataset_symmetric(tmp_path):
    paths = gen_dataset("symmetric-2gmm", {"d": 2, "sep": 4.0, "sigma": 0.5}, 0, tmp_path, n=200)
    assert [p.name for p in paths] == ["model.txt", "samples_c0.csv", "samples_c1.csv"]
    model = load_model(tmp_path / "model.txt")
    np.testing.assert_array_equal(model.components(0)[0], [[2.0, 0.0]])
    np.testing.assert_array_equal(model.components(1)[0], [[-2.0, 0.0]])
    rows = read_csv(tmp_path / "samples_c0.csv")
    assert rows[0] == ["x_0", "x_1"] and len(rows) == 201
    xs = np.array(rows[1:], dtype=float)
    assert abs(xs[:, 0].mean() - 2.0) < 0.2


def test_gen_dataset_deterministic(tmp_path):
    a = gen_dataset("ring-kgmm", {}, 3, tmp_path / "a", n=50)
    b = gen_dataset("ring-kgmm", {}, 3, tmp_path / "b", n=50)
    assert [sha256(p) for p in a] == [sha256(p) for p in b]


def test_ring_family():
    m = ring_kgmm()
    assert m.n_conditions == 8
    np.testing.assert_allclose(m.priors, [1 / 8] * 8, atol=1e-15)
    radii = [np.linalg.norm(m.components(k)[0][0]) for k in range(8)]
    np.testing.assert_allclose(radii, 3.0, atol=1e-12)


def test_unknown_family_lists_choices(tmp_path):
    with pytest.raises(RejectedInput) as info:
        gen_dataset("spiral", {}, 0, tmp_path)
    for name in FAMILIES:
        assert name in str(info.value)


def test_config_round_trip():
    cfg = ExperimentConfig(
        method="flowedit", steps=28, seeds=(3, 4), n_sources=5, guidance=GuidanceParams(1.5, 5.5),
        cvc=CvcParams(alpha=0.5, beta=3.0, eta=0.1, correction_mode="literal"),
        data=DataSpec(family="ring-kgmm", k=5, radius=2.0), omega2_list=(1.0, 3.0), start_fraction=0.8,
    )
    back = from_ini(to_ini(cfg))
    assert back == cfg
    assert to_ini(back) == to_ini(cfg)


def test_missing_config_names_path(tmp_path):
    missing = tmp_path / "nope.ini"
    with pytest.raises(RejectedInput, match=str(missing)):
        load_config(missing)


def test_learned_needs_checkpoint(tmp_path):
    with pytest.raises(RejectedInput):
        ExperimentConfig(backend="learned").validate()
    with pytest.raises(RejectedInput, match="not found"):
        ExperimentConfig(backend="learned", checkpoint=str(tmp_path / "x.json")).validate()


def test_oracle_cvc_reconstruction_exact():
    res = run_reconstruction(SMALL)
    assert res.mean_final_mse <= 1e-12
    assert np.all(res.curves == 0.0)


def test_flowedit_reconstruction_bookkeeping():
    res = run_reconstruction(SMALL, "flowedit")
    assert res.mean_final_mse > 1e-4
    assert all(r.x2_norm > 0 for r in res.rows)
    assert res.curves.shape == (12, 31)


def test_oracle_cvc_edit_semantics():
    res = run_edit(SMALL)
    assert res.mean_semantic_score > 0.9


def test_beta_zero_edit_is_identity():
    cfg = replace(SMALL, cvc=CvcParams(beta=0.0))
    res = run_edit(cfg)
    assert res.mean_final_mse == 0.0
    assert res.mean_semantic_score < 0.1


def test_edit_rejects_same_condition():
    with pytest.raises(RejectedInput):
        run_edit(replace(SMALL, c_tar=0))


def test_guidance_sweep_monotone_and_identity():
    table, _ = run_guidance_sweep(replace(SMALL, guidance=GuidanceParams(1.0, 1.0)))
    x2 = [row[1] for row in table]
    assert x2[0] <= 1e-12 and table[0][2] <= 1e-12
    assert all(b > a for a, b in zip(x2, x2[1:]))


def test_guidance_sweep_step_doubling_stable():
    # mean |x2| at omega2 = 8 over n = 50/100/200/400: 4.613, 4.862, 5.008, 5.099.
    # 50 -> 100 moves it 5.4%, so the check starts from 100 (3.0%).
    cfg = ExperimentConfig(seeds=(0, 1, 2, 3, 4), n_sources=20, omega2_list=(2.0, 4.0, 8.0), steps=100)
    coarse, _ = run_guidance_sweep(cfg)
    fine, _ = run_guidance_sweep(replace(cfg, steps=200))
    for (_, a, _), (_, b, _) in zip(coarse, fine):
        assert abs(b - a) / a < 0.05


def test_ablation_no_correction_equals_mode_off():
    res = run_ablation(SMALL)
    assert list(res) == ["flowedit", "cvc-no-correction", "cvc-full"]
    off = run_reconstruction(SMALL, "cvc", CvcParams(correction_mode="off"))
    assert res["cvc-no-correction"].curves.tobytes() == off.curves.tobytes()


def test_execute_ablate_writes_tree(tmp_path):
    manifest = execute("ablate", SMALL, tmp_path)
    _, files, cfg = read_manifest(manifest)
    for label in ("flowedit", "cvc-no-correction", "cvc-full"):
        assert f"{label}/metrics.csv" in files
        assert (tmp_path / label / "manifest.txt").exists()
    assert "ablation.csv" in files
    assert cfg == replace(SMALL, start_fraction=1.0, guidance=GuidanceParams(1.0, 2.0))
    rows = read_csv(tmp_path / "ablation.csv")
    assert [r[0] for r in rows[1:]] == ["flowedit", "cvc-no-correction", "cvc-full"]


def test_execute_sweep_tree(tmp_path):
    execute("sweep", replace(SMALL, omega2_list=(1.0, 2.0)), tmp_path)
    rows = read_csv(tmp_path / "sweep.csv")
    assert rows[0] == ["omega2", "x2_norm", "final_mse"] and len(rows) == 3
    sub = tmp_path / "omega2_2.0"
    _, _, cfg = read_manifest(sub / "manifest.txt")
    assert cfg.method == "flowedit" and cfg.guidance == GuidanceParams(1.0, 2.0)


def test_manifest_rerun_byte_identical(tmp_path):
    first = execute("reconstruct", replace(SMALL, method="flowedit"), tmp_path / "a")
    rerun(first, tmp_path / "b")
    for name in ("curve.csv", "metrics.csv", "summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    _, files, _ = read_manifest(first)
    assert files["curve.csv"] == sha256(tmp_path / "b" / "curve.csv")


def test_timing_off_gives_zero_wall(tmp_path):
    execute("reconstruct", SMALL, tmp_path)
    rows = read_csv(tmp_path / "metrics.csv")
    assert all(float(r[-1]) == 0.0 for r in rows[1:])


def test_learned_backend_rejects_mismatched_checkpoint(tmp_path):
    path = tmp_path / "ck.json"
    save_checkpoint(MlpVelocityNet.init(3, 2, hidden=(4,)), path)
    with pytest.raises(RejectedInput, match="does not match"):
        run_reconstruction(ExperimentConfig(backend="learned", checkpoint=str(path)))


# command line


def test_cli_reconstruct(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["reconstruct", "--backend", "oracle", "--method", "cvc", "--steps", "50", "--seed", "7",
                 "--n-sources", "4", "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "curve.csv")
    assert rows[0] == ["step", "t", "mse"] and len(rows) == 52
    assert all(float(r[2]) == 0.0 for r in rows[1:])
    cp = configparser.ConfigParser()
    cp.read(out / "manifest.txt")
    assert cp["manifest"]["command"] == "reconstruct" and cp["manifest"]["status"] == "ok"
    assert load_config(out / "manifest.txt").seeds == (7,)


def test_cli_missing_config(tmp_path, capsys):
    missing = tmp_path / "missing.ini"
    assert main(["reconstruct", "--config", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_cli_unknown_flag(capsys):
    assert main(["reconstruct", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_cli_config_file_and_override(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[experiment]\nmethod = flowedit\nsteps = 12\nn_sources = 3\nseeds = 0\n")
    assert main(["reconstruct", "--config", str(ini), "--steps", "10", "--out", str(tmp_path / "o")]) == 0
    assert len(read_csv(tmp_path / "o" / "curve.csv")) == 12
    assert read_csv(tmp_path / "o" / "metrics.csv")[1][2] == "flowedit"


def test_cli_gen_data_and_train(tmp_path):
    assert main(["gen-data", "--family", "ring-kgmm", "--k", "4", "--n", "20", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "samples_c3.csv").exists()
    assert main(["train", "--model", str(tmp_path / "d" / "model.txt"), "--epochs", "3", "--n-data", "128",
                 "--hidden", "8,8", "--out", str(tmp_path / "t")]) == 0
    doc = json.loads((tmp_path / "t" / "checkpoint.json").read_text())
    assert doc["n_conditions"] == 4 and doc["widths"] == [8, 8, 8, 2]
    assert len(read_csv(tmp_path / "t" / "loss.csv")) == 4
    assert (tmp_path / "t" / "manifest.txt").exists()


def test_cli_report_merges(tmp_path):
    assert main(["ablate", "--n-sources", "2", "--steps", "10", "--out", str(tmp_path / "r")]) == 0
    assert main(["report", str(tmp_path / "r")]) == 0
    rows = read_csv(tmp_path / "r" / "report.csv")
    assert len(rows) == 1 + 3 * 2
    assert {r[2] for r in rows[1:]} == {"flowedit", "cvc-no-correction", "cvc-full"}
    assert main(["report", str(tmp_path / "empty")]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_runtime_failure_exit_2(tmp_path, capsys):
    net = MlpVelocityNet.init(2, 2, hidden=(4,), seed=0)
    net.weights[-1][:] = 1e308
    path = tmp_path / "huge.json"
    save_checkpoint(net, path)
    out = tmp_path / "run"
    code = main(["reconstruct", "--backend", "learned", "--checkpoint", str(path), "--n-sources", "2",
                 "--out", str(out)])
    assert code == 2
    assert "step" in capsys.readouterr().err
    cp = configparser.ConfigParser()
    cp.read(out / "manifest.txt")
    assert cp["manifest"]["status"] == "failed"

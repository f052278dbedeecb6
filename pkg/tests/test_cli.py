import json
import os

import numpy as np
import pytest

from multinex.cli import main
from multinex.image_io import load_image, save_image


@pytest.fixture
def photo(tmp_path, rng):
    path = tmp_path / "in.png"
    save_image(rng.uniform(size=(20, 24, 3)), path)
    return path


@pytest.fixture
def weights(tmp_path):
    def make(variant="lightweight"):
        path = tmp_path / f"{variant}.mnx"
        assert main(["init", "--variant", variant, "--out", str(path)]) == 0
        return path
    return make


@pytest.mark.parametrize("variant", ["lightweight", "nano"])
def test_enhance_identity_at_init(tmp_path, photo, weights, variant):
    out = tmp_path / "out.png"
    w = weights(variant)
    assert main(["enhance", "--input", str(photo), "--output", str(out), "--weights", str(w),
                 "--variant", variant]) == 0
    np.testing.assert_array_equal(load_image(out), load_image(photo))


def test_enhance_missing_weights(tmp_path, photo, capsys):
    missing = tmp_path / "nowhere.mnx"
    code = main(["enhance", "--input", str(photo), "--output", str(tmp_path / "o.png"), "--weights", str(missing)])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_enhance_variant_mismatch(tmp_path, photo, weights, capsys):
    code = main(["enhance", "--input", str(photo), "--output", str(tmp_path / "o.png"),
                 "--weights", str(weights("nano")), "--variant", "lightweight"])
    assert code == 1
    assert "lum.conv_in.weight" in capsys.readouterr().err


def test_enhance_directory_and_deltas(tmp_path, weights, rng, capsys):
    src = tmp_path / "src"
    for name in ("b.png", "a.png"):
        save_image(rng.uniform(size=(12, 12, 3)), src / name)
    (src / "notes.txt").write_text("skip me")
    out, dd = tmp_path / "out", tmp_path / "deltas"
    assert main(["enhance", "--input", str(src), "--output", str(out), "--weights", str(weights()),
                 "--dump-deltas", str(dd)]) == 0
    assert sorted(os.listdir(out)) == ["a.png", "b.png"]
    assert sorted(os.listdir(dd)) == ["a_delta_l.png", "a_delta_r.png", "b_delta_l.png", "b_delta_r.png"]
    assert "shows (v -" in capsys.readouterr().out


def dataset(root, n=2, size=24):
    rng = np.random.default_rng(0)
    for i in range(n):
        gt = rng.uniform(size=(size, size, 3))
        save_image(gt * 0.2, root / "low" / f"{i}.png")
        save_image(gt, root / "high" / f"{i}.png")
    return root


def test_train_zero_iterations(tmp_path):
    data = dataset(tmp_path / "data")
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--variant", "nano", "--out", str(out), "--iters", "0"]) == 0
    assert sorted(os.listdir(out)) == ["checkpoints", "config.json"]
    assert os.listdir(out / "checkpoints") == ["iter_0000000.mnx"]


def test_train_config_and_reproducible(tmp_path):
    data = dataset(tmp_path / "data")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 50, "patch": 16, "batch": 2, "log_every": 1, "hidden_C": 3}))
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["train", "--data", str(data), "--variant", "nano", "--config", str(cfg),
                     "--iters", "3", "--out", str(out)]) == 0
        runs.append((out / "trace.csv").read_bytes())
    assert runs[0] == runs[1]
    assert runs[0].decode().count("\n") == 4
    saved = json.loads((tmp_path / "a" / "config.json").read_text())
    assert saved["train"]["iterations"] == 3 and saved["train"]["patch"] == 16
    assert saved["variant"]["hidden_C"] == 3


def test_train_bad_inputs(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    data = dataset(tmp_path / "data")
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    os.makedirs(tmp_path / "empty" / "low")
    os.makedirs(tmp_path / "empty" / "high")
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 1
    save_image(np.zeros((24, 24, 3)), data / "low" / "zz.png")
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r")]) == 1
    assert "zz.png" in capsys.readouterr().err


@pytest.mark.parametrize("variant, bound", [("lightweight", 50_000), ("nano", 1_000)])
def test_params_totals(variant, bound, capsys):
    assert main(["params", "--variant", variant, "--resolution", "64x32"]) == 0
    lines = capsys.readouterr().out.splitlines()
    total = int(next(l for l in lines if l.startswith("total")).split()[1])
    assert total < bound
    assert sum(int(l.split()[1]) for l in lines[1:] if l and not l.startswith(("total", "MACs"))) == total
    assert "MACs at 64x32" in lines[-1] and "FLOPs" in lines[-1]


def test_params_bad_resolution():
    with pytest.raises(SystemExit) as exc:
        main(["params", "--resolution", "0x5"])
    assert exc.value.code == 2


def test_lra_self_full_rank(tmp_path, photo):
    out = tmp_path / "lra"
    for target in ("self", "self:Y_L2"):
        assert main(["analyze", "lra", "--input", str(photo), "--out", str(out), "--target", target,
                     "--d", "K", "--ridge", "1e-8"]) == 0
        rep = json.loads((out / "lra.json").read_text())
        assert rep["D"] == 4 and max(rep["mse"]) <= 1e-9
    assert (out / "reconstruction.png").exists()
    assert main(["analyze", "lra", "--input", str(photo), "--out", str(out), "--target", "self:nope"]) == 2
    assert main(["analyze", "lra", "--input", str(photo), "--out", str(out), "--d", "x"]) == 2
    assert main(["analyze", "lra", "--input", str(photo), "--out", str(out), "--d", "9"]) == 1


def test_dia_outputs(tmp_path, photo, capsys):
    out = tmp_path / "dia"
    assert main(["analyze", "dia", "--input", str(photo), "--out", str(out)]) == 0
    rows = (out / "importance.csv").read_text().splitlines()
    assert rows[0] == "prior,deltaE,rankE,deltaG,rankG,avg_rank" and len(rows) == 7
    assert (out / "Y_vmax_deltaE.png").exists() and (out / "Y_vmax_deltaG.png").exists()


def test_corr_and_stacks(tmp_path, photo, capsys):
    assert main(["analyze", "corr", "--input", str(photo), "--maps", "Cb", "Cr", "r",
                 "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == ",Cb,Cr,r"
    assert main(["analyze", "corr", "--input", str(photo), "--maps", "nope"]) == 2
    assert main(["stacks", "--input", str(photo), "--out", str(tmp_path / "s")]) == 0
    assert sorted(os.listdir(tmp_path / "s")) == ["extended", "luminance", "reflectance"]
    assert len(os.listdir(tmp_path / "s" / "reflectance")) == 5


def test_eval_csv(tmp_path, rng, capsys):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    for name in ("b.png", "a.png"):
        g = rng.uniform(0.2, 0.8, size=(32, 32, 3))
        save_image(g, gt / name)
        save_image(g + 0.1, pred / name)
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "m.csv"), "--gt-mean"]) == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "file,psnr,ssim,msssim,psnr_gtmean,ssim_gtmean,q"
    assert [l.split(",")[0] for l in lines[1:]] == ["a.png", "b.png", "mean"]
    psnr, psnr_gm, q = (float(lines[1].split(",")[i]) for i in (1, 4, 6))
    assert psnr_gm > psnr and 0 < q < 1
    capsys.readouterr()
    assert main(["eval", "--pred", str(pred), "--gt", str(gt)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "file,psnr,ssim,msssim"


def test_eval_missing_gt(tmp_path, photo):
    assert main(["eval", "--pred", str(photo), "--gt", str(tmp_path / "none.png")]) == 2


def test_bad_image_and_threads(tmp_path, weights, monkeypatch):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert main(["enhance", "--input", str(bad), "--output", str(tmp_path / "o.png"),
                 "--weights", str(weights())]) == 2
    monkeypatch.setenv("MULTINEX_THREADS", "0")
    assert main(["params"]) == 2


def test_synth(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--n", "2", "--size", "16"]) == 0
    assert sorted(os.listdir(tmp_path / "d" / "low")) == ["0000.png", "0001.png"]

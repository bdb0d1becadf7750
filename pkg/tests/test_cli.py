import subprocess
import sys

import pytest
import yaml

from dar.cli import RunConfig, main, resolve_config, UsageError
from dar.evalio import METRIC_FIELDS, SceneSpec, gen_synth_scene, write_rgb_image
from dar.mtbin import parse_trace_line

SMALL = ["--image-size", "[16,16]", "--schedule", "[[2,2],[4,4],[8,8],[16,16]]", "--n-train", "2", "--n-test", "2"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--iters", "3", "--out-dir", str(out), *SMALL]) == 0
    img, _ = gen_synth_scene(SceneSpec(3, (16, 16)))
    write_rgb_image(img, out / "img.png")
    return out


def test_config_resolution(tmp_path):
    (tmp_path / "c.yaml").write_text("iters: 7\npreset: train\n")
    cfg = resolve_config(str(tmp_path / "c.yaml"), ["--iters", "9", "--lr-peak", "1e-3"])
    assert cfg.iters == 9 and cfg.preset == "train" and cfg.lr_peak == 1e-3
    with pytest.raises(UsageError, match="unknown"):
        resolve_config(None, ["--bogus", "1"])
    with pytest.raises(UsageError):
        resolve_config(None, ["--iters"])
    with pytest.raises(UsageError):
        resolve_config(None, ["--heads", "5"])


def test_train_outputs(run):
    cfg = yaml.safe_load((run / "config.yaml").read_text())
    assert cfg["iters"] == 3 and cfg["out_dir"] == str(run)
    assert set(cfg) == set(RunConfig.__dataclass_fields__)
    lines = (run / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,loss,lr" and len(lines) == 4
    per_step = (run / "metrics_per_step.csv").read_text().splitlines()
    assert per_step[0] == ",".join(METRIC_FIELDS) and len(per_step) == 5
    assert len((run / "metrics_final.csv").read_text().splitlines()) == 2
    assert (run / "checkpoint.bin").is_file()


def test_train_default_config_fifty_iterations(tmp_path):
    assert main(["train", "--preset", "test", "--seed", "7", "--iters", "50", "--out-dir", str(tmp_path)]) == 0
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 51


def test_train_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--seed", "7", "--iters", "4", "--out-dir", str(tmp_path / name), *SMALL]) == 0
    for f in ("loss.csv", "metrics_per_step.csv", "checkpoint.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_unwritable_output(tmp_path):
    (tmp_path / "file").write_text("")
    assert main(["train", "--iters", "1", "--out-dir", str(tmp_path / "file" / "sub"), *SMALL]) == 1


def test_train_nonfinite_loss_exits_2(tmp_path):
    code = main(["train", "--iters", "3", "--lr-peak", "1e30", "--lr-init", "1e30", "--grad-clip", "null",
                 "--out-dir", str(tmp_path), *SMALL])
    assert code == 2
    assert "NonFiniteError" in (tmp_path / "error.log").read_text()


def test_eval_reports_k_rows(run, tmp_path):
    assert main(["eval", "--config", str(run / "config.yaml"), "--out-dir", str(tmp_path)]) == 0
    assert len((tmp_path / "eval_per_step.csv").read_text().splitlines()) == 1 + 4
    assert len((tmp_path / "eval_final.csv").read_text().splitlines()) == 2


def test_eval_rejects_bad_checkpoints(run, tmp_path):
    cfg = str(run / "config.yaml")
    assert main(["eval", "--config", cfg, "--hidden", "32", "--heads", "4", "--out-dir", str(tmp_path)]) == 1
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + (run / "checkpoint.bin").read_bytes()[8:])
    assert main(["eval", "--config", cfg, "--checkpoint", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "none.bin")]) == 1


def test_infer_writes_depth_png(run, tmp_path):
    target = tmp_path / "depth.png"
    assert main(["infer", "--config", str(run / "config.yaml"), "--image", str(run / "img.png"),
                 "--output", str(target)]) == 0
    assert target.is_file()


def test_bins_trace(run, capsys):
    assert main(["bins-trace", "--config", str(run / "config.yaml"), "--image", str(run / "img.png"),
                 "--pixel", "[5,11]"]) == 0
    lines = [parse_trace_line(s) for s in capsys.readouterr().out.strip().splitlines()]
    assert [l["step"] for l in lines] == [1, 2, 3, 4]
    assert lines[0]["t"] == 0 and lines[0]["range"] == (0.1, 10.0)
    # bins are resampled between resolutions, so each line carries the range it
    # subdivides: the previous step's bins at this pixel, expanded around t
    for line in lines[1:]:
        b = line["boundaries"]
        assert (b[0], b[-1]) == line["range"]
        assert 1 <= line["t"] <= 16
        assert line["range"][0] >= 0.1 and line["range"][1] <= 10.0
    for line in lines:
        assert line["boundaries"][0] <= line["depth"] <= line["boundaries"][-1]
        assert len(line["boundaries"]) == 17


def test_bins_trace_out_of_bounds(run):
    cfg = str(run / "config.yaml")
    assert main(["bins-trace", "--config", cfg, "--image", str(run / "img.png"), "--pixel", "[16,0]"]) == 1
    assert main(["bins-trace", "--config", cfg, "--image", str(run / "img.png"), "--pixel", "[0,-1]"]) == 1


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    names = [line.split()[0] for line in out[:-1]]
    from dar.config import StepSchedule, preset
    from dar.pipeline import init_params
    expected = list(init_params(preset("test", image_size=(16, 16), schedule=StepSchedule.doubling(4, 3))))
    assert names == expected
    assert main(["gradcheck", "--corrupt", "1.01"]) != 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dar", "eval", "--checkpoint", str(tmp_path / "x.bin")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "not found" in proc.stderr

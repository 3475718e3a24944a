import filecmp
import os

import numpy as np

from implicit_mesh.cli import CONFIG_HEADER, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from implicit_mesh.shape_space import build_shape_space
from implicit_mesh.storage import load_checkpoint, read_csv, save_checkpoint
from implicit_mesh.texture import build_texture_space

TINY_FIT = ["--iterations", "2", "--atlas-level", "1", "--hypotheses", "2", "--prune-iteration", "1",
            "--map-size", "8", "--boundary-samples", "20", "--w-tex", "0", "--w-texfg", "0"]


def _synth(out, *extra):
    return run(["synth", "--out", str(out), "--instances", "2", "--views", "1", "--size", "24",
                "--keypoints", "4", *extra])


def _tree(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


def test_usage_errors(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run(["synth", "--instances", "many"]) == EXIT_USAGE
    assert run(["synth", "--no-such-flag", "1"]) == EXIT_USAGE
    assert run(["fit-collection", "--data", "x"]) == EXIT_USAGE  # checkpoint missing
    assert "usage error" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert run(["--help"]) == EXIT_OK
    assert run(["synth", "--help"]) == EXIT_OK
    assert "default:" in capsys.readouterr().out


def test_data_errors(tmp_path, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path / "no.json"), "--data", str(tmp_path / "none"),
                "--out", str(tmp_path / "e")]) == EXIT_DATA
    assert run(["synth", "--template", str(tmp_path / "missing.obj"), "--out", str(tmp_path / "s")]) == EXIT_DATA
    assert run(["synth", "--config", str(tmp_path / "nope.txt")]) == EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path):
    assert _synth(tmp_path / "d") == EXIT_OK
    space = build_shape_space(hidden=8)
    space.mean_net.biases[-1].data = np.array([np.nan, 0.0, 0.0])
    save_checkpoint(tmp_path / "bad.json", space, build_texture_space(hidden=8))
    code = run(["fit-collection", "--data", str(tmp_path / "d"), "--checkpoint", str(tmp_path / "bad.json"),
                "--out", str(tmp_path / "f"), "--w-kp", "0", *TINY_FIT])
    assert code == EXIT_NUMERIC


def test_synth_is_byte_identical(tmp_path):
    assert _synth(tmp_path / "a") == EXIT_OK
    assert _synth(tmp_path / "b") == EXIT_OK
    files = _tree(tmp_path / "a")
    assert files == _tree(tmp_path / "b")
    assert "config.txt" in files and "instances.csv" in files
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors


def test_config_echo_and_override(tmp_path, capsys):
    assert _synth(tmp_path / "a", "--seed", "3") == EXIT_OK
    echo = capsys.readouterr().out
    assert echo.startswith(CONFIG_HEADER)
    assert "instances = 2" in echo and "seed = 3" in echo
    saved = (tmp_path / "a" / "config.txt").read_text()
    assert "out =" not in saved
    # the saved file replays the run; flags win over file values
    assert run(["synth", "--config", str(tmp_path / "a" / "config.txt"), "--out", str(tmp_path / "b")]) == EXIT_OK
    assert filecmp.cmp(tmp_path / "a" / "masks" / "s00_v0.png", tmp_path / "b" / "masks" / "s00_v0.png", shallow=False)
    capsys.readouterr()
    assert run(["synth", "--config", str(tmp_path / "a" / "config.txt"), "--instances", "1",
                "--out", str(tmp_path / "c")]) == EXIT_OK
    assert "instances = 1" in capsys.readouterr().out
    assert len(read_csv(tmp_path / "c" / "instances.csv")) == 1


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("instances 3\n")
    assert run(["synth", "--config", str(bad)]) == EXIT_USAGE
    bad.write_text("colour = red\n")
    assert run(["synth", "--config", str(bad)]) == EXIT_USAGE


def test_end_to_end(tmp_path, capsys):
    t = tmp_path / "tpl"
    assert run(["init-template", "--template", "sphere", "--out", str(t), "--iterations", "5", "--batch", "50",
                "--hidden", "8", "--latent-dim", "4", "--texture-latent-dim", "4"]) == EXIT_OK
    assert (t / "template.ckpt.json").is_file() and (t / "mean_shape.obj").is_file()
    assert len(read_csv(t / "template_losses.csv")) == 5
    assert _synth(tmp_path / "d", "--keypoints", "12") == EXIT_OK
    f = tmp_path / "fit"
    assert run(["fit-collection", "--data", str(tmp_path / "d"), "--checkpoint", str(t / "template.ckpt.json"),
                "--out", str(f), "--checkpoint-every", "1", *TINY_FIT]) == EXIT_OK
    ck = load_checkpoint(f / "fit.ckpt.json")
    assert set(ck.instances) == {"s00_v0", "s01_v0"}
    assert (f / "checkpoint_0001.json").is_file() and (f / "losses.png").is_file()
    assert len(read_csv(f / "losses.csv")) == 2
    assert (f / "renders" / "epoch_0002" / "s00_v0.png").is_file()
    e = tmp_path / "eval"
    assert run(["eval", "--checkpoint", str(f / "fit.ckpt.json"), "--data", str(tmp_path / "d"),
                "--out", str(e), "--level", "2", "--resolution", "16"]) == EXIT_OK
    for name in ("pck_r", "pck_t_self", "pck_t_cross", "iou"):
        assert (e / f"{name}.csv").is_file() and (e / f"{name}.png").is_file()
    r = tmp_path / "render"
    assert run(["render", "--checkpoint", str(f / "fit.ckpt.json"), "--id", "s00_v0", "--out", str(r),
                "--views", "0:10,90:10", "--level", "2"]) == EXIT_OK
    assert len(list(r.glob("*.png"))) == 6 and (r / "s00_v0.obj").is_file()
    x = tmp_path / "transfer"
    assert run(["transfer", "--checkpoint", str(f / "fit.ckpt.json"), "--data", str(tmp_path / "d"),
                "--src", "s00_v0", "--tgt", "s01_v0", "--out", str(x), "--level", "2"]) == EXIT_OK
    assert (x / "s00_v0_to_s01_v0.csv").is_file()
    assert run(["render", "--checkpoint", str(f / "fit.ckpt.json"), "--id", "ghost",
                "--out", str(r)]) == EXIT_DATA
    assert "transferred" in capsys.readouterr().out


def test_eval_without_shared_cross_keypoints(tmp_path, caplog):
    assert run(["init-template", "--template", "sphere", "--out", str(tmp_path / "t"), "--iterations", "2",
                "--batch", "30", "--hidden", "8"]) == EXIT_OK
    assert _synth(tmp_path / "d", "--keypoints", "1") == EXIT_OK
    assert run(["fit-collection", "--data", str(tmp_path / "d"), "--checkpoint",
                str(tmp_path / "t" / "template.ckpt.json"), "--out", str(tmp_path / "f"), *TINY_FIT]) == EXIT_OK
    kp_file = tmp_path / "d" / "keypoints.csv"
    lines = kp_file.read_text().splitlines()
    lines[-1] = lines[-1].rsplit(",", 1)[0] + ",0"  # the second shape no longer sees the keypoint
    kp_file.write_text("\n".join(lines) + "\n")
    with caplog.at_level("WARNING", logger="implicit_mesh"):
        code = run(["eval", "--checkpoint", str(tmp_path / "f" / "fit.ckpt.json"), "--data", str(tmp_path / "d"),
                    "--out", str(tmp_path / "e"), "--level", "2", "--resolution", "16"])
    assert code == EXIT_OK
    assert (tmp_path / "e" / "pck_t_self.csv").is_file()
    assert not (tmp_path / "e" / "pck_t_cross.csv").exists()
    assert "cross transfer not scored" in caplog.text


def test_fit_single_image(tmp_path):
    assert run(["init-template", "--template", "sphere", "--out", str(tmp_path / "t"), "--iterations", "3",
                "--batch", "30", "--hidden", "8"]) == EXIT_OK
    assert _synth(tmp_path / "d") == EXIT_OK
    assert run(["fit", "--data", str(tmp_path / "d"), "--checkpoint", str(tmp_path / "t" / "template.ckpt.json"),
                "--id", "s01_v0", "--out", str(tmp_path / "f"), *TINY_FIT]) == EXIT_OK
    assert set(load_checkpoint(tmp_path / "f" / "fit.ckpt.json").instances) == {"s01_v0"}
    assert run(["fit", "--data", str(tmp_path / "d"), "--checkpoint", str(tmp_path / "t" / "template.ckpt.json"),
                "--id", "nobody", "--out", str(tmp_path / "g"), *TINY_FIT]) == EXIT_DATA

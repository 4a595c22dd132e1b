import json
import subprocess
import sys

import numpy as np
import pytest

from coatsim import __version__
from coatsim import io as cio
from coatsim.cli import main
from coatsim.evaluate import psnr


@pytest.fixture(scope="module")
def coat_outputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("coat")
    runs = {}
    for name, flags in {"noop": ["--transmission", "1", "--thickness", "0"],
                        "thin": ["--thickness", "0"], "thick": ["--thickness", "1"]}.items():
        assert main(["coat", "--scene", "builtin:test", "--color", "0.9,0.2,0.1", *flags,
                     "--out", str(d / f"{name}.png")]) == 0
        runs[name] = d / f"{name}_channels"
    return d, runs


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "coatsim", "gen", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "--seed" in out.stdout and "--variants" in out.stdout


def test_gen_minimal_and_deterministic(tmp_path):
    for run in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / run), "--seed", "3", "--groups", "1", "--variants", "1",
                     "--resolution", "16"]) == 0
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    assert a == (tmp_path / "b" / "manifest.json").read_bytes()
    data = json.loads(a)
    assert len(data["groups"]) == 1 and len(data["groups"][0]["variants"]) == 1


def test_gen_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"groups": 2, "variants": 2, "resolution": 16, "objects": ["cube"]}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    data = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert data["config"]["objects"] == ["cube"] and len(data["groups"]) == 2


def test_gen_bad_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"groups": 0}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert main(["gen", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "d")]) == 2


def test_gen_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--out", str(blocker / "sub"), "--groups", "1", "--variants", "1",
                 "--resolution", "8"]) == 1


def test_coat_noop(coat_outputs):
    from coatsim.render import render_uncoated, test_scene
    _, runs = coat_outputs
    plain = render_uncoated(test_scene())
    img = cio.load_channel(runs["noop"] / "image.f32")
    inside = cio.load_channel(runs["noop"] / "mask.f32") > 0
    assert psnr(img[inside], plain.image[inside].astype(np.float32)) >= 40.0


def test_coat_thickness_smooths_normals(coat_outputs):
    _, runs = coat_outputs
    inside = cio.load_channel(runs["thin"] / "mask.f32") > 0
    both = inside[1:] & inside[:-1]

    def roughness(run):
        n = cio.load_channel(runs[run] / "normals.f32")
        return np.abs(np.diff(n, axis=0))[both].mean()

    assert roughness("thick") < roughness("thin")


def test_coat_writes_figure(coat_outputs):
    d, _ = coat_outputs
    assert (d / "noop.png").stat().st_size > 0
    assert (d / "noop_channels.png").read_bytes()[:4] == b"\x89PNG"


def test_coat_rejects_out_of_range_trait(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["coat", "--scene", "builtin:test", "--roughness", "2.0", "--out", str(tmp_path / "x.png")])
    assert exc.value.code == 2
    assert "--roughness" in capsys.readouterr().err


def test_coat_missing_scene(tmp_path):
    assert main(["coat", "--scene", str(tmp_path / "none.json"), "--out", str(tmp_path / "x.png")]) == 2


def _write_flat(path, rgb, n=8):
    cio.save_channel(path, np.broadcast_to(np.asarray(rgb, float), (n, n, 3)))


def test_baseline_color_blend_gray(tmp_path):
    base = np.random.default_rng(0).random((8, 8, 3))
    cio.save_channel(tmp_path / "base.f32", base)
    _write_flat(tmp_path / "coat.f32", 0.5)
    cio.save_channel(tmp_path / "mask.f32", np.ones((8, 8)))
    assert main(["baseline", "--method", "color_blend", "--base", str(tmp_path / "base.f32"),
                 "--coat", str(tmp_path / "coat.f32"), "--mask", str(tmp_path / "mask.f32"),
                 "--out", str(tmp_path / "out.f32")]) == 0
    out = cio.load_channel(tmp_path / "out.f32")
    from coatsim.core import luminance
    lum = luminance(base.astype(np.float32).astype(float))
    np.testing.assert_allclose(out, np.repeat(lum[..., None], 3, axis=2), atol=1e-6)


def test_baseline_blend_if_midtone(tmp_path):
    _write_flat(tmp_path / "base.f32", 0.5)
    _write_flat(tmp_path / "coat.f32", (0.1, 0.7, 0.2))
    cio.save_channel(tmp_path / "mask.f32", np.ones((8, 8)))
    assert main(["baseline", "--method", "blend_if", "--base", str(tmp_path / "base.f32"),
                 "--coat", str(tmp_path / "coat.f32"), "--mask", str(tmp_path / "mask.f32"),
                 "--out", str(tmp_path / "out.f32")]) == 0
    np.testing.assert_allclose(cio.load_channel(tmp_path / "out.f32"), cio.load_channel(tmp_path / "coat.f32"))


def test_baseline_unknown_method(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["baseline", "--method", "overlay", "--base", "a", "--coat", "b", "--mask", "c", "--out", "d"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "blend_if" in err and "color_blend" in err


def test_baseline_bad_thresholds(tmp_path):
    _write_flat(tmp_path / "b.f32", 0.5)
    cio.save_channel(tmp_path / "m.f32", np.ones((8, 8)))
    assert main(["baseline", "--method", "blend_if", "--blend-if-thresholds", "0.5,0.2,0.7,1",
                 "--base", str(tmp_path / "b.f32"), "--coat", str(tmp_path / "b.f32"),
                 "--mask", str(tmp_path / "m.f32"), "--out", str(tmp_path / "o.f32")]) == 2


def test_eval_oracle_report(mini_manifest, tmp_path):
    out = tmp_path / "rep" / "report.csv"
    assert main(["eval", "--manifest", str(mini_manifest), "--methods", "oracle", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines == ["method,image,depth,normals,albedo,shading,residual", "oracle,99.00,99.00,99.00,99.00,99.00,99.00"]
    assert out.with_suffix(".txt").exists()
    assert out.with_suffix(".png").read_bytes()[:4] == b"\x89PNG"


@pytest.mark.parametrize("methods", ["", " , ", "oracle,photoshop"])
def test_eval_bad_methods(mini_manifest, tmp_path, methods):
    assert main(["eval", "--manifest", str(mini_manifest), "--methods", methods,
                 "--out", str(tmp_path / "r.csv")]) == 2


def test_eval_toy_needs_checkpoint(mini_manifest, tmp_path):
    assert main(["eval", "--manifest", str(mini_manifest), "--methods", "toy", "--out", str(tmp_path / "r.csv")]) == 2


def test_train_zero_steps_then_sample(mini_manifest, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--manifest", str(mini_manifest), "--steps", "0", "--checkpoint", str(ckpt)]) == 0
    assert ckpt.exists()
    assert (tmp_path / "m_loss.csv").read_text() == "step,loss\n"
    for name in ("a.png", "b.png"):
        assert main(["sample", "--checkpoint", str(ckpt), "--manifest", str(mini_manifest), "--steps", "3",
                     "--seed", "4", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_train_short_run_writes_curve(mini_manifest, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--manifest", str(mini_manifest), "--steps", "3", "--seed", "1",
                 "--checkpoint", str(ckpt), "--loss-csv", str(tmp_path / "curve.csv")]) == 0
    rows = (tmp_path / "curve.csv").read_text().splitlines()
    assert rows[0] == "step,loss" and len(rows) == 4
    assert (tmp_path / "curve.png").exists()


def test_train_divergence_exit_code(mini_manifest, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 1e300, "warmup_steps": 1}))
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--manifest", str(mini_manifest), "--config", str(cfg), "--steps", "40",
                     "--checkpoint", str(tmp_path / "m.ckpt")])
    assert code == 1


def test_train_bad_config(mini_manifest, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"side": 33}))
    assert main(["train", "--manifest", str(mini_manifest), "--config", str(cfg),
                 "--checkpoint", str(tmp_path / "m.ckpt")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    err = float(out.split("max relative error:")[1])
    assert err < 1e-4


def test_threads_flag_is_bit_exact(tmp_path):
    for n in ("1", "3"):
        assert main(["--threads", n, "coat", "--scene", "builtin:test", "--thickness", "0.4",
                     "--out", str(tmp_path / f"t{n}.f32")]) == 0
    assert (tmp_path / "t1.f32").read_bytes() == (tmp_path / "t3.f32").read_bytes()

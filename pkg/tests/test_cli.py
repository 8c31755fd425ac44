import numpy as np
import pytest

from scenekit import __version__
from scenekit.cli import main
from scenekit.dataset import Dataset, read_depth_png, read_poses, read_rgb_png, write_depth_png

FAST = "[pipeline]\nrecon_steps = 3\nkeyframe_interval = 2\n\n[neuralpoints]\nn_train = 256\n"


@pytest.fixture(scope="module")
def cli_room(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "generate", "--frames", "6", "--out", str(root / "ds"),
                 "--sparse-fraction", "0.02"]) == 0
    (root / "fast.ini").write_text(FAST)
    return root


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["teleport"]) == 2
    assert "invalid choice" in capsys.readouterr().err


def test_missing_required_option_is_usage_error():
    assert main(["pipeline", "--app", "Mono-SLAM"]) == 2


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
    assert main(["flexion", "--version"]) == 0


def test_complete_without_sparse_file(tmp_path, capsys):
    prior = tmp_path / "prior.png"
    write_depth_png(prior, np.ones((8, 8)))
    code = main(["complete", "--sparse-depth", str(tmp_path / "nope.png"),
                 "--prior-depth", str(prior), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "NoObservations" in capsys.readouterr().err


def test_bad_config_is_domain_error(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[nowhere]\nx = 1\n")
    assert main(["--config", str(cfg), "bench", "--points", "10", "--size", "8x8"]) == 1


def test_flexion_writes_one_png_per_depth(cli_room, tmp_path):
    out = tmp_path / "flex"
    assert main(["flexion", "--input", str(cli_room / "ds"), "--output", str(out)]) == 0
    assert len(list(out.glob("*.png"))) == 6


def test_complete_writes_depth_and_variance(cli_room, tmp_path):
    ds = cli_room / "ds"
    sparse = sorted((ds / "sparse").glob("*.png"))[0]
    prior = sorted((ds / "prior").glob("*.png"))[0]
    assert main(["complete", "--sparse-depth", str(sparse), "--prior-depth", str(prior),
                 "--out", str(tmp_path)]) == 0
    depth = read_depth_png(tmp_path / "depth.png")
    raw = (tmp_path / "variance.f32").read_bytes()
    h, w = np.frombuffer(raw[:8], "<u4")
    assert (h, w) == depth.shape and len(raw) == 8 + 4 * h * w


def test_mono_slam_end_to_end(cli_room, tmp_path):
    args = ["--config", str(cli_room / "fast.ini"), "--seed", "4"]
    for out in ("a", "b"):
        code = main(["pipeline", "--app", "Mono-SLAM", "--dataset", str(cli_room / "ds"),
                     "--out", str(tmp_path / out), *args])
        assert code == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert sorted(read_poses(a / "trajectory.txt")) == list(range(6))
    depths = sorted(p.name for p in (a / "depth").glob("*.png"))
    assert depths
    assert (a / "model.npts").is_file()
    for name in ["trajectory.txt", "metrics.txt", "model.npts"] + [f"depth/{d}" for d in depths]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name

    # the checkpoint can be rendered straight away
    intr = Dataset.open(cli_room / "ds").intrinsics
    k = f"{intr.fx} {intr.fy} {intr.cx} {intr.cy}"
    pose = "0 0 0 0 0 0 1"
    img = tmp_path / "slf.png"
    assert main(["slf", "render", "--model", str(a / "model.npts"), "--pose", pose,
                 "--dataset", str(cli_room / "ds"), "--out", str(img)]) == 0
    assert read_rgb_png(img).values.shape == (intr.height, intr.width, 3)
    depth = tmp_path / "r.png"
    assert main(["raster", "--model", str(a / "model.npts"), "--pose", pose, "--intrinsics", k,
                 "--size", f"{intr.width}x{intr.height}", "--out", str(depth)]) == 0
    assert read_depth_png(depth).shape == (intr.height, intr.width)


def test_raster_requires_model():
    assert main(["raster", "--out", "x.png"]) == 2


def test_synth_is_seed_deterministic(tmp_path):
    for out in ("a", "b"):
        assert main(["synth", "generate", "--frames", "2", "--seed", "3",
                     "--out", str(tmp_path / out)]) == 0
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_bench_prints_timings(capsys):
    assert main(["bench", "--points", "500", "--size", "32x24", "--repeat", "1"]) == 0
    out = capsys.readouterr().out
    assert "fps=" in out and "speedup=" in out

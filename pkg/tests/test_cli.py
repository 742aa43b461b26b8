import numpy as np

from nvtm.cli import main
from nvtm.videoio import load_video, save_video

FAST = ["--set", "iterations=120", "--set", "batch_fraction=0.1",
        "--set", "static_levels=4", "--set", "net_width=32",
        "--set", "latent_levels=3", "--set", "gop_size=4"]


def test_stats_constant_frames(tmp_path, capsys):
    save_video(np.full((3, 16, 16, 3), 0.5, np.float32), tmp_path / "seq")
    rc = main(["stats", str(tmp_path / "seq"), "--gop", "3",
               "--flow-iters", "20"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "si=0.0000 ti=0.0000 me=0.0000" in out


def test_gradcheck_exits_zero(capsys):
    rc = main(["gradcheck", "--instances", "2"])
    assert rc == 0
    assert "passed" in capsys.readouterr().out


def test_encode_eval_decode_cycle(tmp_path, capsys):
    model = tmp_path / "m.nvtm"
    frames = tmp_path / "frames"
    rc = main(["encode", "--synthetic", "translate", "--dims", "6,16,16",
               "--velocity", "1,0", "--preset", "small", "--seed", "3",
               "--out", str(model), "--dump-frames", str(frames),
               "--report", str(tmp_path / "rep.csv"), *FAST])
    assert rc == 0
    assert model.exists()
    assert (tmp_path / "rep.csv").read_text().startswith(
        "iter,lr,l_recon,l_aux,seconds")

    rc = main(["eval", "--model", str(model), "--frames", str(frames)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "psnr:" in out

    rc = main(["decode", "--model", str(model), "--out",
               str(tmp_path / "dec"), "--fmt", "ppm"])
    assert rc == 0
    dec = load_video(tmp_path / "dec")
    assert dec.shape == (6, 16, 16, 3)

    rc = main(["superres", "--model", str(model), "--out",
               str(tmp_path / "sr")])
    assert rc == 0
    assert load_video(tmp_path / "sr").shape == (6, 31, 31, 3)

    rc = main(["interp", "--model", str(model), "--out",
               str(tmp_path / "fi")])
    assert rc == 0
    assert load_video(tmp_path / "fi").shape == (11, 16, 16, 3)

    rc = main(["export", "--model", str(model), "--out",
               str(tmp_path / "exp"), "--check"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "max abs decode difference 0" in out


def test_encode_deterministic_byte_identical(tmp_path):
    args = ["encode", "--synthetic", "translate", "--dims", "6,16,16",
            "--preset", "small", "--seed", "9", "--deterministic", *FAST]
    assert main(args + ["--out", str(tmp_path / "a.nvtm")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.nvtm")]) == 0
    assert (tmp_path / "a.nvtm").read_bytes() == \
        (tmp_path / "b.nvtm").read_bytes()


def test_unknown_config_key_exits_config_code(tmp_path, capsys):
    rc = main(["encode", "--synthetic", "translate", "--out",
               str(tmp_path / "x.nvtm"), "--set", "nonsense=1"])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_bad_frames_dir_exits_io_code(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    rc = main(["eval", "--model", str(tmp_path / "missing.nvtm"),
               "--frames", str(tmp_path / "empty")])
    assert rc == 3


def test_config_file_round_trip(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("gop_size = 4\nnet_width = 32\n# comment\n")
    rc = main(["encode", "--synthetic", "translate", "--dims", "6,16,16",
               "--config", str(cfg), "--preset", "small",
               "--set", "iterations=60", "--set", "batch_fraction=0.1",
               "--set", "static_levels=3", "--set", "latent_levels=3",
               "--out", str(tmp_path / "c.nvtm")])
    assert rc == 0


def test_inpaint_subcommand(tmp_path, capsys):
    rc = main(["inpaint", "--synthetic", "translate", "--dims", "6,16,16",
               "--velocity", "1,0", "--preset", "small", "--seed", "1",
               "--mask-count", "2", "--mask-side", "3", *FAST])
    out = capsys.readouterr().out
    assert rc == 0
    assert "masked-region psnr" in out


def test_ablate_index_set(tmp_path, capsys):
    rc = main(["ablate", "--study", "index-set", "--dims", "6,16,16",
               "--velocity", "1,0", "--set", "iterations=60",
               "--set", "batch_fraction=0.1", "--set", "static_levels=3",
               "--set", "latent_levels=3", "--set", "net_width=24",
               "--set", "gop_size=3"])
    out = capsys.readouterr().out
    assert rc == 0
    assert out.count("psnr") >= 2

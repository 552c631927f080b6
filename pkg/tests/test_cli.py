import filecmp
import math
import subprocess
import sys

import numpy as np
import pytest

from stereobox.cli import main, read_manifest
from stereobox.kitti import format_label, read_labels

from oracles import exhaustive_ap


def run(*argv):
    return main([str(a) for a in argv])


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    # dircmp compares shallowly; check bytes explicitly
    for name in cmp.common_files:
        if (a / name).read_bytes() != (b / name).read_bytes():
            return False
    return all(same_tree(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    assert run("synth", root / "s", "--frames", 4, "--objects", 5, "--seed", 11) == 0
    return root / "s"


def test_synth_is_deterministic(tmp_path, scene):
    assert run("synth", tmp_path / "again", "--frames", 4, "--objects", 5, "--seed", 11) == 0
    assert same_tree(scene, tmp_path / "again")
    assert run("synth", tmp_path / "other", "--frames", 4, "--objects", 5, "--seed", 12) == 0
    assert not same_tree(scene, tmp_path / "other")


def test_solve_recovers_labels(tmp_path, scene):
    assert run("solve", scene, tmp_path / "res", "--no-refine") == 0
    for gt_path in sorted((scene / "label_2").iterdir()):
        gts = read_labels(gt_path)
        res = read_labels(tmp_path / "res" / gt_path.name)
        assert len(res) == len(gts)
        for g, r in zip(gts, res):
            assert r.score == 1.0
            # both files hold two decimals; allow one unit of rounding each way
            assert np.allclose(r.location, g.location, atol=0.0101)
            assert abs(math.remainder(r.rotation_y - g.rotation_y, 2 * math.pi)) <= 0.0101
            assert np.allclose(r.bbox, g.bbox, atol=0.0101)


def test_solve_output_independent_of_workers(tmp_path, scene):
    assert run("solve", scene, tmp_path / "a", "--workers", 1) == 0
    assert run("solve", scene, tmp_path / "b", "--workers", 3) == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")


def test_empty_frame_gives_empty_result(tmp_path):
    assert run("synth", tmp_path / "s", "--frames", 1, "--objects", 2) == 0
    (tmp_path / "s" / "observations" / "000000.txt").write_text("")
    assert run("solve", tmp_path / "s", tmp_path / "r") == 0
    assert (tmp_path / "r" / "000000.txt").read_text() == ""


def test_corrupt_calib_names_the_file(tmp_path, capsys):
    assert run("synth", tmp_path / "s", "--frames", 2, "--objects", 2) == 0
    bad = tmp_path / "s" / "calib" / "000001.txt"
    bad.write_text("P2: 1 0 0\n")
    assert run("solve", tmp_path / "s", tmp_path / "r") == 1
    assert str(bad) in capsys.readouterr().err
    # nothing is written before validation fails
    assert not (tmp_path / "r").exists()


def test_missing_inputs_exit_one(tmp_path, capsys):
    assert run("solve", tmp_path / "nowhere", tmp_path / "r") == 1
    assert run("eval", tmp_path / "nowhere", tmp_path / "gt") == 1
    assert "nowhere" in capsys.readouterr().err


def test_eval_perfect_results(tmp_path, scene, capsys):
    assert run("solve", scene, tmp_path / "res", "--no-refine") == 0
    capsys.readouterr()
    assert run("eval", tmp_path / "res", scene / "label_2", "--out", tmp_path / "ev") == 0
    text = capsys.readouterr().out
    assert "gap" in text
    kv = dict(line.split("=") for line in (tmp_path / "ev" / "metrics.txt").read_text().split())
    for key, value in kv.items():
        if key.startswith("ap_") and key != "ap_mode" and value != "nan":
            assert float(value) == 1.0, key
    assert float(kv["gap"]) == 0.0
    assert (tmp_path / "ev" / "pr.csv").read_text().startswith("metric,difficulty")


def test_eval_corrupted_results_match_oracle(tmp_path, scene, capsys):
    rng = np.random.default_rng(3)
    (tmp_path / "res").mkdir()
    frames = []
    for gt_path in sorted((scene / "label_2").iterdir()):
        gts = read_labels(gt_path)
        lines, dets = [], []
        for g in gts:
            x1, y1, x2, y2 = g.bbox
            if rng.random() < 0.4:
                s = 0.8 * (x2 - x1)
                x1, x2 = x1 + s, x2 + s
            score = round(float(rng.random()), 1)
            d = g.__class__(g.type, 0.0, 0, g.alpha, (x1, y1, x2, y2), g.dimensions, g.location,
                            g.rotation_y, score)
            lines.append(format_label(d))
            dets.append((score, tuple(float(f"{v:.2f}") for v in (x1, y1, x2, y2))))
        (tmp_path / "res" / gt_path.name).write_text("\n".join(lines) + "\n")
        frames.append(([(g.bbox, g.occluded, g.truncated, g.is_dontcare) for g in gts], dets))
    capsys.readouterr()
    assert run("eval", tmp_path / "res", scene / "label_2", "--metrics", "2d",
               "--out", tmp_path / "ev") == 0
    kv = dict(line.split("=") for line in (tmp_path / "ev" / "metrics.txt").read_text().split())
    for name, h, occ, trunc in (("easy", 40, 0, 0.15), ("moderate", 25, 1, 0.3),
                                ("hard", 25, 2, 0.5)):
        ref = exhaustive_ap(frames, 0.7, h, occ, trunc)
        got = float(kv[f"ap_2d_{name}"])
        assert (math.isnan(ref) and math.isnan(got)) or got == pytest.approx(ref, abs=5e-7)


def test_ap_mode_flag(tmp_path, scene, capsys):
    assert run("solve", scene, tmp_path / "res", "--no-refine") == 0
    capsys.readouterr()
    assert run("eval", tmp_path / "res", scene / "label_2", "--ap-mode", 40) == 0
    assert "40-point" in capsys.readouterr().out


def test_codec_self_test(capsys):
    assert run("codec", "--sweep") == 0
    out = capsys.readouterr().out
    assert "5/5 checks passed" in out
    counts = [int(line.split()[1]) for line in out.splitlines()
              if line.strip() and line.split()[0].replace(".", "").isdigit()]
    assert counts and all(a >= b for a, b in zip(counts, counts[1:]))


def test_codec_injected_bug_exits_two(capsys):
    assert run("codec", "--inject-bug", "focal-gradient") == 2
    assert "FAIL  focal-gradient" in capsys.readouterr().out


def test_manifest_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# demo\nseed = 5\nframes = 1\nobjects = 3\n")
    assert read_manifest(cfg) == {"seed": 5, "frames": 1, "objects": 3}
    assert run("synth", tmp_path / "a", "--config", cfg) == 0
    assert run("synth", tmp_path / "b", "--frames", 1, "--objects", 3, "--seed", 5) == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")
    assert run("synth", tmp_path / "c", "--config", cfg, "--seed", 6) == 0
    assert not same_tree(tmp_path / "a", tmp_path / "c")
    cfg.write_text("colour = red\n")
    assert run("synth", tmp_path / "d", "--config", cfg) == 1


def test_noise_flag_changes_observations_only(tmp_path):
    assert run("synth", tmp_path / "a", "--frames", 1, "--objects", 3) == 0
    assert run("synth", tmp_path / "b", "--frames", 1, "--objects", 3, "--noise-sigma", 0.5) == 0
    lab = "label_2/000000.txt"
    obs = "observations/000000.txt"
    assert (tmp_path / "a" / lab).read_text() == (tmp_path / "b" / lab).read_text()
    assert (tmp_path / "a" / obs).read_text() != (tmp_path / "b" / obs).read_text()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stereobox", "synth", str(tmp_path / "s"),
                           "--frames", "1", "--objects", "2"],
                          capture_output=True, text=True, env={"SC_LOG": "info",
                                                               "PATH": "/usr/bin:/bin"})
    assert proc.returncode == 0, proc.stderr
    assert "wrote 1 frames" in proc.stderr

import json
import subprocess
import sys

import numpy as np
import pytest

from lcdkit import cli
from lcdkit.cli import main
from lcdkit.descriptors import DescriptorSet, load_descriptors, save_descriptors
from lcdkit.geometry import GroundTruth, Pose, build_ground_truth, format_poses, load_poses, straight_trajectory

from oracles import brute_ground_truth


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "desc.npy"), "--frames", "300", "--dim", "32",
                 "--scale", "15", "--poses-out", str(d / "poses.txt"),
                 "--features-out", str(d / "feats"), "--local-dim", "16", "--landmarks", "300"]) == 0
    assert main(["gen-gt", str(d / "poses.txt"), "--out", str(d / "gt.json")]) == 0
    return d


def test_synth_deterministic(tmp_path):
    for name in ("a.npy", "b.npy"):
        assert main(["synth", "--frames", "500", "--dim", "64", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.npy").read_bytes() == (tmp_path / "b.npy").read_bytes()
    assert load_descriptors(tmp_path / "a.npy").count == 500
    manifest = json.loads((tmp_path / "a.npy.manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["config"]["seed"] == 7
    assert {"tool", "version", "timestamp", "inputs"} <= set(manifest)


def test_gen_gt_matches_oracle(workdir, capsys):
    main(["gen-gt", str(workdir / "poses.txt"), "--out", str(workdir / "gt2.json")])
    out = capsys.readouterr().out
    gt = GroundTruth.from_json((workdir / "gt2.json").read_text())
    oracle = brute_ground_truth(load_poses(workdir / "poses.txt"), 1.5, 0.3, 100)
    assert gt.pair_count == sum(len(v) for v in oracle.values()) // 2
    assert f"pairs: {gt.pair_count}" in out
    manifest = json.loads((workdir / "gt2.json.manifest.json").read_text())
    assert list(manifest["inputs"].values())[0] != ""


def test_gen_gt_window_zero_duplicates(tmp_path):
    poses = [Pose.identity(), Pose.identity(), Pose(np.eye(3), [9.0, 0.0, 0.0])]
    (tmp_path / "p.txt").write_text(format_poses(poses))
    assert main(["gen-gt", str(tmp_path / "p.txt"), "--window", "0", "--out", str(tmp_path / "g.json")]) == 0
    gt = GroundTruth.from_json((tmp_path / "g.json").read_text())
    assert gt[0] == (1,) and gt[1] == (0,)


def test_missing_file_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.txt"
    assert main(["gen-gt", str(missing), "--out", str(tmp_path / "g.json")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_malformed_poses_exit_code(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("1 0 0 0 0 1 0 0 0 0 1\n")
    assert main(["gen-gt", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "g.json")]) == 2
    assert "line 1" in capsys.readouterr().err


def test_bad_descriptor_file_exit_code(tmp_path):
    (tmp_path / "d.bin").write_bytes(b"garbage!")
    assert main(["heatmap", str(tmp_path / "d.bin"), "--out", str(tmp_path / "h.pgm")]) == 2


def test_bad_flag_exit_code():
    assert main(["eval", "x", "y", "--out-dir", "z", "--k", "0"]) == 2
    assert main(["nonsense"]) == 2


def test_internal_error_exit_code(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(cli, "synth_descriptors", boom)
    assert main(["synth", "--out", str(tmp_path / "a.npy")]) == 1


def test_eval_flat_vs_full_probe_ivf(workdir):
    base = [str(workdir / "desc.npy"), str(workdir / "gt.json"), "--k", "1,5,10,25"]
    assert main(["eval", *base, "--out-dir", str(workdir / "flat")]) == 0
    assert main(["eval", *base, "--backend", "ivf", "--nlist", "8", "--nprobe", "8",
                 "--out-dir", str(workdir / "ivf")]) == 0
    for k in (1, 5, 10, 25):
        name = f"pr_top{k}.csv"
        assert (workdir / "flat" / name).read_bytes() == (workdir / "ivf" / name).read_bytes()
    timing = json.loads((workdir / "flat" / "timing.json").read_text())
    assert timing["total_query_ns"] == timing["total_encoding_ns"] + timing["total_retrieval_ns"]
    assert (workdir / "flat" / "manifest.json").exists()


def read_curve(path):
    rows = [line.split(",") for line in path.read_text().splitlines()[1:]]
    return [(float(t), None if p == "" else float(p), float(r)) for t, p, r, *_ in rows]


def recall_at(curve, theta):
    best = curve[0][2]
    for t, _, r in curve:
        if t >= theta:
            best = r
    return best


def test_eval_k_monotone(workdir):
    c1 = read_curve(workdir / "flat" / "pr_top1.csv")
    c25 = read_curve(workdir / "flat" / "pr_top25.csv")
    for theta in (-0.1, -0.5, -1.0, -2.0, -4.0):
        assert recall_at(c25, theta) >= recall_at(c1, theta)


def test_eval_perfect_fixture(tmp_path):
    # 3 m spacing: each second-lap frame has exactly one partner
    poses = straight_trajectory(150, spacing=3.0) * 2
    (tmp_path / "p.txt").write_text(format_poses(poses))
    main(["gen-gt", str(tmp_path / "p.txt"), "--out", str(tmp_path / "gt.json")])
    rng = np.random.default_rng(0)
    base = rng.normal(size=(150, 16))
    save_descriptors(DescriptorSet(np.vstack([base, base])), tmp_path / "d.npy")
    assert main(["eval", str(tmp_path / "d.npy"), str(tmp_path / "gt.json"), "--k", "1,5,10,25",
                 "--out-dir", str(tmp_path / "out")]) == 0
    for k in (1, 5, 10, 25):
        curve = read_curve(tmp_path / "out" / f"pr_top{k}.csv")
        assert curve[1][1] == 1.0
        assert any(r == 1.0 for _, _, r in curve)


def test_eval_count_mismatch(workdir, tmp_path):
    save_descriptors(DescriptorSet(np.ones((5, 4))), tmp_path / "d.npy")
    assert main(["eval", str(tmp_path / "d.npy"), str(workdir / "gt.json"), "--out-dir", str(tmp_path / "o")]) == 2


def test_eval_bow_and_events(workdir, tmp_path):
    assert main(["train-vocab", str(workdir / "feats"), "--out", str(tmp_path / "v.lbvc"),
                 "--branching", "5", "--depth", "2"]) == 0
    assert main(["eval", str(workdir / "feats"), str(workdir / "gt.json"), "--backend", "bow",
                 "--vocab", str(tmp_path / "v.lbvc"), "--k", "5", "--accept", "0.2",
                 "--out-dir", str(tmp_path / "bow"), "--events-out", str(tmp_path / "ev.jsonl")]) == 0
    assert (tmp_path / "bow" / "pr_top5.csv").exists()
    for line in (tmp_path / "ev.jsonl").read_text().splitlines():
        assert set(json.loads(line)) == {"query", "match", "score", "consistent"}


def test_heatmap_identical_frames(tmp_path):
    save_descriptors(DescriptorSet(np.ones((2, 8))), tmp_path / "d.npy")
    assert main(["heatmap", str(tmp_path / "d.npy"), "--out", str(tmp_path / "h.pgm")]) == 0
    data = (tmp_path / "h.pgm").read_bytes()
    header = b"P5\n2 2\n255\n"
    assert data.startswith(header)
    assert len(set(data[len(header):])) == 1


def test_build_index_and_query(workdir, tmp_path):
    for kind in ("flat", "ivf"):
        out = tmp_path / f"{kind}.lbix"
        assert main(["build-index", str(workdir / "desc.npy"), "--out", str(out), "--kind", kind, "--nlist", "8"]) == 0
        assert main(["query", str(out), str(workdir / "desc.npy"), "--frames", "0,150", "--k", "3",
                     "--nprobe", "8", "--out", str(tmp_path / f"{kind}.jsonl")]) == 0
    flat = (tmp_path / "flat.jsonl").read_text()
    assert flat == (tmp_path / "ivf.jsonl").read_text()
    first = json.loads(flat.splitlines()[0])
    assert first["query"] == 0 and first["results"][0] == [0, 0.0]


def test_bench_reports_identity(tmp_path):
    for backend in ("flat", "ivf"):
        out = tmp_path / f"{backend}.json"
        assert main(["bench", "--backend", backend, "--frames", "300", "--dim", "32", "--nlist", "8",
                     "--nprobe", "2", "--k", "10", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["total_query_ns"] == report["total_encoding_ns"] + report["total_retrieval_ns"]
        assert report["published_reference_s"]["frames"] == 4541


def test_config_file_precedence(workdir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# eval settings\nk = 5\nwindow = 50\n")
    out = tmp_path / "o1"
    assert main(["--config", str(cfg), "eval", str(workdir / "desc.npy"), str(workdir / "gt.json"),
                 "--out-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["k"] == [5] and manifest["config"]["window"] == 50
    out = tmp_path / "o2"
    assert main(["--config", str(cfg), "eval", str(workdir / "desc.npy"), str(workdir / "gt.json"),
                 "--window", "70", "--out-dir", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["window"] == 70


def test_config_file_unknown_key(workdir, tmp_path):
    (tmp_path / "bad.cfg").write_text("bogus = 1\n")
    assert main(["--config", str(tmp_path / "bad.cfg"), "heatmap", str(workdir / "desc.npy"),
                 "--out", str(tmp_path / "h.pgm")]) == 2


def test_every_subcommand_takes_seed():
    parser = cli.build_parser()
    subs = parser._subparsers._group_actions[0].choices
    for name, sub in subs.items():
        assert "seed" in {a.dest for a in sub._actions}, name


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "lcdkit.cli", "synth", "--frames", "120", "--dim", "16", "--out", str(tmp_path / "d.npy")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "frames: 120" in proc.stdout

"""End-to-end tests for the command line interface."""

import csv
import io as stdio
import subprocess
import sys

import numpy as np
import pytest

from rangeloop import io
from rangeloop.cli import main

WORLD_KV = """\
seed=42
n_places=4
visits_per_place=2
h=8
w=32
n_obstacles=4
"""

CONFIG_KV = """\
h=8
w=32
stage=8,2,2
stage=16,2,2
stage=16,2,2
olm_n=2
vlad_k=4
mlp_hidden=16
out_dim=8
loss=imtrihard
lr=0.0005
epochs=1
k_p=2
k_n=2
seed=42
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synthetic dataset shared by the CLI tests: world, range images,
    overlap labels, and a one-epoch checkpoint."""
    root = tmp_path_factory.mktemp("cliws")
    (root / "world.kv").write_text(WORLD_KV)
    (root / "config.kv").write_text(CONFIG_KV)
    assert main(["synth", "--spec", str(root / "world.kv"),
                 "--out", str(root / "world")]) == 0
    assert main(["project", "--scans", str(root / "world"),
                 "--config", str(root / "world" / "sensor.kv"),
                 "--out", str(root / "ranges")]) == 0
    assert main(["overlaps", "--scans", str(root / "world"),
                 "--poses", str(root / "world" / "poses.txt"),
                 "--config", str(root / "world" / "sensor.kv"),
                 "--out", str(root / "labels.txt")]) == 0
    assert main(["train", "--config", str(root / "config.kv"),
                 "--data", str(root / "ranges"),
                 "--labels", str(root / "labels.txt"),
                 "--out", str(root / "ckpt")]) == 0
    assert main(["embed", "--ckpt", str(root / "ckpt" / "final.omck"),
                 "--ranges", str(root / "ranges"),
                 "--out", str(root / "db.omdb")]) == 0
    return root


def _stdout_csv(capsys):
    return list(csv.reader(stdio.StringIO(capsys.readouterr().out)))


class TestWorkflow:
    def test_synth_outputs(self, workspace):
        names = {p.name for p in (workspace / "world").iterdir()}
        assert {"poses.txt", "places.txt", "sensor.kv",
                "scan_0000.bin", "scan_0007.bin"} <= names

    def test_project_outputs(self, workspace):
        ranges = sorted(p.name for p in (workspace / "ranges").iterdir())
        assert ranges == [f"range_{i:04d}.omrv" for i in range(8)]
        ri = io.load_range_image(workspace / "ranges" / "range_0000.omrv")
        assert ri.ranges.shape == (8, 32)

    def test_revisit_labels_exceed_threshold(self, workspace):
        labels = io.load_labels(workspace / "labels.txt")
        table = {(l.query, l.cand): l.overlap for l in labels}
        assert len(labels) == 28  # all unordered pairs of 8 scans
        for i in range(4):
            assert table[(i, i + 4)] > 0.3  # revisit of the same place
        assert table[(0, 1)] == 0.0  # different places never overlap

    def test_train_outputs(self, workspace):
        names = {p.name for p in (workspace / "ckpt").iterdir()}
        assert {"epoch_000.omck", "final.omck", "model.kv", "report.csv"} <= names
        rows = list(csv.reader((workspace / "ckpt" / "report.csv").open()))
        assert rows[0] == ["epoch", "mean_loss", "val_f1max"]
        assert len(rows) == 2

    def test_embed_outputs(self, workspace):
        ids, descriptors = io.load_descriptor_db(workspace / "db.omdb")
        assert ids == list(range(8))
        assert descriptors.shape == (8, 8)
        np.testing.assert_allclose(np.linalg.norm(descriptors, axis=1), 1.0,
                                   atol=1e-6)

    def test_search_ranks_self_first(self, workspace, capsys):
        assert main(["search", "--db", str(workspace / "db.omdb"),
                     "--query", str(workspace / "db.omdb"), "--k", "3"]) == 0
        rows = _stdout_csv(capsys)
        assert rows[0] == ["query_id", "rank", "candidate_id", "distance"]
        assert len(rows) == 1 + 8 * 3
        for q in range(8):
            top = rows[1 + q * 3]
            assert top[:3] == [str(q), "1", str(q)] and float(top[3]) == 0.0

    def test_eval_loop_report(self, workspace, tmp_path, capsys):
        proto = tmp_path / "loop.kv"
        proto.write_text("kind=loop_closure\nwindow=3\n")
        assert main(["eval-loop", "--db", str(workspace / "db.omdb"),
                     "--poses", str(workspace / "world" / "poses.txt"),
                     "--labels", str(workspace / "labels.txt"),
                     "--protocol", str(proto)]) == 0
        report = dict(_stdout_csv(capsys)[1:])
        assert report["n_queries"] == "8"
        assert report["n_scored"] == "4"  # window 3 leaves queries 4..7
        assert report["n_positive_queries"] == "4"  # every one has a revisit
        assert 0.0 <= float(report["recall1"]) <= 1.0

    def test_eval_place_report(self, workspace, tmp_path, capsys):
        proto = tmp_path / "place.kv"
        proto.write_text("kind=place_recognition\ndistance_threshold=10.0\n")
        assert main(["eval-place", "--db", str(workspace / "db.omdb"),
                     "--query-db", str(workspace / "db.omdb"),
                     "--poses-a", str(workspace / "world" / "poses.txt"),
                     "--poses-b", str(workspace / "world" / "poses.txt"),
                     "--protocol", str(proto)]) == 0
        report = dict(_stdout_csv(capsys)[1:])
        assert float(report["ar1"]) == 1.0
        assert report["excluded"] == "0"

    def test_bench_low_confidence_single_rep(self, workspace, capsys):
        assert main(["bench", "--ckpt", str(workspace / "ckpt" / "final.omck"),
                     "--reps", "1"]) == 0
        rows = _stdout_csv(capsys)
        assert rows[0][0] == "name"
        assert {r[0] for r in rows[1:]} == {
            "descriptor_extraction", "db_search_1000",
            "scan_sequential_m900", "scan_parallel_m900",
        }
        assert all(r[5] == "1" for r in rows[1:])


class TestDeterminism:
    def test_train_embed_bit_identical(self, workspace, tmp_path):
        outs = []
        for run in ("a", "b"):
            ck = tmp_path / f"ckpt_{run}"
            db = tmp_path / f"db_{run}.omdb"
            assert main(["train", "--config", str(workspace / "config.kv"),
                         "--data", str(workspace / "ranges"),
                         "--labels", str(workspace / "labels.txt"),
                         "--out", str(ck)]) == 0
            assert main(["embed", "--ckpt", str(ck / "final.omck"),
                         "--ranges", str(workspace / "ranges"),
                         "--out", str(db)]) == 0
            outs.append(((ck / "final.omck").read_bytes(),
                         (ck / "report.csv").read_bytes(),
                         db.read_bytes()))
        assert outs[0] == outs[1]


class TestExitCodes:
    def test_contract_error_is_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.kv"
        bad.write_text("gravity=9.81\n")
        assert main(["synth", "--spec", str(bad),
                     "--out", str(tmp_path / "w")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_file_is_2(self, tmp_path, capsys):
        assert main(["search", "--db", str(tmp_path / "absent.omdb"),
                     "--query", str(tmp_path / "absent.omdb"), "--k", "1"]) == 2
        capsys.readouterr()

    def test_missing_model_geometry_is_2(self, workspace, tmp_path, capsys):
        bare = tmp_path / "bare.omck"
        bare.write_bytes((workspace / "ckpt" / "final.omck").read_bytes())
        rc = main(["embed", "--ckpt", str(bare),
                   "--ranges", str(workspace / "ranges"),
                   "--out", str(tmp_path / "db.omdb")])
        assert rc == 2
        assert "model.kv" in capsys.readouterr().err

    def test_degenerate_input_is_3(self, workspace, tmp_path, capsys):
        arrays = io.load_checkpoint(workspace / "ckpt" / "final.omck")
        arrays["gdg.mlp2.weight"] = np.full_like(arrays["gdg.mlp2.weight"], np.nan)
        poisoned = tmp_path / "poisoned"
        poisoned.mkdir()
        io.save_checkpoint(poisoned / "final.omck", arrays)
        (poisoned / "model.kv").write_bytes(
            (workspace / "ckpt" / "model.kv").read_bytes())
        rc = main(["embed", "--ckpt", str(poisoned / "final.omck"),
                   "--ranges", str(workspace / "ranges"),
                   "--out", str(tmp_path / "db.omdb")])
        assert rc == 3
        assert "degenerate" in capsys.readouterr().err

    def test_protocol_kind_mismatch_is_2(self, workspace, tmp_path, capsys):
        proto = tmp_path / "wrong.kv"
        proto.write_text("kind=place_recognition\n")
        rc = main(["eval-loop", "--db", str(workspace / "db.omdb"),
                   "--poses", str(workspace / "world" / "poses.txt"),
                   "--labels", str(workspace / "labels.txt"),
                   "--protocol", str(proto)])
        assert rc == 2
        capsys.readouterr()


class TestEntryPoint:
    def test_module_invocation_selfcheck(self):
        proc = subprocess.run(
            [sys.executable, "-m", "rangeloop.cli", "selfcheck"],
            capture_output=True, text=True, timeout=300,
        )
        assert proc.returncode == 0, proc.stdout + proc.stderr
        assert "checks passed" in proc.stdout

"""CLI surface: subcommands, exit codes, output layout, determinism."""

import hashlib

import numpy as np
import pytest

from occlume import cli, geomesh, procgen
from occlume.geomesh import parse_pcb, parse_ply
from occlume.occlusion import DatasetManifest


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def mesh_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("meshes")
    for cls in ("box", "sphere"):
        d = root / cls / "train"
        d.mkdir(parents=True)
        for i in range(2):
            mesh = procgen.toy_mesh(cls, 10 * i + (0 if cls == "box" else 1))
            (d / f"{cls}_{i}.off").write_bytes(geomesh.write_off(mesh))
    return root


@pytest.fixture(scope="module")
def dataset(mesh_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = run(["gen", "--meshes", str(mesh_root), "--out", str(out),
                "--density", "1024", "--n-points", "64", "--seed", "3"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run(["train", "--manifest", str(dataset / "manifest.tsv"),
                "--out", str(out), "--epochs", "2", "--batch", "8",
                "--levels", "64,32", "--k", "4", "--stages", "1",
                "--embed-top", "4", "--embed-sub", "4", "--no-norm",
                "--lr", "0.02", "--seed", "5", "--quiet"])
    assert code == 0
    return out


class TestGen:
    def test_summary_matches_manifest(self, dataset, capsys):
        manifest = DatasetManifest.read(dataset / "manifest.tsv")
        assert len(manifest.rows) + manifest.skipped == 80
        files = list(dataset.rglob("*.pcb"))
        assert len(files) == len(manifest.rows)

    def test_missing_meshes_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["gen", "--out", "/tmp/x"])
        assert exc.value.code == 2

    def test_cross_view_counts(self, dataset):
        manifest = DatasetManifest.read(dataset / "manifest.tsv")
        train = sum(1 for r in manifest.rows if r.split == "train")
        test = sum(1 for r in manifest.rows if r.split == "test")
        assert train + test == len(manifest.rows)
        # parity split: per mesh the two halves differ only by skips
        assert abs(train - test) <= manifest.skipped + 4

    def test_rerun_bitwise_identical(self, mesh_root, tmp_path):
        args = ["gen", "--meshes", str(mesh_root), "--density", "1024",
                "--n-points", "64", "--seed", "3"]
        run(args + ["--out", str(tmp_path / "a")])
        run(args + ["--out", str(tmp_path / "b")])
        ma = (tmp_path / "a" / "manifest.tsv").read_bytes()
        mb = (tmp_path / "b" / "manifest.tsv").read_bytes()
        assert ma == mb
        ha = [hashlib.sha256(p.read_bytes()).hexdigest()
              for p in sorted((tmp_path / "a").rglob("*.pcb"))]
        hb = [hashlib.sha256(p.read_bytes()).hexdigest()
              for p in sorted((tmp_path / "b").rglob("*.pcb"))]
        assert ha == hb

    def test_unsupported_views_rejected(self, mesh_root, tmp_path):
        code = run(["gen", "--meshes", str(mesh_root), "--out", str(tmp_path),
                    "--views", "12"])
        assert code == 2

    def test_config_file_overridden_by_flags(self, mesh_root, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("density=512\nn_points=32\nseed=9\n")
        code = run(["gen", "--meshes", str(mesh_root), "--out", str(tmp_path / "o"),
                    "--config", str(cfg), "--n-points", "48"])
        assert code == 0
        manifest = DatasetManifest.read(tmp_path / "o" / "manifest.tsv")
        assert all(r.count == 48 for r in manifest.rows)


class TestSample:
    def test_fps_full_is_permutation_chamfer_zero(self, dataset, tmp_path, capsys):
        cloud_file = next(dataset.rglob("*.pcb"))
        n = len(parse_pcb(cloud_file.read_bytes()))
        code = run(["sample", "--in", str(cloud_file), "--method", "fps",
                    "--m", str(n), "--out", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "chamfer_to_input=0.0" in out
        written = parse_pcb(next(tmp_path.glob("*.pcb")).read_bytes())
        src = parse_pcb(cloud_file.read_bytes())
        assert sorted(map(tuple, written.points)) == sorted(map(tuple, src.points))

    def test_rs_reproducible_hash(self, dataset, tmp_path):
        cloud_file = next(dataset.rglob("*.pcb"))
        hashes = []
        for sub in ("a", "b"):
            d = tmp_path / sub
            run(["sample", "--in", str(cloud_file), "--method", "rs", "--m", "16",
                 "--out", str(d), "--seed", "7"])
            hashes.append(hashlib.sha256(next(d.glob("*.pcb")).read_bytes()).hexdigest())
        assert hashes[0] == hashes[1]

    def test_cps_hard_outputs_input_points(self, dataset, trained, tmp_path):
        cloud_file = next(dataset.rglob("*.pcb"))
        code = run(["sample", "--in", str(cloud_file), "--method", "cps",
                    "--m", "32", "--ckpt", str(trained / "ckpt" / "model.mls1"),
                    "--out", str(tmp_path), "--ply"])
        assert code == 0
        src = parse_pcb(cloud_file.read_bytes()).points
        out = parse_pcb(next(tmp_path.glob("*.pcb")).read_bytes()).points
        for row in out:
            assert np.any(np.all(np.isclose(row, src, atol=1e-6), axis=1))
        assert (tmp_path / next(tmp_path.glob("*.pcb")).with_suffix(".ply").name).exists()

    def test_cps_requires_ckpt(self, dataset, tmp_path):
        cloud_file = next(dataset.rglob("*.pcb"))
        code = run(["sample", "--in", str(cloud_file), "--method", "cps",
                    "--m", "16", "--out", str(tmp_path)])
        assert code == 2

    def test_m_too_large_fails_1(self, dataset, tmp_path):
        cloud_file = next(dataset.rglob("*.pcb"))
        code = run(["sample", "--in", str(cloud_file), "--method", "fps",
                    "--m", "100000", "--out", str(tmp_path)])
        assert code == 1

    def test_bad_method_exits_2(self, dataset, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(["sample", "--in", "x.pcb", "--method", "bogus", "--m", "4",
                 "--out", str(tmp_path)])
        assert exc.value.code == 2


class TestTrainEvalNoise:
    def test_train_outputs(self, trained):
        assert (trained / "ckpt" / "model.mls1").exists()
        assert (trained / "ckpt" / "model.spec").exists()
        log = (trained / "metrics" / "train_log.csv").read_text()
        assert log.startswith("#")
        assert "epoch,loss,lr,tau,holdout_oa" in log

    def test_eval_writes_metrics(self, dataset, trained, tmp_path):
        code = run(["eval", "--manifest", str(dataset / "manifest.tsv"),
                    "--ckpt", str(trained / "ckpt" / "model.mls1"),
                    "--split", "test", "--out", str(tmp_path), "--seed", "2"])
        assert code == 0
        text = (tmp_path / "metrics" / "eval_test.csv").read_text()
        assert text.startswith("# occlume eval")
        assert "confusion" in text

    def test_eval_fresh_model_near_chance(self, dataset, tmp_path, capsys):
        code = run(["eval", "--manifest", str(dataset / "manifest.tsv"),
                    "--split", "test", "--out", str(tmp_path),
                    "--levels", "64,32", "--k", "4", "--stages", "1",
                    "--embed-top", "4", "--embed-sub", "4", "--no-norm",
                    "--seed", "11"])
        assert code == 0
        out = capsys.readouterr().out
        oa = float(out.split("oa=")[1].split()[0])
        assert abs(oa - 0.5) <= 0.25  # 2 classes at chance level

    def test_noise_eta_zero_matches_eval(self, dataset, trained, tmp_path):
        common = ["--manifest", str(dataset / "manifest.tsv"),
                  "--ckpt", str(trained / "ckpt" / "model.mls1"),
                  "--split", "test", "--seed", "3"]
        run(["eval", *common, "--out", str(tmp_path / "e")])
        run(["noise", *common, "--eta", "0,0.25", "--out", str(tmp_path / "n")])
        eval_text = (tmp_path / "e" / "metrics" / "eval_test.csv").read_text()
        noise_text = (tmp_path / "n" / "metrics" / "noise.csv").read_text()
        oa_eval = eval_text.splitlines()[1].split(",")[1]
        noise_rows = [l for l in noise_text.splitlines() if l.startswith("0.0,")]
        assert noise_rows and noise_rows[0].split(",")[1] == oa_eval

    def test_train_determinism_bitwise(self, dataset, tmp_path):
        args = ["train", "--manifest", str(dataset / "manifest.tsv"),
                "--epochs", "1", "--batch", "8", "--levels", "64,32",
                "--k", "4", "--stages", "1", "--embed-top", "4",
                "--embed-sub", "4", "--no-norm", "--seed", "5", "--quiet"]
        run(args + ["--out", str(tmp_path / "a")])
        run(args + ["--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "ckpt" / "model.mls1").read_bytes() == \
               (tmp_path / "b" / "ckpt" / "model.mls1").read_bytes()
        assert (tmp_path / "a" / "metrics" / "train_log.csv").read_bytes() == \
               (tmp_path / "b" / "metrics" / "train_log.csv").read_bytes()


class TestExportPly:
    def test_roundtrip_f32_exact(self, dataset, tmp_path):
        cloud_file = next(dataset.rglob("*.pcb"))
        target = tmp_path / "cloud.ply"
        code = run(["export-ply", "--in", str(cloud_file), "--out-ply", str(target)])
        assert code == 0
        src = parse_pcb(cloud_file.read_bytes()).points
        back = parse_ply(target.read_text()).points
        assert np.array_equal(back.astype(np.float32), src.astype(np.float32))

    def test_vertex_count_header(self, tmp_path):
        pcb = tmp_path / "three.pcb"
        pcb.write_bytes(geomesh.write_pcb(geomesh.PointCloud(np.eye(3))))
        run(["export-ply", "--in", str(pcb)])
        assert "element vertex 3" in (tmp_path / "three.ply").read_text()

    def test_missing_input_fails_1(self, tmp_path):
        code = run(["export-ply", "--in", str(tmp_path / "nope.pcb")])
        assert code == 1

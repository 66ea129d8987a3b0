"""Command-line interface: workflows, exit codes, atomic outputs."""

import logging

import numpy as np
import pytest

from gbatc.cli import main
from gbatc.fields import SIDECAR_SUFFIX, read_raw


def synth(path, seed=0, mode="smooth", species=3, timesteps=5):
    assert main(["synth", str(path), "--species", str(species),
                 "--timesteps", str(timesteps), "--height", "16",
                 "--width", "16", "--mode", mode, "--seed", str(seed)]) == 0
    return path


class TestSynth:
    def test_writes_dataset_and_sidecar(self, tmp_path):
        out = synth(tmp_path / "d.raw")
        assert out.exists()
        assert (tmp_path / f"d.raw{SIDECAR_SUFFIX}").exists()
        ds = read_raw(out)
        assert ds.shape == (3, 5, 16, 16)

    def test_deterministic(self, tmp_path):
        a = synth(tmp_path / "a.raw", seed=4)
        b = synth(tmp_path / "b.raw", seed=4)
        assert a.read_bytes() == b.read_bytes()
        c = synth(tmp_path / "c.raw", seed=5)
        assert a.read_bytes() != c.read_bytes()

    def test_block_rank_mode(self, tmp_path):
        out = synth(tmp_path / "r.raw", mode="block-rank")
        smooth = synth(tmp_path / "s.raw", mode="smooth")
        assert read_raw(out).shape == (3, 5, 16, 16)
        assert out.read_bytes() != smooth.read_bytes()

    def test_no_temp_files_left(self, tmp_path):
        synth(tmp_path / "d.raw")
        assert not list(tmp_path.glob("*.tmp.*"))


class TestCompressDecompressVerify:
    def test_full_workflow(self, tmp_path, capsys):
        data = synth(tmp_path / "d.raw")
        archive = tmp_path / "d.gbat"
        assert main(["compress", str(data), str(archive),
                     "--predictor", "pca:4", "--nrmse", "1e-3"]) == 0
        out = capsys.readouterr().out
        assert "ratio=" in out and "guarantee=verified-against-archive-bytes" in out
        recon = tmp_path / "recon.raw"
        assert main(["decompress", str(archive), str(recon)]) == 0
        assert read_raw(recon).shape == (3, 5, 16, 16)
        assert main(["verify", str(data), str(archive)]) == 0
        out = capsys.readouterr().out
        assert "verify=PASS" in out
        assert "mean_nrmse=" in out

    def test_verify_fails_against_wrong_data(self, tmp_path, capsys):
        data = synth(tmp_path / "d.raw", seed=0)
        other = synth(tmp_path / "o.raw", seed=1)
        archive = tmp_path / "d.gbat"
        assert main(["compress", str(data), str(archive),
                     "--predictor", "zero", "--nrmse", "1e-3"]) == 0
        assert main(["verify", str(other), str(archive)]) == 1
        assert "verify=FAIL" in capsys.readouterr().out

    def test_repeat_compress_is_byte_identical(self, tmp_path):
        data = synth(tmp_path / "d.raw")
        a, b = tmp_path / "a.gbat", tmp_path / "b.gbat"
        argv = [str(data), "x", "--predictor", "pca:4", "--nrmse", "1e-2"]
        assert main(["compress", argv[0], str(a)] + argv[2:]) == 0
        assert main(["compress", argv[0], str(b)] + argv[2:]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_absolute_bound_flag(self, tmp_path):
        data = synth(tmp_path / "d.raw")
        archive = tmp_path / "d.gbat"
        assert main(["compress", str(data), str(archive),
                     "--predictor", "zero", "--tau", "1e-2"]) == 0

    def test_bound_flag_required_and_exclusive(self, tmp_path):
        data = synth(tmp_path / "d.raw")
        with pytest.raises(SystemExit):
            main(["compress", str(data), str(tmp_path / "x.gbat"),
                  "--predictor", "zero"])
        with pytest.raises(SystemExit):
            main(["compress", str(data), str(tmp_path / "x.gbat"),
                  "--predictor", "zero", "--nrmse", "1e-3", "--tau", "1e-2"])

    def test_corrupt_archive_exits_nonzero(self, tmp_path, capsys):
        data = synth(tmp_path / "d.raw")
        archive = tmp_path / "d.gbat"
        main(["compress", str(data), str(archive),
              "--predictor", "zero", "--nrmse", "1e-3"])
        blob = bytearray(archive.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        archive.write_bytes(bytes(blob))
        assert main(["decompress", str(archive), str(tmp_path / "r.raw")]) == 1
        assert "error[CorruptArchiveError]" in capsys.readouterr().err
        assert not (tmp_path / "r.raw").exists()

    def test_failed_compress_leaves_no_output(self, tmp_path, capsys):
        data = synth(tmp_path / "d.raw")
        target = tmp_path / "x.gbat"
        assert main(["compress", str(data), str(target), "--predictor", "zero",
                     "--nrmse", "1e-3", "--geometry", "7,4,4"]) == 1
        assert "error[InvalidGeometryError]" in capsys.readouterr().err
        assert not target.exists()
        assert not list(tmp_path.glob("*.tmp.*"))


class TestTrainReuse:
    def test_predictor_file_reuse_matches_internal_fit(self, tmp_path, capsys):
        data = synth(tmp_path / "d.raw")
        blob_path = tmp_path / "pred.bin"
        assert main(["train", str(data), str(blob_path),
                     "--predictor", "pca:4"]) == 0
        assert "kind=pca" in capsys.readouterr().out
        reused, direct = tmp_path / "a.gbat", tmp_path / "b.gbat"
        assert main(["compress", str(data), str(reused),
                     "--predictor-file", str(blob_path), "--nrmse", "1e-3"]) == 0
        assert main(["compress", str(data), str(direct),
                     "--predictor", "pca:4", "--nrmse", "1e-3"]) == 0
        assert reused.read_bytes() == direct.read_bytes()

    def test_train_gba_reports_losses(self, tmp_path, capsys):
        data = synth(tmp_path / "d.raw")
        blob_path = tmp_path / "g.bin"
        assert main(["train", str(data), str(blob_path), "--predictor", "gba",
                     "--latent", "8", "--epochs", "1", "--batch-size", "8"]) == 0
        out = capsys.readouterr().out
        assert "kind=gba" in out
        assert "final_mse" in out


class TestBench:
    def test_matrix_with_error_rows(self, tmp_path):
        data = synth(tmp_path / "d.raw")
        csv_path = tmp_path / "bench.csv"
        assert main(["bench", str(data), "--predictors", "zero,pca:2,pca:999",
                     "--nrmse-list", "1e-2,1e-3", "--output", str(csv_path)]) == 0
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "predictor,epsilon,mean_nrmse,ratio,status"
        assert len(lines) == 1 + 3 * 2
        ok_rows = [ln for ln in lines[1:] if ln.endswith("ok")]
        err_rows = [ln for ln in lines[1:] if ln.endswith("error:RankError")]
        assert len(ok_rows) == 4 and len(err_rows) == 2
        assert all(ln.startswith("pca:999") for ln in err_rows)
        for ln in ok_rows:
            pred, eps, mean, ratio, _ = ln.split(",")
            assert float(mean) <= float(eps) + 1e-12
            assert float(ratio) > 0

    def test_stdout_and_qoi_columns(self, tmp_path, capsys):
        data = synth(tmp_path / "d.raw")
        capsys.readouterr()
        assert main(["bench", str(data), "--predictors", "zero",
                     "--nrmse-list", "1e-2", "--qoi", "minor-like"]) == 0
        out = capsys.readouterr().out
        head = out.strip().splitlines()[0]
        assert "qoi_minor-like_nrmse" in head


class TestMetrics:
    def test_self_comparison_and_csv(self, tmp_path, capsys):
        data = synth(tmp_path / "d.raw")
        csv_path = tmp_path / "m.csv"
        assert main(["metrics", str(data), str(data),
                     "--qoi", "minor-like", "--output", str(csv_path)]) == 0
        out = capsys.readouterr().out
        assert "nrmse" in out
        text = csv_path.read_text()
        assert "species,metric,value,timestep" in text.splitlines()[0]

    def test_compares_reconstruction(self, tmp_path, capsys):
        data = synth(tmp_path / "d.raw")
        archive = tmp_path / "d.gbat"
        recon = tmp_path / "r.raw"
        main(["compress", str(data), str(archive), "--predictor", "zero",
              "--nrmse", "1e-2"])
        main(["decompress", str(archive), str(recon)])
        assert main(["metrics", str(data), str(recon)]) == 0


class TestLogging:
    def test_env_variable_sets_level(self, tmp_path, monkeypatch):
        captured = {}
        monkeypatch.setattr(logging, "basicConfig",
                            lambda **kw: captured.update(kw))
        monkeypatch.setenv("GBATC_LOG", "debug")
        synth(tmp_path / "d.raw")
        assert captured["level"] == logging.DEBUG

    def test_unknown_level_falls_back(self, tmp_path, monkeypatch):
        captured = {}
        monkeypatch.setattr(logging, "basicConfig",
                            lambda **kw: captured.update(kw))
        monkeypatch.setenv("GBATC_LOG", "chatty")
        synth(tmp_path / "d.raw")
        assert captured["level"] == logging.WARNING

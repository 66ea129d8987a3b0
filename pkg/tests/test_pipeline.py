"""End-to-end compress/decompress: bound enforcement, determinism, headers."""

import numpy as np
import pytest

from gbatc import archive as arc
from gbatc.errors import (GuaranteeError, InvalidSpecError, ShapeError)
from gbatc.fields import BlockGeometry, block_array, partition
from gbatc.guarantee import ErrorBoundSpec
from gbatc.metrics import nrmse
from gbatc.pipeline import (CompressConfig, compress, decompress,
                            denormalize_blocks, fit_predictor,
                            normalize_blocks, parse_predictor_spec,
                            verify_bound)

GEOM = BlockGeometry(5, 4, 4)


def small_config(predictor="zero", eps=1e-3, **kw):
    return CompressConfig(predictor=predictor, geometry=GEOM,
                          bound=ErrorBoundSpec("nrmse", eps), **kw)


def block_deltas(original, reconstructed, geometry):
    xs = block_array(partition(original, geometry))
    gs = block_array(partition(reconstructed, geometry))
    nb, species = xs.shape[0], xs.shape[1]
    d = geometry.patch_dim
    return np.linalg.norm(
        xs.reshape(nb, species, d) - gs.reshape(nb, species, d), axis=2)


class TestPredictorSpecParsing:
    def test_known_specs(self):
        assert parse_predictor_spec("zero") == ("zero", None)
        assert parse_predictor_spec("pca:8") == ("pca", 8)
        assert parse_predictor_spec("gba") == ("gba", None)
        assert parse_predictor_spec("gbatc") == ("gbatc", None)

    @pytest.mark.parametrize("text", ["pca", "pca:x", "pca:-1", "mlp", ""])
    def test_bad_specs(self, text):
        with pytest.raises(InvalidSpecError):
            parse_predictor_spec(text)


class TestNormalization:
    def test_roundtrip_and_unit_interval(self, small_dataset):
        blocks = block_array(partition(small_dataset, GEOM))
        mins = np.array([small_dataset.species_range(s)[0] for s in range(3)])
        maxs = np.array([small_dataset.species_range(s)[1] for s in range(3)])
        norm = normalize_blocks(blocks, mins, maxs)
        assert norm.min() >= -1e-12 and norm.max() <= 1 + 1e-12
        back = denormalize_blocks(norm, mins, maxs)
        assert np.allclose(back, blocks, atol=1e-12)

    def test_constant_species_maps_to_zero(self):
        blocks = np.full((2, 1, 2, 2, 2), 7.0)
        norm = normalize_blocks(blocks, np.array([7.0]), np.array([7.0]))
        assert np.all(norm == 0.0)
        assert np.all(denormalize_blocks(norm, np.array([7.0]), np.array([7.0])) == 7.0)


class TestRoundTrip:
    @pytest.mark.parametrize("predictor", ["zero", "pca:4"])
    def test_block_bound_and_species_nrmse(self, small_dataset, predictor):
        eps = 1e-3
        result = compress(small_dataset, small_config(predictor, eps))
        recon, header = decompress(result.archive)
        assert recon.shape == small_dataset.shape
        deltas = block_deltas(small_dataset, recon, GEOM)
        taus = np.asarray(header["tau"])
        assert np.all(deltas <= taus[None, :] + 1e-12)
        for s in range(small_dataset.species_count):
            assert nrmse(small_dataset.values[s], recon.values[s]) <= eps + 1e-12

    def test_gba_and_gbatc_roundtrip(self, small_dataset):
        from gbatc.predictors import TrainConfig
        cfg = small_config("gbatc", 1e-2, latent=8,
                           train=TrainConfig(epochs=1, batch_size=8),
                           correction_epochs=2)
        result = compress(small_dataset, cfg)
        info = result.stats["predictor_info"]
        assert set(info["ae"]) == {"initial_mse", "final_mse"}
        assert info["correction"]["final_mse"] <= info["correction"]["baseline_mse"]
        recon, header = decompress(result.archive)
        deltas = block_deltas(small_dataset, recon, GEOM)
        assert np.all(deltas <= np.asarray(header["tau"])[None, :] + 1e-12)

    def test_header_stamps_configuration(self, small_dataset):
        cfg = small_config("pca:4", 1e-3, seed=9)
        result = compress(small_dataset, cfg)
        _, header = decompress(result.archive)
        assert header == result.header
        assert header["predictor"] == "pca:4"
        assert header["seed"] == 9
        assert header["bound"] == {"mode": "nrmse", "value": 1e-3}
        assert header["geometry"] == {"K": 5, "N1": 4, "N2": 4,
                                      "remainder_policy": "drop"}
        for s in range(3):
            lo, hi = small_dataset.species_range(s)
            expected = cfg.bound.tau_for(hi - lo, GEOM.patch_dim)
            assert header["tau"][s] == pytest.approx(expected, rel=1e-12)
            assert header["d_c"][s] == pytest.approx(expected / (2 * np.sqrt(GEOM.patch_dim)))

    def test_stats_accounting(self, small_dataset):
        result = compress(small_dataset, small_config("zero", 1e-3))
        stats = result.stats
        assert stats["blocks"] == 16
        assert 0 <= stats["records_nonempty"] <= 16 * 3
        assert stats["mean_m"] >= 0
        assert result.report.total_bytes == len(result.archive)
        assert result.report.raw_bytes == small_dataset.raw_nbytes()

    def test_decompress_meta(self, small_dataset):
        result = compress(small_dataset, small_config("zero"))
        recon, _ = decompress(result.archive)
        assert recon.meta["predictor"] == "zero"
        assert recon.meta["schedule"] == "paper"
        assert list(recon.species_names) == list(small_dataset.species_names)


class TestDeterminism:
    def test_repeat_compress_is_byte_identical(self, small_dataset):
        cfg = small_config("pca:4")
        assert compress(small_dataset, cfg).archive == compress(small_dataset, cfg).archive

    def test_worker_count_does_not_change_bytes(self, small_dataset):
        base = compress(small_dataset, small_config("pca:4", workers=1))
        multi = compress(small_dataset, small_config("pca:4", workers=3))
        assert base.archive == multi.archive

    def test_prefitted_predictor_matches_internal_fit(self, small_dataset):
        cfg = small_config("pca:4")
        blocks = block_array(partition(small_dataset, GEOM))
        mins = np.array([small_dataset.species_range(s)[0] for s in range(3)])
        maxs = np.array([small_dataset.species_range(s)[1] for s in range(3)])
        pred, _ = fit_predictor(normalize_blocks(blocks, mins, maxs), cfg)
        reused = compress(small_dataset, cfg, predictor=pred)
        assert reused.archive == compress(small_dataset, cfg).archive
        assert reused.stats["predictor_info"]["prefitted"] is True

    def test_prefitted_predictor_shape_checked(self, small_dataset):
        cfg = small_config("zero")
        from gbatc.predictors import ZeroPredictor
        wrong = ZeroPredictor(5, GEOM)
        with pytest.raises(ShapeError):
            compress(small_dataset, cfg, predictor=wrong)


class TestBasisTruncation:
    def test_truncation_keeps_bound_and_shrinks_bases(self, small_dataset):
        full = compress(small_dataset, small_config("zero", 1e-3))
        trunc = compress(small_dataset, small_config("zero", 1e-3,
                                                     truncate_bases=True))
        assert trunc.report.section_bytes["bases"] <= full.report.section_bytes["bases"]
        recon_full, _ = decompress(full.archive)
        recon_trunc, header = decompress(trunc.archive)
        # unused columns are zeroed, never referenced: same reconstruction
        assert np.array_equal(recon_full.values, recon_trunc.values)
        deltas = block_deltas(small_dataset, recon_trunc, GEOM)
        assert np.all(deltas <= np.asarray(header["tau"])[None, :] + 1e-12)


class TestAbsoluteBound:
    def test_absolute_tau_is_range_free(self, small_dataset):
        value = 5e-3
        cfg = CompressConfig(predictor="zero", geometry=GEOM,
                             bound=ErrorBoundSpec("absolute", value))
        result = compress(small_dataset, cfg)
        recon, header = decompress(result.archive)
        # absolute mode: tau is the per-block l2 budget itself, same for
        # every species regardless of range
        assert all(t == value for t in header["tau"])
        deltas = block_deltas(small_dataset, recon, GEOM)
        assert deltas.max() <= value + 1e-12


class TestVerification:
    def test_verify_passes_on_faithful_output(self, small_dataset):
        result = compress(small_dataset, small_config("pca:4"))
        recon, header = decompress(result.archive)
        check = verify_bound(small_dataset, recon, header)
        assert check.ok
        assert check.blocks_checked == 16 * 3
        assert check.max_ratio <= 1.0
        assert "PASS" in check.lines()[0]

    def test_verify_flags_perturbation(self, small_dataset):
        result = compress(small_dataset, small_config("pca:4"))
        recon, header = decompress(result.archive)
        recon.values[0, 0, 0, 0] += 10 * header["tau"][0]
        check = verify_bound(small_dataset, recon, header)
        assert not check.ok
        assert len(check.violations) == 1
        assert check.violations[0][:2] == (0, 0)
        assert "FAIL" in check.lines()[0]

    def test_verify_rejects_shape_mismatch(self, small_dataset):
        result = compress(small_dataset, small_config("zero"))
        recon, header = decompress(result.archive)
        from gbatc.fields import FieldDataset
        clipped = FieldDataset(recon.values[:, :, :8, :], recon.species_names)
        with pytest.raises(ShapeError):
            verify_bound(small_dataset, clipped, header)


class TestFailureModes:
    def test_unreachable_bound_raises(self, small_dataset):
        cfg = CompressConfig(predictor="zero", geometry=GEOM,
                             bound=ErrorBoundSpec("absolute", 1e-16),
                             schedule="fast")
        with pytest.raises(GuaranteeError):
            compress(small_dataset, cfg)

    def test_config_validation(self):
        with pytest.raises(InvalidSpecError):
            CompressConfig(predictor="psa:3")
        with pytest.raises(InvalidSpecError):
            CompressConfig(workers=0)
        with pytest.raises(InvalidSpecError):
            CompressConfig(schedule="slow")
        with pytest.raises(InvalidSpecError):
            CompressConfig(latent_bins=0)

    def test_geometry_exceeding_domain_rejected(self, small_dataset):
        from gbatc.errors import InvalidGeometryError
        cfg = CompressConfig(predictor="zero", geometry=BlockGeometry(7, 4, 4))
        with pytest.raises(InvalidGeometryError):
            compress(small_dataset, cfg)

    def test_missing_section_rejected(self, small_dataset):
        from gbatc.errors import CorruptArchiveError
        result = compress(small_dataset, small_config("zero"))
        sections = arc.read_archive(result.archive)
        del sections[arc.SECTION_RECORDS]
        stripped = arc.write_archive(sections)
        with pytest.raises(CorruptArchiveError) as err:
            decompress(stripped)
        assert err.value.section == "records"

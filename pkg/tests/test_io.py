"""Serialization round trips: binary matrices, sparse text, checkpoints,
images, and the seeded stream helper."""

import struct

import numpy as np
import pytest
from PIL import Image

from dsmm.checkpoint import load_checkpoint, save_checkpoint
from dsmm.errors import FormatError, ValidationError
from dsmm.image_io import load_directory, load_image, save_image, scan_images
from dsmm.matrix_io import (
    read_matrix,
    read_sparse_text,
    write_matrix,
    write_sparse_text,
)
from dsmm.reconstruction import ReconstructionParams
from dsmm.sampling import (
    MeasurementMatrix,
    SamplingLayerState,
    constrained_matrix,
)
from dsmm.seeding import stream


def learned_matrix(seed=0, n_b=6, block=4, alpha=0.3):
    state = SamplingLayerState.initialize(n_b, block, alpha,
                                          stream(seed, "io-test"))
    return constrained_matrix(state)


# ---------------------------------------------------------------------------
# binary matrix container


class TestMatrixBinary:
    def test_round_trip_bit_exact(self, tmp_path):
        path = str(tmp_path / "m.dsmm")
        for prov in ("learned", "gaussian", "imported"):
            phi = learned_matrix()
            phi = MeasurementMatrix(n_b=phi.n_b, n_B=phi.n_B,
                                    block_size=phi.block_size,
                                    sparsity_degree=phi.sparsity_degree,
                                    entries=phi.entries, provenance=prov)
            write_matrix(path, phi)
            back = read_matrix(path)
            assert back.entries.tobytes() == phi.entries.tobytes()
            assert back.provenance == prov
            assert back.sparsity_degree == phi.sparsity_degree
            assert (back.n_b, back.n_B, back.block_size) == (6, 16, 4)

    def test_header_layout(self, tmp_path):
        path = str(tmp_path / "m.dsmm")
        write_matrix(path, learned_matrix())
        blob = (tmp_path / "m.dsmm").read_bytes()
        assert blob[:4] == b"DSMM"
        assert struct.unpack_from("<I", blob, 4)[0] == 1
        assert len(blob) == 29 + 8 * 6 * 16

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.dsmm"
        p.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError) as err:
            read_matrix(str(p))
        assert "magic" in str(err.value)

    def test_bad_version(self, tmp_path):
        path = str(tmp_path / "m.dsmm")
        write_matrix(path, learned_matrix())
        blob = bytearray((tmp_path / "m.dsmm").read_bytes())
        struct.pack_into("<I", blob, 4, 9)
        (tmp_path / "m.dsmm").write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            read_matrix(path)
        assert "version" in str(err.value)

    def test_truncation_reports_offset(self, tmp_path):
        path = str(tmp_path / "m.dsmm")
        write_matrix(path, learned_matrix())
        blob = (tmp_path / "m.dsmm").read_bytes()
        (tmp_path / "m.dsmm").write_bytes(blob[:40])
        with pytest.raises(FormatError) as err:
            read_matrix(path)
        assert "byte 40" in str(err.value)

    def test_bad_provenance_code(self, tmp_path):
        path = str(tmp_path / "m.dsmm")
        write_matrix(path, learned_matrix())
        blob = bytearray((tmp_path / "m.dsmm").read_bytes())
        blob[28] = 7
        (tmp_path / "m.dsmm").write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            read_matrix(path)
        assert "provenance" in str(err.value)

    def test_no_tmp_left_behind(self, tmp_path):
        write_matrix(str(tmp_path / "m.dsmm"), learned_matrix())
        assert [p.name for p in tmp_path.iterdir()] == ["m.dsmm"]


# ---------------------------------------------------------------------------
# sparse text


class TestSparseText:
    def test_round_trip_values_exact(self, tmp_path):
        phi = learned_matrix(alpha=0.5)
        path = str(tmp_path / "m.txt")
        write_sparse_text(path, phi)
        back = read_sparse_text(path)
        assert np.array_equal(back.entries, phi.entries)
        assert back.provenance == "imported"
        assert back.sparsity_degree == phi.sparsity_degree

    def test_triple_count_matches_header(self, tmp_path):
        phi = learned_matrix(alpha=0.5)
        path = str(tmp_path / "m.txt")
        write_sparse_text(path, phi)
        lines = (tmp_path / "m.txt").read_text().splitlines()
        nnz = int(lines[0].split()[4])
        assert nnz == phi.nonzero_count()
        assert len(lines) == 1 + nnz

    def test_rows_in_row_major_order(self, tmp_path):
        phi = learned_matrix(alpha=0.4)
        path = str(tmp_path / "m.txt")
        write_sparse_text(path, phi)
        coords = [(int(r), int(c)) for r, c, _ in
                  (ln.split() for ln in
                   (tmp_path / "m.txt").read_text().splitlines()[1:])]
        assert coords == sorted(coords)

    def test_nnz_mismatch(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("2 4 2 0.5 3\n0 0 1.0\n1 1 2.0\n")
        with pytest.raises(FormatError) as err:
            read_sparse_text(str(p))
        assert "3" in str(err.value)

    def test_out_of_range_index(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("2 4 2 0.5 1\n5 0 1.0\n")
        with pytest.raises(FormatError) as err:
            read_sparse_text(str(p))
        assert "line 2" in str(err.value)

    def test_garbled_value(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("2 4 2 0.5 1\n0 0 zebra\n")
        with pytest.raises(FormatError) as err:
            read_sparse_text(str(p))
        assert "line 2" in str(err.value)

    def test_short_header(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("2 4 2\n")
        with pytest.raises(FormatError):
            read_sparse_text(str(p))


# ---------------------------------------------------------------------------
# checkpoints


class TestCheckpoint:
    def state(self, seed=3):
        rng = stream(seed, "ckpt-test")
        sampling = SamplingLayerState.initialize(4, 4, 0.25, rng)
        recon = ReconstructionParams.initialize(4, 4, rng, hidden=8)
        return sampling, recon

    def test_round_trip_bit_exact(self, tmp_path):
        sampling, recon = self.state()
        path = str(tmp_path / "c.dsmn")
        save_checkpoint(path, sampling, recon, epoch=17)
        s2, r2, epoch = load_checkpoint(path)
        assert epoch == 17
        assert s2.sparsity_degree == 0.25
        assert s2.raw_weights.tobytes() == sampling.raw_weights.tobytes()
        for name, arr in recon.named_arrays():
            assert getattr(r2, name).tobytes() == arr.tobytes(), name

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "c.dsmn"
        p.write_bytes(b"WHAT" + b"\x00" * 30)
        with pytest.raises(FormatError):
            load_checkpoint(str(p))

    def test_truncated_tensor(self, tmp_path):
        sampling, recon = self.state()
        path = str(tmp_path / "c.dsmn")
        save_checkpoint(path, sampling, recon)
        blob = (tmp_path / "c.dsmn").read_bytes()
        (tmp_path / "c.dsmn").write_bytes(blob[:-5])
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert "truncated" in str(err.value)

    def test_trailing_bytes(self, tmp_path):
        sampling, recon = self.state()
        path = str(tmp_path / "c.dsmn")
        save_checkpoint(path, sampling, recon)
        blob = (tmp_path / "c.dsmn").read_bytes()
        (tmp_path / "c.dsmn").write_bytes(blob + b"\x00\x00")
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert "trailing" in str(err.value)

    def test_missing_tensor(self, tmp_path):
        sampling, recon = self.state()
        path = str(tmp_path / "c.dsmn")
        save_checkpoint(path, sampling, recon)
        blob = bytearray((tmp_path / "c.dsmn").read_bytes())
        # Rename the sampling tensor in place; layout is otherwise intact.
        idx = blob.find(b"sampling_raw")
        blob[idx:idx + 12] = b"sampling_xxx"
        (tmp_path / "c.dsmn").write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert "sampling_raw" in str(err.value)


# ---------------------------------------------------------------------------
# images


class TestImageIo:
    def test_png_round_trip_quantization(self, tmp_path):
        img = stream(0, "img").uniform(0.0, 1.0, (9, 13))
        path = str(tmp_path / "x.png")
        save_image(path, img)
        back = load_image(path)
        assert back.shape == (9, 13)
        assert float(np.max(np.abs(back - img))) <= 0.5 / 255.0 + 1e-12

    def test_pgm_round_trip(self, tmp_path):
        img = stream(1, "img").uniform(0.0, 1.0, (6, 6))
        path = str(tmp_path / "x.pgm")
        save_image(path, img)
        back = load_image(path)
        assert float(np.max(np.abs(back - img))) <= 0.5 / 255.0 + 1e-12

    def test_exact_levels_survive(self, tmp_path):
        img = np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0
        path = str(tmp_path / "levels.png")
        save_image(path, img)
        assert np.array_equal(load_image(path), img)

    def test_color_collapses_to_luma(self, tmp_path):
        rgb = np.zeros((5, 5, 3), dtype=np.uint8)
        rgb[..., 1] = 255  # pure green
        path = str(tmp_path / "green.png")
        Image.fromarray(rgb, mode="RGB").save(path)
        arr = load_image(path)
        assert arr.shape == (5, 5)
        assert np.max(np.abs(arr - 0.587)) < 1e-12

    def test_clipping_on_save(self, tmp_path):
        path = str(tmp_path / "clip.png")
        save_image(path, np.array([[-1.0, 2.0]] * 2))
        back = load_image(path)
        assert np.array_equal(back, np.array([[0.0, 1.0]] * 2))

    def test_bad_extension(self, tmp_path):
        with pytest.raises(ValidationError):
            save_image(str(tmp_path / "x.tiff"), np.zeros((4, 4)))

    def test_non_2d_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            save_image(str(tmp_path / "x.png"), np.zeros((4, 4, 3)))

    def test_unreadable_file(self, tmp_path):
        p = tmp_path / "junk.png"
        p.write_bytes(b"this is not a png")
        with pytest.raises(FormatError):
            load_image(str(p))

    def test_missing_file_passes_through(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(str(tmp_path / "absent.png"))

    def test_scan_sorted_and_filtered(self, tmp_path):
        for name in ("b.png", "a.png", "c.pgm", "notes.txt"):
            if name.endswith(".txt"):
                (tmp_path / name).write_text("skip me")
            else:
                save_image(str(tmp_path / name), np.zeros((4, 4)))
        names = [p.split("/")[-1] for p in scan_images(str(tmp_path))]
        assert names == ["a.png", "b.png", "c.pgm"]

    def test_load_directory(self, tmp_path):
        save_image(str(tmp_path / "one.png"), np.full((4, 4), 0.5))
        imgs, paths = load_directory(str(tmp_path))
        assert len(imgs) == 1 and len(paths) == 1
        assert imgs[0].shape == (4, 4)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_directory(str(tmp_path))

    def test_missing_directory(self):
        with pytest.raises(FileNotFoundError):
            scan_images("/no/such/place")


# ---------------------------------------------------------------------------
# seeded streams


class TestStream:
    def test_reproducible(self):
        assert (stream(0, "x").standard_normal(5)
                == stream(0, "x").standard_normal(5)).all()

    def test_name_separates(self):
        a = stream(0, "alpha").standard_normal(5)
        b = stream(0, "beta").standard_normal(5)
        assert not np.array_equal(a, b)

    def test_indices_separate(self):
        a = stream(0, "x", 1).standard_normal(5)
        b = stream(0, "x", 2).standard_normal(5)
        c = stream(0, "x", 1, 1).standard_normal(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_seed_separates(self):
        a = stream(0, "x").standard_normal(5)
        b = stream(1, "x").standard_normal(5)
        assert not np.array_equal(a, b)

import struct

import numpy as np
import pytest

from nrsfm import io_formats
from nrsfm.core import MeasurementMatrix, PixelGridMask, ShapeSequence
from nrsfm.errors import FormatError, InvalidInputError
from nrsfm.occlusion import FlowField


class TestFlo:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        flow = FlowField(u=rng.normal(size=(7, 9)).astype(np.float32),
                         v=rng.normal(size=(7, 9)).astype(np.float32))
        path = tmp_path / "f.flo"
        io_formats.write_flo(flow, path)
        back = io_formats.read_flo(path)
        assert np.array_equal(back.u, flow.u)
        assert np.array_equal(back.v, flow.v)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.flo"
        path.write_bytes(struct.pack("<fii", 1.0, 2, 2) + b"\0" * 32)
        with pytest.raises(FormatError):
            io_formats.read_flo(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.flo"
        path.write_bytes(struct.pack("<fii", io_formats.FLO_MAGIC, 4, 4))
        with pytest.raises(FormatError):
            io_formats.read_flo(path)

    def test_bad_dimensions(self, tmp_path):
        path = tmp_path / "zero.flo"
        path.write_bytes(struct.pack("<fii", io_formats.FLO_MAGIC, 0, 0))
        with pytest.raises(FormatError):
            io_formats.read_flo(path)


class TestPgmPpm:
    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(11, 6)).astype(np.uint8)
        path = tmp_path / "i.pgm"
        io_formats.write_pgm(img, path)
        assert np.array_equal(io_formats.read_pgm(path), img)

    def test_pgm_rejects_wrong_type(self, tmp_path):
        path = tmp_path / "p6.pgm"
        path.write_bytes(b"P6\n2 2\n255\n" + b"\0" * 12)
        with pytest.raises(FormatError):
            io_formats.read_pgm(path)

    def test_pgm_truncated_payload(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\0\0")
        with pytest.raises(FormatError):
            io_formats.read_pgm(path)

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        mask = PixelGridMask(width=8, height=5,
                             active=rng.random((5, 8)) > 0.4)
        path = tmp_path / "m.pgm"
        io_formats.write_mask(mask, path)
        back = io_formats.read_mask(path)
        assert np.array_equal(back.active, mask.active)
        assert np.array_equal(back.point_index, mask.point_index)

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, size=(6, 7, 3)).astype(np.uint8)
        path = tmp_path / "c.ppm"
        io_formats.write_ppm(img, path)
        assert np.array_equal(io_formats.read_image(str(path)), img)

    def test_read_image_unknown_extension(self, tmp_path):
        path = tmp_path / "x.bmp"
        path.write_bytes(b"BM")
        with pytest.raises(FormatError):
            io_formats.read_image(str(path))


class TestPly:
    def test_round_trip_at_printed_precision(self, tmp_path):
        rng = np.random.default_rng(4)
        shapes = ShapeSequence(data=rng.normal(size=(6, 5)), frames=2,
                               points=5)
        path = tmp_path / "f.ply"
        io_formats.write_ply(shapes, 1, path)
        pts = io_formats.read_ply_points(path)
        assert pts.shape == (3, 5)
        assert np.allclose(pts, shapes.frame(1), rtol=1e-8)

    def test_header(self, tmp_path):
        shapes = ShapeSequence(data=np.zeros((3, 3)), frames=1, points=3)
        path = tmp_path / "h.ply"
        io_formats.write_ply(shapes, 0, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "ply"
        assert "element vertex 3" in lines
        assert len(lines) == lines.index("end_header") + 4

    def test_out_of_range_frame(self, tmp_path):
        shapes = ShapeSequence(data=np.zeros((3, 3)), frames=1, points=3)
        with pytest.raises(InvalidInputError):
            io_formats.write_ply(shapes, 2, tmp_path / "x.ply")

    def test_not_a_ply(self, tmp_path):
        path = tmp_path / "n.ply"
        path.write_text("obj\n")
        with pytest.raises(FormatError):
            io_formats.read_ply_points(path)


class TestContainers:
    def test_shape_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(5)
        shapes = ShapeSequence(data=rng.normal(size=(9, 4)), frames=3,
                               points=4)
        path = tmp_path / "s.spva"
        io_formats.write_shape_container(shapes, path)
        back = io_formats.read_shape_container(path)
        assert np.array_equal(back.data, shapes.data)
        assert (back.frames, back.points) == (3, 4)

    def test_matrix_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(6)
        w = MeasurementMatrix(data=rng.normal(size=(6, 5)), frames=3,
                              points=5, reference_index=1)
        path = tmp_path / "w.spva"
        io_formats.write_matrix_container(w, path)
        back = io_formats.read_matrix_container(path)
        assert np.array_equal(back.data, w.data)
        assert back.reference_index == 1

    def test_wrong_magic_rejected(self, tmp_path):
        shapes = ShapeSequence(data=np.zeros((3, 3)), frames=1, points=3)
        path = tmp_path / "s.spva"
        io_formats.write_shape_container(shapes, path)
        with pytest.raises(FormatError):
            io_formats.read_matrix_container(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "v2.spva"
        path.write_bytes(b"SPVA-SHAPE v2\n1 3 3\n" + b"\0" * 72)
        with pytest.raises(FormatError):
            io_formats.read_shape_container(path)

    def test_payload_length_checked(self, tmp_path):
        path = tmp_path / "short.spva"
        path.write_bytes(b"SPVA-SHAPE v1\n2 3 3\n" + b"\0" * 8)
        with pytest.raises(FormatError):
            io_formats.read_shape_container(path)

    def test_little_endian_payload(self, tmp_path):
        shapes = ShapeSequence(data=np.full((3, 3), 1.0), frames=1, points=3)
        path = tmp_path / "e.spva"
        io_formats.write_shape_container(shapes, path)
        raw = path.read_bytes()
        payload = raw[raw.index(b"\n", 14) + 1:]
        assert struct.unpack("<d", payload[:8])[0] == 1.0


class TestMaskSemantics:
    def test_all_active(self, tmp_path):
        path = tmp_path / "full.pgm"
        io_formats.write_pgm(np.full((4, 6), 255), path)
        mask = io_formats.read_mask(path)
        assert mask.points == 24

    def test_checkerboard(self, tmp_path):
        board = np.indices((5, 5)).sum(axis=0) % 2 == 0
        path = tmp_path / "cb.pgm"
        io_formats.write_pgm(np.where(board, 255, 0), path)
        mask = io_formats.read_mask(path)
        assert mask.points == 13
        idx = mask.point_index[mask.active]
        assert np.array_equal(np.sort(idx), np.arange(13))

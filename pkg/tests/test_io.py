import numpy as np
import pytest

from echograd.io import (MeshFormatError, read_float_grid, read_heightfield,
                         read_obj, read_pose_csv, write_float_grid,
                         write_heightfield, write_heightfield_csv, write_obj,
                         write_pose_csv, write_waterfall_png)
from echograd.scene import heightfield_to_mesh, make_dome_scene, make_flat_scene
from echograd.sonar import make_box_survey


class TestObj:
    def test_round_trip_preserves_geometry(self, tmp_path):
        mesh = heightfield_to_mesh(make_dome_scene(5.0, 20.0, 21, 21, 1.0))
        path = tmp_path / "mesh.obj"
        write_obj(path, mesh)
        back = read_obj(path)
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)
        assert np.array_equal(back.faces, mesh.faces)

    def test_round_trip_preserves_apex_at_stored_precision(self, tmp_path):
        mesh = heightfield_to_mesh(make_dome_scene(5.0, 20.0, 21, 21, 1.0))
        path = tmp_path / "mesh.obj"
        write_obj(path, mesh)
        apex = read_obj(path).vertices[:, 2].max()
        # the printed value reparses to itself exactly
        assert apex == float(f"{mesh.vertices[:, 2].max():.9g}")

    def test_no_faces_is_an_error(self, tmp_path):
        path = tmp_path / "empty.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\n")
        with pytest.raises(MeshFormatError):
            read_obj(path)

    def test_error_carries_line_number(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 nope\n")
        with pytest.raises(MeshFormatError) as err:
            read_obj(path)
        assert err.value.line == 4
        assert "line 4" in str(err.value)

    def test_out_of_range_face_index(self, tmp_path):
        path = tmp_path / "oob.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
        with pytest.raises(MeshFormatError) as err:
            read_obj(path)
        assert err.value.line == 4


class TestHeightfieldIO:
    def test_binary_round_trip(self, tmp_path):
        hf = make_dome_scene(5.0, 20.0, 25, 31, 0.5)
        path = tmp_path / "hf.ehf"
        write_heightfield(path, hf)
        back = read_heightfield(path)
        assert back.nx == 25 and back.ny == 31
        assert back.cell_size == pytest.approx(0.5)
        # storage is float32
        assert np.allclose(back.z, hf.z, atol=1e-4)

    def test_header_is_24_bytes(self, tmp_path):
        hf = make_flat_scene(20.0, 2, 2, 1.0)
        path = tmp_path / "hf.ehf"
        write_heightfield(path, hf)
        raw = path.read_bytes()
        assert len(raw) == 24 + 4 * 4
        assert raw[:4] == b"EHF1"

    def test_wrong_magic_rejected(self, tmp_path):
        hf = make_flat_scene(20.0, 3, 3, 1.0)
        path = tmp_path / "hf.ehf"
        write_heightfield(path, hf)
        with pytest.raises(ValueError):
            read_float_grid(path)

    def test_csv_export_is_depth_positive(self, tmp_path):
        hf = make_flat_scene(20.0, 3, 3, 1.0)
        path = tmp_path / "hf.csv"
        write_heightfield_csv(path, hf)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("#")
        assert len(lines) == 1 + 3
        assert float(lines[1].split(",")[0]) == pytest.approx(20.0)


class TestFloatGrid:
    def test_round_trip(self, tmp_path):
        data = np.random.default_rng(0).uniform(0, 9, (7, 12))
        path = tmp_path / "wf.efg"
        write_float_grid(path, data, cell=0.195)
        back = read_float_grid(path)
        assert back.shape == (7, 12)
        assert np.allclose(back, data, atol=1e-5)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "wf.efg"
        write_float_grid(path, np.zeros((4, 4)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            read_float_grid(path)


class TestPng:
    def test_png_and_scale_sidecar(self, tmp_path):
        data = np.zeros((5, 8))
        data[2, 3] = 12.5
        path = tmp_path / "wf.png"
        scale = write_waterfall_png(path, data)
        assert scale == pytest.approx(12.5)
        sidecar = tmp_path / "wf.png.scale.txt"
        assert float(sidecar.read_text()) == pytest.approx(12.5)
        from PIL import Image
        img = np.asarray(Image.open(path))
        assert img.shape == (5, 8)
        assert img[2, 3] == 255


class TestPoseCsv:
    def test_round_trip(self, tmp_path):
        poses = make_box_survey((0, 0), 16.0, 5.0, 0.0, 2.0, np.deg2rad(30))
        path = tmp_path / "poses.csv"
        write_pose_csv(path, poses)
        back = read_pose_csv(path, np.deg2rad(30))
        assert len(back) == len(poses)
        for a, b in zip(poses, back):
            assert a.ping_id == b.ping_id and a.side == b.side
            assert np.allclose(a.position, b.position)
            assert a.heading == pytest.approx(b.heading)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "poses.csv"
        path.write_text("nope\n")
        with pytest.raises(ValueError):
            read_pose_csv(path, 0.5)

"""Binary formats, JSON schemas and run output tracking."""

import json
import struct

import numpy as np
import pytest
from pydantic import ValidationError

from drr_volume_seg.errors import FormatError, TruncatedFileError, UnsupportedVersionError
from drr_volume_seg.imaging import DRRImage, MaskVolume, VoxelVolume
from drr_volume_seg.storage import (
    OutputManager,
    OutputType,
    RunManifest,
    TrainLog,
    load_checkpoint,
    read_imgf,
    read_volb,
    save_checkpoint,
    write_imgf,
    write_pgm16,
    write_volb,
)
from drr_volume_seg.storage.formats import decode_ckpt, decode_imgf, decode_volb, encode_ckpt, encode_volb
from drr_volume_seg.storage.schemas import StepRecord


@pytest.mark.unit
class TestVolb:
    def test_voxel_volume(self, tmp_path, rng):
        values = (rng.uniform((3, 4, 5)) * 1000).astype(np.float32)
        volume = VoxelVolume(values, spacing=(2.0, 1.5, 1.0))
        loaded = read_volb(write_volb(tmp_path / "v.volb", volume))
        assert isinstance(loaded, VoxelVolume)
        np.testing.assert_array_equal(loaded.values, values)
        assert loaded.spacing == (2.0, 1.5, 1.0)

    def test_mask_keeps_type(self, tmp_path):
        mask = MaskVolume(np.eye(4, dtype=np.uint8)[None].repeat(2, axis=0))
        loaded = read_volb(write_volb(tmp_path / "m.volb", mask))
        assert isinstance(loaded, MaskVolume)
        np.testing.assert_array_equal(loaded.values, mask.values)

    def test_header_layout(self):
        data = encode_volb(MaskVolume(np.zeros((2, 3, 4), dtype=np.uint8)))
        assert data[:4] == b"VOLB"
        assert struct.unpack("<3I", data[6:18]) == (2, 3, 4)
        assert len(data) == 30 + 2 * 3 * 4

    def test_x_is_fastest(self):
        values = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        payload = np.frombuffer(encode_volb(VoxelVolume(values))[30:], dtype="<f4")
        np.testing.assert_array_equal(payload, [0, 1, 2, 3, 4, 5, 6, 7])

    def test_truncated(self):
        data = encode_volb(VoxelVolume(np.zeros((2, 2, 2), dtype=np.float32)))
        with pytest.raises(TruncatedFileError) as exc:
            decode_volb(data[:-3])
        assert exc.value.offset == 30

    def test_bad_version(self):
        data = bytearray(encode_volb(VoxelVolume(np.zeros((2, 2, 2), dtype=np.float32))))
        data[4] = 9
        with pytest.raises(UnsupportedVersionError):
            decode_volb(bytes(data))

    def test_bad_magic_and_dtype(self):
        data = bytearray(encode_volb(VoxelVolume(np.zeros((2, 2, 2), dtype=np.float32))))
        with pytest.raises(FormatError):
            decode_volb(b"XOLB" + bytes(data[4:]))
        data[5] = 7
        with pytest.raises(FormatError):
            decode_volb(bytes(data))

    def test_trailing_bytes(self):
        data = encode_volb(VoxelVolume(np.zeros((2, 2, 2), dtype=np.float32)))
        with pytest.raises(FormatError):
            decode_volb(data + b"\x00")


@pytest.mark.unit
class TestImgf:
    def test_values_and_spacing(self, tmp_path, rng):
        image = DRRImage(rng.uniform((3, 5)).astype(np.float32), pixel_spacing=0.5)
        loaded = read_imgf(write_imgf(tmp_path / "i.imgf", image))
        np.testing.assert_array_equal(loaded.values, image.values)
        assert loaded.pixel_spacing == 0.5
        assert loaded.dims == (3, 5)

    def test_truncated_header(self):
        with pytest.raises(TruncatedFileError):
            decode_imgf(b"IMGF\x01")


@pytest.mark.unit
class TestCheckpoint:
    def test_order_preserved(self):
        tensors = {"b": np.ones((2, 3)), "a": np.zeros(4), "c": np.full((1, 1, 2), 3.0)}
        decoded = decode_ckpt(encode_ckpt(tensors))
        assert list(decoded) == ["b", "a", "c"]
        assert decoded["c"].shape == (1, 1, 2)
        assert decoded["b"].dtype == np.float32

    def test_sidecar(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", {"w": np.ones(2)}, {"architecture": "phiseg"})
        assert (tmp_path / "m.ckpt.json").exists()
        tensors, meta = load_checkpoint(path)
        assert meta == {"architecture": "phiseg"}
        np.testing.assert_array_equal(tensors["w"], [1.0, 1.0])

    def test_no_sidecar_gives_empty_meta(self, tmp_path):
        _, meta = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", {"w": np.ones(2)}))
        assert meta == {}

    def test_truncated_tensor(self):
        data = encode_ckpt({"weight": np.ones((4, 4))})
        with pytest.raises(TruncatedFileError):
            decode_ckpt(data[:-1])

    def test_bad_version(self):
        data = bytearray(encode_ckpt({"w": np.ones(1)}))
        data[4] = 2
        with pytest.raises(UnsupportedVersionError):
            decode_ckpt(bytes(data))

    def test_name_not_utf8(self):
        data = bytearray(encode_ckpt({"w": np.ones(1)}))
        data[13] = 0xFF
        with pytest.raises(FormatError, match="UTF-8"):
            decode_ckpt(bytes(data))


@pytest.mark.unit
class TestPgm:
    def test_header_and_range(self, tmp_path):
        path = write_pgm16(tmp_path / "p.pgm", np.array([[0.0, 0.5], [1.0, 2.0]]), lo=0.0, hi=1.0)
        data = path.read_bytes()
        header = b"P5\n2 2\n65535\n"
        assert data.startswith(header)
        grey = np.frombuffer(data[len(header) :], dtype=">u2")
        np.testing.assert_array_equal(grey, [0, 32768, 65535, 65535])

    def test_constant_image_is_black(self, tmp_path):
        data = write_pgm16(tmp_path / "c.pgm", np.full((2, 3), 4.0)).read_bytes()
        assert not any(data[len(b"P5\n3 2\n65535\n") :])

    def test_rejects_volumes(self, tmp_path):
        with pytest.raises(FormatError):
            write_pgm16(tmp_path / "v.pgm", np.zeros((2, 2, 2)))


@pytest.mark.unit
class TestTrainLog:
    def _log(self, steps):
        return TrainLog(config={}, model={}, steps=steps)

    def test_losses_by_term(self):
        log = self._log(
            [
                StepRecord(step=1, epoch=1, terms={"loss": 2.0, "kl": 0.5}),
                StepRecord(step=2, epoch=1, terms={"loss": 1.0}),
            ]
        )
        assert log.losses() == [2.0, 1.0]
        assert log.losses("kl") == [0.5]

    def test_steps_must_increase(self):
        with pytest.raises(ValidationError):
            self._log([StepRecord(step=2, epoch=1), StepRecord(step=2, epoch=1)])

    def test_json_roundtrip(self, tmp_path):
        log = self._log([StepRecord(step=1, epoch=1, terms={"loss": 0.25})])
        log.best_epoch = 1
        path = tmp_path / "log.json"
        log.to_json(str(path))
        assert TrainLog.from_json(str(path)) == log


@pytest.mark.unit
class TestOutputManager:
    def test_register_and_finalize(self, tmp_path):
        manager = OutputManager(str(tmp_path / "run"), "phantom", {"count": 1}, seed=4)
        final = manager.path("volumes/a.volb")
        final.write_bytes(b"1234")
        interim = manager.path("previews/a.pgm")
        interim.write_bytes(b"12")
        manager.register_file(final, OutputType.FINAL, "volb")
        manager.register_file(interim, OutputType.INTERIM, "pgm", {"case": 0})
        manager.register_input("spec.json")

        assert [e["path"] for e in manager.list_files(OutputType.FINAL)] == ["volumes/a.volb"]
        assert manager.list_files(format_name="pgm")[0]["metadata"] == {"case": 0}
        stats = manager.get_statistics()
        assert stats["total_final"] == 1 and stats["total_interim"] == 1

        path = manager.finalize({"phantoms": 1})
        manifest = RunManifest.from_json(str(path))
        assert manifest.subcommand == "phantom"
        assert manifest.seed == 4
        assert manifest.inputs == ["spec.json"]
        assert manifest.statistics["phantoms"] == 1
        assert manifest.wall_clock_s is not None and manifest.finished_at is not None

    def test_finalize_writes_once(self, tmp_path):
        manager = OutputManager(str(tmp_path), "render")
        path = manager.finalize()
        first = path.read_text()
        manager.finalize({"late": 1})
        assert path.read_text() == first
        assert "late" not in json.loads(first)["statistics"]

    def test_invalid_output_type(self, tmp_path):
        manager = OutputManager(str(tmp_path), "render")
        with pytest.raises(ValueError):
            manager.register_file(tmp_path / "x", "scratch", "json")

import json
import struct

import pytest
import torch

from zsq_forge.quantizer import FakeQuantModel, calibrate
from zsq_forge.refmodels import build_teacher
from zsq_forge.storage import (FORMAT_VERSION, MAGIC, CorruptCheckpointError, ShapeMismatchError,
                               VersionMismatchError, load_checkpoint, load_synthetic, read_header, save_checkpoint,
                               save_synthetic)
from zsq_forge.synthesis import SynthesisConfig, synthesize_dataset


@pytest.fixture
def probe():
    return torch.randn(6, 3, 32, 32, generator=torch.Generator().manual_seed(42))


@pytest.mark.parametrize("arch", ["small_cnn", "tiny_resnet"])
def test_float_round_trip(tmp_path, arch, probe):
    net = build_teacher(arch, 10, width=4).eval()
    save_checkpoint(net, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    with torch.no_grad():
        assert torch.allclose(back(probe), net(probe), atol=1e-6)


def test_quantized_round_trip_restores_params(tmp_path, small_net, probe):
    student = calibrate(FakeQuantModel(small_net, 3, 3, dynamic_weight_range=False), [probe])
    save_checkpoint(student, tmp_path / "s.ckpt")
    back = load_checkpoint(tmp_path / "s.ckpt")
    assert isinstance(back, FakeQuantModel)
    assert back.quant_records() == student.quant_records()
    with torch.no_grad():
        assert torch.allclose(back(probe), student.eval()(probe), atol=1e-6)


def test_header_layout_is_little_endian(tmp_path, small_net):
    path = save_checkpoint(small_net, tmp_path / "m.ckpt", meta={"note": "x"})
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<8sIQ", raw)
    assert magic == MAGIC and version == FORMAT_VERSION
    header = json.loads(raw[20:20 + hlen])
    assert header["arch"] == "small_cnn" and header["classes"] == 10 and header["meta"] == {"note": "x"}
    assert len(raw) == 20 + hlen + header["payload_bytes"]
    w = small_net.state_dict()["block1.0.weight"]
    entry = next(e for e in header["tensors"] if e["name"] == "block1.0.weight")
    assert entry["shape"] == list(w.shape)
    start = 20 + hlen + entry["offset"]
    assert raw[start:start + entry["nbytes"]] == w.numpy().astype("<f4").tobytes()


def test_truncated_file_rejected(tmp_path, small_net):
    path = save_checkpoint(small_net, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    for cut in (5, 30, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)


def test_version_mismatch_rejected(tmp_path, small_net):
    path = save_checkpoint(small_net, tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)


def test_shape_mismatch_rejected(tmp_path, small_net):
    path = save_checkpoint(small_net, tmp_path / "m.ckpt")
    header, payload = read_header(path)
    header["width"] = 4
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<8sIQ", MAGIC, FORMAT_VERSION, len(raw)) + raw + payload)
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"hello world, definitely not a checkpoint")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "x")


def test_synthetic_dataset_round_trip(tmp_path, small_net):
    ds = synthesize_dataset(small_net, SynthesisConfig(N=12, batch=5, iters=2))
    save_synthetic(ds, tmp_path / "syn")
    back = load_synthetic(tmp_path / "syn")
    assert back.digest() == ds.digest()
    assert torch.equal(back.images, ds.images) and torch.equal(back.labels, ds.labels)
    assert torch.allclose(back.d_teacher, ds.d_teacher)
    assert back.config == ds.config and back.batch_seeds == ds.batch_seeds
    assert back.histories == ds.histories
    assert sorted(p.name for p in (tmp_path / "syn").iterdir()) == [
        "batch_0000.f32", "batch_0001.f32", "batch_0002.f32", "manifest.json"]


def test_tampered_synthetic_dataset_rejected(tmp_path, small_net):
    ds = synthesize_dataset(small_net, SynthesisConfig(N=4, batch=4, iters=1))
    save_synthetic(ds, tmp_path / "syn")
    f = tmp_path / "syn" / "batch_0000.f32"
    raw = bytearray(f.read_bytes())
    raw[0] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpointError):
        load_synthetic(tmp_path / "syn")
    f.write_bytes(bytes(raw[:-4]))
    with pytest.raises(CorruptCheckpointError):
        load_synthetic(tmp_path / "syn")

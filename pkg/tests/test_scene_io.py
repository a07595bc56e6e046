import numpy as np
import pytest
from PIL import Image

from splatstego.camera import orbit_rig
from splatstego.io.png import to_bytes
from splatstego.io import (CheckpointError, FeatureFileError, ImageFormatError, MissingPropertyError, PlyError,
                           load_checkpoint, load_feature_file, load_ply, load_png, read_csv, save_checkpoint,
                           save_feature_file, save_ply, save_png, write_csv)
from splatstego.io.checkpoint import Checkpoint
from splatstego.synth import synth_scene

from helpers import random_scene, tiny_config


def test_ply_roundtrip_bit_exact(tmp_path):
    scene = random_scene(np.random.default_rng(0), 37, dtype=np.float32)
    save_ply(scene, tmp_path / "s.ply")
    assert load_ply(tmp_path / "s.ply").equals(scene)


def test_ply_header_counts(tmp_path):
    scene = random_scene(np.random.default_rng(1), 1, dtype=np.float32)
    save_ply(scene, tmp_path / "one.ply")
    head = (tmp_path / "one.ply").read_bytes().split(b"end_header")[0]
    assert b"element vertex 1\n" in head
    assert b"property float rot_3" in head and b"property float f_dc_0" in head


def _write_ply(path, props, rows):
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rows)}"]
    header += [f"property float {p}" for p in props] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(np.asarray(rows, dtype="<f4").tobytes())


def test_ply_missing_property_named(tmp_path):
    props = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "opacity",
             "f_dc_0", "f_dc_1", "f_dc_2"]
    _write_ply(tmp_path / "bad.ply", props, [[0.0] * len(props)])
    with pytest.raises(MissingPropertyError) as err:
        load_ply(tmp_path / "bad.ply")
    assert err.value.property == "rot_3" and "rot_3" in str(err.value)


def test_ply_from_third_party_sh_colors(tmp_path):
    props = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    row = [0.1, 0.2, 0.3, 0, 0, 1, 0.0, 1.0, -1.0, 2.0, -3, -3, -3, 1, 0, 0, 0]
    _write_ply(tmp_path / "sh.ply", props, [row])
    s = load_ply(tmp_path / "sh.ply")
    c0 = 0.28209479177387814
    assert np.allclose(s.colors[0], [0.5, 0.5 + c0, 0.5 - c0], atol=1e-6)
    assert s.opacity_logits[0] == 2.0 and np.allclose(s.means[0], [0.1, 0.2, 0.3])


def test_ply_truncated_and_ascii(tmp_path):
    scene = random_scene(np.random.default_rng(2), 5, dtype=np.float32)
    save_ply(scene, tmp_path / "s.ply")
    raw = (tmp_path / "s.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(raw[:-10])
    with pytest.raises(PlyError, match="truncated"):
        load_ply(tmp_path / "t.ply")
    (tmp_path / "a.ply").write_bytes(raw.replace(b"binary_little_endian", b"ascii"))
    with pytest.raises(PlyError):
        load_ply(tmp_path / "a.ply")
    (tmp_path / "n.ply").write_bytes(b"not a ply")
    with pytest.raises(PlyError):
        load_ply(tmp_path / "n.ply")


def test_png_roundtrip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
    Image.fromarray(data).save(tmp_path / "a.png")
    img = load_png(tmp_path / "a.png")
    save_png(img, tmp_path / "b.png")
    assert np.array_equal(np.asarray(Image.open(tmp_path / "b.png")), data)


def test_png_normalization_and_rounding(tmp_path):
    Image.fromarray(np.full((2, 2, 3), 255, np.uint8)).save(tmp_path / "w.png")
    assert np.all(load_png(tmp_path / "w.png") == 1.0)
    assert to_bytes(np.array([0.5]))[0] == 128
    assert to_bytes(np.array([-0.2, 1.7])).tolist() == [0, 255]


def test_png_modes(tmp_path):
    Image.fromarray(np.zeros((3, 3, 4), np.uint8)).save(tmp_path / "rgba.png")
    assert load_png(tmp_path / "rgba.png").shape == (3, 3, 3)
    assert load_png(tmp_path / "rgba.png", keep_alpha=True).shape == (3, 3, 4)
    Image.fromarray(np.zeros((3, 3), np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(ImageFormatError):
        load_png(tmp_path / "deep.png")
    Image.fromarray(np.zeros((3, 3, 3), np.uint8)).save(tmp_path / "j.jpg")
    with pytest.raises(ImageFormatError):
        load_png(tmp_path / "j.jpg")


def test_feature_file_passthrough(tmp_path):
    tok = np.random.default_rng(0).normal(size=(64, 32)).astype(np.float32)
    save_feature_file(tok, tmp_path / "f.gsft")
    got = load_feature_file(tmp_path / "f.gsft")
    assert got.shape == (64, 32) and got.tobytes() == tok.tobytes()


def test_feature_file_bad_magic_rejected_early(tmp_path, monkeypatch):
    (tmp_path / "bad.gsft").write_bytes(b"XXXX" + b"\0" * 12 + b"\0" * 4 * 10 ** 6)
    calls = []
    monkeypatch.setattr(np, "frombuffer", lambda *a, **k: calls.append(1))
    with pytest.raises(FeatureFileError, match="magic"):
        load_feature_file(tmp_path / "bad.gsft")
    assert not calls


def test_feature_file_size_mismatch(tmp_path):
    save_feature_file(np.ones((4, 2), np.float32), tmp_path / "f.gsft")
    raw = (tmp_path / "f.gsft").read_bytes()
    (tmp_path / "g.gsft").write_bytes(raw[:-4])
    with pytest.raises(FeatureFileError):
        load_feature_file(tmp_path / "g.gsft")


def _checkpoint(rng_state=None, step=3):
    from splatstego.train import init_params

    cfg = tiny_config()
    store = init_params(cfg, reference=np.full((32, 32, 3), 0.25, np.float32))
    store.set_grads(store.names(), [np.ones_like(store[n].data) for n in store.names()])
    from splatstego.optim import adamw_step
    adamw_step(store, lr=1e-3)
    return Checkpoint(store, orbit_rig(6, 2, resolution=32), cfg.to_dict(), synth_scene("sphere", 50, 0), "bits",
                      np.array([1, 0, 1, 1], np.uint8), np.ones((3, 4), np.float32), 7, step, rng_state,
                      {"note": "x"})


def test_checkpoint_roundtrip_field_identical(tmp_path):
    ck = _checkpoint(np.random.default_rng(5).bit_generator.state)
    save_checkpoint(ck, tmp_path / "c.gstg")
    got = load_checkpoint(tmp_path / "c.gstg")
    assert got.config == ck.config and got.seed == 7 and got.step == 3 and got.extra == {"note": "x"}
    assert got.rng_state == ck.rng_state
    assert got.base_scene.equals(ck.base_scene)
    assert got.rig.to_dict() == ck.rig.to_dict()
    assert got.payload.tobytes() == ck.payload.tobytes() and got.hidden_tokens.tobytes() == ck.hidden_tokens.tobytes()
    for n in ck.store.names():
        a, b = ck.store.groups[n], got.store.groups[n]
        assert a.role == b.role and a.step == b.step
        assert a.param.data.tobytes() == b.param.data.tobytes()
        assert a.m.tobytes() == b.m.tobytes() and a.v.tobytes() == b.v.tobytes()
    assert set(got.store.buffers) == set(ck.store.buffers)
    for k in ck.store.buffers:
        assert np.array_equal(got.store.buffers[k], ck.store.buffers[k])


def test_checkpoint_errors(tmp_path):
    ck = _checkpoint()
    ck.rig = None
    with pytest.raises(CheckpointError):
        save_checkpoint(ck, tmp_path / "x.gstg")
    (tmp_path / "bad.gstg").write_bytes(b"NOPE0000")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.gstg")
    good = _checkpoint()
    save_checkpoint(good, tmp_path / "g.gstg")
    raw = (tmp_path / "g.gstg").read_bytes()
    (tmp_path / "t.gstg").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.gstg")


def test_checkpoint_without_checking_camera_rejected_on_load(tmp_path):
    import json
    import struct

    good = _checkpoint()
    save_checkpoint(good, tmp_path / "g.gstg")
    raw = (tmp_path / "g.gstg").read_bytes()
    magic, ver, hlen = struct.unpack("<4sIQ", raw[:16])
    header = json.loads(raw[16:16 + hlen])
    header["rig"] = None
    head = json.dumps(header).encode()
    (tmp_path / "nr.gstg").write_bytes(struct.pack("<4sIQ", magic, ver, len(head)) + head + raw[16 + hlen:])
    with pytest.raises(CheckpointError, match="checking camera"):
        load_checkpoint(tmp_path / "nr.gstg")


def test_csv_roundtrip(tmp_path):
    rows = [{"a": 1, "b": 0.1 + 0.2}, {"a": 2, "b": float("nan")}]
    write_csv(tmp_path / "m.csv", ("a", "b"), rows)
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == "a,b" and text[1] == "1,0.30000000000000004" and text[2] == "2,nan"
    back = read_csv(tmp_path / "m.csv")
    assert back[0]["b"] == 0.1 + 0.2 and np.isnan(back[1]["b"])
    with pytest.raises(KeyError):
        write_csv(tmp_path / "n.csv", ("a", "c"), rows)

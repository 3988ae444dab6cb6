import json

import pytest
import torch

from xens.checkpoint import (
    load_checkpoint,
    load_state_archive,
    read_checkpoint_metadata,
    save_checkpoint,
    save_state_archive,
)
from xens.errors import ModelError
from xens.models import assemble_ensemble, attach_head, build_extractor, strip_and_freeze


def _classifier(seed=0):
    return attach_head(build_extractor("tiny", seed, 8), 2, seed, "a", ("normal", "diseased"))


def test_classifier_round_trip(tmp_path):
    model = _classifier()
    ckpt = save_checkpoint(model, tmp_path / "a.xck", {"seed": 0})
    back = load_checkpoint(ckpt.path)
    assert back.model_id == "a" and back.class_names == ("normal", "diseased")
    for (name, p), q in zip(model.state_dict().items(), back.state_dict().values()):
        assert torch.equal(p, q), f"{name} differs after reload"
    assert read_checkpoint_metadata(ckpt.path)["provenance"] == {"seed": 0}


def test_ensemble_round_trip_keeps_members_frozen(tmp_path):
    members = [strip_and_freeze(_classifier(s)) for s in (0, 1)]
    ensemble = assemble_ensemble(members, 3, 0, "B_ab", ("normal", "pneumonia", "covid19"), ("a", "b"))
    save_checkpoint(ensemble, tmp_path / "e.xck")
    back = load_checkpoint(tmp_path / "e.xck", expected_num_classes=3)
    assert back.member_ids == ("a", "b")
    assert back.concat_dim == 16
    assert all(e.frozen for e in back.extractors)
    for (name, p), q in zip(ensemble.state_dict().items(), back.state_dict().values()):
        assert torch.equal(p, q), f"{name} differs after reload"


def test_same_model_same_bytes(tmp_path):
    model = _classifier()
    a = save_checkpoint(model, tmp_path / "1.xck")
    b = save_checkpoint(model, tmp_path / "2.xck")
    assert a.digest == b.digest
    assert (tmp_path / "1.xck").read_bytes() == (tmp_path / "2.xck").read_bytes()


def test_corrupted_byte_fails_digest(tmp_path):
    path = save_checkpoint(_classifier(), tmp_path / "a.xck").path
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ModelError, match="digest"):
        load_checkpoint(path)


def test_wrong_k_is_fatal(tmp_path):
    path = save_checkpoint(_classifier(), tmp_path / "a.xck").path
    with pytest.raises(ModelError, match="expected 3"):
        load_checkpoint(path, expected_num_classes=3)


def _rewrite_metadata(path, **changes):
    tensors, meta = load_state_archive(path)
    meta.update(changes)
    save_state_archive(path, tensors, meta)


def test_metadata_k_mismatch(tmp_path):
    path = save_checkpoint(_classifier(), tmp_path / "a.xck").path
    _rewrite_metadata(path, num_classes=3, class_names=["x", "y", "z"])
    with pytest.raises(ModelError, match="head has 2 outputs"):
        load_checkpoint(path)


def test_unknown_arch(tmp_path):
    path = save_checkpoint(_classifier(), tmp_path / "a.xck").path
    tensors, meta = load_state_archive(path)
    meta["members"][0]["arch_id"] = "vgg16"
    save_state_archive(path, tensors, meta)
    with pytest.raises(ModelError, match="unknown arch_id"):
        load_checkpoint(path)


def test_archive_header_is_json(tmp_path):
    path = tmp_path / "w.xck"
    save_state_archive(path, {"w": torch.arange(6, dtype=torch.int64).reshape(2, 3)}, {"k": 1})
    raw = path.read_bytes()
    assert raw[:8] == b"XENSCKPT"
    header_len = int.from_bytes(raw[12:20], "little")
    header = json.loads(raw[20:20 + header_len])
    assert header["tensors"][0]["shape"] == [2, 3]
    tensors, meta = load_state_archive(path)
    assert torch.equal(tensors["w"], torch.arange(6).reshape(2, 3)) and meta == {"k": 1}

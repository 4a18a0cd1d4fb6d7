import json
import zipfile

import numpy as np
import pytest
import torch

from conftest import tiny_config, tiny_teacher
from alter import checkpoint as ck
from alter.diffusion import make_schedule
from alter.trainer import Trainer


def test_state_pack_roundtrip(tmp_path):
    state = {"a": torch.arange(5, dtype=torch.float64), 3: (1, 2.5, None),
             "nested": [{"x": np.eye(2)}, "s", True], "i": np.int64(4)}
    ck.save(tmp_path / "s.npz", "misc", {"w": np.ones(3)}, {"k": 1}, state)
    header, arrays, back = ck.load(tmp_path / "s.npz", "misc")
    assert header["meta"] == {"k": 1} and list(arrays) == ["w"]
    assert torch.equal(back["a"], state["a"]) and back[3] == (1, 2.5, None)
    assert np.array_equal(back["nested"][0]["x"], np.eye(2))
    assert back["nested"][1:] == ["s", True] and back["i"] == 4


def test_save_is_byte_identical(tmp_path):
    tr = Trainer(tiny_config(), tiny_teacher()).run(until=5)
    ck.save_trainer(tmp_path / "a.npz", tr)
    ck.save_trainer(tmp_path / "b.npz", tr)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_resume_is_bit_identical(tmp_path):
    full = Trainer(tiny_config(), tiny_teacher()).run()
    part = Trainer(tiny_config(), tiny_teacher()).run(until=12)
    ck.save_trainer(tmp_path / "p.npz", part)
    resumed = ck.load_trainer(tmp_path / "p.npz").run()
    for a, b in zip(full.student.parameters(), resumed.student.parameters()):
        assert torch.equal(a, b)
    for a, b in zip(full.hypernet.parameters(), resumed.hypernet.parameters()):
        assert torch.equal(a, b)
    assert full.mask_set.digest() == resumed.mask_set.digest()
    assert [r["phase"] for r in full.metrics] == [r["phase"] for r in resumed.metrics]
    values = [[[v for k, v in r.items() if k != "phase"] for r in t.metrics] for t in (full, resumed)]
    assert np.array_equal(*values, equal_nan=True)


def test_model_roundtrip(tmp_path):
    tr = Trainer(tiny_config(), tiny_teacher()).run()
    ck.save_model(tmp_path / "m.npz", tr.student, tr.schedule, tr.config.to_dict(), tr.mask_set)
    model, schedule, masks, meta = ck.load_model(tmp_path / "m.npz")
    for (k, a), (_, b) in zip(tr.student.state_dict().items(), model.state_dict().items()):
        assert torch.equal(a, b), k
    assert np.array_equal(schedule.alpha_bar, tr.schedule.alpha_bar)
    assert masks.digest() == tr.mask_set.digest()
    assert meta["config"]["seed"] == tr.config.seed


def test_model_without_masks(tmp_path):
    t = tiny_teacher()
    ck.save_model(tmp_path / "t.npz", t, make_schedule(20))
    assert ck.load_model(tmp_path / "t.npz")[2] is None


def _rewrite_header(src, dst, **changes):
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for item in zin.infolist():
            data = zin.read(item)
            if item.filename == "header.json":
                header = json.loads(data)
                header.update(changes)
                data = json.dumps(header).encode()
            zout.writestr(item, data)


@pytest.mark.parametrize("changes, message", [
    ({"version": 99}, "unsupported version 99"),
    ({"format": "other"}, "unknown format"),
    ({"kind": "train_state"}, "expected a model checkpoint"),
])
def test_header_validation(tmp_path, changes, message):
    ck.save_model(tmp_path / "t.npz", tiny_teacher(), make_schedule(20))
    _rewrite_header(tmp_path / "t.npz", tmp_path / "bad.npz", **changes)
    with pytest.raises(ck.CheckpointError, match=message):
        ck.load_model(tmp_path / "bad.npz")


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x.npz").write_text("hello")
    with pytest.raises(ck.CheckpointError, match="not a checkpoint"):
        ck.load(tmp_path / "x.npz")
    with zipfile.ZipFile(tmp_path / "y.npz", "w") as zf:
        zf.writestr("a.npy", b"")
    with pytest.raises(ck.CheckpointError, match="missing header"):
        ck.load(tmp_path / "y.npz")


def test_missing_parameter(tmp_path):
    t = tiny_teacher()
    arrays = ck.model_arrays(t)
    arrays.pop(next(iter(arrays)))
    with pytest.raises(ck.CheckpointError, match="lacks parameters"):
        ck.model_from_arrays(t.config, arrays)


def test_unserialisable_state(tmp_path):
    with pytest.raises(TypeError, match="cannot serialise"):
        ck.save(tmp_path / "z.npz", "misc", {}, state={"f": object()})

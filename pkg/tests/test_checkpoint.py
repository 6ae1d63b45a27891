import struct

import numpy as np
import pytest
import torch

from dcdg.checkpoint import MAGIC, from_bytes, load_checkpoint, read_header, save_checkpoint, to_bytes
from dcdg.data import CenterSpec, generate_center
from dcdg.errors import ArtifactIOError, DataError
from dcdg.networks import GROUPS, ArchConfig, init_model
from dcdg.training import TrainingConfig, train_epoch

ARCH = ArchConfig(depth=2, base_width=4)


@pytest.fixture(scope="module")
def data():
    ds = generate_center(CenterSpec("C1", n_cases=8, image_size=(16, 16), seed=3))
    return ds.subset(range(4)), ds.subset(range(4, 8))


def _cfg(**kw):
    return TrainingConfig(batch_size=2, arch=ARCH, **kw)


def _same(a, b):
    sa, sb = a.snapshot(), b.snapshot()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_fresh_round_trip():
    st = init_model(ARCH, seed=4)
    back = from_bytes(to_bytes(st))
    assert _same(st, back)
    assert back.arch == ARCH and back.seed == 4 and back.epoch == 0


def test_bytes_deterministic():
    assert to_bytes(init_model(ARCH, seed=4)) == to_bytes(init_model(ARCH, seed=4))


def test_resume_is_bit_exact(tmp_path, data):
    lab, unl = data
    cfg = _cfg()
    st, _ = train_epoch(init_model(ARCH, seed=0), lab, unl, cfg)
    path = save_checkpoint(st, tmp_path / "ck.bin")
    restored = load_checkpoint(path)
    assert restored.epoch == 1 and _same(st, restored)
    a, _ = train_epoch(st, lab, unl, cfg)
    b, _ = train_epoch(restored, lab, unl, cfg)
    assert _same(a, b)


def test_optimizer_moments_restored(data):
    lab, unl = data
    st, _ = train_epoch(init_model(ARCH, seed=0), lab, unl, _cfg())
    back = from_bytes(to_bytes(st))
    for name, opt in st.optimizers.items():
        s1, s2 = opt.state_dict()["state"], back.optimizers[name].state_dict()["state"]
        assert s1.keys() == s2.keys()
        for idx in s1:
            for key in ("exp_avg", "exp_avg_sq", "step"):
                assert torch.equal(torch.as_tensor(s1[idx][key]), torch.as_tensor(s2[idx][key]))


def test_array_payload_layout():
    st = init_model(ARCH, seed=1)
    blob = to_bytes(st)
    assert blob[:8] == MAGIC
    header, base = read_header(blob)
    arrays = st.named_arrays("fg")
    name = next(iter(arrays))
    entry = next(e for e in header["arrays"] if e["name"] == name)
    n = int(np.prod(entry["shape"]))
    raw = np.frombuffer(blob, dtype="<f4", count=n, offset=base + entry["offset"])
    assert np.array_equal(raw, arrays[name].detach().numpy().ravel())
    assert {e["name"].split(".")[0] for e in header["arrays"]} == set(GROUPS)


def test_bad_magic():
    blob = bytearray(to_bytes(init_model(ARCH, seed=1)))
    blob[0:1] = b"X"
    with pytest.raises(DataError, match="magic"):
        from_bytes(bytes(blob))


def test_bad_version():
    blob = bytearray(to_bytes(init_model(ARCH, seed=1)))
    blob[8:12] = struct.pack("<I", 99)
    with pytest.raises(DataError, match="version"):
        from_bytes(bytes(blob))


def test_missing_file(tmp_path):
    with pytest.raises(ArtifactIOError, match="nope.bin"):
        load_checkpoint(tmp_path / "nope.bin")


def test_extra_metadata_kept():
    header, _ = read_header(to_bytes(init_model(ARCH, seed=1), extra={"mode": "DCDG"}))
    assert header["extra"] == {"mode": "DCDG"}

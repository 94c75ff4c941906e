import json
import struct

import pytest
import torch

from vcmr.checkpoint import MAGIC, Checkpoint, load_checkpoint, pack_state, save_checkpoint
from vcmr.errors import CheckpointError, SchemaVersionError


def _ckpt(with_opt=True):
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.BatchNorm1d(4))
    opt = torch.optim.Adam(net.parameters(), lr=1e-3, weight_decay=1e-6)
    net(torch.randn(5, 3)).sum().backward()
    opt.step()
    return Checkpoint(
        "audio_pretrain", 3, {"lr": 1e-3, "k": 5}, pack_state("net", net.state_dict()),
        opt.state_dict() if with_opt else None, {"history": [{"epoch": 1, "train_loss": 1.5}]},
    ), net, opt


class TestRoundTrip:
    def test_tensors_and_fields(self, tmp_path):
        ck, net, _ = _ckpt()
        save_checkpoint(tmp_path / "a.ckpt", ck)
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert (back.stage, back.epoch, back.config, back.meta) == (ck.stage, ck.epoch, ck.config, ck.meta)
        assert back.tensors.keys() == ck.tensors.keys()
        for k in ck.tensors:
            assert torch.equal(back.tensors[k], ck.tensors[k]) and back.tensors[k].dtype == ck.tensors[k].dtype
        assert back.prefixes() == {"net"}
        net.load_state_dict(back.state("net"))

    def test_optimizer_restores(self, tmp_path):
        ck, net, opt = _ckpt()
        save_checkpoint(tmp_path / "a.ckpt", ck)
        back = load_checkpoint(tmp_path / "a.ckpt")
        opt2 = torch.optim.Adam(net.parameters(), lr=1.0)
        opt2.load_state_dict(back.optimizer)
        assert opt2.param_groups[0]["lr"] == 1e-3 and opt2.param_groups[0]["weight_decay"] == 1e-6
        for s1, s2 in zip(opt.state_dict()["state"].values(), opt2.state_dict()["state"].values()):
            for key in s1:
                assert torch.equal(torch.as_tensor(s1[key]), torch.as_tensor(s2[key]))

    def test_save_load_save_fixpoint(self, tmp_path):
        ck, _, _ = _ckpt()
        save_checkpoint(tmp_path / "a.ckpt", ck)
        save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_no_optimizer(self, tmp_path):
        ck, _, _ = _ckpt(with_opt=False)
        save_checkpoint(tmp_path / "a.ckpt", ck)
        assert load_checkpoint(tmp_path / "a.ckpt").optimizer is None

    def test_no_temp_file_left(self, tmp_path):
        ck, _, _ = _ckpt()
        save_checkpoint(tmp_path / "a.ckpt", ck)
        assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


class TestIntegrity:
    def test_corrupt_byte(self, tmp_path):
        ck, _, _ = _ckpt()
        path = save_checkpoint(tmp_path / "a.ckpt", ck)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello world" * 10)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_schema_version(self, tmp_path):
        ck, _, _ = _ckpt()
        ck.schema_version = 2
        path = save_checkpoint(tmp_path / "a.ckpt", ck)
        with pytest.raises(SchemaVersionError):
            load_checkpoint(path)

    def test_config_echo_mismatch(self, tmp_path):
        ck, _, _ = _ckpt()
        path = save_checkpoint(tmp_path / "a.ckpt", ck)
        load_checkpoint(path, expected_config={"k": 5})
        with pytest.raises(CheckpointError, match="k"):
            load_checkpoint(path, expected_config={"k": 3})

    def test_header_is_sorted_json(self, tmp_path):
        ck, _, _ = _ckpt()
        raw = save_checkpoint(tmp_path / "a.ckpt", ck).read_bytes()
        assert raw[:8] == MAGIC
        (n,) = struct.unpack_from("<Q", raw, 8)
        header = json.loads(raw[16 : 16 + n])
        assert header["schema_version"] == 1 and header["stage"] == "audio_pretrain"
        assert [t["name"] for t in header["tensors"]] == sorted(t["name"] for t in header["tensors"])

    def test_unsupported_dtype(self, tmp_path):
        ck = Checkpoint("x", 0, {}, {"a.w": torch.zeros(2, dtype=torch.complex64)})
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "a.ckpt", ck)

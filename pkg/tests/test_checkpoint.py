import pytest
import torch

from pmg.checkpoint import Checkpoint, load_checkpoint, model_state, save_checkpoint
from pmg.data import SyntheticSpec, make_synthetic
from pmg.errors import CheckpointError, IntegrityError
from pmg.model import ArchConfig, build_model
from pmg.trainer import Trainer, TrainingConfig, cosine_lr, fit


def test_roundtrip_bitwise(tmp_path, desk_model):
    x = torch.randn(32, 3, 64, 64)
    desk_model.eval()
    ref = desk_model.forward_all(x)
    save_checkpoint(tmp_path / "a.ckpt", Checkpoint(model_state(desk_model), config={"a": 1}))
    other = build_model(ArchConfig(), seed=99).eval()
    other.load_state_dict(load_checkpoint(tmp_path / "a.ckpt").model_state)
    out = other.forward_all(x)
    assert torch.equal(out.probs, ref.probs)
    assert all(torch.equal(a.probs, b.probs) for a, b in zip(out.stages, ref.stages))


def test_truncated_file(tmp_path, tiny_model):
    p = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(model_state(tiny_model)))
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def test_flipped_byte_fails_checksum(tmp_path, tiny_model):
    p = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(model_state(tiny_model)))
    data = bytearray(p.read_bytes())
    i = data.find(b"blobs/model/") + 200
    data[i] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def test_version_and_config_mismatch(tmp_path, tiny_model):
    p = save_checkpoint(tmp_path / "v.ckpt", Checkpoint(model_state(tiny_model), version=99))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)
    p = save_checkpoint(tmp_path / "c.ckpt", Checkpoint(model_state(tiny_model), config={"x": 1, "output_dir": "a"}))
    assert load_checkpoint(p, expected_config={"x": 1, "output_dir": "b"}).config["x"] == 1
    with pytest.raises(CheckpointError):
        load_checkpoint(p, expected_config={"x": 2})
    assert load_checkpoint(p, expected_config={"x": 2}, force=True).config == {"x": 1, "output_dir": "a"}


def test_velocity_and_counter_roundtrip(tmp_path):
    v = {"w": torch.randn(3, 2, dtype=torch.float64)}
    save_checkpoint(tmp_path / "a.ckpt", Checkpoint({}, v, t=17, total_steps=40, epoch=3))
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert torch.equal(ck.velocity["w"], v["w"]) and (ck.t, ck.total_steps, ck.epoch) == (17, 40, 3)


@pytest.fixture(scope="module")
def data():
    return make_synthetic(SyntheticSpec(samples_per_class=2))  # 16 items: 2 batches of 8


def test_resume_matches_uninterrupted(tmp_path, data):
    cfg = TrainingConfig(epochs=3, batch_size=8, base_lr=0.01, checkpoint_every=1)
    full = build_model(ArchConfig(), seed=0)
    fit(data, full, cfg, metrics_path=tmp_path / "full.csv")

    part = build_model(ArchConfig(), seed=0)
    seen = []
    lrs = []
    orig = Trainer.iterate

    def spy(self, images, labels, lr, iteration=0, seeds=(0, 0, 0)):
        lrs.append((iteration, lr))
        return orig(self, images, labels, lr, iteration, seeds)

    class Stop(Exception):
        pass

    def stop_after_first(summary):
        seen.append(summary)
        raise Stop

    with pytest.raises(Stop):
        fit(data, part, cfg, metrics_path=tmp_path / "part.csv", checkpoint_dir=tmp_path / "ck", on_epoch=stop_after_first)
    ck = load_checkpoint(tmp_path / "ck" / "latest.ckpt")
    assert (ck.epoch, ck.t) == (0, 2)

    resumed = build_model(ArchConfig(), seed=123)
    Trainer.iterate = spy
    try:
        fit(data, resumed, cfg, metrics_path=tmp_path / "part.csv", checkpoint_dir=tmp_path / "ck", resume=tmp_path / "ck" / "latest.ckpt")
    finally:
        Trainer.iterate = orig
    assert lrs[0] == (2, cosine_lr(2, 6, 0.01))
    assert [t for t, _ in lrs] == [2, 3, 4, 5]
    assert (tmp_path / "part.csv").read_text() == (tmp_path / "full.csv").read_text()
    for k, v in full.state_dict().items():
        assert torch.equal(v, resumed.state_dict()[k]), k

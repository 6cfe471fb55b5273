import json

import numpy as np
import pytest
import torch

from disttse.corpus import SyntheticCorpus
from disttse.dataset import DatasetSpec, ExampleGenerator, draw_presence
from disttse.model import DistanceTSE, ModelConfig
from disttse.training import (CheckpointError, PlateauDecay, TrainConfig, collate, finetune,
                              load_checkpoint, load_model, make_optimizer, save_checkpoint, train,
                              train_step)


@pytest.fixture(scope="module")
def corpus():
    return SyntheticCorpus(speakers_per_split=(4, 2, 2), utterances_per_speaker=3, utterance_len=1.0)


def small_run_cfg(**kw):
    base = dict(batch_size=2, epochs=1, steps_per_epoch=1, val_examples=2, clip_len=0.25)
    base.update(kw)
    return TrainConfig(**base)


class TestPlateau:
    def test_decays_after_patience(self):
        opt = make_optimizer(torch.nn.Linear(1, 1), 1e-3)
        sched = PlateauDecay(opt, 0.8, 14)
        sched.step(1.0)
        for i in range(13):
            assert not sched.step(1.0)
        assert sched.lr == pytest.approx(1e-3)
        assert sched.step(1.0)
        assert sched.lr == pytest.approx(8e-4)

    def test_improvement_resets(self):
        opt = make_optimizer(torch.nn.Linear(1, 1), 1e-3)
        sched = PlateauDecay(opt, 0.8, 3)
        for loss in (5, 6, 6, 4, 6, 6):
            sched.step(loss)
        assert sched.lr == pytest.approx(1e-3)


def test_gradient_clipped_to_norm():
    lin = torch.nn.Linear(10, 1, bias=False)
    lin.weight.grad = torch.full_like(lin.weight, 50 / np.sqrt(10))
    pre = torch.nn.utils.clip_grad_norm_(lin.parameters(), 5.0)
    assert float(pre) == pytest.approx(50.0)
    assert lin.weight.grad.norm().item() == pytest.approx(5.0, rel=1e-6)


def test_curriculum_ratios():
    cfg = TrainConfig()
    assert cfg.presence_ratio(1) == 0.9 and cfg.presence_ratio(250) == 0.9
    assert cfg.presence_ratio(251) == 0.7 and cfg.presence_ratio(500) == 0.7
    rng = np.random.default_rng(0)
    absent = np.mean([not draw_presence(rng, cfg.presence_ratio(300)) for _ in range(10000)])
    assert absent == pytest.approx(0.3, abs=0.05)


def test_optimizer_hyperparameters():
    opt = make_optimizer(torch.nn.Linear(1, 1), 1e-3)
    g = opt.param_groups[0]
    assert g["betas"] == (0.9, 0.999) and g["eps"] == 1e-8 and g["lr"] == 1e-3


def _batch(corpus, n=2, seed=0):
    spec = DatasetSpec.recipe_defaults("D1", clip_len=0.25, seed=seed)
    gen = ExampleGenerator(spec, corpus)
    return collate([gen.example("train", i, presence=bool(i % 2 == 0)) for i in range(n)])


def test_checkpoint_round_trip_gives_identical_step(corpus, tmp_path):
    torch.manual_seed(0)
    cfg = ModelConfig.tiny()
    m = DistanceTSE(cfg)
    opt = make_optimizer(m, 1e-3)
    batch = _batch(corpus)
    train_step(m, opt, batch)
    save_checkpoint(tmp_path / "c.pt", m, opt, epoch=3)
    state, _ = load_checkpoint(tmp_path / "c.pt", cfg)
    m2 = DistanceTSE(cfg)
    m2.load_state_dict(state["model_state"])
    opt2 = make_optimizer(m2, 1e-3)
    opt2.load_state_dict(state["optimizer_state"])
    train_step(m, opt, batch)
    train_step(m2, opt2, batch)
    for a, b in zip(m.parameters(), m2.parameters()):
        assert torch.equal(a, b)
    assert state["epoch"] == 3


def test_config_mismatch_rejected(tmp_path):
    m = DistanceTSE(ModelConfig.tiny())
    save_checkpoint(tmp_path / "c.pt", m)
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(tmp_path / "c.pt", ModelConfig.tiny(d=8, h=8))
    assert isinstance(load_model(tmp_path / "c.pt"), DistanceTSE)


def test_schema_version_checked(tmp_path):
    torch.save({"schema_version": 99}, tmp_path / "bad.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.pt")


def test_nonfinite_loss_aborts(corpus, tmp_path):
    m = DistanceTSE(ModelConfig.tiny())
    y, x, d_q, p = _batch(corpus)
    y[0, 10] = float("nan")
    with pytest.raises(FloatingPointError, match="non-finite"):
        train_step(m, make_optimizer(m, 1e-3), (y, x, d_q, p), dump_dir=tmp_path)
    assert (tmp_path / "nonfinite_batch.npz").exists()


def test_train_writes_checkpoints_and_log(corpus, tmp_path):
    hist = train(ModelConfig.tiny(), DatasetSpec.recipe_defaults("D1"), small_run_cfg(epochs=2),
                 corpus, tmp_path)
    assert len(hist) == 2
    for name in ("epoch_0001.pt", "epoch_0002.pt", "last.pt", "best.pt"):
        assert (tmp_path / name).exists()
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == [1, 2]
    assert set(lines[0]) == {"epoch", "train_loss", "val_loss", "lr", "presence_ratio"}


def test_resume_continues_epochs(corpus, tmp_path):
    spec = DatasetSpec.recipe_defaults("D1")
    train(ModelConfig.tiny(), spec, small_run_cfg(), corpus, tmp_path / "a")
    hist = train(ModelConfig.tiny(), spec, small_run_cfg(epochs=2, resume_from=str(tmp_path / "a" / "last.pt")),
                 corpus, tmp_path / "a")
    assert [h["epoch"] for h in hist] == [2]


def test_finetune_deterministic(corpus, tmp_path):
    from disttse.rir import RirStore, RoomSpec, simulate_rir
    rng = np.random.default_rng(0)
    room = RoomSpec((6, 5, 3), 0.3)
    pairs = []
    for i in range(12):
        src = [0.5 + 0.4 * i, 1.0, 1.5]
        r = simulate_rir(room, src, [5.5, 4.0, 1.2], rng=rng, rir_id=f"q{i}")
        r.meta.update(room_id="Q301", mic_id="m0")
        pairs.append((r, "train" if i < 9 else "test"))
    store_dir = tmp_path / "store"
    RirStore.write(store_dir, pairs)
    d4 = DatasetSpec.recipe_defaults("D4", rir_store=str(store_dir))
    assert d4.r_spk == 0.1
    save_checkpoint(tmp_path / "pre.pt", DistanceTSE(ModelConfig.tiny()))
    a = finetune(tmp_path / "pre.pt", d4, small_run_cfg(val_examples=0), corpus, tmp_path / "ft_a")
    b = finetune(tmp_path / "pre.pt", d4, small_run_cfg(val_examples=0), corpus, tmp_path / "ft_b")
    assert a[0]["train_loss"] == b[0]["train_loss"]
    sa = torch.load(tmp_path / "ft_a" / "last.pt", weights_only=False)["model_state"]
    sb = torch.load(tmp_path / "ft_b" / "last.pt", weights_only=False)["model_state"]
    assert all(torch.equal(sa[k], sb[k]) for k in sa)

import json

import numpy as np
import pytest
import torch
from torch import nn

from fccdn.data import ChannelStats, ImagePair, PairDataset, compute_stats, gen_synthetic
from fccdn.exceptions import CheckpointError, ConfigurationError, TrainingDiverged
from fccdn.metrics import MetricsReport, compute_metrics, confusion
from fccdn.network import ModelOutputs, NetworkConfig, build_model
from fccdn.training import (
    PlateauSchedule,
    Trainer,
    TrainConfig,
    TrainState,
    load_checkpoint,
    model_from_checkpoint,
    read_checkpoint,
    save_checkpoint,
    validate,
)

TINY = dict(width_multiplier=0.125, stage_depths=(1, 1, 1, 1))


def _report(f1):
    return MetricsReport(f1, f1, f1, f1)


class Scripted:
    """Validator that replays a fixed F1 sequence and stamps the epoch into the weights."""

    def __init__(self, f1s):
        self.f1s = list(f1s)
        self.calls = []

    def __call__(self, trainer, epoch):
        self.calls.append(epoch)
        with torch.no_grad():
            trainer.model.change_head.proj.bias.fill_(float(epoch))
        return _report(self.f1s[epoch - 1])


def _scripted_trainer(f1s, tmp_path, **cfg):
    model = build_model(NetworkConfig.fccdn(**TINY))
    validator = Scripted(f1s)
    cfg = TrainConfig(**{"max_epochs": len(f1s), **cfg})
    return Trainer(model, cfg, None, None, run_dir=tmp_path, validator=validator), validator


def _records(run_dir, kind):
    lines = (run_dir / "log.jsonl").read_text().splitlines()
    return [r for r in map(json.loads, lines) if r["kind"] == kind]


# ---------------------------------------------------------------- schedule

def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.weight_decay, cfg.plateau_factor) == (0.002, 0.001, 0.3)
    assert (cfg.plateau_patience_epochs, cfg.validation_start_epoch, cfg.max_reductions_before_stop) == (10, 30, 3)


@pytest.mark.parametrize("kw", [dict(plateau_factor=1.0), dict(plateau_factor=0.0), dict(plateau_patience_epochs=0),
                                dict(loss_variant="focal")])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_plateau_sequence_never_improving():
    cfg = TrainConfig()
    state = TrainState(current_lr=cfg.learning_rate)
    sched = PlateauSchedule(cfg, state)
    lrs, actions = [], []
    for epoch in range(1, 200):
        actions.append(sched.update(0.5, epoch))
        lrs.append(state.current_lr)
        assert abs(state.current_lr - 0.002 * 0.3 ** state.reductions_done) <= 1e-12
        if actions[-1] == "stop":
            break
    distinct = sorted(set(lrs), reverse=True)
    np.testing.assert_allclose(distinct, [0.002, 6e-4, 1.8e-4, 5.4e-5], rtol=1e-12)
    assert actions.count("reduced") == 3 and actions[-1] == "stop"
    # first validation improves, then 3 x 10 waits/reductions, then 10 more to the stop
    assert len(actions) == 1 + 10 * 4


def test_improvement_is_strict():
    cfg = TrainConfig(plateau_patience_epochs=2)
    state = TrainState()
    sched = PlateauSchedule(cfg, state)
    assert sched.update(0.8, 1) == "improved"
    assert sched.update(0.8, 2) == "wait"
    assert sched.update(0.8, 3) == "reduced"


def test_scripted_run_skips_early_validation_and_keeps_argmax(tmp_path):
    rng = np.random.default_rng(0)
    f1s = list(rng.uniform(0.2, 0.6, 45)) + [0.95] + list(rng.uniform(0.2, 0.6, 60))
    trainer, validator = _scripted_trainer(f1s, tmp_path)
    state = trainer.fit()
    assert min(validator.calls) == 30
    vals = _records(tmp_path, "validation")
    assert vals and min(r["epoch"] for r in vals) >= 30
    scored = {e: f1s[e - 1] for e in validator.calls}
    best = max(scored, key=scored.get)
    assert state.best_epoch == best == 46
    model, ckpt = model_from_checkpoint(tmp_path / "best.pt")
    assert model.change_head.proj.bias.item() == float(best)
    assert ckpt["train_state"]["best_epoch"] == best
    assert state.stopped and state.reductions_done == 3
    assert abs(state.current_lr - 5.4e-5) <= 1e-12
    assert (tmp_path / "last.pt").exists()


def test_scripted_lr_sequence_in_log(tmp_path):
    trainer, _ = _scripted_trainer([0.5] * 200, tmp_path)
    trainer.fit()
    vals = _records(tmp_path, "validation")
    lrs = []
    for r in vals:
        if not lrs or r["lr"] != lrs[-1]:
            lrs.append(r["lr"])
    np.testing.assert_allclose(lrs, [0.002, 6e-4, 1.8e-4, 5.4e-5], rtol=1e-12)
    assert vals[-1]["action"] == "stop"
    assert sum(r["action"] == "reduced" for r in vals) == 3


def test_best_written_when_validation_never_runs(tmp_path):
    trainer, validator = _scripted_trainer([0.5] * 5, tmp_path)
    trainer.fit()
    assert validator.calls == [] and (tmp_path / "best.pt").exists()


def test_resume_continues_counters_exactly(tmp_path):
    rng = np.random.default_rng(3)
    f1s = list(rng.uniform(0, 1, 40)) + [0.1] * 50
    full_dir, part_dir = tmp_path / "full", tmp_path / "part"
    full, _ = _scripted_trainer(f1s, full_dir, validation_start_epoch=5, plateau_patience_epochs=4)
    full_state = full.fit()

    first, _ = _scripted_trainer(f1s[:17], part_dir, validation_start_epoch=5, plateau_patience_epochs=4)
    first.fit()
    second, _ = _scripted_trainer(f1s, part_dir, validation_start_epoch=5, plateau_patience_epochs=4)
    second.resume(part_dir / "last.pt")
    assert second.state.epoch == 17 and not second.state.stopped
    resumed_state = second.fit()
    assert resumed_state == full_state and full_state.stopped
    assert _records(part_dir, "validation") == _records(full_dir, "validation")
    assert (part_dir / "best.pt").exists()


# ---------------------------------------------------------------- optimizer contract

def _optimizer_step(weight_decay):
    model = build_model(NetworkConfig.fccdn(**TINY)).double()
    trainer = Trainer(model, TrainConfig(weight_decay=weight_decay))
    before = {n: p.detach().clone().double() for n, p in model.named_parameters()}
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    trainer.optimizer.step()
    return before, dict(model.named_parameters())


def test_zero_gradient_zero_decay_is_noop():
    before, after = _optimizer_step(0.0)
    for n, p in after.items():
        assert torch.equal(p.detach().double(), before[n]), n


def test_decoupled_weight_decay():
    before, after = _optimizer_step(0.001)
    factor = 1 - 0.002 * 0.001
    for n, p in after.items():
        assert torch.allclose(p.detach().double(), before[n] * factor, rtol=0, atol=1e-9), n


# ---------------------------------------------------------------- validation

class _Oracle(nn.Module):
    """Outputs channel 0 of t1 thresholded at zero, or a constant."""

    def __init__(self, constant=None):
        super().__init__()
        self.constant = constant

    def forward(self, t1, t2):
        if self.constant is not None:
            return ModelOutputs(torch.full_like(t1[:, :1], self.constant))
        return ModelOutputs((t1[:, :1] > 0).float())


def _oracle_pairs(n=5, size=16, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        label = rng.integers(0, 2, (size, size)).astype(np.uint8)
        img = np.zeros((size, size, 3), np.uint8)
        img[..., 0] = label * 255
        pairs.append(ImagePair(img, img.copy(), label, id=f"o{i}"))
    return pairs


def test_validate_perfect_model():
    ds = PairDataset(_oracle_pairs(), ChannelStats((128.0, 0.0, 0.0), (1.0, 1.0, 1.0)))
    assert validate(_Oracle(), ds).f1 == 1.0


def test_validate_constant_half_is_all_positive():
    pairs = _oracle_pairs()
    ds = PairDataset(pairs, ChannelStats.identity())
    ones = np.ones((16, 16), bool)
    expected = compute_metrics(sum((confusion(ones, p.change) for p in pairs[1:]), confusion(ones, pairs[0].change)))
    assert validate(_Oracle(constant=0.5), ds) == expected


def test_validate_batch_size_invariant():
    pairs = gen_synthetic(6, 32, seed=1)
    ds = PairDataset(pairs, compute_stats(pairs))
    model = build_model(NetworkConfig.fccdn(**TINY))
    assert validate(model, ds, 1) == validate(model, ds, 4) == validate(model, ds, 6)


def test_validate_empty_split():
    with pytest.raises(ValueError):
        validate(_Oracle(), PairDataset([], ChannelStats.identity()))


# ---------------------------------------------------------------- checkpoints

def test_save_load_save_byte_identical(tmp_path):
    model = build_model(NetworkConfig.fccdn(**TINY), seed=4)
    trainer = Trainer(model, TrainConfig())
    save_checkpoint(tmp_path / "a.pt", model, trainer.state, trainer.optimizer, trainer.cfg)
    first = (tmp_path / "a.pt").read_bytes()
    torch.save(read_checkpoint(tmp_path / "a.pt"), tmp_path / "a.pt")
    assert (tmp_path / "a.pt").read_bytes() == first

    # the archive embeds its file stem, so compare saves to the same path
    path = tmp_path / "m.pt"
    save_checkpoint(path, model)
    first = path.read_bytes()
    loaded, _ = model_from_checkpoint(path)
    save_checkpoint(path, loaded)
    assert path.read_bytes() == first
    for (n, p), q in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(p, q), n


def test_width_mismatch_names_first_tensor(tmp_path):
    save_checkpoint(tmp_path / "a.pt", build_model(NetworkConfig.fccdn(**TINY)))
    other = build_model(NetworkConfig.fccdn(width_multiplier=0.25, stage_depths=(1, 1, 1, 1)))
    first = next(iter(other.state_dict()))
    with pytest.raises(CheckpointError, match=first.replace(".", r"\.")):
        load_checkpoint(tmp_path / "a.pt", other)


def test_version_checked(tmp_path):
    torch.save({"format_version": 99}, tmp_path / "x.pt")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "x.pt")


# ---------------------------------------------------------------- real training loop

def _real_trainer(run_dir, seed=0, pairs=None, **kw):
    pairs = pairs or gen_synthetic(6, 32, seed=2)
    stats = compute_stats(pairs)
    torch.manual_seed(seed)
    model = build_model(NetworkConfig.fccdn(**TINY), seed)
    cfg = TrainConfig(**{"batch_size": 2, "max_epochs": 2, "validation_start_epoch": 1, "seed": seed, **kw})
    return Trainer(model, cfg, PairDataset(pairs[:4], stats, seed=seed), PairDataset(pairs[4:], stats), run_dir)


def test_training_writes_artifacts_and_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _real_trainer(a).fit()
    _real_trainer(b).fit()
    for name in ("log.jsonl", "best.pt", "last.pt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    steps = _records(a, "step")
    assert len(steps) == 4 and {"total", "change", "seg1", "seg2"} <= set(steps[0]["loss"])
    assert len(_records(a, "validation")) == 2


def test_max_steps_budget(tmp_path):
    state = _real_trainer(tmp_path, max_steps=3, max_epochs=10).fit()
    assert state.step == 3


def test_drop_last(tmp_path):
    pairs = gen_synthetic(7, 32, seed=2)
    trainer = _real_trainer(tmp_path, pairs=pairs, batch_size=2, max_epochs=1)
    trainer.train_data = PairDataset(pairs[:5], compute_stats(pairs))
    assert trainer.fit().step == 2


def test_non_finite_loss_aborts(tmp_path):
    trainer = _real_trainer(tmp_path)
    batch = next(iter(trainer._loader(1)))
    batch["t1"][:] = float("nan")
    with pytest.raises(TrainingDiverged):
        trainer.train_step(batch)
    dump = json.loads((tmp_path / "diverged.json").read_text())
    assert dump["state"]["step"] == 0


def test_aux_warmup(tmp_path):
    trainer = _real_trainer(tmp_path, aux_warmup_steps=2, max_steps=3, max_epochs=5)
    trainer.fit()
    steps = _records(tmp_path, "step")
    assert ["seg1" in s["loss"] for s in steps] == [False, False, True]


@pytest.mark.parametrize("variant", ["contrastive", "none"])
def test_other_variants_train(tmp_path, variant):
    trainer = _real_trainer(tmp_path, loss_variant=variant, max_steps=2)
    trainer.fit()
    keys = set(_records(tmp_path, "step")[0]["loss"])
    assert keys == ({"total", "change", "aux"} if variant == "contrastive" else {"total", "change"})


@pytest.mark.filterwarnings("ignore:class labels found on unchanged pixels")
def test_multiclass_variant_trains(tmp_path):
    pairs = gen_synthetic(6, 32, seed=2)
    stats = compute_stats(pairs)
    model = build_model(NetworkConfig.fccdn(num_seg_classes=2, **TINY))
    cfg = TrainConfig(loss_variant="multiclass_ssl", batch_size=2, max_steps=2, validation_start_epoch=1)
    Trainer(model, cfg, PairDataset(pairs[:4], stats), PairDataset(pairs[4:], stats), tmp_path).fit()
    assert set(_records(tmp_path, "step")[0]["loss"]) == {"total", "change", "l_c", "l_u"}

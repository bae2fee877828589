import numpy as np
import pytest

from endovo.errors import ConfigurationError, DegenerateCalibrationError, ValidationError
from endovo.model import EndoVONet, NetConfig
from endovo.train import (EpochRecord, Sequence, TrainConfig, Trainer, TrainingLog, calibrate_beta, train)

CFG = NetConfig(height=16, width=16, inception_widths=((2, 2, 2, 2), (2, 2, 2, 2), (4, 4, 4, 4)),
                lstm_hidden=6, precision="float64")


def _seq(name, seed, n=12):
    rng = np.random.default_rng(seed)
    pairs = rng.standard_normal((n, 8, 16, 16))
    x = 0.05 * rng.standard_normal((n, 3)) + [0, 0, 0.06]
    q = np.tile([1.0, 0, 0, 0], (n, 1)) + 0.02 * rng.standard_normal((n, 4))
    return Sequence(name, pairs, x, q / np.linalg.norm(q, axis=1, keepdims=True))


def _log(*pairs):
    return TrainingLog([EpochRecord(k + 1, t + b, t + b, t, b, 1e-3, 0.0) for k, (t, b) in enumerate(pairs)])


def test_calibrate_beta():
    assert calibrate_beta(_log((0.2, 0.1), (0.3, 0.3))) == 1.0
    assert np.isclose(calibrate_beta(_log((0.04, 0.008))), 5.0, rtol=1e-15)
    with pytest.raises(DegenerateCalibrationError):
        calibrate_beta(_log((0.04, 0.0)))
    with pytest.raises(ConfigurationError):
        calibrate_beta(TrainingLog())


def test_training_log_csv_round_trip(tmp_path):
    log = _log((0.1, 0.02), (0.09, 0.021))
    log.save(tmp_path / "log.csv")
    back = TrainingLog.load(tmp_path / "log.csv")
    assert back.records == log.records
    assert back.to_csv() == log.to_csv()
    with pytest.raises(ValidationError):
        TrainingLog.from_csv("a,b\n1,2\n")


class _Worsening(Trainer):
    def validate(self):
        return 1.0 + len(self.log.records)


def test_early_stopping_returns_first_epoch_weights():
    net = EndoVONet(CFG, seed=0)
    trainer = _Worsening(net, [_seq("a", 0)], [_seq("b", 1)], TrainConfig(max_epochs=20, patience=1, window=4))
    snapshots = []
    real_epoch = trainer.train_epoch

    def epoch_and_snapshot():
        out = real_epoch()
        snapshots.append({k: v.copy() for k, v in net.params.items()})
        return out

    trainer.train_epoch = epoch_and_snapshot
    best, log = trainer.run()
    assert [r.epoch for r in log.records] == [1, 2]
    assert log.stopped_early and log.best_epoch == 1
    assert all(np.array_equal(best[k], snapshots[0][k]) for k in best)
    assert not all(np.array_equal(best[k], snapshots[1][k]) for k in best)


def test_training_reduces_loss():
    net = EndoVONet(CFG, seed=0)
    seqs = [_seq("a", 0), _seq("b", 1)]
    _, log = train(net, seqs, [_seq("c", 2)], TrainConfig(max_epochs=15, patience=15, window=4, initial_lr=3e-3,
                                                          batch_trajectories=2))
    assert log.records[-1].train_loss < 0.5 * log.initial_train_loss


def test_strict_training_is_bit_identical():
    logs = []
    params = []
    for _ in range(2):
        net = EndoVONet(CFG, seed=3)
        best, log = train(net, [_seq("a", 0), _seq("b", 1)], [_seq("c", 2)],
                          TrainConfig(max_epochs=3, window=5, seed=7))
        logs.append(log.to_csv())
        params.append(best)
    assert logs[0] == logs[1]
    assert all(np.array_equal(params[0][k], params[1][k]) for k in params[0])
    assert all(r.split(",")[-1] == "0.0" for r in logs[0].splitlines()[1:])


def test_split_validation():
    net = EndoVONet(CFG, seed=0)
    with pytest.raises(ConfigurationError):
        Trainer(net, [], [_seq("b", 1)], TrainConfig())
    with pytest.raises(ConfigurationError):
        Trainer(net, [_seq("a", 0)], [], TrainConfig())
    with pytest.raises(ConfigurationError):
        Trainer(net, [_seq("a", 0)], [_seq("a", 0)], TrainConfig())
    with pytest.raises(ConfigurationError):
        TrainConfig(patience=0)

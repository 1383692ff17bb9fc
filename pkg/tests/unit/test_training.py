import math
from collections import deque

import numpy as np
import pytest
import torch

from exceptions import InvalidArgumentError, NumericalError
from models import Task, TrainConfig
from network import NodeGamModel, predict
from training import (
    TrainState,
    average_checkpoints,
    draw_mask,
    finetune,
    labeled_subset,
    loss,
    lr_schedule,
    masked_reconstruction_loss,
    pretrain,
    read_history,
    train,
    write_history,
)


def t(values):
    return torch.tensor(values, dtype=torch.float64)


class TestLoss:
    """Data loss plus l2 penalty on tree outputs."""

    def test_regression_perfect_fit(self):
        y = t([[1.0], [2.0]])
        assert loss(y, y, torch.zeros(2, 4, dtype=torch.float64), 0.0, Task.REGRESSION).item() == 0.0

    def test_binary_at_zero_logit(self):
        value = loss(torch.zeros(4, 1, dtype=torch.float64), t([0.0, 1.0, 1.0, 0.0]),
                     torch.zeros(4, 2, dtype=torch.float64), 0.0, Task.BINARY)
        assert value.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_penalty_on_tree_outputs(self):
        y = t([[1.0], [2.0]])
        value = loss(y, y, torch.ones(2, 4, dtype=torch.float64), 1e-5, Task.REGRESSION)
        assert value.item() == pytest.approx(1e-5, abs=1e-18)

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            loss(torch.zeros(3, 1, dtype=torch.float64), t([0.0, 1.0]),
                 torch.zeros(3, 1, dtype=torch.float64), 0.0, Task.REGRESSION)

    def test_binary_targets_must_be_zero_or_one(self):
        with pytest.raises(InvalidArgumentError):
            loss(torch.zeros(2, 1, dtype=torch.float64), t([0.0, 2.0]),
                 torch.zeros(2, 1, dtype=torch.float64), 0.0, Task.BINARY)

    def test_bool_targets_rejected(self):
        with pytest.raises(InvalidArgumentError):
            loss(torch.zeros(2, 1, dtype=torch.float64), torch.tensor([True, False]),
                 torch.zeros(2, 1, dtype=torch.float64), 0.0, Task.BINARY)


class TestMaskedReconstruction:

    def test_only_masked_cells_count(self):
        original = t([[1.0, 2.0], [3.0, 4.0]])
        response = t([[1.0, 0.0], [0.0, 4.0]])
        mask = t([[0.0, 1.0], [0.0, 0.0]])
        value = masked_reconstruction_loss(response, original, mask, torch.zeros(2, 1, dtype=torch.float64), 0.0)
        assert value.item() == 4.0

    def test_empty_mask_is_zero(self):
        x = torch.randn(3, 2, dtype=torch.float64)
        value = masked_reconstruction_loss(x + 1, x, torch.zeros(3, 2, dtype=torch.float64),
                                           torch.zeros(3, 1, dtype=torch.float64), 0.0)
        assert value.item() == 0.0

    def test_mask_rate(self):
        mask = draw_mask((1000, 1000), 0.15, torch.Generator().manual_seed(0))
        assert abs(mask.double().mean().item() - 0.15) < 0.0015


class TestLrSchedule:
    """Linear warmup times 0.2 per plateau."""

    @pytest.mark.parametrize("step,expected", [(250, 0.005), (500, 0.01), (1000, 0.01)])
    def test_warmup(self, step, expected):
        config = TrainConfig(lr=0.01, warmup_steps=500)
        assert lr_schedule(step, TrainState(), config) == pytest.approx(expected, rel=1e-12)

    def test_after_plateau(self):
        config = TrainConfig(lr=0.01, warmup_steps=500)
        assert lr_schedule(1000, TrainState(num_decays=1), config) == pytest.approx(0.002, rel=1e-12)

    def test_no_warmup(self):
        assert lr_schedule(1, TrainState(), TrainConfig(lr=0.01, warmup_steps=0)) == 0.01


class TestAverageCheckpoints:

    def test_identical_snapshots_average_to_themselves(self, make_config):
        state = NodeGamModel(make_config()).state_dict()
        averaged = average_checkpoints(deque([state, state, state]))
        for name, value in state.items():
            assert torch.equal(averaged[name], value), name

    def test_elementwise_mean(self):
        snapshots = deque([{"w": t([1.0, 2.0]), "n": torch.tensor(1)},
                           {"w": t([3.0, 6.0]), "n": torch.tensor(2)}])
        averaged = average_checkpoints(snapshots)
        assert averaged["w"].tolist() == [2.0, 4.0]
        assert averaged["n"].item() == 2

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            average_checkpoints(deque())


class TestTrain:
    """Supervised training loop."""

    def test_anneals_and_records_history(self, make_config, fast_train_config, regression_arrays):
        x, y = regression_arrays
        result = train(NodeGamModel(make_config()), x, y, config=fast_train_config)
        assert result.stop_reason == "max_steps"
        assert int(result.model.step) == 8
        assert result.model.annealed
        assert [r.step for r in result.history] == [4, 8]
        assert result.history[0].temperature == pytest.approx(0.01 ** 0.75, rel=1e-12)

    def test_stop_between_snapshots_keeps_live_step(self, make_config, fast_train_config, regression_arrays):
        """Averaging restores weights only; the step counter reflects every step taken."""
        x, y = regression_arrays
        config = fast_train_config.model_copy(update={"max_steps": 6})
        result = train(NodeGamModel(make_config()), x, y, config=config)
        assert [r.step for r in result.history] == [4]
        assert int(result.model.step) == 6
        assert result.model.annealed

    def test_loss_logging_raises_no_grad_warning(self, make_config, fast_train_config, regression_arrays, recwarn):
        x, y = regression_arrays
        train(NodeGamModel(make_config()), x, y, config=fast_train_config)
        assert not [w for w in recwarn if "requires_grad" in str(w.message)]

    def test_validation_metric_is_rmse(self, make_config, fast_train_config, regression_arrays):
        x, y = regression_arrays
        result = train(NodeGamModel(make_config()), x[:200], y[:200], x[200:], y[200:], fast_train_config)
        assert all(r.val_metric is not None and r.val_metric > 0 for r in result.history)
        assert result.best_metric == min(r.val_metric for r in result.history)

    def test_binary_metric_is_auc(self, make_config, fast_train_config, binary_arrays):
        x, y = binary_arrays
        model = NodeGamModel(make_config(task=Task.BINARY))
        result = train(model, x[:200], y[:200], x[200:], y[200:], fast_train_config)
        assert 0.0 <= result.best_metric <= 1.0

    def test_early_stop_after_patience(self, make_config, regression_arrays):
        """With early_stop_steps=4 and eval every 2 steps, no improvement after step 2 stops at step 6."""
        x, y = regression_arrays
        config = TrainConfig(lr=0.0, batch_size=64, warmup_steps=0, eval_interval_steps=2,
                             early_stop_steps=4, max_steps=50)
        result = train(NodeGamModel(make_config(anneal_steps=0)), x[:200], y[:200], x[200:], y[200:], config)
        assert result.stop_reason == "early_stop"
        assert int(result.model.step) == 6

    def test_no_early_stop_without_validation(self, make_config, regression_arrays):
        x, y = regression_arrays
        config = TrainConfig(lr=0.0, batch_size=64, warmup_steps=0, eval_interval_steps=2,
                             early_stop_steps=1, max_steps=6)
        assert train(NodeGamModel(make_config()), x, y, config=config).stop_reason == "max_steps"

    def test_deterministic(self, make_config, fast_train_config, regression_arrays):
        x, y = regression_arrays
        a = train(NodeGamModel(make_config()), x, y, config=fast_train_config).model
        b = train(NodeGamModel(make_config()), x, y, config=fast_train_config).model
        for name, value in a.state_dict().items():
            assert torch.equal(value, b.state_dict()[name]), name

    def test_huge_penalty_shrinks_tree_outputs(self, make_config, regression_arrays):
        x, y = regression_arrays
        config = TrainConfig(lr=0.05, batch_size=256, warmup_steps=0, eval_interval_steps=50, max_steps=200)
        model = NodeGamModel(make_config(l2_lambda=1e3), output_bias=float(y.mean()))
        xt = torch.from_numpy(x)
        before = model(xt).tree_outputs.pow(2).mean().item()
        trained = train(model, x, y, config=config).model
        after = trained(xt).tree_outputs.pow(2).mean().item()
        assert after < 0.1 * before

    def test_empty_data_rejected(self, make_config, fast_train_config):
        with pytest.raises(InvalidArgumentError):
            train(NodeGamModel(make_config()), np.zeros((0, 3)), np.zeros(0), config=fast_train_config)

    def test_non_finite_loss(self, make_config, fast_train_config, regression_arrays):
        x, y = regression_arrays
        y = y.copy()
        y[0] = np.inf
        with pytest.raises(NumericalError):
            train(NodeGamModel(make_config()), x, y, config=fast_train_config)

    def test_separable_toy_set(self, make_config):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 1))
        y = (x[:, 0] > 0).astype(np.float64)
        config = TrainConfig(lr=0.01, batch_size=64, warmup_steps=10, eval_interval_steps=50, max_steps=400)
        model = NodeGamModel(make_config(num_features=1, task=Task.BINARY, anneal_steps=200))
        trained = train(model, x, y, config=config).model
        from sklearn.metrics import roc_auc_score
        scores = predict(trained, torch.from_numpy(x)).scores[:, 0].numpy()
        assert roc_auc_score(y, scores) > 0.95


class TestPretrain:
    """Masked-feature reconstruction."""

    def test_needs_one_head_per_feature(self, make_config, fast_train_config, regression_arrays):
        with pytest.raises(InvalidArgumentError):
            pretrain(NodeGamModel(make_config()), regression_arrays[0], config=fast_train_config)

    def test_runs_and_reports_masked_mse(self, make_config, fast_train_config, regression_arrays):
        x, _ = regression_arrays
        model = NodeGamModel(make_config(num_outputs=3))
        result = pretrain(model, x[:200], x[200:], fast_train_config)
        assert all(r.val_metric is not None for r in result.history)
        assert int(result.model.step) == 8

    def test_redundant_copy_is_reconstructed(self, make_config):
        """With feature 2 a copy of feature 1, masking feature 2 leaves it recoverable."""
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 1536))
        x = np.column_stack([a, a, b])
        x_train, x_test = x[:1024], x[1024:]
        model = NodeGamModel(make_config(num_outputs=3, num_layers=1, trees_per_layer=16, depth=3,
                                         anneal_steps=100))
        config = TrainConfig(lr=0.02, batch_size=128, warmup_steps=0, eval_interval_steps=50,
                             max_steps=400, checkpoint_count=1, seed=0)
        trained = pretrain(model, x_train, config=config).model

        masked = x_test.copy()
        masked[:, 1] = 0.0
        response = predict(trained, t(masked)).scores.numpy()
        mse = float(np.mean((response[:, 1] - x_test[:, 1]) ** 2))
        assert mse < float(np.var(x_test[:, 1]))

    def test_zero_mask_rate_only_moves_by_penalty(self, make_config, regression_arrays):
        """No masked cells: the data term is zero, so read-out weights see no gradient."""
        x, _ = regression_arrays
        config = TrainConfig(lr=0.01, batch_size=64, warmup_steps=0, eval_interval_steps=4,
                             max_steps=4, mask_rate=0.0, checkpoint_count=1)
        model = NodeGamModel(make_config(num_outputs=3))
        before = model.last_linear.detach().clone()
        trained = pretrain(model, x, config=config).model
        assert torch.equal(trained.last_linear.detach(), before)


class TestFinetune:
    """Fresh single head, frozen body for freeze_steps."""

    def _pretrained(self, make_config, fast_train_config, x):
        return pretrain(NodeGamModel(make_config(num_outputs=3)), x, config=fast_train_config).model

    def test_replaces_head_and_continues_step(self, make_config, fast_train_config, regression_arrays):
        x, y = regression_arrays
        model = self._pretrained(make_config, fast_train_config, x)
        config = fast_train_config.model_copy(update={"freeze_steps": 2})
        result = finetune(model, x, y, config=config, task=Task.REGRESSION)
        assert result.model.config.num_outputs == 1
        assert int(result.model.step) == 16

    def test_freeze_phase_keeps_body_bit_identical(self, make_config, fast_train_config, regression_arrays):
        x, y = regression_arrays
        model = self._pretrained(make_config, fast_train_config, x)
        body = {k: v.clone() for k, v in model.state_dict().items() if k.startswith("layers")}
        config = TrainConfig(lr=0.01, batch_size=64, warmup_steps=0, eval_interval_steps=2,
                             checkpoint_count=1, max_steps=4, freeze_steps=4)
        tuned = finetune(model, x, y, config=config).model
        for name, value in body.items():
            assert torch.equal(tuned.state_dict()[name], value), name
        assert all(p.requires_grad for p in tuned.body_parameters())

    def test_body_moves_after_freeze(self, make_config, fast_train_config, regression_arrays):
        x, y = regression_arrays
        model = self._pretrained(make_config, fast_train_config, x)
        before = model.layers[0].responses.detach().clone()
        config = TrainConfig(lr=0.01, batch_size=64, warmup_steps=0, eval_interval_steps=2,
                             checkpoint_count=1, max_steps=4, freeze_steps=2)
        tuned = finetune(model, x, y, config=config).model
        assert not torch.equal(tuned.layers[0].responses.detach(), before)

    @pytest.mark.parametrize("lr", [5e-5, 1e-4, 3e-4, 5e-4])
    def test_small_learning_rates_accepted(self, lr):
        assert TrainConfig(lr=lr).lr == lr

    def test_needs_labels(self, make_config, fast_train_config, regression_arrays):
        x, _ = regression_arrays
        model = self._pretrained(make_config, fast_train_config, x)
        with pytest.raises(InvalidArgumentError):
            finetune(model, x, np.zeros(0), config=fast_train_config)


class TestLabeledSubset:

    def test_size_and_order(self):
        x = np.arange(200).reshape(100, 2)
        y = np.arange(100)
        xs, ys = labeled_subset(x, y, 0.05, seed=1)
        assert len(ys) == 5
        assert list(ys) == sorted(ys)
        assert (xs[:, 0] == 2 * ys).all()

    def test_at_least_one_row(self):
        _, ys = labeled_subset(np.zeros((10, 1)), np.arange(10), 0.001)
        assert len(ys) == 1

    def test_invalid_fraction(self):
        with pytest.raises(InvalidArgumentError):
            labeled_subset(np.zeros((10, 1)), np.arange(10), 0.0)


class TestHistoryFile:

    def test_write_then_read(self, tmp_path, make_config, fast_train_config, regression_arrays):
        x, y = regression_arrays
        history = train(NodeGamModel(make_config()), x, y, config=fast_train_config).history
        path = write_history(tmp_path / "history.jsonl", history)
        assert read_history(path) == history
        assert len(path.read_text().splitlines()) == len(history)

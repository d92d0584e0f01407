import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from app.core.errors import InvalidArgumentError
from app.models.checkpoint import serialize
from app.models.graph_s4 import S4Kernel, init_model
from app.models.losses import loss_mse_pearson, masked_loss, masked_mse, pearson
from app.schemas.data import HEALTHY, PATIENT, Sample, Split
from app.schemas.model import ModelConfig
from app.schemas.task import TaskSpec
from app.schemas.training import LossConfig, TrainConfig
from app.services.data_service import select
from app.services.training_service import (
    DecoupledAdamW,
    EarlyStopping,
    MetricsLog,
    adamw_step,
    backward,
    binary_metrics,
    finetune_cls,
    inner_split,
    make_optimizer,
    predict_labels,
    pretrain_ssl,
)

F64 = torch.float64
BOTH = LossConfig(lambda1=1.0, lambda2=1.0)


def synth_model_config(**overrides) -> ModelConfig:
    fields = dict(num_layers=1, state_dim=8, channels=2, diffusion_steps=1, dropout=0.1, num_nodes=8, emb_dim=3)
    fields.update(overrides)
    return ModelConfig(**fields)


class TestLoss:
    def test_perfect_prediction(self, generator):
        y = torch.randn(4, 20, generator=generator, dtype=F64)
        assert float(loss_mse_pearson(y, y.clone(), BOTH)) == pytest.approx(-1.0, abs=1e-12)

    def test_anti_correlated_pair(self):
        y = torch.tensor([[1.0, -1.0]], dtype=F64)
        y_hat = torch.tensor([[-1.0, 1.0]], dtype=F64)
        assert float(loss_mse_pearson(y, y_hat, BOTH)) == pytest.approx(5.0, abs=1e-9)

    def test_constant_target(self, generator):
        y = torch.full((2, 10), 3.0, dtype=F64)
        y_hat = torch.randn(2, 10, generator=generator, dtype=F64)
        mse = float(((y - y_hat) ** 2).mean())
        assert float(loss_mse_pearson(y, y_hat, BOTH)) == pytest.approx(mse, abs=1e-9)

    def test_pearson_ignores_positive_affine_maps(self, generator):
        y = torch.randn(3, 30, generator=generator, dtype=F64)
        y_hat = torch.randn(3, 30, generator=generator, dtype=F64)
        assert torch.allclose(pearson(y, 2.5 * y_hat - 4.0), pearson(y, y_hat), atol=1e-12)

    def test_mse_term_sees_scale(self, generator):
        y = torch.randn(3, 30, generator=generator, dtype=F64)
        y_hat = torch.randn(3, 30, generator=generator, dtype=F64)
        cfg = LossConfig(lambda1=1.0, lambda2=0.5)
        delta = loss_mse_pearson(y, 2.0 * y_hat, cfg) - loss_mse_pearson(y, y_hat, cfg)
        mse_delta = ((y - 2.0 * y_hat) ** 2).mean() - ((y - y_hat) ** 2).mean()
        assert float(delta) == pytest.approx(float(mse_delta), abs=1e-12)

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            loss_mse_pearson(torch.zeros(2, 3), torch.zeros(2, 4), BOTH)
        with pytest.raises(InvalidArgumentError):
            loss_mse_pearson(torch.zeros(2, 1), torch.zeros(2, 1), BOTH)

    def test_weights_cannot_both_be_zero(self):
        with pytest.raises(ValueError):
            LossConfig(lambda1=0.0, lambda2=0.0)

    def test_masked_loss_matches_sliced_loss(self, generator):
        y = torch.randn(2, 3, 12, generator=generator, dtype=F64)
        y_hat = torch.randn(2, 3, 12, generator=generator, dtype=F64)
        mask = torch.zeros(2, 3, 12, dtype=torch.bool)
        mask[..., 8:] = True
        loss, mse, _ = masked_loss(y, y_hat, mask, BOTH)
        assert float(loss) == pytest.approx(float(loss_mse_pearson(y[..., 8:], y_hat[..., 8:], BOTH)), abs=1e-12)
        assert float(mse) == pytest.approx(float(masked_mse(y, y_hat, mask)), abs=1e-15)

    def test_masked_loss_skips_single_step_rows(self, generator):
        y = torch.randn(1, 2, 6, generator=generator, dtype=F64)
        mask = torch.zeros(1, 2, 6, dtype=torch.bool)
        mask[0, 0, :] = True
        mask[0, 1, 0] = True
        _, _, corr = masked_loss(y, y.clone(), mask, BOTH)
        assert float(corr) == pytest.approx(1.0, abs=1e-12)

    def test_empty_mask(self):
        with pytest.raises(InvalidArgumentError):
            masked_mse(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(2, 3, dtype=torch.bool))


class TestBackward:
    def test_requires_scalar(self):
        w = torch.ones(3, requires_grad=True)
        with pytest.raises(InvalidArgumentError):
            backward(w * 2, [w])

    def test_unused_parameter_gets_zeros(self):
        used = torch.ones(3, requires_grad=True)
        frozen = torch.ones(2, 2, requires_grad=True)
        grads = backward((used ** 2).sum(), [used, frozen])
        assert torch.equal(grads[0], torch.full((3,), 2.0))
        assert torch.equal(grads[1], torch.zeros(2, 2))

    def test_loss_is_flat_at_perfect_prediction(self, generator):
        y = torch.randn(3, 16, generator=generator, dtype=F64)
        y_hat = y.clone().requires_grad_(True)
        (grad,) = backward(loss_mse_pearson(y, y_hat, LossConfig()), [y_hat])
        assert grad.abs().max() < 1e-12


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        theta = torch.tensor([0.0], dtype=F64)
        adamw_step([theta], [torch.tensor([1.0], dtype=F64)], {}, lr=0.1)
        assert float(theta) == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)

    def test_decay_only(self):
        theta = torch.tensor([1.0], dtype=F64)
        adamw_step([theta], [torch.tensor([0.0], dtype=F64)], {}, lr=0.1, weight_decay=0.01)
        assert float(theta) == pytest.approx(0.999, abs=1e-15)

    def test_no_gradient_no_decay(self):
        theta = torch.tensor([1.5, -2.0], dtype=F64)
        adamw_step([theta], [torch.zeros(2, dtype=F64)], {}, lr=0.1)
        assert torch.equal(theta, torch.tensor([1.5, -2.0], dtype=F64))

    def test_matches_torch_adamw(self, generator):
        start = torch.randn(4, 3, generator=generator, dtype=F64)
        ours = torch.nn.Parameter(start.clone())
        theirs = torch.nn.Parameter(start.clone())
        opt_ours = DecoupledAdamW([ours], lr=0.01, weight_decay=0.01)
        opt_theirs = torch.optim.AdamW([theirs], lr=0.01, weight_decay=0.01, foreach=False)
        for _ in range(10):
            grad = torch.randn(4, 3, generator=generator, dtype=F64)
            ours.grad, theirs.grad = grad.clone(), grad.clone()
            opt_ours.step()
            opt_theirs.step()
        assert torch.allclose(ours, theirs, atol=1e-14)

    def test_vanishing_learning_rate(self, generator):
        start = 1.0 + torch.rand(5, generator=generator, dtype=F64)
        param = torch.nn.Parameter(start.clone())
        optimizer = DecoupledAdamW([param], lr=1e-30, weight_decay=0.0)
        param.grad = torch.randn(5, generator=generator, dtype=F64)
        optimizer.step()
        assert torch.equal(param.detach(), start)

    def test_ssm_dynamics_are_not_decayed(self):
        model = init_model(synth_model_config(num_layers=2), seed=0)
        optimizer, _ = make_optimizer(model, 0.1, TrainConfig(weight_decay=0.5))
        kernels = [layer.ssm for layer in model.layers]
        exempt = [(k, name, getattr(k, name).detach().clone()) for k in kernels for name in S4Kernel.NO_DECAY]
        readouts = [k.c.detach().clone() for k in kernels]
        embedding = model.emb.e_a.detach().clone()
        for param in model.parameters():
            param.grad = torch.zeros_like(param)
        optimizer.step()
        for kernel, name, before in exempt:
            assert torch.equal(getattr(kernel, name).detach(), before), name
        for kernel, before in zip(kernels, readouts):
            assert torch.allclose(kernel.c.detach(), before * 0.95)
        assert torch.allclose(model.emb.e_a.detach(), embedding * 0.95)

    def test_parameter_groups_cover_trainable_once(self):
        model = init_model(synth_model_config(), seed=0)
        optimizer, _ = make_optimizer(model, 0.01, TrainConfig())
        grouped = [p for group in optimizer.param_groups for p in group["params"]]
        assert len(grouped) == len({id(p) for p in grouped}) == len(list(model.parameters()))
        assert [group["weight_decay"] for group in optimizer.param_groups] == [TrainConfig().weight_decay, 0.0]

    def test_rejects_non_positive_lr(self):
        with pytest.raises(InvalidArgumentError):
            DecoupledAdamW([torch.nn.Parameter(torch.zeros(1))], lr=0.0)


class TestEarlyStopping:
    def test_fires_after_patience_epochs_without_improvement(self):
        stopper = EarlyStopping(patience=5)
        values = [1.0, 0.9, 0.95, 0.92, 0.91, 0.99, 0.9]
        for epoch, value in enumerate(values):
            stopper.update(value, epoch)
            assert stopper.should_stop == (epoch == len(values) - 1)
        assert stopper.best == 0.9
        assert stopper.best_epoch == 1

    def test_improvement_resets(self):
        stopper = EarlyStopping(patience=2, mode="max")
        for epoch, value in enumerate([0.5, 0.4, 0.6, 0.6]):
            stopper.update(value, epoch)
        assert not stopper.should_stop
        assert stopper.best_epoch == 2

    def test_bad_mode(self):
        with pytest.raises(InvalidArgumentError):
            EarlyStopping(3, mode="median")


def test_metrics_log(tmp_path):
    log = MetricsLog(tmp_path / "metrics" / "A.tsv")
    log.record(1, "population", 0.5, 0.25, 0.75, 0.01)
    log.record(2, "inner_val", 0.4, 0.2, 0.8, 0.0095)
    lines = (tmp_path / "metrics" / "A.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["epoch", "split", "loss", "mse", "pearson", "lr"]
    assert lines[1].split("\t") == ["1", "population", "0.5", "0.25", "0.75", "0.01"]
    assert log.values("inner_val") == [0.4]


def test_binary_metrics():
    metrics = binary_metrics([0, 0, 1, 1], [0, 1, 1, 1])
    assert metrics == {"balanced_accuracy": 0.75, "sensitivity": 1.0, "specificity": 0.5}
    assert binary_metrics([0, 0, 1, 1], [1, 1, 1, 1])["balanced_accuracy"] == 0.5


def test_inner_split(tiny_dataset):
    train, val = inner_split(tiny_dataset, 0.1, seed=4)
    again_train, again_val = inner_split(tiny_dataset, 0.1, seed=4)
    assert [s.id for s in val] == [s.id for s in again_val]
    assert len(val) == round(0.1 * len(tiny_dataset))
    assert {s.id for s in train} | {s.id for s in val} == {s.id for s in tiny_dataset}
    assert not {s.id for s in train} & {s.id for s in val}


class TestPretrain:
    spec = TaskSpec(kind="network_mask", target_network="A")

    def run(self, dataset, partition, cfg):
        return pretrain_ssl(
            select(dataset, Split.POPULATION),
            select(dataset, Split.CLINICAL_SS_TRAIN),
            self.spec,
            cfg,
            model_cfg=synth_model_config(),
            partition=partition,
        )

    def test_deterministic(self, tiny_dataset, tiny_partition, tiny_train_config):
        first = self.run(tiny_dataset, tiny_partition, tiny_train_config)
        second = self.run(tiny_dataset, tiny_partition, tiny_train_config)
        assert serialize(first) == serialize(second)
        assert not first.training

    def test_records_each_stage(self, tiny_dataset, tiny_partition, tiny_train_config):
        metrics = MetricsLog()
        pretrain_ssl(
            select(tiny_dataset, Split.POPULATION),
            select(tiny_dataset, Split.CLINICAL_SS_TRAIN),
            self.spec,
            tiny_train_config,
            model_cfg=synth_model_config(),
            partition=tiny_partition,
            metrics=metrics,
        )
        assert len(metrics.values("population")) == tiny_train_config.epochs_population
        assert 1 <= len(metrics.values("clinical")) <= tiny_train_config.epochs_clinical_max
        assert len(metrics.values("inner_val")) == len(metrics.values("clinical")) + 1
        lrs = metrics.values("clinical", "lr")
        assert all(later < earlier for earlier, later in zip(lrs, lrs[1:]))

    def test_rejects_patients(self, tiny_dataset, tiny_partition, tiny_train_config):
        clinical = select(tiny_dataset, Split.CLINICAL_SS_VAL)
        with pytest.raises(InvalidArgumentError, match="healthy"):
            pretrain_ssl(
                select(tiny_dataset, Split.POPULATION), clinical, self.spec, tiny_train_config,
                model_cfg=synth_model_config(), partition=tiny_partition,
            )

    def test_rejects_empty_population(self, tiny_dataset, tiny_partition, tiny_train_config):
        with pytest.raises(InvalidArgumentError):
            pretrain_ssl([], select(tiny_dataset, Split.CLINICAL_SS_TRAIN), self.spec, tiny_train_config,
                         model_cfg=synth_model_config(), partition=tiny_partition)


def separable_set(rng, count: int, prefix: str):
    samples = []
    for i in range(count):
        label = PATIENT if i % 2 else HEALTHY
        x = (1.0 if label == PATIENT else -1.0) + 0.1 * rng.standard_normal((4, 16))
        samples.append(Sample(f"{prefix}-{i}", x, label, "site0", Split.CLINICAL_CV))
    return samples


class TestFinetune:
    def test_frozen_parameters_are_unchanged(self, tiny_dataset, tiny_train_config):
        model = init_model(synth_model_config(), seed=0)
        before = {name: p.detach().clone() for name, p in model.named_parameters()}
        tuned = finetune_cls(model, select(tiny_dataset, Split.CLINICAL_CV), tiny_train_config)
        changed = False
        for name, param in tuned.named_parameters():
            if name.startswith("cls_head."):
                continue
            if name.startswith("layers.0."):
                changed = changed or not torch.equal(param, before[name])
            else:
                assert torch.equal(param, before[name]), name
        assert changed
        for name, param in model.named_parameters():
            assert torch.equal(param, before[name])

    def test_full_finetune_trains_embedding(self, tiny_dataset, tiny_train_config):
        model = init_model(synth_model_config(num_layers=2), seed=0)
        tuned = finetune_cls(model, select(tiny_dataset, Split.CLINICAL_CV), tiny_train_config, full_finetune=True)
        assert not torch.equal(tuned.emb.e_a, model.emb.e_a)

    def test_single_class(self, tiny_dataset, tiny_train_config):
        healthy = select(tiny_dataset, Split.CLINICAL_CV, label=HEALTHY)
        with pytest.raises(InvalidArgumentError, match="both classes"):
            finetune_cls(init_model(synth_model_config(), 0), healthy, tiny_train_config)

    def test_uniform_logits_cost_ln2(self, tiny_dataset):
        model = init_model(synth_model_config(dropout=0.0), seed=0).eval()
        head = model.attach_classifier()
        with torch.no_grad():
            head.weight.zero_()
            samples = select(tiny_dataset, Split.CLINICAL_CV)
            x = torch.stack([torch.as_tensor(s.x, dtype=torch.float32) for s in samples])
            y = torch.tensor([s.label for s in samples])
            loss = F.cross_entropy(model.classify(x), y)
        assert float(loss) == pytest.approx(math.log(2), abs=1e-6)

    def test_learns_separable_data(self, rng):
        train, held_out = separable_set(rng, 40, "train"), separable_set(rng, 20, "test")
        cfg = TrainConfig(
            batch_size=16,
            finetune_lr=0.05,
            finetune_epochs=40,
            early_stop_patience=40,
            inner_val_fraction=0.25,
            seed=1,
        )
        model_cfg = ModelConfig(num_layers=2, state_dim=8, channels=3, diffusion_steps=1, dropout=0.0, num_nodes=4, emb_dim=2)
        tuned = finetune_cls(init_model(model_cfg, seed=0), train, cfg)
        labels = np.array([s.label for s in held_out])
        assert binary_metrics(labels, predict_labels(tuned, held_out))["balanced_accuracy"] > 0.9

# Copyright The SVBI Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License"). You
# may not use this file except in compliance with the License. A copy of
# the License is located at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# or in the "license" file accompanying this file. This file is
# distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF
# ANY KIND, either express or implied. See the License for the specific
# language governing permissions and limitations under the License.
import math
import os
from unittest import mock

import numpy as np
import pytest

from svbi import _utils, backbones, codec, data, metrics, optim, range_coder, training
from svbi.api_types import EntropyConfig, FinetuneConfig, Objective, RDPoint, TrainConfig
from svbi.saliency import SaliencyStore
from tests import helpers


def _point(beta, bpp, loss, seed=0, objective="hd"):
    return RDPoint(beta=beta, bpp=bpp, predictive_loss=loss, objective=objective, seed=seed)


@pytest.fixture
def fresh_pipeline(tiny_teacher, tiny_dataset):
    return helpers.tiny_pipeline(tiny_teacher, tiny_dataset, with_tables=False)


@pytest.fixture
def images(tiny_dataset):
    return tiny_dataset.train.images[:2]


def test_hd_loss_adds_scaled_rate(fresh_pipeline, images):
    terms = training.hd_loss(images, fresh_pipeline, 0.5, np.random.default_rng(3))
    assert 2 * 16 * 16 == terms.num_pixels
    expected = terms.distortion.item() + 0.5 * terms.rate_bits.item() / terms.num_pixels
    assert expected == pytest.approx(terms.loss.item(), rel=1e-5)
    assert terms.rate_bits.item() / terms.num_pixels == pytest.approx(terms.rate_bpp)
    assert terms.rate_bits.item() > 0


def test_hd_loss_without_rate_weight(fresh_pipeline, images):
    terms = training.hd_loss(images, fresh_pipeline, 0.0, np.random.default_rng(3))
    assert terms.distortion.item() == pytest.approx(terms.loss.item())


def test_sg_hd_with_uniform_weights_equals_hd(fresh_pipeline, images):
    hd = training.hd_loss(images, fresh_pipeline, 0.1, np.random.default_rng(7))
    weights = np.ones((2, 1, 4, 4), dtype=np.float32)
    sg = training.sg_hd_loss(images, fresh_pipeline, 0.1, np.random.default_rng(7), weights)
    assert hd.loss.item() == pytest.approx(sg.loss.item(), rel=1e-6)


def test_sg_hd_weights_scale_distortion(fresh_pipeline, images):
    hd = training.hd_loss(images, fresh_pipeline, 0.0, np.random.default_rng(7))
    weights = np.full((2, 1, 4, 4), 2.0, dtype=np.float32)
    sg = training.sg_hd_loss(images, fresh_pipeline, 0.0, np.random.default_rng(7), weights)
    assert 2 * hd.distortion.item() == pytest.approx(sg.distortion.item(), rel=1e-5)


def test_loss_trains_only_compression_parameters(fresh_pipeline, images):
    fresh_pipeline.head.freeze()
    terms = training.hd_loss(images, fresh_pipeline, 0.1, np.random.default_rng(0))
    terms.loss.backward()
    assert all(p.grad is not None for _, p in fresh_pipeline.compression_parameters())
    assert all(p.grad is None for p in fresh_pipeline.head.parameters())


def test_direct_objectives(fresh_pipeline, tiny_dataset):
    batch = next(tiny_dataset.train.batches(4))
    ce = training.direct_loss(batch.images, fresh_pipeline, 0.0, np.random.default_rng(0), "direct-ce", batch.labels)
    kd = training.direct_loss(batch.images, fresh_pipeline, 0.0, np.random.default_rng(0), Objective.DIRECT_KD)
    assert ce.distortion.item() > 0
    assert kd.distortion.item() >= 0
    assert math.isfinite(kd.loss.item())


def test_direct_loss_errors(fresh_pipeline, images):
    with pytest.raises(ValueError):
        training.direct_loss(images, fresh_pipeline, 0.0, np.random.default_rng(0), "direct-ce")
    with pytest.raises(ValueError):
        training.direct_loss(images, fresh_pipeline, 0.0, np.random.default_rng(0), "hd")


def test_compute_loss_dispatch(fresh_pipeline, tiny_dataset):
    batch = next(tiny_dataset.train.batches(4))
    config = TrainConfig(beta=0.2)
    store = SaliencyStore.uniform(batch.sample_ids.tolist(), (4, 4))
    hd = training.compute_loss("hd", batch, fresh_pipeline, config, np.random.default_rng(1))
    sg = training.compute_loss("sg-hd", batch, fresh_pipeline, config, np.random.default_rng(1), store)
    assert hd.loss.item() == pytest.approx(sg.loss.item(), rel=1e-6)
    with pytest.raises(ValueError):
        training.compute_loss("sg-hd", batch, fresh_pipeline, config, np.random.default_rng(1))


def test_train_bottleneck(fresh_pipeline, tiny_dataset, tiny_teacher, tempdir):
    head_before = {n: p.data.copy() for n, p in tiny_teacher.head.named_parameters()}
    config = TrainConfig(objective="hd", beta=0.1, epochs=3, batch_size=8)
    log_path = os.path.join(tempdir, "train.jsonl")
    with metrics.TrainingLogWriter(log_path) as writer:
        result = training.train_bottleneck(fresh_pipeline, tiny_dataset.train, config, log_writer=writer)

    assert [1, 2, 3] == [h["epoch"] for h in result.history]
    assert [2, 4, 6] == [h["step"] for h in result.history]
    assert result.best_loss == min(h["loss"] for h in result.history)
    assert result.best_epoch == [h["loss"] for h in result.history].index(result.best_loss) + 1
    assert 3 == len(metrics.read_log(log_path))
    for name, p in tiny_teacher.head.named_parameters():
        np.testing.assert_array_equal(head_before[name], p.data)
    assert not fresh_pipeline.encoder.training


def test_train_bottleneck_is_reproducible(tiny_dataset):
    histories = []
    for _ in range(2):
        teacher = backbones.build_teacher(helpers.tiny_spec(), seed=0).eval()
        pipeline = helpers.tiny_pipeline(teacher, tiny_dataset, with_tables=False)
        config = TrainConfig(beta=0.05, epochs=1, batch_size=8, seed=4)
        histories.append(training.train_bottleneck(pipeline, tiny_dataset.train, config).history)
    assert histories[0] == histories[1]


def test_train_bottleneck_prefetches_batches(fresh_pipeline, tiny_dataset):
    with mock.patch.object(data, "prefetch", wraps=data.prefetch) as prefetch:
        training.train_bottleneck(fresh_pipeline, tiny_dataset.train, TrainConfig(epochs=2, batch_size=8))
    assert 2 == prefetch.call_count


def test_train_bottleneck_saliency_guided(fresh_pipeline, tiny_dataset):
    store = SaliencyStore.uniform(tiny_dataset.train.sample_ids.tolist(), (4, 4))
    config = TrainConfig(objective="sg-hd", epochs=1, batch_size=8)
    result = training.train_bottleneck(fresh_pipeline, tiny_dataset.train, config, saliency_store=store)
    assert 1 == result.best_epoch


def test_train_bottleneck_diverged(fresh_pipeline, tiny_dataset):
    config = TrainConfig(beta=float("nan"), epochs=1, batch_size=8, lr_start=1e-3)
    with pytest.raises(training.TrainingDivergedError) as error:
        training.train_bottleneck(fresh_pipeline, tiny_dataset.train, config)
    assert 0 == error.value.batch_id
    assert 1e-3 == pytest.approx(error.value.lr)


def test_train_bottleneck_empty_dataset(fresh_pipeline, tiny_dataset):
    with pytest.raises(ValueError):
        training.train_bottleneck(fresh_pipeline, tiny_dataset.train.take(0), TrainConfig(epochs=1))


def test_fit_tables_covers_training_latents(fresh_pipeline, tiny_dataset):
    tables = training.fit_tables(fresh_pipeline, tiny_dataset.train, EntropyConfig())
    assert tables is fresh_pipeline.tables
    assert 4 == tables.num_channels
    raw = codec.round_half_away(fresh_pipeline.analyze(tiny_dataset.train.images).data).astype(np.int64)
    assert tables.contains(raw)
    tables.validate()


def test_evaluate_pipeline(tiny_pipeline, tiny_teacher, tiny_dataset):
    result = training.evaluate_pipeline(tiny_pipeline, tiny_teacher, tiny_dataset.val, batch_size=3)
    assert tiny_dataset.val.sample_ids.tolist() == [sample_id for sample_id, _ in result.payloads]
    assert 100.0 * (result.teacher_top1 - result.pipeline_top1) == pytest.approx(result.predictive_loss)
    assert np.mean([range_coder.bpp(p) for _, p in result.payloads]) == pytest.approx(result.bpp)

    first_id, payload = result.payloads[0]
    decoded = range_coder.decode(payload, tiny_pipeline.tables)
    np.testing.assert_array_equal(tiny_pipeline.latent_symbols(tiny_dataset.val.images[:1])[0], decoded.symbols)

    point = result.rd_point(0.5, "hd", 2)
    assert [0.5, result.bpp, result.predictive_loss, "hd", 2] == point.as_row()


def test_evaluate_pipeline_needs_tables(fresh_pipeline, tiny_teacher, tiny_dataset):
    with pytest.raises(codec.UnboundComponentError):
        training.evaluate_pipeline(fresh_pipeline, tiny_teacher, tiny_dataset.val)


def test_point_directory():
    expected = os.path.join("out", "sg-hd", _utils.format_beta(0.5), "seed-1")
    assert expected == training.point_directory("out", "sg-hd", 0.5, 1)


def test_lossless_configuration():
    points = [_point(0.0, 3.0, 0.1), _point(0.1, 1.0, 0.3), _point(0.2, 0.5, 1.2), _point(0.3, 1.0, 0.2)]
    assert 0.3 == training.lossless_configuration(points).beta
    assert 0.2 == training.lossless_configuration(points, grace=2.0).beta
    assert training.lossless_configuration(points, grace=0.05) is None
    assert training.lossless_configuration([]) is None


def test_count_bpp_inversions():
    points = [_point(0.4, 0.6, 1.0), _point(0.0, 2.0, 0.0), _point(0.1, 1.5, 0.1), _point(0.2, 1.7, 0.2)]
    assert 1 == training.count_bpp_inversions(points)
    assert 0 == training.count_bpp_inversions(points[:1])


def test_grace_report():
    rows = training.grace_report([_point(0.1, 1.0, 0.3), _point(0.2, 0.5, 0.9)], grace=0.4)
    assert [True, False] == [row["lossless"] for row in rows]
    assert -0.1 == pytest.approx(rows[0]["relative_loss"])
    assert 0.4 == rows[1]["grace"]


def test_saliency_direction():
    hd = [_point(0.1, 1.0, 0.3), _point(0.2, 0.8, 0.5), _point(0.4, 0.5, 1.0)]
    sg = [_point(0.1, 0.9, 0.2, objective="sg-hd"), _point(0.2, 0.9, 0.4, objective="sg-hd")]
    sg.append(_point(0.1, 0.1, 0.0, seed=3, objective="sg-hd"))
    report = training.saliency_direction(hd, sg)
    assert 2 == len(report["pairs"])
    assert 1 == report["sg_lower"]
    assert 0.0 == pytest.approx(report["mean_bpp_delta"])
    with pytest.raises(ValueError):
        training.saliency_direction(hd, [_point(0.8, 0.1, 0.0)])


def test_train_point_writes_artifacts(tiny_teacher, tiny_dataset, tempdir):
    experiment = helpers.tiny_experiment(output_dir=tempdir)
    point, pipeline = training.train_point(experiment, tiny_teacher, tiny_dataset, "hd", 0.5, 1, output_dir=tempdir)

    directory = training.point_directory(tempdir, "hd", 0.5, 1)
    for filename in (codec.ENCODER_FILE, codec.DECODER_FILE, codec.PRIOR_FILE, codec.TABLES_FILE):
        assert os.path.exists(os.path.join(directory, filename))
    assert 1 == len(metrics.read_log(os.path.join(directory, training.TRAIN_LOG_FILE)))
    records = range_coder.read_payloads(os.path.join(directory, training.PAYLOADS_FILE))
    assert len(tiny_dataset.val) == len(records)
    assert ("hd", 0.5, 1) == (point.objective, point.beta, point.seed)
    assert pipeline.tables is not None


def test_beta_sweep(tiny_teacher, tiny_dataset):
    experiment = helpers.tiny_experiment()
    points = training.beta_sweep([0.0, 1.0], "hd", experiment, tiny_teacher, tiny_dataset)
    assert [0.0, 1.0] == [p.beta for p in points]
    with pytest.raises(ValueError):
        training.beta_sweep([], "hd", experiment, tiny_teacher, tiny_dataset)


def test_lossless_identity():
    points = [_point(0.5, 1.0, 0.3, seed=0), _point(0.5, 1.2, 0.1, seed=2)]
    report = training.lossless_identity(points, grace=0.4)
    assert {"beta": 0.5, "objective": "hd", "seeds": [0, 2], "worst_predictive_loss": 0.3, "lossless": True} == report
    assert not training.lossless_identity(points, grace=0.2)["lossless"]


def test_lossless_identity_errors():
    with pytest.raises(ValueError):
        training.lossless_identity([])
    with pytest.raises(ValueError):
        training.lossless_identity([_point(0.5, 1.0, 0.3), _point(1.0, 0.8, 0.3)])


def test_lossless_check(tiny_teacher, tiny_dataset):
    experiment = helpers.tiny_experiment()
    report = training.lossless_check(experiment, tiny_teacher, tiny_dataset, "hd", 0.0, [0, 1])
    assert [0, 1] == [p.seed for p in report["points"]]
    assert max(p.predictive_loss for p in report["points"]) == report["worst_predictive_loss"]
    assert (report["worst_predictive_loss"] <= 0.4) == report["lossless"]


def test_finetune_tail_keeps_compression_fixed(tiny_pipeline, tiny_teacher, tiny_dataset):
    variant = backbones.build_teacher(helpers.tiny_spec(stage_depths=(1, 1, 2)), seed=1)
    digest = tiny_pipeline.compression_digest()
    result = training.finetune_tail(
        tiny_pipeline, variant.tail, tiny_dataset, FinetuneConfig(epochs=2, batch_size=8), reference=tiny_teacher
    )
    assert digest == result.digest_before == result.digest_after
    assert variant.tail is tiny_pipeline.tail
    assert [1, 2] == [h["epoch"] for h in result.history]
    assert 0.0 <= result.top1 <= 1.0
    assert all(p.frozen for _, p in tiny_pipeline.compression_parameters())


def test_finetune_tail_with_labels(tiny_pipeline, tiny_dataset):
    coarse = tiny_dataset.relabel(lambda label: label // 2)
    tail = backbones.build_teacher(helpers.tiny_spec(num_classes=2), seed=2).tail
    result = training.finetune_tail(tiny_pipeline, tail, coarse, FinetuneConfig(epochs=1, batch_size=8))
    assert 1 == len(result.history)
    with pytest.raises(optim.FrozenParameterError):
        optim.Adam(tiny_pipeline.compression_parameters())


def test_feature_baseline(tiny_teacher, tiny_dataset):
    tail = backbones.build_teacher(helpers.tiny_spec(), seed=5).tail
    top1 = training.feature_baseline(tiny_teacher, tail, tiny_dataset, FinetuneConfig(epochs=1, batch_size=8))
    assert 0.0 <= top1 <= 1.0

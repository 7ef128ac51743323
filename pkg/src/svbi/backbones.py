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
"""The residual teacher classifier and its head/tail split."""
import collections
import logging

import numpy as np

from svbi import _utils, checkpoint, data, functional as F, nn, optim
from svbi.api_types import BackboneSpec, PretrainConfig
from svbi.tensor import ShapeMismatchError, Tensor, as_tensor, no_grad

logger = logging.getLogger(__name__)


class Stage(nn.Module):
    """Residual blocks at one resolution; the first block halves it."""

    def __init__(self, in_channels, out_channels, depth, rng):
        super().__init__()
        self.blocks = nn.ModuleList()
        for index in range(depth):
            first = index == 0
            self.blocks.append(
                nn.ResidualBlock(in_channels if first else out_channels, out_channels, rng, stride=2 if first else 1)
            )

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class Head(nn.Module):
    """Stem convolution followed by the stages before the split."""

    def __init__(self, spec, stages, input_channels, rng):
        super().__init__()
        self.stem = nn.Conv2d(input_channels, int(spec.stage_channels[0]), 3, rng)
        self.stages = nn.ModuleList(stages)
        self.stage_offset = 0

    def forward(self, x, activations=None):
        x = self.stem(as_tensor(x)).relu()
        for index, stage in enumerate(self.stages):
            x = stage(x)
            _record(activations, "stage{}".format(self.stage_offset + index), x)
        return x


class Tail(nn.Module):
    """Stages after the split, global average pooling and the linear classifier."""

    def __init__(self, stages, stage_offset, in_features, num_classes, rng):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.stage_offset = stage_offset
        self.classifier = nn.Linear(in_features, num_classes, rng)

    def forward(self, h, activations=None):
        x = as_tensor(h)
        for index, stage in enumerate(self.stages):
            x = stage(x)
            _record(activations, "stage{}".format(self.stage_offset + index), x)
        return self.classifier(F.global_avg_pool(x))


def _record(activations, name, x):
    if activations is not None and name in activations:
        activations[name] = x.retain_grad()


class SplitModel(nn.Module):
    """A classifier ``full_forward(x) == tail(head(x))`` split at ``spec.head_split_stage``.

    Parameter names are prefixed ``head.`` and ``tail.`` so either side can be checkpointed alone.
    """

    def __init__(self, spec, rng):
        super().__init__()
        self.spec = spec
        channels = [int(c) for c in spec.stage_channels]
        stages = []
        in_channels = channels[0]
        for depth, out_channels in zip(spec.stage_depths, channels):
            stages.append(Stage(in_channels, out_channels, int(depth), rng))
            in_channels = out_channels
        split = int(spec.head_split_stage)
        self.head = Head(spec, stages[:split], int(spec.input_channels), rng)
        self.tail = Tail(stages[split:], split, channels[-1], int(spec.num_classes), rng)

    def forward(self, x):
        return self.full_forward(x)

    def full_forward(self, x):
        return self.tail(self.head(x))

    def head_forward(self, x):
        """Run the head and check the documented output shape.

        Raises:
            ShapeMismatchError: If ``x`` is not (N, input_channels, H, W) with H, W divisible by the head stride.
        """
        x = as_tensor(x)
        check_input(self.spec, x)
        return self.head(x)

    def activation_names(self):
        """Named activations usable for saliency: the output of each stage's last block."""
        return ["stage{}".format(i) for i in range(len(self.spec.stage_depths))]

    def forward_with_activations(self, x, names):
        """Full forward pass that also returns the requested activations (kept for gradients).

        Raises:
            KeyError: If a name is not one of :meth:`activation_names`.
        """
        unknown = [n for n in names if n not in self.activation_names()]
        if unknown:
            raise KeyError("Unknown layer(s) {}; available: {}".format(unknown, self.activation_names()))
        activations = collections.OrderedDict((n, None) for n in names)
        logits = self.tail(self.head(x, activations), activations)
        return logits, activations

    def parameter_report(self):
        """Parameter counts of the stem, each stage and the classifier."""
        report = collections.OrderedDict()
        report["stem"] = self.head.stem.num_parameters()
        stages = list(self.head.stages) + list(self.tail.stages)
        for index, stage in enumerate(stages):
            report["stage{}".format(index)] = stage.num_parameters()
        report["classifier"] = self.tail.classifier.num_parameters()
        report["total"] = self.num_parameters()
        return report


def check_input(spec, x):
    offending = []
    if x.ndim != 4:
        offending.append("rank {} != 4".format(x.ndim))
    else:
        if x.shape[1] != int(spec.input_channels):
            offending.append("axis 1 = {} != {} input channels".format(x.shape[1], spec.input_channels))
        for axis in (2, 3):
            if x.shape[axis] % spec.head_stride:
                offending.append(
                    "axis {} = {} not divisible by head stride {}".format(axis, x.shape[axis], spec.head_stride)
                )
    if offending:
        raise ShapeMismatchError("Input shape {} rejected: {}".format(x.shape, "; ".join(offending)), axes=offending)


def build_teacher(spec, seed):
    """Build a freshly initialised teacher.

    Args:
        spec (BackboneSpec): Layout of the teacher.
        seed (int): Initialisation seed.

    Returns:
        SplitModel: The teacher.

    Raises:
        InvalidConfigError: If ``spec`` is invalid.
    """
    spec = BackboneSpec.from_dict(spec) if isinstance(spec, dict) else spec
    spec.validate()
    model = SplitModel(spec, _utils.seeded_rng(seed, "teacher-init"))
    report = model.parameter_report()
    logger.info("Built teacher %s with %d parameters (%s)", list(spec.stage_depths), report["total"], dict(report))
    return model


def expected_parameter_count(spec):
    """Closed-form parameter count of :func:`build_teacher` for ``spec``."""
    channels = [int(c) for c in spec.stage_channels]
    count = int(spec.input_channels) * channels[0] * 9 + channels[0]
    in_channels = channels[0]
    for depth, out_channels in zip(spec.stage_depths, channels):
        count += nn.residual_block_parameter_count(in_channels, out_channels, stride=2)
        count += (int(depth) - 1) * nn.residual_block_parameter_count(out_channels, out_channels)
        in_channels = out_channels
    count += channels[-1] * int(spec.num_classes) + int(spec.num_classes)
    return count


def argmax_logits(logits):
    """Row-wise argmax; ties resolve to the lowest class index."""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if values.ndim == 1:
        return int(np.argmax(values))
    return np.argmax(values, axis=-1)


def predict(model_or_pipeline, x):
    """Predicted class indices of a batch (or a single index for an unbatched image).

    Args:
        model_or_pipeline: Anything callable on an NCHW batch returning logits.
        x (array-like): NCHW batch or a single CHW image.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    with no_grad():
        logits = model_or_pipeline(Tensor(x))
    indices = argmax_logits(logits)
    return int(indices[0]) if single else indices


def evaluate_top1(model_or_pipeline, dataset, batch_size=256):
    """Top-1 accuracy on ``dataset`` and the predictions, in sample order."""
    predictions = []
    for batch in dataset.batches(batch_size):
        predictions.append(predict(model_or_pipeline, batch.images))
    if not predictions:
        raise ValueError("Cannot evaluate on an empty dataset")
    predictions = np.concatenate(predictions)
    return float(np.mean(predictions == dataset.labels)), predictions


class PretrainResult(object):
    """Outcome of :func:`pretrain_teacher`.

    Attributes:
        checkpoint_path (str): Best-by-validation checkpoint, if a path was given.
        top1 (float): Best validation top-1.
        history (list[dict]): Per-epoch records.
    """

    def __init__(self, checkpoint_path, top1, history, state):
        self.checkpoint_path = checkpoint_path
        self.top1 = top1
        self.history = history
        self.state = state


def pretrain_teacher(model, dataset, epochs=None, seed=0, config=None, checkpoint_path=None, log_writer=None):
    """Train the teacher with cross-entropy, keeping the best validation checkpoint.

    Args:
        model (SplitModel): The teacher, trained in place; the best weights are restored at the end.
        dataset (data.DeskDataset): Dataset with ``train`` and ``val`` splits.
        epochs (int): Overrides ``config.epochs``.
        seed (int): Shuffling and augmentation seed.
        config (PretrainConfig): Recipe; defaults to 30 epochs, batch 16, lr 1e-3 -> 1e-6, random flips.
        checkpoint_path (str): Where to write the best checkpoint.
        log_writer (metrics.TrainingLogWriter): Optional per-step log.

    Returns:
        PretrainResult

    Raises:
        ValueError: If either split is empty.
    """
    config = config or PretrainConfig()
    epochs = int(config.epochs if epochs is None else epochs)
    if len(dataset.train) == 0 or len(dataset.val) == 0:
        raise ValueError(
            "Cannot pretrain on an empty dataset (train={}, val={})".format(len(dataset.train), len(dataset.val))
        )
    rng = _utils.seeded_rng(seed, "pretrain")
    steps_per_epoch = dataset.train.num_batches(config.batch_size)
    total_steps = max(1, epochs * steps_per_epoch)
    optimizer = optim.Adam(model.named_parameters(), lr=config.lr_start)
    best_top1, best_state, history, step = -1.0, None, [], 0

    for epoch in range(1, epochs + 1):
        model.train()
        losses = []
        batches = dataset.train.batches(config.batch_size, rng=rng, shuffle=True, flip=config.flip)
        for batch in data.prefetch(batches):
            optimizer.lr = optim.exp_lr_schedule(step, total_steps, config.lr_start, config.lr_end)
            loss = F.softmax_cross_entropy(model(Tensor(batch.images)), batch.labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            losses.append(loss.item())
            if log_writer is not None:
                log_writer.log_record(epoch=epoch, step=step, loss=loss.item(), lr=optimizer.lr)
        model.eval()
        top1, _ = evaluate_top1(model, dataset.val)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_top1": top1})
        logger.info("Pretrain epoch %d/%d: loss=%.4f val_top1=%.4f", epoch, epochs, np.mean(losses), top1)
        if top1 > best_top1:
            best_top1, best_state = top1, model.state_dict()

    model.load_state_dict(best_state)
    model.eval()
    if checkpoint_path:
        checkpoint.save(best_state, checkpoint_path)
    return PretrainResult(checkpoint_path, best_top1, history, best_state)


def attach_tail(pipeline, tail):
    """Bind ``tail`` (for example of another depth variant) behind a pipeline's synthesis transform.

    Raises:
        ShapeMismatchError: If the tail's first stage does not take the head output channels.
    """
    expected = pipeline.decoder.transformation[-1].conv1.weight.shape[0]
    stages = list(tail.stages)
    actual = stages[0].blocks[0].conv0.weight.shape[1] if stages else tail.classifier.weight.shape[1]
    if expected != actual:
        raise ShapeMismatchError(
            "Tail takes {} channels but the decoder produces {}".format(actual, expected),
            axes=["axis 1 = {}".format(actual)],
        )
    pipeline.tail = tail
    return pipeline


def load_teacher(spec, path):
    """Build a teacher for ``spec`` and load the checkpoint at ``path``."""
    model = build_teacher(spec, seed=0)
    checkpoint.load_into(model, path)
    return model.eval()


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
import os

import numpy as np

from svbi import _utils, codec, data, training
from svbi.api_types import (
    BackboneSpec,
    DecoderConfig,
    EncoderConfig,
    EntropyConfig,
    ExperimentConfig,
    FinetuneConfig,
    PretrainConfig,
    SaliencyConfig,
    TrainConfig,
)
from svbi.data import DeskDataset, ImageDataset

IMAGE_SIZE = 16
NUM_CLASSES = 4


def tiny_spec(**overrides):
    values = dict(
        stage_depths=(1, 1, 1), stage_channels=(4, 8, 8), num_classes=NUM_CLASSES, head_split_stage=2, input_channels=3
    )
    values.update(overrides)
    return BackboneSpec(**values)


def tiny_encoder(**overrides):
    values = dict(latent_channels=4, block_channels=(4, 4), block_strides=(2, 2, 1), max_parameters=150000)
    values.update(overrides)
    return EncoderConfig(**values)


def tiny_decoder():
    return DecoderConfig(hidden_channels=8, restoration_blocks=1, transformation_blocks=1)


def tiny_experiment(dataset_path="data", output_dir="out", **overrides):
    values = dict(
        dataset_path=dataset_path,
        output_dir=output_dir,
        backbone=tiny_spec(),
        tail_variant=tiny_spec(stage_depths=(1, 1, 2)),
        encoder=tiny_encoder(),
        decoder=tiny_decoder(),
        entropy=EntropyConfig(),
        pretrain=PretrainConfig(epochs=2, batch_size=8, flip=False),
        train=TrainConfig(epochs=1, batch_size=8),
        finetune=FinetuneConfig(epochs=1, batch_size=8),
        saliency=SaliencyConfig(batch_size=16),
        beta_grid=(0.0, 0.5),
        seeds=(0,),
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def synthetic_split(count, seed, num_classes=NUM_CLASSES, size=IMAGE_SIZE, first_id=0):
    """Images whose class is a bright quadrant on top of noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % num_classes
    images = rng.normal(0.0, 0.3, size=(count, 3, size, size)).astype(np.float32)
    half = size // 2
    for index, label in enumerate(labels):
        row, col = divmod(int(label) % 4, 2)
        images[index, :, row * half : (row + 1) * half, col * half : (col + 1) * half] += 1.5
    return ImageDataset(images, labels, np.arange(first_id, first_id + count))


def synthetic_dataset(train_count=16, val_count=8, seed=0):
    return DeskDataset(synthetic_split(train_count, seed), synthetic_split(val_count, seed + 1, first_id=train_count))


def tiny_pipeline(teacher, dataset, seed=0, with_tables=True):
    pipeline = codec.build_pipeline(
        tiny_encoder(), tiny_decoder(), EntropyConfig(), teacher.spec, seed, head=teacher.head, tail=teacher.tail
    )
    if with_tables:
        training.fit_tables(pipeline, dataset.train, EntropyConfig())
    return pipeline.eval()


def write_image_folder(root, per_class=3, classes=("cat", "dog"), size=(10, 12)):
    """Class-per-folder PNG tree; returns the written paths."""
    from PIL import Image

    rng = np.random.default_rng(0)
    paths = []
    for class_name in classes:
        class_dir = _utils.makedirs(os.path.join(root, class_name))
        for index in range(per_class):
            pixels = rng.integers(0, 256, size=size + (3,), dtype=np.uint8)
            path = os.path.join(class_dir, "{}.png".format(index))
            Image.fromarray(pixels).save(path)
            paths.append(path)
    return paths


def numeric_gradient(fn, value, eps=1e-6):
    """Central finite differences of the scalar ``fn`` at ``value`` (a float64 array)."""
    value = np.array(value, dtype=np.float64)
    grad = np.zeros_like(value)
    for index in np.ndindex(value.shape):
        original = value[index]
        value[index] = original + eps
        upper = fn(value)
        value[index] = original - eps
        lower = fn(value)
        value[index] = original
        grad[index] = (upper - lower) / (2 * eps)
    return grad


def write_prepared_dataset(path, dataset=None, raw_size=700):
    """Write a synthetic dataset in the layout ``prepare_dataset`` produces."""
    from svbi.api_types import DatasetManifest

    dataset = dataset or synthetic_dataset()
    images = np.concatenate([dataset.train.images, dataset.val.images])
    labels = np.concatenate([dataset.train.labels, dataset.val.labels])
    sample_ids = np.concatenate([dataset.train.sample_ids, dataset.val.sample_ids])
    manifest = DatasetManifest(
        sample_count=int(len(labels)),
        image_dims=[IMAGE_SIZE, IMAGE_SIZE],
        source_dims=[IMAGE_SIZE, IMAGE_SIZE],
        class_count=NUM_CLASSES,
        class_names=["class-{}".format(i) for i in range(NUM_CLASSES)],
        raw_bytes=[raw_size] * int(len(labels)),
        split_hashes={
            "train": data.split_hash(dataset.train.sample_ids),
            "val": data.split_hash(dataset.val.sample_ids),
        },
        train_ids=sorted(int(i) for i in dataset.train.sample_ids),
        val_ids=sorted(int(i) for i in dataset.val.sample_ids),
        seed=0,
        val_fraction=0.33,
    )
    _utils.makedirs(path)
    np.savez(os.path.join(path, data.IMAGES_FILE), images=images, labels=labels, sample_ids=sample_ids)
    manifest.to_json(os.path.join(path, data.MANIFEST_FILE))
    return path

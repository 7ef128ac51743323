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
"""Desk dataset preparation and in-memory loading.

A source directory holds one sub-directory per class with image files inside. ``prepare_dataset``
decodes them, pads reflectively to a multiple of the codec stride, normalizes pixels to
``(p / 255 - pixel_mean) / pixel_std`` and writes ``images.npz`` plus ``manifest.json``.
"""
import logging
import os
import queue
import threading

import numpy as np

from svbi import _utils
from svbi.api_types import DatasetManifest

logger = logging.getLogger(__name__)

IMAGES_FILE = "images.npz"
MANIFEST_FILE = "manifest.json"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff", ".webp")


class DataPreparationError(RuntimeError):
    """Raised when source images cannot be prepared.

    Attributes:
        files (list[str]): The offending files.
    """

    def __init__(self, message, files=None):
        super().__init__(message)
        self.files = files or []


class Batch(object):
    """A mini-batch: NCHW float images, integer labels and sample ids."""

    def __init__(self, images, labels, sample_ids):
        self.images = images
        self.labels = labels
        self.sample_ids = sample_ids

    def __len__(self):
        return len(self.sample_ids)


class ImageDataset(object):
    """Images, labels and sample ids held in memory.

    Args:
        images (numpy.ndarray): (N, C, H, W) float32.
        labels (numpy.ndarray): (N,) integers.
        sample_ids (numpy.ndarray): (N,) integers, unique.
    """

    def __init__(self, images, labels, sample_ids):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        if not len(self.images) == len(self.labels) == len(self.sample_ids):
            raise ValueError(
                "Length mismatch: {} images, {} labels, {} ids".format(
                    len(self.images), len(self.labels), len(self.sample_ids)
                )
            )

    def __len__(self):
        return len(self.sample_ids)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def num_batches(self, batch_size):
        return (len(self) + batch_size - 1) // batch_size

    def batches(self, batch_size, rng=None, shuffle=False, flip=False):
        """Iterate over mini-batches.

        Args:
            batch_size (int): Samples per batch; the last batch may be smaller.
            rng (numpy.random.Generator): Required for shuffling or flipping.
            shuffle (bool): Visit samples in a random order.
            flip (bool): Mirror each image horizontally with probability 1/2.
        """
        order = rng.permutation(len(self)) if shuffle else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            index = order[start : start + batch_size]
            images = self.images[index]
            if flip:
                mirrored = rng.random(len(index)) < 0.5
                images = np.where(mirrored[:, None, None, None], images[..., ::-1], images)
            yield Batch(np.ascontiguousarray(images), self.labels[index], self.sample_ids[index])

    def take(self, count):
        """The first ``count`` samples (all of them if ``count`` is None)."""
        if count is None or count >= len(self):
            return self
        return ImageDataset(self.images[:count], self.labels[:count], self.sample_ids[:count])

    def relabel(self, mapping):
        """A copy with labels mapped through ``mapping`` (callable or dict)."""
        if callable(mapping):
            labels = np.asarray([mapping(int(label)) for label in self.labels], dtype=np.int64)
        else:
            labels = np.asarray([mapping[int(label)] for label in self.labels], dtype=np.int64)
        return ImageDataset(self.images, labels, self.sample_ids)


def coarse_label(label):
    """Second downstream task: adjacent class pairs merged, 10 classes -> 5."""
    return int(label) // 2


class DeskDataset(object):
    """A prepared dataset with its train/val split.

    Attributes:
        train (ImageDataset): Training split.
        val (ImageDataset): Validation split, used as the evaluation set.
        manifest (DatasetManifest): The manifest the data was loaded from.
    """

    def __init__(self, train, val, manifest=None):
        self.train = train
        self.val = val
        self.manifest = manifest

    @property
    def num_classes(self):
        if self.manifest is not None:
            return int(self.manifest.class_count)
        return int(max(self.train.labels.max(initial=-1), self.val.labels.max(initial=-1)) + 1)

    @classmethod
    def load(cls, path, max_train_samples=None, max_eval_samples=None):
        """Load a directory written by :func:`prepare_dataset`.

        Args:
            path (str): The prepared directory.
            max_train_samples (int): Optional cap on the training split.
            max_eval_samples (int): Optional cap on the validation split.
        """
        manifest = DatasetManifest.from_json(os.path.join(path, MANIFEST_FILE))
        with np.load(os.path.join(path, IMAGES_FILE)) as arrays:
            images, labels, sample_ids = arrays["images"], arrays["labels"], arrays["sample_ids"]
        position = {int(sid): i for i, sid in enumerate(sample_ids)}

        def split(ids):
            index = np.asarray([position[int(i)] for i in ids], dtype=np.int64)
            return ImageDataset(images[index], labels[index], sample_ids[index])

        train = split(manifest.train_ids).take(max_train_samples)
        val = split(manifest.val_ids).take(max_eval_samples)
        logger.info("Loaded %s: %d train, %d val samples", path, len(train), len(val))
        return cls(train, val, manifest)

    def relabel(self, mapping):
        return DeskDataset(self.train.relabel(mapping), self.val.relabel(mapping), None)


def split_hash(ids):
    """SHA-256 of the sorted sample ids of a split."""
    return _utils.sha256_bytes(",".join(str(int(i)) for i in sorted(ids)).encode("ascii"))


def normalize_pixels(pixels, mean=0.5, std=0.25):
    """uint8 HWC pixels -> float32 CHW normalized values."""
    values = np.asarray(pixels, dtype=np.float32) / 255.0
    return ((values - mean) / std).transpose(2, 0, 1)


def pad_to_multiple(image, multiple):
    """Reflect-pad a CHW image at the bottom/right so H and W are multiples of ``multiple``."""
    _, h, w = image.shape
    pad_h, pad_w = (-h) % multiple, (-w) % multiple
    if not pad_h and not pad_w:
        return image
    return np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")


def _list_sources(source_dir):
    classes = sorted(d for d in os.listdir(source_dir) if os.path.isdir(os.path.join(source_dir, d)))
    if not classes:
        raise DataPreparationError("No class directories under {}".format(source_dir))
    sources = []
    for label, class_name in enumerate(classes):
        class_dir = os.path.join(source_dir, class_name)
        for filename in sorted(os.listdir(class_dir)):
            if filename.lower().endswith(IMAGE_EXTENSIONS):
                sources.append((os.path.join(class_dir, filename), label))
    return classes, sources


def decode_image(path):
    """Decode an image file to uint8 RGB HWC pixels."""
    _utils.get_module("PIL")
    from PIL import Image

    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.uint8)


def prepare_dataset(source_dir, out_dir, seed=0, val_fraction=0.2, stride=4, pixel_mean=0.5, pixel_std=0.25):
    """Decode, normalize and split a class-per-folder image directory.

    Args:
        source_dir (str): Directory with one sub-directory per class.
        out_dir (str): Output directory for ``images.npz`` and ``manifest.json``.
        seed (int): Split seed; the same seed yields the same split hashes.
        val_fraction (float): Fraction of every class held out for validation.
        stride (int): Images are reflect-padded to a multiple of this.
        pixel_mean (float): Normalization offset on [0, 1] pixels.
        pixel_std (float): Normalization scale on [0, 1] pixels.

    Returns:
        DatasetManifest: The written manifest.

    Raises:
        DataPreparationError: Listing undecodable files or files whose size differs from the first image.
    """
    classes, sources = _list_sources(source_dir)
    if not sources:
        raise DataPreparationError("No images found under {}".format(source_dir))

    images, labels, raw_bytes, failures = [], [], [], []
    source_dims = None
    for path, label in sources:
        try:
            pixels = decode_image(path)
        except Exception as e:  # Pillow raises a variety of OSError/ValueError subclasses
            logger.warning("Could not decode %s: %s", path, e)
            failures.append(path)
            continue
        if source_dims is None:
            source_dims = pixels.shape[:2]
        elif pixels.shape[:2] != source_dims:
            logger.warning("%s has size %s, expected %s", path, pixels.shape[:2], source_dims)
            failures.append(path)
            continue
        images.append(pad_to_multiple(normalize_pixels(pixels, pixel_mean, pixel_std), stride))
        labels.append(label)
        raw_bytes.append(os.path.getsize(path))
    if failures:
        raise DataPreparationError("{} file(s) could not be prepared: {}".format(len(failures), failures), failures)

    images = np.stack(images).astype(np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    sample_ids = np.arange(len(labels), dtype=np.int64)

    rng = _utils.seeded_rng(seed, "split")
    train_ids, val_ids = [], []
    for label in range(len(classes)):
        members = sample_ids[labels == label]
        members = members[rng.permutation(len(members))]
        held_out = int(round(len(members) * val_fraction))
        val_ids.extend(int(i) for i in sorted(members[:held_out]))
        train_ids.extend(int(i) for i in sorted(members[held_out:]))

    manifest = DatasetManifest(
        sample_count=int(len(labels)),
        image_dims=[int(images.shape[2]), int(images.shape[3])],
        source_dims=[int(source_dims[0]), int(source_dims[1])],
        class_count=len(classes),
        class_names=list(classes),
        raw_bytes=[int(b) for b in raw_bytes],
        split_hashes={"train": split_hash(train_ids), "val": split_hash(val_ids)},
        train_ids=sorted(train_ids),
        val_ids=sorted(val_ids),
        seed=int(seed),
        val_fraction=float(val_fraction),
        pixel_mean=float(pixel_mean),
        pixel_std=float(pixel_std),
    )
    _utils.makedirs(out_dir)
    np.savez(os.path.join(out_dir, IMAGES_FILE), images=images, labels=labels, sample_ids=sample_ids)
    manifest.to_json(os.path.join(out_dir, MANIFEST_FILE))
    logger.info(
        "Prepared %d samples in %d classes into %s (%d train / %d val)",
        len(labels),
        len(classes),
        out_dir,
        len(train_ids),
        len(val_ids),
    )
    return manifest


def load_image_file(path, manifest=None, shape=None):
    """Load one image for inference.

    Image files are decoded and normalized like :func:`prepare_dataset`; ``.npy`` holds a CHW array and
    any other file is read as raw little-endian float32 of ``shape`` (C, H, W).
    """
    mean = manifest.pixel_mean if manifest else 0.5
    std = manifest.pixel_std if manifest else 0.25
    if path.lower().endswith(IMAGE_EXTENSIONS):
        return normalize_pixels(decode_image(path), mean, std)
    if path.lower().endswith(".npy"):
        return np.load(path).astype(np.float32)
    if shape is None:
        raise ValueError("Raw image file {} needs an explicit (C, H, W) shape".format(path))
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError("{} holds {} floats, expected {} for shape {}".format(path, data.size, np.prod(shape), shape))
    return data.reshape(shape).astype(np.float32)


_SENTINEL = object()
PREFETCH_THREAD_NAME = "svbi-prefetch"


def prefetch(iterable, depth=2, poll_interval=0.05):
    """Produce items of ``iterable`` on a worker thread through a bounded queue.

    The worker stops when the consumer closes the generator early, e.g. when a training loop raises.

    Raises:
        Exception: Whatever ``iterable`` raised on the worker thread, once the items before it are consumed.
    """
    buffer = queue.Queue(maxsize=depth)
    stop = threading.Event()
    errors = []

    def offer(item):
        while not stop.is_set():
            try:
                buffer.put(item, timeout=poll_interval)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for item in iterable:
                if not offer(item):
                    return
        except Exception as e:
            errors.append(e)
        finally:
            offer(_SENTINEL)

    thread = threading.Thread(target=worker, name=PREFETCH_THREAD_NAME, daemon=True)
    thread.start()
    try:
        while True:
            item = buffer.get()
            if item is _SENTINEL:
                break
            yield item
    finally:
        stop.set()
        thread.join()
    if errors:
        raise errors[0]


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
"""XGrad-CAM saliency of the teacher, turned into per-location distortion weights.

Store layout, all integers little-endian::

    b"SVBS" | version u32 | count u32 | height u32 | width u32 | layers length u32 | layers (UTF-8, comma separated)
    index: count * (sample_id u64 | offset u64), offsets relative to the start of the grid section
    grids: count * height * width f32
"""
import collections
import logging
import struct

import numpy as np

from svbi import functional as F
from svbi.api_types import SaliencyConfig
from svbi.tensor import Tensor

logger = logging.getLogger(__name__)

STORE_MAGIC = b"SVBS"
STORE_VERSION = 1


class SaliencyStoreError(KeyError):
    """Raised when a saliency map is missing or the store cannot be read or written."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class SaliencyMap(object):
    """Normalized distortion weights of one sample.

    Attributes:
        weights (numpy.ndarray): f32 grid at the head-output resolution, all >= floor, mean 1.
        sample_id (int): Dataset sample id.
        layers (tuple[str]): Activations the map was fused from.
    """

    def __init__(self, weights, sample_id=None, layers=()):
        self.weights = np.asarray(weights, dtype=np.float32)
        self.sample_id = sample_id
        self.layers = tuple(layers)

    def __repr__(self):
        return "SaliencyMap(sample_id={}, shape={}, layers={})".format(self.sample_id, self.weights.shape, self.layers)


def gradcam_layers(teacher, x, layers, target_class=None):
    """Raw XGrad-CAM maps of several layers from one forward/backward pass.

    Args:
        teacher: Model exposing ``forward_with_activations(x, names)`` and ``zero_grad()``.
        x (array-like): NCHW batch.
        layers (list[str]): Activation names.
        target_class (array-like): Per-sample target classes; defaults to the teacher's prediction.

    Returns:
        dict[str, numpy.ndarray]: Layer name to (N, h, w) non-negative maps.

    Raises:
        KeyError: On an unknown layer name.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    logits, activations = teacher.forward_with_activations(Tensor(data, requires_grad=True), list(layers))
    if target_class is None:
        target_class = np.argmax(logits.data, axis=-1)
    target = np.broadcast_to(np.asarray(target_class), (logits.shape[0],))
    (logits * F.one_hot(target, logits.shape[-1])).sum().backward()

    maps = collections.OrderedDict()
    for name in layers:
        activation = activations[name].data.astype(np.float64)
        grad = activations[name].grad
        grad = np.zeros_like(activation) if grad is None else grad.astype(np.float64)
        weights = (grad * activation).sum(axis=(2, 3)) / (activation.sum(axis=(2, 3)) + 1e-7)
        cam = np.einsum("nk,nkhw->nhw", weights, activation)
        maps[name] = np.maximum(cam, 0.0)
    teacher.zero_grad()
    return maps


def gradcam(teacher, x, layer, target_class=None):
    """Raw XGrad-CAM map ``ReLU(sum_k w_k A_k)`` of one layer, at that layer's resolution."""
    return gradcam_layers(teacher, x, [layer], target_class)[layer]


def resize_bilinear(maps, size):
    """Bilinear resize of the last two axes (half-pixel centres, edge clamped)."""
    maps = np.asarray(maps, dtype=np.float64)
    out_h, out_w = int(size[0]), int(size[1])
    in_h, in_w = maps.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return maps.copy()

    def axis_weights(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / float(n_out) - 0.5, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_weights(in_h, out_h)
    x0, x1, fx = axis_weights(in_w, out_w)
    rows = maps[..., y0, :] * (1 - fy)[:, None] + maps[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


def fuse_maps(maps, size=None):
    """Unweighted mean of raw maps after resizing them to ``size`` (defaults to the first map's size).

    Raises:
        ValueError: If ``maps`` is empty.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("Cannot fuse an empty list of saliency maps")
    size = size or np.shape(maps[0])[-2:]
    return np.mean([resize_bilinear(m, size) for m in maps], axis=0)


def normalize_weights(raw, floor=0.1, sample_id=None, layers=()):
    """Min-max rescale to [0, 1], add ``floor``, rescale to mean 1. A constant map yields all ones.

    Raises:
        ValueError: If the map has non-finite values.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("Saliency map of sample {} has non-finite values".format(sample_id))
    low, high = raw.min(), raw.max()
    if high - low <= 0:
        weights = np.ones_like(raw)
    else:
        weights = (raw - low) / (high - low) + floor
        weights = weights / weights.mean()
    return SaliencyMap(weights, sample_id=sample_id, layers=layers)


class SaliencyStore(object):
    """Write-once map of sample id to :class:`SaliencyMap`."""

    def __init__(self, maps=(), shape=None, layers=()):
        self._maps = collections.OrderedDict()
        self.shape = tuple(shape) if shape is not None else None
        self.layers = tuple(layers)
        for saliency_map in maps:
            self.add(saliency_map)

    def add(self, saliency_map):
        sample_id = int(saliency_map.sample_id)
        if self.shape is None:
            self.shape = saliency_map.weights.shape
        if saliency_map.weights.shape != self.shape:
            raise SaliencyStoreError(
                "Map of sample {} has shape {}, store holds {}".format(
                    sample_id, saliency_map.weights.shape, self.shape
                ),
                sample_id,
            )
        if sample_id in self._maps:
            raise SaliencyStoreError("Duplicate saliency map for sample {}".format(sample_id), sample_id)
        self._maps[sample_id] = saliency_map

    def __len__(self):
        return len(self._maps)

    def __contains__(self, sample_id):
        return int(sample_id) in self._maps

    @property
    def sample_ids(self):
        return list(self._maps)

    def get(self, sample_id):
        """Raises :class:`SaliencyStoreError` naming the sample if no map is stored."""
        try:
            return self._maps[int(sample_id)]
        except KeyError:
            raise SaliencyStoreError("No saliency map for sample {}".format(sample_id), int(sample_id))

    def weights_for(self, sample_ids):
        """Weights of a batch as (N, 1, h, w), broadcastable over channels."""
        return np.stack([self.get(sid).weights for sid in sample_ids])[:, None]

    @classmethod
    def uniform(cls, sample_ids, shape):
        """All-ones store, under which saliency-guided distortion equals plain distortion."""
        return cls([SaliencyMap(np.ones(shape), sid, ("uniform",)) for sid in sample_ids], shape, ("uniform",))

    def to_bytes(self):
        height, width = self.shape if self.shape is not None else (0, 0)
        layers = ",".join(self.layers).encode("utf-8")
        parts = [STORE_MAGIC, struct.pack("<IIIII", STORE_VERSION, len(self), height, width, len(layers)), layers]
        grid_bytes = height * width * 4
        for position, sample_id in enumerate(self._maps):
            parts.append(struct.pack("<QQ", sample_id, position * grid_bytes))
        for saliency_map in self._maps.values():
            parts.append(np.ascontiguousarray(saliency_map.weights, dtype="<f4").tobytes())
        return b"".join(parts)

    def save(self, path):
        try:
            with open(path, "wb") as f:
                f.write(self.to_bytes())
        except (IOError, OSError) as e:
            raise SaliencyStoreError("Cannot write saliency store {}: {}".format(path, e))
        logger.info("Wrote %d saliency maps to %s", len(self), path)
        return path

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != STORE_MAGIC or len(data) < 24:
            raise SaliencyStoreError("Not a saliency store: bad magic {!r}".format(bytes(data[:4])))
        version, count, height, width, layers_len = struct.unpack_from("<IIIII", data, 4)
        if version != STORE_VERSION:
            raise SaliencyStoreError("Unsupported saliency store version {}".format(version))
        offset = 24 + layers_len
        layers = tuple(name for name in bytes(data[24:offset]).decode("utf-8").split(",") if name)
        index = [struct.unpack_from("<QQ", data, offset + 16 * i) for i in range(count)]
        grids = offset + 16 * count
        grid_bytes = height * width * 4
        store = cls(shape=(height, width), layers=layers)
        for sample_id, grid_offset in index:
            start = grids + grid_offset
            if start + grid_bytes > len(data):
                raise SaliencyStoreError("Saliency store truncated at sample {}".format(sample_id), sample_id)
            weights = np.frombuffer(data[start : start + grid_bytes], dtype="<f4").reshape(height, width)
            store.add(SaliencyMap(weights.copy(), sample_id, layers))
        return store

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as f:
                data = f.read()
        except (IOError, OSError) as e:
            raise SaliencyStoreError("Cannot read saliency store {}: {}".format(path, e))
        return cls.from_bytes(data)


def precompute_dataset_saliency(teacher, dataset, config=None, path=None):
    """Compute and optionally persist one saliency map per sample of ``dataset``.

    Maps of every configured layer (default: the last block of each teacher stage) are fused at the
    head-output resolution and normalized.

    Args:
        teacher (backbones.SplitModel): The pretrained teacher.
        dataset (data.ImageDataset): Samples to cover, usually the training split.
        config (SaliencyConfig): Floor, layers and batch size.
        path (str): Where to write the store.

    Returns:
        SaliencyStore
    """
    config = config or SaliencyConfig()
    layers = list(config.layers or teacher.activation_names())
    height, width = dataset.image_shape[-2:]
    head_size = teacher.spec.head_output_shape(height, width)[1:]
    teacher.eval()
    store = SaliencyStore(shape=head_size, layers=layers)
    for batch in dataset.batches(int(config.batch_size)):
        raw = gradcam_layers(teacher, batch.images, layers)
        fused = fuse_maps(list(raw.values()), head_size)
        for sample_id, sample_map in zip(batch.sample_ids, fused):
            store.add(normalize_weights(sample_map, float(config.floor), int(sample_id), layers))
        logger.debug("Saliency for %d/%d samples", len(store), len(dataset))
    logger.info("Computed %d saliency maps from layers %s at %s", len(store), layers, head_size)
    if path:
        store.save(path)
    return store

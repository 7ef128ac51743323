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
"""Binary checkpoint format.

Layout, all integers little-endian::

    b"SVBI" | version u32 | count u32
    per parameter: name length u32 | UTF-8 name | dtype tag u8 | rank u32 | extents u32 * rank | raw data
"""
import collections
import logging
import struct

import numpy as np

from svbi import _utils

logger = logging.getLogger(__name__)

MAGIC = b"SVBI"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS_BY_DTYPE = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointFormatError(ValueError):
    """Raised when checkpoint bytes are malformed."""


def serialize(state):
    """Serialize an ordered mapping of name to array.

    Args:
        state (collections.OrderedDict[str, numpy.ndarray]): Parameter values.

    Returns:
        bytes: The checkpoint.
    """
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, value in state.items():
        array = np.asarray(value)
        dtype = array.dtype.newbyteorder("<")
        if dtype not in _TAGS_BY_DTYPE:
            array = array.astype("<f4")
            dtype = np.dtype("<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", _TAGS_BY_DTYPE[dtype], array.ndim))
        parts.append(struct.pack("<{}I".format(array.ndim), *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(parts)


def deserialize(data):
    """Parse checkpoint bytes into an ordered mapping of name to array.

    Raises:
        CheckpointFormatError: On bad magic, unknown version or dtype, or truncation.
    """
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointFormatError("Not a checkpoint: bad magic {!r}".format(bytes(view[:4])))
    offset = 4

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(view):
            raise CheckpointFormatError("Checkpoint truncated at byte {}".format(offset))
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointFormatError("Unsupported checkpoint version {}".format(version))
    state = collections.OrderedDict()
    for _ in range(count):
        (name_len,) = take("<I")
        if offset + name_len > len(view):
            raise CheckpointFormatError("Checkpoint truncated in parameter name")
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        tag, rank = take("<BI")
        if tag not in _DTYPE_TAGS:
            raise CheckpointFormatError("Unknown dtype tag {} for {}".format(tag, name))
        shape = take("<{}I".format(rank)) if rank else ()
        dtype = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(view):
            raise CheckpointFormatError("Checkpoint truncated in data of {}".format(name))
        state[name] = np.frombuffer(view[offset : offset + nbytes], dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(view):
        raise CheckpointFormatError("{} trailing bytes after checkpoint".format(len(view) - offset))
    return state


def save(module_or_state, path):
    """Write a module's parameters (or a state mapping) to ``path``.

    Returns:
        str: Hex SHA-256 of the written bytes.
    """
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    data = serialize(state)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug("Wrote checkpoint %s with %d tensors", path, len(state))
    return _utils.sha256_bytes(data)


def load(path):
    with open(path, "rb") as f:
        return deserialize(f.read())


def load_into(module, path, strict=True):
    """Load the checkpoint at ``path`` into ``module``."""
    return module.load_state_dict(load(path), strict=strict)


def digest(module_or_state):
    """Hex SHA-256 of the checkpoint serialization, without touching disk."""
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    return _utils.sha256_bytes(serialize(state))

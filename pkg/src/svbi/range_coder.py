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
"""32-bit carry-less range coder over frozen CDF tables.

Payload layout, all integers little-endian::

    table hash 8 bytes | latent C, H', W' u16 * 3 | image H, W u16 * 2 | body length u32 | body

Example:
    .. code-block:: python

        payload = range_coder.encode(code, tables)
        assert range_coder.decode(payload, tables) == code
"""
import bisect
import logging
import struct

import numpy as np

from svbi.codec import LatentCode

logger = logging.getLogger(__name__)

RANGE_BITS = 32
MASK = (1 << RANGE_BITS) - 1
TOP = 1 << (RANGE_BITS - 8)
BOT = 1 << (RANGE_BITS - 16)

HEADER_FORMAT = "<8s3H2HI"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)

ARCHIVE_MAGIC = b"SVBP"
ARCHIVE_VERSION = 1


class PayloadError(ValueError):
    """Raised when a coded payload cannot be decoded."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or []


class TableHashMismatchError(PayloadError):
    """Raised when a payload was coded against different tables."""


class TruncatedPayloadError(PayloadError):
    """Raised when a payload ends before its declared length or the coder runs out of bytes."""


class OutOfSupportError(ValueError):
    """Raised when a symbol to encode lies outside its channel's table support."""


class RangeEncoder(object):
    """Carry-less range encoder writing into a bytearray.

    Args:
        precision (int): Probability precision of the tables, in bits.
    """

    def __init__(self, precision=16):
        self.precision = precision
        self.low = 0
        self.range = MASK
        self.output = bytearray()
        self._finished = False

    def _put(self):
        self.output.append(self.low >> (RANGE_BITS - 8))
        self.low = (self.low << 8) & MASK
        self.range = (self.range << 8) & MASK

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    return
                self.range = (-self.low) & (BOT - 1)
            self._put()

    def encode(self, cum_low, freq):
        """Narrow the interval to the symbol occupying ``[cum_low, cum_low + freq)`` of ``2 ** precision``."""
        r = self.range >> self.precision
        self.low = (self.low + r * cum_low) & MASK
        self.range = r * freq
        self._normalize()

    def finish(self):
        """Flush the 4 bytes of ``low`` and return the coded bytes."""
        if not self._finished:
            for _ in range(RANGE_BITS // 8):
                self.output.append(self.low >> (RANGE_BITS - 8))
                self.low = (self.low << 8) & MASK
            self._finished = True
        return bytes(self.output)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback):
        if exc_type is None:
            self.finish()


class RangeDecoder(object):
    """Mirror of :class:`RangeEncoder` reading from a bytes object."""

    def __init__(self, data, precision=16):
        self.data = data
        self.precision = precision
        self.position = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(RANGE_BITS // 8):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self):
        if self.position >= len(self.data):
            raise TruncatedPayloadError("Coder body exhausted after {} bytes".format(len(self.data)))
        byte = self.data[self.position]
        self.position += 1
        return byte

    def _get(self):
        self.code = ((self.code << 8) | self._next_byte()) & MASK
        self.low = (self.low << 8) & MASK
        self.range = (self.range << 8) & MASK

    def decode(self, cum):
        """Decode one symbol index against the cumulative counts ``cum`` (length ``n + 1``)."""
        r = self.range >> self.precision
        target = min(((self.code - self.low) & MASK) // r, cum[-1] - 1)
        index = bisect.bisect_right(cum, target) - 1
        self.low = (self.low + r * cum[index]) & MASK
        self.range = r * (cum[index + 1] - cum[index])
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    break
                self.range = (-self.low) & (BOT - 1)
            self._get()
        return index


class CodedPayload(object):
    """Header plus range coder body for one latent grid.

    Attributes:
        table_hash (bytes): First 8 bytes of the table digest.
        latent_shape (tuple[int, int, int]): (C, H', W').
        image_dims (tuple[int, int]): Original (H, W).
        body (bytes): Coder output.
    """

    def __init__(self, table_hash, latent_shape, image_dims, body):
        self.table_hash = bytes(table_hash)
        self.latent_shape = tuple(int(v) for v in latent_shape)
        self.image_dims = tuple(int(v) for v in image_dims)
        self.body = bytes(body)

    def to_bytes(self):
        header = struct.pack(HEADER_FORMAT, self.table_hash, *(self.latent_shape + self.image_dims + (len(self.body),)))
        return header + self.body

    @classmethod
    def from_bytes(cls, data):
        """Parse payload bytes.

        Raises:
            TruncatedPayloadError: If the header or body is shorter than declared.
            PayloadError: On trailing bytes.
        """
        data = bytes(data)
        if len(data) < HEADER_SIZE:
            raise TruncatedPayloadError(
                "Payload of {} bytes is shorter than its {}-byte header".format(len(data), HEADER_SIZE)
            )
        table_hash, c, h, w, height, width, length = struct.unpack_from(HEADER_FORMAT, data)
        available = len(data) - HEADER_SIZE
        if available < length:
            raise TruncatedPayloadError("Payload body truncated: {} of {} bytes".format(available, length))
        if available > length:
            raise PayloadError("{} trailing bytes after payload body".format(available - length))
        return cls(table_hash, (c, h, w), (height, width), data[HEADER_SIZE:])

    def __len__(self):
        return HEADER_SIZE + len(self.body)

    def __eq__(self, other):
        return isinstance(other, CodedPayload) and self.to_bytes() == other.to_bytes()

    def __repr__(self):
        return "CodedPayload(latent_shape={}, image_dims={}, bytes={})".format(
            self.latent_shape, self.image_dims, len(self)
        )


def encode(code, tables):
    """Range code a latent grid against ``tables``.

    Args:
        code (LatentCode): Symbols within the table support.
        tables (entropy.CdfTable): Frozen tables.

    Returns:
        CodedPayload

    Raises:
        OutOfSupportError: If any symbol lies outside its channel's support.
    """
    symbols = np.asarray(code.symbols, dtype=np.int64)
    channels = symbols.shape[0]
    if channels != tables.num_channels:
        raise OutOfSupportError("Grid has {} channels, tables {}".format(channels, tables.num_channels))
    if not tables.contains(symbols):
        low = tables.z_min.reshape(-1, 1, 1)
        high = tables.z_max.reshape(-1, 1, 1)
        bad = np.argwhere((symbols < low) | (symbols > high))
        raise OutOfSupportError(
            "{} symbols outside table support, first at {}; clamp before coding".format(len(bad), bad[0].tolist())
        )
    encoder = RangeEncoder(tables.precision)
    for channel in range(channels):
        cum = tables.cum_list(channel)
        for index in (symbols[channel].reshape(-1) - tables.z_min[channel]).tolist():
            encoder.encode(cum[index], cum[index + 1] - cum[index])
    return CodedPayload(tables.hash8, symbols.shape, code.image_dims, encoder.finish())


def decode(payload, tables):
    """Recover the latent grid of ``payload``.

    Args:
        payload (CodedPayload or bytes): The payload.
        tables (entropy.CdfTable): Tables the payload was coded with.

    Returns:
        LatentCode

    Raises:
        TableHashMismatchError: If the payload names other tables.
        TruncatedPayloadError: If the body is cut short.
    """
    if not isinstance(payload, CodedPayload):
        payload = CodedPayload.from_bytes(payload)
    if payload.table_hash != tables.hash8:
        raise TableHashMismatchError(
            "Payload coded with tables {} but {} are loaded".format(payload.table_hash.hex(), tables.hash8.hex())
        )
    channels, height, width = payload.latent_shape
    if channels != tables.num_channels:
        raise PayloadError("Payload has {} channels, tables {}".format(channels, tables.num_channels))
    decoder = RangeDecoder(payload.body, tables.precision)
    symbols = np.empty((channels, height * width), dtype=np.int64)
    for channel in range(channels):
        cum = tables.cum_list(channel)
        z_min = int(tables.z_min[channel])
        symbols[channel] = [decoder.decode(cum) + z_min for _ in range(height * width)]
    return LatentCode(symbols.reshape(channels, height, width), tables.z_min, tables.z_max, payload.image_dims)


def bpp(payload, image_dims=None):
    """Bits per pixel of a payload: total bytes * 8 / (H * W).

    Args:
        payload (CodedPayload or bytes or int): The payload, its bytes, or a byte count.
        image_dims (tuple[int, int]): (H, W); defaults to the payload header's image dims.

    Raises:
        ValueError: If a dimension is zero.
    """
    if image_dims is None:
        image_dims = payload.image_dims
    height, width = image_dims
    if height <= 0 or width <= 0:
        raise ValueError("Image dims must be positive, got {}".format(image_dims))
    size = payload if isinstance(payload, int) else len(payload)
    return size * 8.0 / (height * width)


def write_payloads(path, records):
    """Persist ``(sample_id, CodedPayload)`` records as ``b"SVBP" | version u32 | count u32`` then
    ``sample_id u32 | length u32 | payload bytes`` each."""
    records = list(records)
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC + struct.pack("<II", ARCHIVE_VERSION, len(records)))
        for sample_id, payload in records:
            data = payload.to_bytes()
            f.write(struct.pack("<II", int(sample_id), len(data)))
            f.write(data)
    logger.debug("Wrote %d payloads to %s", len(records), path)
    return path


def read_payloads(path):
    """Load the records written by :func:`write_payloads`.

    Raises:
        PayloadError: On a bad magic or truncated archive.
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != ARCHIVE_MAGIC or len(data) < 12:
        raise PayloadError("Not a payload archive: {}".format(path))
    version, count = struct.unpack_from("<II", data, 4)
    if version != ARCHIVE_VERSION:
        raise PayloadError("Unsupported payload archive version {}".format(version))
    offset, records = 12, []
    for _ in range(count):
        if offset + 8 > len(data):
            raise TruncatedPayloadError("Payload archive {} truncated".format(path))
        sample_id, length = struct.unpack_from("<II", data, offset)
        offset += 8
        if offset + length > len(data):
            raise TruncatedPayloadError("Payload archive {} truncated in record {}".format(path, sample_id))
        records.append((sample_id, CodedPayload.from_bytes(data[offset : offset + length])))
        offset += length
    return records

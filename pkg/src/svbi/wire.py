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
"""Framed binary protocol between the split client and server.

Frame layout, all integers little-endian::

    b"SVBW" | version u16 | message type u8 | body length u32 | body
"""
import enum
import logging
import struct

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"SVBW"
PROTOCOL_VERSION = 1
FRAME_HEADER = "<4sHBI"
FRAME_HEADER_SIZE = struct.calcsize(FRAME_HEADER)
MAX_BODY_SIZE = 16 << 20

_RESPONSE_HEADER = "<HIIH"
_RESPONSE_HEADER_SIZE = struct.calcsize(_RESPONSE_HEADER)


class MessageType(enum.IntEnum):
    HELLO = 1
    TABLE_HASH = 2
    INFER_REQUEST = 3
    INFER_RESPONSE = 4
    ERROR = 5


class ErrorCode(enum.IntEnum):
    VERSION = 1
    TABLE_HASH = 2
    MALFORMED = 3
    UNEXPECTED_MESSAGE = 4
    INTERNAL = 5


class ProtocolError(ValueError):
    """Raised on malformed frames or protocol violations."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or []


def encode_frame(message_type, body=b"", version=PROTOCOL_VERSION):
    body = bytes(body)
    return struct.pack(FRAME_HEADER, MAGIC, version, int(message_type), len(body)) + body


def _read_exact(stream, size):
    chunks, remaining = [], size
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream):
    """Read one frame from a binary stream.

    Returns:
        (MessageType, int, bytes): Type, version and body; None on a clean end of stream.

    Raises:
        ProtocolError: On a partial header or body, bad magic, unknown type or oversized body.
    """
    header = _read_exact(stream, FRAME_HEADER_SIZE)
    if not header:
        return None
    if len(header) < FRAME_HEADER_SIZE:
        raise ProtocolError("Connection closed inside a frame header ({} bytes)".format(len(header)))
    magic, version, message_type, length = struct.unpack(FRAME_HEADER, header)
    if magic != MAGIC:
        raise ProtocolError("Bad frame magic {!r}".format(magic))
    try:
        message_type = MessageType(message_type)
    except ValueError:
        raise ProtocolError("Unknown message type {}".format(message_type))
    if length > MAX_BODY_SIZE:
        raise ProtocolError("Frame body of {} bytes exceeds the {} byte limit".format(length, MAX_BODY_SIZE))
    body = _read_exact(stream, length)
    if len(body) < length:
        raise ProtocolError("Connection closed inside a frame body ({} of {} bytes)".format(len(body), length))
    return message_type, version, body


def encode_hello(version=PROTOCOL_VERSION):
    return struct.pack("<H", version)


def decode_hello(body):
    if len(body) != 2:
        raise ProtocolError("HELLO body must be 2 bytes, got {}".format(len(body)))
    return struct.unpack("<H", body)[0]


def encode_error(code, message):
    return struct.pack("<H", int(code)) + message.encode("utf-8")


def decode_error(body):
    if len(body) < 2:
        raise ProtocolError("ERROR body shorter than its code")
    (code,) = struct.unpack_from("<H", body)
    try:
        code = ErrorCode(code)
    except ValueError:
        pass
    return code, body[2:].decode("utf-8", errors="replace")


class InferResponse(object):
    """Server answer to one request.

    Attributes:
        class_index (int): Predicted class.
        server_us (int): Server compute time, microseconds, entropy decoding included.
        server_entropy_us (int): Server entropy decoding time, microseconds.
        logits (numpy.ndarray): f32 logits, possibly empty.
    """

    def __init__(self, class_index, server_us, server_entropy_us=0, logits=None):
        self.class_index = int(class_index)
        self.server_us = int(server_us)
        self.server_entropy_us = int(server_entropy_us)
        self.logits = np.zeros(0, dtype=np.float32) if logits is None else np.asarray(logits, dtype=np.float32)

    def to_bytes(self):
        header = struct.pack(
            _RESPONSE_HEADER, self.class_index, self.server_us, self.server_entropy_us, len(self.logits)
        )
        return header + self.logits.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, body):
        if len(body) < _RESPONSE_HEADER_SIZE:
            raise ProtocolError("INFER_RESPONSE body too short ({} bytes)".format(len(body)))
        class_index, server_us, entropy_us, count = struct.unpack_from(_RESPONSE_HEADER, body)
        if len(body) != _RESPONSE_HEADER_SIZE + 4 * count:
            raise ProtocolError("INFER_RESPONSE declares {} logits in {} bytes".format(count, len(body)))
        logits = np.frombuffer(body[_RESPONSE_HEADER_SIZE:], dtype="<f4").astype(np.float32)
        return cls(class_index, server_us, entropy_us, logits)

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
"""Split deployment: the client encodes and ships payloads, the server decodes and classifies.

A session is ``HELLO`` (protocol version) then ``TABLE_HASH`` (first 8 bytes of the table digest), each
acknowledged by the server with its own value, followed by any number of stop-and-wait
``INFER_REQUEST`` / ``INFER_RESPONSE`` exchanges. Any violation ends the session with an ``ERROR`` frame.
"""
import collections
import logging
import socket
import socketserver
import threading
import time

import numpy as np

from svbi import backbones, range_coder, wire
from svbi.codec import LatentCode
from svbi.tensor import Tensor, no_grad
from svbi.wire import ErrorCode, InferResponse, MessageType, ProtocolError

logger = logging.getLogger(__name__)

SESSION_CLOSED = "closed"
SESSION_ERROR = "error"
MAX_LATENT_SYMBOLS = 1 << 20


class SplitRuntimeError(RuntimeError):
    """Raised by the client; ``phase`` is one of bind, connect, handshake, encode, send, receive, server."""

    def __init__(self, message, phase, errors=None):
        super().__init__("[{}] {}".format(phase, message))
        self.phase = phase
        self.errors = errors or []


def parse_address(address):
    """``"host:port"`` or ``(host, port)`` to a ``(host, port)`` tuple."""
    if isinstance(address, (tuple, list)):
        return str(address[0]), int(address[1])
    host, _, port = str(address).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError("Address must be host:port, got {!r}".format(address))
    return host, int(port)


def _us_since(start):
    return int(round((time.perf_counter() - start) * 1e6))


class InferenceService(object):
    """Server side model state: synthesis transform, tail and coder tables. Read-only once built.

    A payload is only decoded when its declared latent shape is the one the encoder produces for its
    declared image dims, so a forged header cannot make the server allocate an arbitrary grid.

    Args:
        decoder (codec.SynthesisTransform): Trained synthesis transform.
        tail (backbones.Tail): Teacher tail.
        tables (entropy.CdfTable): Tables shared with the clients.
        return_logits (bool): Whether responses carry the logits.
        latent_stride (int): Total stride of the client encoder.
        image_dims (tuple[int, int]): Image size the service accepts; any multiple of the stride when None.
    """

    def __init__(self, decoder, tail, tables, return_logits=True, latent_stride=1, image_dims=None):
        self.decoder = decoder.eval()
        self.tail = tail.eval()
        self.tables = tables
        self.return_logits = return_logits
        self.latent_stride = int(latent_stride)
        self.image_dims = tuple(int(v) for v in image_dims) if image_dims is not None else None

    @property
    def table_hash(self):
        return self.tables.hash8

    @classmethod
    def from_pipeline(cls, pipeline, return_logits=True, image_dims=None):
        pipeline._require("tail")
        pipeline._require("tables")
        return cls(
            pipeline.decoder,
            pipeline.tail,
            pipeline.tables,
            return_logits,
            latent_stride=pipeline.encoder.config.total_stride,
            image_dims=image_dims,
        )

    def expected_latent_shape(self, image_dims):
        """(C, H', W') the encoder produces for an image of ``image_dims``.

        Raises:
            range_coder.PayloadError: If the dims are not accepted by this service.
        """
        image_dims = tuple(int(v) for v in image_dims)
        if self.image_dims is not None and image_dims != self.image_dims:
            raise range_coder.PayloadError(
                "Image dims {} differ from the served {}".format(image_dims, self.image_dims)
            )
        if any(v <= 0 or v % self.latent_stride for v in image_dims):
            raise range_coder.PayloadError(
                "Image dims {} are not a multiple of the encoder stride {}".format(image_dims, self.latent_stride)
            )
        shape = (self.decoder.latent_channels,) + tuple(v // self.latent_stride for v in image_dims)
        if int(np.prod(shape)) > MAX_LATENT_SYMBOLS:
            raise range_coder.PayloadError("Latent grid {} is too large".format(shape))
        return shape

    def infer(self, payload_bytes):
        """Classify one payload.

        Raises:
            range_coder.PayloadError: If the payload cannot be parsed, declares a latent shape other than the
                encoder's or was coded with other tables.
        """
        start = time.perf_counter()
        payload = range_coder.CodedPayload.from_bytes(payload_bytes)
        expected = self.expected_latent_shape(payload.image_dims)
        if payload.latent_shape != expected:
            raise range_coder.PayloadError(
                "Latent grid {} does not match the expected {}".format(payload.latent_shape, expected)
            )
        code = range_coder.decode(payload, self.tables)
        entropy_us = _us_since(start)
        with no_grad():
            logits = self.tail(self.decoder(Tensor(code.symbols[None].astype(np.float32)))).data[0]
        class_index = backbones.argmax_logits(logits)
        return InferResponse(class_index, _us_since(start), entropy_us, logits if self.return_logits else None)


def _send(wfile, message_type, body=b""):
    wfile.write(wire.encode_frame(message_type, body))
    wfile.flush()


def _send_error(wfile, code, message):
    logger.info("Ending session with %s: %s", code.name, message)
    try:
        _send(wfile, MessageType.ERROR, wire.encode_error(code, message))
    except (OSError, ValueError):
        logger.debug("Peer went away before the ERROR frame was written")
    return SESSION_ERROR


class _SessionAbort(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _expect(rfile, message_type):
    frame = wire.read_frame(rfile)
    if frame is None:
        return None
    received, version, body = frame
    if version != wire.PROTOCOL_VERSION:
        raise _SessionAbort(ErrorCode.VERSION, "Unsupported protocol version {}".format(version))
    if received != message_type:
        raise _SessionAbort(
            ErrorCode.UNEXPECTED_MESSAGE, "Expected {}, got {}".format(message_type.name, received.name)
        )
    return body


def handle_session(rfile, wfile, service):
    """Serve one client session over a pair of binary streams.

    Never raises on client input: every session ends in a clean close or an ``ERROR`` frame.

    Args:
        rfile: Readable binary stream.
        wfile: Writable binary stream.
        service (InferenceService): Model state.

    Returns:
        str: ``"closed"`` or ``"error"``.
    """
    requests = 0
    try:
        body = _expect(rfile, MessageType.HELLO)
        if body is None:
            return SESSION_CLOSED
        client_version = wire.decode_hello(body)
        if client_version != wire.PROTOCOL_VERSION:
            return _send_error(wfile, ErrorCode.VERSION, "Unsupported protocol version {}".format(client_version))
        _send(wfile, MessageType.HELLO, wire.encode_hello())

        body = _expect(rfile, MessageType.TABLE_HASH)
        if body is None:
            return SESSION_CLOSED
        if bytes(body) != service.table_hash:
            return _send_error(
                wfile,
                ErrorCode.TABLE_HASH,
                "Client tables {} do not match server tables {}".format(bytes(body).hex(), service.table_hash.hex()),
            )
        _send(wfile, MessageType.TABLE_HASH, service.table_hash)

        while True:
            body = _expect(rfile, MessageType.INFER_REQUEST)
            if body is None:
                logger.debug("Session closed by client after %d requests", requests)
                return SESSION_CLOSED
            try:
                response = service.infer(body)
            except (range_coder.PayloadError, ValueError) as e:
                return _send_error(wfile, ErrorCode.MALFORMED, "Bad payload: {}".format(e))
            _send(wfile, MessageType.INFER_RESPONSE, response.to_bytes())
            requests += 1
    except _SessionAbort as e:
        return _send_error(wfile, e.code, str(e))
    except ProtocolError as e:
        return _send_error(wfile, ErrorCode.MALFORMED, str(e))
    except (OSError, socket.timeout) as e:
        logger.info("Connection lost after %d requests: %s", requests, e)
        return SESSION_CLOSED
    except Exception as e:
        logger.exception("Internal error in session")
        return _send_error(wfile, ErrorCode.INTERNAL, "{}: {}".format(type(e).__name__, e))


class _SessionHandler(socketserver.StreamRequestHandler):
    disable_nagle_algorithm = True

    def handle(self):
        logger.debug("Session from %s", self.client_address)
        outcome = handle_session(self.rfile, self.wfile, self.server.service)
        self.server.record_session(outcome)


class SplitServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server, one handler thread per connection sharing one :class:`InferenceService`.

    Examples:
        .. code-block:: python

            server = SplitServer(("127.0.0.1", 0), InferenceService.from_pipeline(pipeline))
            server.start()
            ...
            server.stop()
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, service):
        self.service = service
        self.sessions = collections.Counter()
        self._sessions_lock = threading.Lock()
        self._thread = None
        try:
            super().__init__(parse_address(address), _SessionHandler)
        except OSError as e:
            raise SplitRuntimeError("Cannot bind {}: {}".format(address, e), "bind")
        logger.info("Serving tables %s on %s:%d", service.table_hash.hex(), *self.address)

    @property
    def address(self):
        return self.server_address[:2]

    def record_session(self, outcome):
        with self._sessions_lock:
            self.sessions[outcome] += 1

    def start(self):
        """Serve from a background thread."""
        self._thread = threading.Thread(target=self.serve_forever, name="svbi-server", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback):
        if self._thread is not None:
            self.stop()
        else:
            self.server_close()


def serve(address, service, background=False):
    """Bind ``address`` and serve ``service``; blocks unless ``background``.

    Raises:
        SplitRuntimeError: If the address cannot be bound.
    """
    server = SplitServer(address, service)
    if background:
        return server.start()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("Interrupted; shutting down")
    finally:
        server.server_close()
    return server


class InferResult(object):
    """Prediction and timing breakdown of one client request. Times are in milliseconds.

    Attributes:
        class_index (int): Server prediction.
        logits (numpy.ndarray): Logits returned by the server, possibly empty.
        payload_bytes (int): Size of the coded payload, equal to the request frame body.
        encode_ms (float): Analysis transform and quantization.
        entropy_ms (float): Range coding.
        serialize_ms (float): Payload and frame serialization.
        round_trip_ms (float): Send to response parsed.
        server_ms (float): Server compute reported by the server.
        server_entropy_ms (float): Server entropy decoding reported by the server.
        total_ms (float): Wall clock over the whole request.
    """

    FIELDS = (
        "class_index",
        "payload_bytes",
        "encode_ms",
        "entropy_ms",
        "serialize_ms",
        "round_trip_ms",
        "server_ms",
        "server_entropy_ms",
        "total_ms",
    )

    def __init__(
        self,
        class_index,
        logits,
        payload_bytes,
        encode_ms,
        entropy_ms,
        serialize_ms,
        round_trip_ms,
        server_ms,
        server_entropy_ms,
        total_ms,
    ):
        self.class_index = class_index
        self.logits = logits
        self.payload_bytes = payload_bytes
        self.encode_ms = encode_ms
        self.entropy_ms = entropy_ms
        self.serialize_ms = serialize_ms
        self.round_trip_ms = round_trip_ms
        self.server_ms = server_ms
        self.server_entropy_ms = server_entropy_ms
        self.total_ms = total_ms

    def to_dict(self):
        return collections.OrderedDict((field, getattr(self, field)) for field in self.FIELDS)

    def __repr__(self):
        return "InferResult({})".format(", ".join("{}={}".format(k, v) for k, v in self.to_dict().items()))


def _ms_since(start):
    return (time.perf_counter() - start) * 1e3


class SplitClient(object):
    """Client side of a split deployment: encoder and tables only.

    Args:
        address (str or tuple): Server ``host:port``.
        pipeline (codec.BottleneckPipeline): Pipeline with the encoder and tables loaded.
        timeout (float): Socket timeout in seconds.
    """

    def __init__(self, address, pipeline, timeout=10.0):
        pipeline._require("tables")
        self.address = parse_address(address)
        self.pipeline = pipeline.eval()
        self.timeout = timeout
        self._socket = None
        self._rfile = None

    def connect(self):
        """Open the connection and run the handshake.

        Raises:
            SplitRuntimeError: With phase ``connect`` or ``handshake``.
        """
        try:
            self._socket = socket.create_connection(self.address, timeout=self.timeout)
        except (OSError, socket.timeout) as e:
            host, port = self.address
            raise SplitRuntimeError("Cannot connect to {}:{}: {}".format(host, port, e), "connect")
        self._socket.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._socket.makefile("rb")
        self._exchange(MessageType.HELLO, wire.encode_hello(), MessageType.HELLO, "handshake")
        server_hash = self._exchange(
            MessageType.TABLE_HASH, self.pipeline.tables.hash8, MessageType.TABLE_HASH, "handshake"
        )
        logger.info("Connected to %s:%d with tables %s", self.address[0], self.address[1], server_hash.hex())
        return self

    def _exchange(self, message_type, body, reply_type, phase):
        if self._socket is None:
            raise SplitRuntimeError("Not connected", phase)
        try:
            self._socket.sendall(wire.encode_frame(message_type, body))
        except (OSError, socket.timeout) as e:
            raise SplitRuntimeError("Send failed: {}".format(e), "send" if phase == "infer" else phase)
        try:
            frame = wire.read_frame(self._rfile)
        except (OSError, socket.timeout) as e:
            raise SplitRuntimeError("Receive failed: {}".format(e), "receive" if phase == "infer" else phase)
        except ProtocolError as e:
            raise SplitRuntimeError("Malformed reply: {}".format(e), "receive" if phase == "infer" else phase)
        if frame is None:
            raise SplitRuntimeError("Server closed the connection", "receive" if phase == "infer" else phase)
        received, _, reply = frame
        if received == MessageType.ERROR:
            code, message = wire.decode_error(reply)
            raise SplitRuntimeError(
                "Server error {}: {}".format(getattr(code, "name", code), message),
                "server" if phase == "infer" else phase,
                errors=[code],
            )
        if received != reply_type:
            raise SplitRuntimeError("Expected {}, got {}".format(reply_type.name, received.name), phase)
        return reply

    def encode(self, image):
        """Coded payload of one CHW image."""
        image = np.asarray(image, dtype=np.float32)
        symbols = self.pipeline.latent_symbols(Tensor(image[None]))[0]
        tables = self.pipeline.tables
        code = LatentCode(symbols, tables.z_min, tables.z_max, image.shape[-2:])
        return range_coder.encode(code, tables)

    def infer(self, image):
        """Classify one CHW image on the server.

        Returns:
            InferResult

        Raises:
            SplitRuntimeError: Tagged with the failing phase.
        """
        start = time.perf_counter()
        image = np.asarray(image, dtype=np.float32)
        if image.ndim == 4 and image.shape[0] == 1:
            image = image[0]
        tables = self.pipeline.tables
        try:
            symbols = self.pipeline.latent_symbols(Tensor(image[None]))[0]
            encode_ms = _ms_since(start)
            mark = time.perf_counter()
            payload = range_coder.encode(LatentCode(symbols, tables.z_min, tables.z_max, image.shape[-2:]), tables)
            entropy_ms = _ms_since(mark)
        except ValueError as e:
            raise SplitRuntimeError("Cannot encode image: {}".format(e), "encode")
        mark = time.perf_counter()
        body = payload.to_bytes()
        serialize_ms = _ms_since(mark)
        mark = time.perf_counter()
        reply = self._exchange(MessageType.INFER_REQUEST, body, MessageType.INFER_RESPONSE, "infer")
        round_trip_ms = _ms_since(mark)
        try:
            response = InferResponse.from_bytes(reply)
        except ProtocolError as e:
            raise SplitRuntimeError("Malformed response: {}".format(e), "receive")
        return InferResult(
            class_index=response.class_index,
            logits=response.logits,
            payload_bytes=len(body),
            encode_ms=encode_ms,
            entropy_ms=entropy_ms,
            serialize_ms=serialize_ms,
            round_trip_ms=round_trip_ms,
            server_ms=response.server_us / 1e3,
            server_entropy_ms=response.server_entropy_us / 1e3,
            total_ms=_ms_since(start),
        )

    def close(self):
        if self._rfile is not None:
            self._rfile.close()
            self._rfile = None
        if self._socket is not None:
            self._socket.close()
            self._socket = None

    def __enter__(self):
        return self.connect() if self._socket is None else self

    def __exit__(self, exc_type, exc_value, exc_traceback):
        self.close()


def client_infer(address, pipeline, image, timeout=10.0):
    """One-shot :meth:`SplitClient.infer` on a fresh connection."""
    with SplitClient(address, pipeline, timeout) as client:
        return client.infer(image)


def compare_with_monolithic(client, pipeline, images):
    """Run ``images`` through the split deployment and the monolithic pipeline.

    Returns:
        dict: ``agreement`` (fraction of equal predictions), ``mismatches`` (indices),
        ``payload_bytes_equal`` (wire body size equals the locally coded payload size for every image)
        and the per-image ``results``.
    """
    results, mismatches, sizes_equal = [], [], True
    for index, image in enumerate(images):
        result = client.infer(image)
        monolithic = backbones.predict(pipeline, image)
        if result.class_index != monolithic:
            mismatches.append(index)
        sizes_equal = sizes_equal and result.payload_bytes == len(client.encode(image))
        results.append(result)
    if not results:
        raise ValueError("No images to compare")
    agreement = 1.0 - len(mismatches) / float(len(results))
    logger.info("Split/monolithic agreement %.4f over %d images", agreement, len(results))
    return {"agreement": agreement, "mismatches": mismatches, "payload_bytes_equal": sizes_equal, "results": results}

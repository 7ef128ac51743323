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
"""Factorized prior over the quantized latent and the frozen coder tables derived from it.

Every latent channel owns a monotone scalar CDF built from a stack of affine layers with positive
weights and ``x + tanh(a) * tanh(x)`` nonlinearities, closed by a sigmoid.
"""
import logging
import math
import struct

import numpy as np

from svbi import _utils, nn
from svbi.tensor import ShapeMismatchError, Tensor, as_tensor, no_grad, precision

logger = logging.getLogger(__name__)

TABLE_MAGIC = b"SVBC"
TABLE_VERSION = 1


class TableFormatError(ValueError):
    """Raised when CDF table bytes are malformed or violate the table invariants."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or []


class AlphabetTooLargeError(ValueError):
    """Raised when an observed latent range would need more symbols than the configured alphabet allows."""

    def __init__(self, message, channels=None):
        super().__init__(message)
        self.channels = channels or []


class FactorizedPrior(nn.Module):
    """Learned per-channel density of the latent.

    Args:
        channels (int): Number of latent channels.
        filters (tuple[int]): Hidden widths of the CDF network; ``len(filters) + 1`` layers.
        init_scale (float): Initial spread of the density, in latent units.
        likelihood_bound (float): Floor applied to every likelihood.
    """

    def __init__(self, channels, filters=(3, 3, 3), init_scale=10.0, likelihood_bound=2.0 ** -20):
        super().__init__()
        self.channels = int(channels)
        self.filters = tuple(int(f) for f in filters)
        self.init_scale = float(init_scale)
        self.likelihood_bound = float(likelihood_bound)

        widths = (1,) + self.filters + (1,)
        scale = self.init_scale ** (1.0 / (len(self.filters) + 1))
        self.num_layers = len(widths) - 1
        for i in range(self.num_layers):
            init = math.log(math.expm1(1.0 / scale / widths[i + 1]))
            setattr(self, "matrix{}".format(i), nn.Parameter(np.full((self.channels, widths[i + 1], widths[i]), init)))
            setattr(self, "bias{}".format(i), nn.Parameter(np.zeros((self.channels, widths[i + 1], 1))))
            if i < self.num_layers - 1:
                setattr(self, "factor{}".format(i), nn.Parameter(np.zeros((self.channels, widths[i + 1], 1))))

    def logits_cumulative(self, x):
        """Pre-sigmoid CDF of ``x`` shaped (C, 1, M)."""
        for i in range(self.num_layers):
            matrix = getattr(self, "matrix{}".format(i)).softplus()
            x = matrix @ x + getattr(self, "bias{}".format(i))
            if i < self.num_layers - 1:
                x = x + getattr(self, "factor{}".format(i)).tanh() * x.tanh()
        return x

    def cdf(self, values, channel=None):
        """Evaluate F_c at ``values`` without gradients.

        Args:
            values (array-like): Points, shape (C, M) or (M,) with ``channel`` given.
            channel (int): Evaluate a single channel.

        Returns:
            numpy.ndarray: CDF values of the same shape.
        """
        values = np.asarray(values, dtype=np.float64)
        with no_grad(), precision(np.float64):
            if channel is None:
                logits = self.logits_cumulative(Tensor(values.reshape(self.channels, 1, -1))).data
                return _sigmoid(logits).reshape(values.shape)
            full = np.zeros((self.channels, values.size))
            full[channel] = values.reshape(-1)
            logits = self.logits_cumulative(Tensor(full.reshape(self.channels, 1, -1))).data[channel]
            return _sigmoid(logits).reshape(values.shape)

    def _check_channels(self, z):
        if z.ndim != 4 or z.shape[1] != self.channels:
            raise ShapeMismatchError(
                "Latent {} does not match a prior over {} channels".format(z.shape, self.channels),
                axes=["axis 1 = {}".format(z.shape[1] if z.ndim > 1 else None)],
            )

    def likelihood(self, z):
        """Per-element probability mass of the unit-width bin centred on ``z``.

        Raises:
            ShapeMismatchError: If ``z`` is not (N, C, H, W) with this prior's channel count.
        """
        z = as_tensor(z)
        self._check_channels(z)
        n, c, h, w = z.shape
        values = z.transpose(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits_cumulative(values - 0.5)
        upper = self.logits_cumulative(values + 0.5)
        # evaluate on the side of the median where the sigmoid is not saturated
        sign = np.where(lower.data + upper.data > 0, -1.0, 1.0)
        p = ((upper * sign).sigmoid() - (lower * sign).sigmoid()).abs()
        p = p.maximum(self.likelihood_bound)
        return p.reshape(c, n, h, w).transpose(1, 0, 2, 3)

    def rate_bits(self, z):
        return rate_bits(z, self)

    def pmf(self, channel, z_min, z_max):
        """Probability of every integer in [z_min, z_max], with both tails lumped into the end symbols."""
        edges = np.arange(z_min, z_max, dtype=np.float64) + 0.5
        inner = self.cdf(edges, channel=channel) if edges.size else np.zeros(0)
        pmf = np.diff(np.concatenate([[0.0], inner, [1.0]]))
        return np.clip(pmf, 0.0, None)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def likelihood(z, prior):
    return prior.likelihood(z)


def rate_bits(z, prior):
    """Estimated code length of ``z`` in bits: ``sum(-log2 p)``, differentiable."""
    return -prior.likelihood(z).log().sum() / math.log(2.0)


class LatentStats(object):
    """Per-channel running min and max of quantized latents."""

    def __init__(self, channels):
        self.channels = int(channels)
        self.z_min = np.full(self.channels, np.iinfo(np.int64).max, dtype=np.int64)
        self.z_max = np.full(self.channels, np.iinfo(np.int64).min, dtype=np.int64)
        self.count = 0

    def update(self, symbols):
        """Fold a batch of integer symbols shaped (N, C, H, W) into the statistics."""
        symbols = np.asarray(symbols)
        if symbols.ndim != 4 or symbols.shape[1] != self.channels:
            raise ShapeMismatchError("Symbols {} do not have {} channels".format(symbols.shape, self.channels))
        if symbols.size == 0:
            return self
        per_channel = np.moveaxis(symbols, 1, 0).reshape(self.channels, -1).astype(np.int64)
        self.z_min = np.minimum(self.z_min, per_channel.min(axis=1))
        self.z_max = np.maximum(self.z_max, per_channel.max(axis=1))
        self.count += symbols.shape[0]
        return self

    @property
    def empty(self):
        return self.count == 0

    def to_dict(self):
        return {"z_min": self.z_min.tolist(), "z_max": self.z_max.tolist(), "count": self.count}


def pmf_to_frequencies(pmf, precision=16):
    """Quantize a probability vector to integer frequencies summing to ``2 ** precision``.

    Every symbol keeps at least one count; the rest of the mass is distributed proportionally with
    the leftover counts going to the largest fractional parts.

    Raises:
        AlphabetTooLargeError: If there are more symbols than counts.
    """
    pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
    total = 1 << precision
    length = len(pmf)
    if length == 0 or length > total:
        raise AlphabetTooLargeError("Cannot give {} symbols a count each out of {}".format(length, total))
    mass = pmf.sum()
    pmf = pmf / mass if mass > 0 else np.full(length, 1.0 / length)
    scaled = pmf * (total - length)
    freqs = np.floor(scaled).astype(np.int64) + 1
    remainder = total - int(freqs.sum())
    if remainder < 0:
        raise TableFormatError("Frequency quantization overshot by {}".format(-remainder))
    freqs += remainder // length
    order = np.argsort(-(scaled - np.floor(scaled)), kind="stable")
    freqs[order[: remainder % length]] += 1
    return freqs


class CdfTable(object):
    """Frozen fixed-point cumulative frequency tables, one per latent channel.

    Attributes:
        z_min (numpy.ndarray): First symbol of every channel's support.
        cumulative (list[numpy.ndarray]): Per channel, ``length + 1`` strictly increasing counts from 0 to
            ``2 ** precision``.
        precision (int): Probability precision in bits.
    """

    def __init__(self, z_min, cumulative, precision=16, version=TABLE_VERSION):
        self.z_min = np.asarray(z_min, dtype=np.int64)
        self.cumulative = [np.asarray(c, dtype=np.int64) for c in cumulative]
        self.precision = int(precision)
        self.version = int(version)
        self.validate()
        self._cum_lists = [c.tolist() for c in self.cumulative]

    @property
    def num_channels(self):
        return len(self.cumulative)

    @property
    def lengths(self):
        return np.array([len(c) - 1 for c in self.cumulative], dtype=np.int64)

    @property
    def z_max(self):
        return self.z_min + self.lengths - 1

    def cum_list(self, channel):
        return self._cum_lists[channel]

    def frequencies(self, channel):
        return np.diff(self.cumulative[channel])

    def validate(self):
        """Check the table invariants.

        Raises:
            TableFormatError: Listing every violating channel.
        """
        total = 1 << self.precision
        errors = []
        if len(self.z_min) != len(self.cumulative):
            errors.append("{} lower bounds for {} channels".format(len(self.z_min), len(self.cumulative)))
        for channel, cum in enumerate(self.cumulative):
            if len(cum) < 2:
                errors.append("channel {}: empty support".format(channel))
            elif cum[0] != 0 or cum[-1] != total:
                errors.append("channel {}: bounds {}..{} instead of 0..{}".format(channel, cum[0], cum[-1], total))
            elif np.any(np.diff(cum) < 1):
                errors.append("channel {}: cumulative counts not strictly increasing".format(channel))
        if errors:
            raise TableFormatError("Invalid CDF table: {}".format("; ".join(errors)), errors)

    def contains(self, symbols):
        """Whether every symbol of a (C, H, W) or (N, C, H, W) grid lies in its channel's support."""
        symbols = np.asarray(symbols)
        low, high = self._bounds(symbols)
        return bool(np.all((symbols >= low) & (symbols <= high)))

    def clamp(self, symbols):
        """Clamp symbols into the per-channel support.

        Returns:
            (numpy.ndarray, int): The clamped symbols and how many were changed.
        """
        symbols = np.asarray(symbols, dtype=np.int64)
        low, high = self._bounds(symbols)
        clamped = np.clip(symbols, low, high)
        count = int(np.count_nonzero(clamped != symbols))
        if count:
            logger.warning("Clamped %d out-of-support latent symbols", count)
        return clamped, count

    def _bounds(self, symbols):
        axis = symbols.ndim - 3
        if symbols.ndim not in (3, 4) or symbols.shape[axis] != self.num_channels:
            raise ShapeMismatchError(
                "Symbols {} do not match {} table channels".format(symbols.shape, self.num_channels)
            )
        shape = [1] * symbols.ndim
        shape[axis] = self.num_channels
        return self.z_min.reshape(shape), self.z_max.reshape(shape)

    def code_length_bits(self, symbols):
        """Ideal code length of a (C, H, W) grid under these tables, ``sum(-log2(freq / 2**P))``."""
        symbols = np.asarray(symbols, dtype=np.int64)
        bits = 0.0
        for channel in range(symbols.shape[0]):
            freqs = self.frequencies(channel)
            index = symbols[channel].reshape(-1) - self.z_min[channel]
            bits += float(np.sum(self.precision - np.log2(freqs[index])))
        return bits

    def to_bytes(self):
        """Serialize as ``b"SVBC" | version u32 | channels u32``, then per channel
        ``z_min i32 | length u32 | cum u32 * (length + 1)``."""
        parts = [TABLE_MAGIC, struct.pack("<II", self.version, self.num_channels)]
        for z_min, cum in zip(self.z_min, self.cumulative):
            parts.append(struct.pack("<iI", int(z_min), len(cum) - 1))
            parts.append(np.asarray(cum, dtype="<u4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data):
        """Parse table bytes.

        Raises:
            TableFormatError: On bad magic, unsupported version, truncation or invalid tables.
        """
        data = bytes(data)
        if data[:4] != TABLE_MAGIC:
            raise TableFormatError("Not a CDF table: bad magic {!r}".format(data[:4]))
        if len(data) < 12:
            raise TableFormatError("CDF table truncated in header")
        version, channels = struct.unpack_from("<II", data, 4)
        if version != TABLE_VERSION:
            raise TableFormatError("Unsupported CDF table version {}".format(version))
        offset, z_min, cumulative = 12, [], []
        for channel in range(channels):
            if offset + 8 > len(data):
                raise TableFormatError("CDF table truncated at channel {}".format(channel))
            low, length = struct.unpack_from("<iI", data, offset)
            offset += 8
            end = offset + 4 * (length + 1)
            if end > len(data):
                raise TableFormatError("CDF table truncated in channel {} counts".format(channel))
            z_min.append(low)
            cumulative.append(np.frombuffer(data[offset:end], dtype="<u4").astype(np.int64))
            offset = end
        if offset != len(data):
            raise TableFormatError("{} trailing bytes after CDF table".format(len(data) - offset))
        if not cumulative:
            raise TableFormatError("CDF table has no channels")
        total = int(cumulative[0][-1])
        if total <= 0 or total & (total - 1):
            raise TableFormatError("CDF total {} is not a power of two".format(total))
        return cls(z_min, cumulative, precision=total.bit_length() - 1, version=version)

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as f:
            f.write(data)
        logger.debug("Wrote CDF tables %s (%d channels, digest %s)", path, self.num_channels, self.digest()[:16])
        return path

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def digest(self):
        """Hex SHA-256 of the serialized tables."""
        return _utils.sha256_bytes(self.to_bytes())

    @property
    def hash8(self):
        """First 8 bytes of the table digest, carried by payload headers and the wire handshake."""
        return bytes.fromhex(self.digest())[:8]

    def __eq__(self, other):
        return isinstance(other, CdfTable) and self.to_bytes() == other.to_bytes()

    def __repr__(self):
        return "CdfTable(channels={}, precision={}, digest={})".format(
            self.num_channels, self.precision, self.digest()[:16]
        )


def uniform_table(num_channels, z_min, length, precision=16):
    """Tables with (near) uniform frequencies; used for coder diagnostics."""
    freqs = pmf_to_frequencies(np.full(length, 1.0 / length), precision)
    cum = np.concatenate([[0], np.cumsum(freqs)])
    return CdfTable([z_min] * num_channels, [cum] * num_channels, precision=precision)


def freeze_tables(prior, stats, precision=16, margin=2, max_alphabet=4096):
    """Derive coder tables from a trained prior over the observed latent range.

    Args:
        prior (FactorizedPrior): The trained prior.
        stats (LatentStats): Observed per-channel symbol range.
        precision (int): Probability precision in bits.
        margin (int): Extra symbols added on both sides of the observed range.
        max_alphabet (int): Largest support allowed per channel.

    Returns:
        CdfTable

    Raises:
        AlphabetTooLargeError: If any channel's support exceeds ``max_alphabet`` (or ``2 ** precision``).
        ValueError: If no latent has been observed.
    """
    if stats.empty:
        raise ValueError("Cannot freeze tables without observed latent statistics")
    if stats.channels != prior.channels:
        raise ShapeMismatchError("Statistics over {} channels, prior over {}".format(stats.channels, prior.channels))
    z_min = stats.z_min - int(margin)
    z_max = stats.z_max + int(margin)
    lengths = z_max - z_min + 1
    limit = min(int(max_alphabet), 1 << precision)
    too_large = [int(c) for c in np.nonzero(lengths > limit)[0]]
    if too_large:
        raise AlphabetTooLargeError(
            "Latent support exceeds {} symbols in channels {} (lengths {}); training likely diverged".format(
                limit, too_large, lengths[too_large].tolist()
            ),
            too_large,
        )
    cumulative = []
    for channel in range(prior.channels):
        freqs = pmf_to_frequencies(prior.pmf(channel, int(z_min[channel]), int(z_max[channel])), precision)
        cumulative.append(np.concatenate([[0], np.cumsum(freqs)]))
    tables = CdfTable(z_min, cumulative, precision=precision)
    logger.info(
        "Froze CDF tables: %d channels, support %d..%d symbols, digest %s",
        tables.num_channels,
        int(lengths.min()),
        int(lengths.max()),
        tables.digest()[:16],
    )
    return tables

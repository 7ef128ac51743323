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
"""Additive latency model: transfer time over a channel plus client and server compute."""
import collections
import json
import logging
import os
import time

import numpy as np
import pandas as pd

from svbi import _base_types, _utils, range_coder
from svbi.api_types import ChannelProfile
from svbi.codec import LatentCode
from svbi.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

REPORT_CSV_COLUMNS = ("channel", "transfer_ms", "client_ms", "server_ms", "total_ms")
REPORT_COLUMNS = (
    "config",
    "device",
    "channel",
    "data_rate_bps",
    "payload_bits",
    "payload_mean_bytes",
    "payload_median_bytes",
    "transfer_ms",
    "client_ms",
    "server_ms",
    "total_ms",
    "client_excl_coding_ms",
    "server_excl_coding_ms",
    "total_excl_coding_ms",
)
REFERENCE_FILE = os.path.join(os.path.dirname(__file__), "resources", "reference_latency.json")


def transfer_time_ms(payload_bits, profile):
    """Serialization delay of ``payload_bits`` over ``profile``, in milliseconds.

    Args:
        payload_bits (float): Payload size in bits.
        profile (ChannelProfile or float): Channel, or its data rate in bits per second.

    Raises:
        ValueError: If the rate is not positive or the size is negative.
    """
    rate = float(profile.data_rate if isinstance(profile, ChannelProfile) else profile)
    if rate <= 0:
        raise ValueError("Data rate must be > 0, got {}".format(rate))
    if payload_bits < 0:
        raise ValueError("Payload size must be >= 0, got {}".format(payload_bits))
    return payload_bits / rate * 1e3


class ComputeCosts(_base_types.ConfigObject):
    """Per-request compute in milliseconds; ``client_ms`` and ``server_ms`` include the entropy coding parts.

    Attributes:
        client_ms (float): Client compute: encoder, quantization and entropy coding.
        server_ms (float): Server compute: entropy decoding, decoder and tail.
        client_entropy_ms (float): Entropy coding share of ``client_ms``.
        server_entropy_ms (float): Entropy decoding share of ``server_ms``.
    """

    client_ms = 0.0
    server_ms = 0.0
    client_entropy_ms = 0.0
    server_entropy_ms = 0.0

    @property
    def total_ms(self):
        return float(self.client_ms) + float(self.server_ms)


class PayloadStats(object):
    """Payload size statistics, in bytes."""

    def __init__(self, sizes):
        self.sizes = np.asarray(list(sizes), dtype=np.float64)

    @classmethod
    def from_payloads(cls, payloads):
        """Stats of ``CodedPayload`` objects or ``(sample_id, CodedPayload)`` records."""
        return cls(len(p[1] if isinstance(p, tuple) else p) for p in payloads)

    @property
    def count(self):
        return int(self.sizes.size)

    @property
    def mean_bytes(self):
        return float(self.sizes.mean()) if self.count else 0.0

    @property
    def median_bytes(self):
        return float(np.median(self.sizes)) if self.count else 0.0


class LatencyReport(object):
    """Rows of ``(config, device, channel)`` latencies with additive totals.

    Examples:
        .. code-block:: python

            report = latency_report(PayloadStats(sizes), ComputeCosts(client_ms=3.1, server_ms=12.0), profiles)
            report.save("out/reports", config_hash)
    """

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def add_row(self, config, profile, transfer_ms, costs, device=None, stats=None, payload_bits=None):
        """Append one row; ``total_ms`` is ``transfer_ms + client_ms + server_ms``."""
        row = collections.OrderedDict()
        row["config"] = config
        row["device"] = device
        row["channel"] = profile.name
        row["data_rate_bps"] = float(profile.data_rate)
        row["payload_bits"] = payload_bits
        row["payload_mean_bytes"] = stats.mean_bytes if stats is not None else None
        row["payload_median_bytes"] = stats.median_bytes if stats is not None else None
        row["transfer_ms"] = float(transfer_ms)
        row["client_ms"] = float(costs.client_ms)
        row["server_ms"] = float(costs.server_ms)
        row["total_ms"] = row["transfer_ms"] + row["client_ms"] + row["server_ms"]
        row["client_excl_coding_ms"] = row["client_ms"] - float(costs.client_entropy_ms)
        row["server_excl_coding_ms"] = row["server_ms"] - float(costs.server_entropy_ms)
        row["total_excl_coding_ms"] = row["transfer_ms"] + row["client_excl_coding_ms"] + row["server_excl_coding_ms"]
        self.rows.append(row)
        return row

    def extend(self, other):
        self.rows.extend(other.rows)
        return self

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=list(REPORT_COLUMNS))

    def groups(self):
        """Distinct ``(config, device)`` pairs in row order."""
        return list(collections.OrderedDict(((r["config"], r["device"]), None) for r in self.rows))

    def row(self, config, channel, device=None):
        for row in self.rows:
            if row["config"] == config and row["channel"] == channel and row["device"] == device:
                return row
        raise KeyError("No latency row for config={} channel={} device={}".format(config, channel, device))

    def total_ms(self, config, channel, device=None):
        return self.row(config, channel, device)["total_ms"]

    def speedup(self, baseline, config, channel, device=None):
        """``total(baseline) / total(config)`` on one channel."""
        return self.total_ms(baseline, channel, device) / self.total_ms(config, channel, device)

    def speedups(self, baseline):
        """Speedup of every non-baseline config on every channel."""
        result = []
        for config, device in self.groups():
            if config == baseline:
                continue
            for row in self.rows:
                if row["config"] == config and row["device"] == device:
                    result.append(
                        collections.OrderedDict(
                            [
                                ("config", config),
                                ("device", device),
                                ("channel", row["channel"]),
                                ("baseline", baseline),
                                ("speedup", self.speedup(baseline, config, row["channel"], device)),
                            ]
                        )
                    )
        return result

    def write_csv(self, path, config, device=None):
        """Write the rows of one ``(config, device)`` with the ``channel,transfer_ms,client_ms,server_ms,total_ms``
        header."""
        frame = self.to_frame()
        frame = frame[(frame["config"] == config) & (frame["device"].fillna("") == (device or ""))]
        frame.loc[:, list(REPORT_CSV_COLUMNS)].to_csv(path, index=False, float_format="%.4f")
        return path

    def to_dict(self, config_hash=None, baseline=None):
        document = collections.OrderedDict()
        document["config_hash"] = config_hash
        document["rows"] = [dict(row) for row in self.rows]
        if baseline is not None:
            document["speedups"] = self.speedups(baseline)
        return document

    def save(self, directory, config_hash=None, baseline=None):
        """Write one CSV per ``(config, device)`` and ``latency.json`` with every column.

        Returns:
            list[str]: Written paths.
        """
        _utils.makedirs(directory)
        paths = []
        for config, device in self.groups():
            stem = "latency-{}".format(config) + ("-{}".format(device) if device else "")
            paths.append(self.write_csv(os.path.join(directory, stem + ".csv"), config, device))
        json_path = os.path.join(directory, "latency.json")
        with open(json_path, "w") as f:
            json.dump(self.to_dict(config_hash, baseline), f, indent=2)
            f.write("\n")
        paths.append(json_path)
        logger.info("Wrote latency report with %d rows to %s", len(self.rows), directory)
        return paths


def latency_report(payload_stats, compute_costs, profiles, config="bottleneck", device=None, report=None):
    """Additive latency of the mean payload over every channel.

    Args:
        payload_stats (PayloadStats): Payload sizes; an empty set has zero transfer time.
        compute_costs (ComputeCosts): Client and server compute.
        profiles (list[ChannelProfile]): Channels.
        config (str): Config label of the rows.
        device (str): Optional device label.
        report (LatencyReport): Report to append to.

    Returns:
        LatencyReport
    """
    report = report if report is not None else LatencyReport()
    bits = payload_stats.mean_bytes * 8.0
    for profile in profiles:
        report.add_row(config, profile, transfer_time_ms(bits, profile), compute_costs, device, payload_stats, bits)
    return report


def load_reference(path=None):
    with open(path or REFERENCE_FILE) as f:
        return json.load(f)


def reference_profiles(reference):
    return [ChannelProfile.from_mbps(name, mbps) for name, mbps in reference["channels"].items()]


def reference_report(reference=None):
    """Latency report built verbatim from the published transfer and compute inputs, for every device."""
    reference = reference or load_reference()
    profiles = reference_profiles(reference)
    report = LatencyReport()
    for device in reference["devices"]:
        for entry in reference["configs"]:
            costs = ComputeCosts(client_ms=entry["client_ms"][device], server_ms=entry["server_ms"][device])
            for profile in profiles:
                transfer = entry["transfer_ms"][profile.name]
                bits = transfer / 1e3 * profile.data_rate
                report.add_row(entry["name"], profile, transfer, costs, device, payload_bits=bits)
    return report


def reference_deviation(report, reference=None):
    """Largest absolute difference between ``report`` totals and the published totals, in ms."""
    reference = reference or load_reference()
    deviation = 0.0
    for entry in reference["configs"]:
        for device, totals in entry["published_total_ms"].items():
            for channel, total in totals.items():
                deviation = max(deviation, abs(report.total_ms(entry["name"], channel, device) - total))
    return deviation


def transfer_consistency(reference=None):
    """Relative spread of the payload sizes implied by each config's transfer times across channels.

    Returns:
        dict: Config name to ``(max_bits - min_bits) / min_bits``.
    """
    reference = reference or load_reference()
    result = collections.OrderedDict()
    for entry in reference["configs"]:
        bits = [entry["transfer_ms"][name] * mbps * 1e3 for name, mbps in reference["channels"].items()]
        result[entry["name"]] = (max(bits) - min(bits)) / min(bits)
    return result


def measure_compute_costs(pipeline, teacher, images):
    """Mean per-image compute of the split pipeline and of the raw-input baseline on this machine.

    The bottleneck client runs the encoder and range coder; its server runs the range decoder, decoder and tail.
    The raw baseline server runs the whole teacher and its client does nothing.

    Returns:
        (ComputeCosts, ComputeCosts): Bottleneck and raw-input costs.
    """
    pipeline._require("tables")
    pipeline._require("tail")
    tables = pipeline.tables
    timings = collections.defaultdict(list)
    for image in images:
        x = Tensor(np.asarray(image, dtype=np.float32)[None])
        start = time.perf_counter()
        symbols = pipeline.latent_symbols(x)[0]
        encoded = time.perf_counter()
        payload = range_coder.encode(LatentCode(symbols, tables.z_min, tables.z_max, x.shape[-2:]), tables)
        coded = time.perf_counter()
        code = range_coder.decode(payload.to_bytes(), tables)
        decoded = time.perf_counter()
        pipeline.logits_from_symbols(code.symbols[None])
        served = time.perf_counter()
        with no_grad():
            teacher(x)
        full = time.perf_counter()
        timings["client"].append(coded - start)
        timings["client_entropy"].append(coded - encoded)
        timings["server"].append(served - coded)
        timings["server_entropy"].append(decoded - coded)
        timings["full"].append(full - served)
    if not timings:
        raise ValueError("Cannot measure compute costs without images")

    def mean_ms(key):
        return float(np.mean(timings[key]) * 1e3)

    bottleneck = ComputeCosts(
        client_ms=mean_ms("client"),
        server_ms=mean_ms("server"),
        client_entropy_ms=mean_ms("client_entropy"),
        server_entropy_ms=mean_ms("server_entropy"),
    )
    raw = ComputeCosts(client_ms=0.0, server_ms=mean_ms("full"))
    logger.info("Measured compute over %d images: bottleneck %s, raw %s", len(timings["client"]), bottleneck, raw)
    return bottleneck, raw


def desk_report(payload_sizes, raw_sizes, bottleneck_costs, raw_costs, profiles, config="bottleneck"):
    """Desk-mode report: measured payloads and compute next to the stored-file baseline ``raw``."""
    report = latency_report(PayloadStats(payload_sizes), bottleneck_costs, profiles, config=config)
    return latency_report(PayloadStats(raw_sizes), raw_costs, profiles, config="raw", report=report)

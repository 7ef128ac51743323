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
import json
import os

import pandas as pd
import pytest

from svbi import latency
from svbi.api_types import ChannelProfile, DEFAULT_CHANNEL_PROFILES
from svbi.latency import ComputeCosts, LatencyReport, PayloadStats


def test_transfer_time():
    assert 1000.0 == pytest.approx(latency.transfer_time_ms(12e6, ChannelProfile.from_mbps("4G", 12.0)))
    assert 8.0 == pytest.approx(latency.transfer_time_ms(8000, 1e6))
    assert 0.0 == latency.transfer_time_ms(0, 1e6)


@pytest.mark.parametrize("bits, rate", [(100, 0.0), (100, -1.0), (-1, 1e6)])
def test_transfer_time_errors(bits, rate):
    with pytest.raises(ValueError):
        latency.transfer_time_ms(bits, rate)


def test_payload_stats():
    stats = PayloadStats([10, 30, 20, 100])
    assert 4 == stats.count
    assert 40.0 == stats.mean_bytes
    assert 25.0 == stats.median_bytes
    assert 0.0 == PayloadStats([]).mean_bytes


def test_latency_report_is_additive():
    costs = ComputeCosts(client_ms=3.0, server_ms=10.0, client_entropy_ms=1.0, server_entropy_ms=2.0)
    report = latency.latency_report(PayloadStats([1000, 3000]), costs, DEFAULT_CHANNEL_PROFILES)
    assert ["BLE", "4G", "Wi-Fi", "5G"] == [row["channel"] for row in report.rows]
    row = report.row("bottleneck", "4G")
    assert 16000.0 == row["payload_bits"]
    assert 16000.0 / 12e6 * 1e3 == pytest.approx(row["transfer_ms"])
    assert row["transfer_ms"] + 13.0 == pytest.approx(row["total_ms"])
    assert row["transfer_ms"] + 10.0 == pytest.approx(row["total_excl_coding_ms"])
    assert 13.0 == costs.total_ms


def test_empty_payload_set_has_no_transfer():
    report = latency.latency_report(PayloadStats([]), ComputeCosts(server_ms=5.0), DEFAULT_CHANNEL_PROFILES[:1])
    assert 5.0 == report.total_ms("bottleneck", "BLE")


def test_report_lookup_errors():
    with pytest.raises(KeyError):
        LatencyReport().row("bottleneck", "BLE")


def test_desk_report_speedups():
    profiles = DEFAULT_CHANNEL_PROFILES[:2]
    report = latency.desk_report(
        [500, 700], [6000, 6000], ComputeCosts(client_ms=2.0, server_ms=3.0), ComputeCosts(server_ms=4.0), profiles
    )
    assert [("bottleneck", None), ("raw", None)] == report.groups()
    speedups = report.speedups("raw")
    assert 2 == len(speedups)
    assert all(entry["speedup"] > 1 for entry in speedups)
    expected = report.total_ms("raw", "BLE") / report.total_ms("bottleneck", "BLE")
    assert expected == pytest.approx(report.speedup("raw", "bottleneck", "BLE"))


def test_reference_report_reproduces_published_totals():
    reference = latency.load_reference()
    report = latency.reference_report(reference)
    assert 2 * 3 * 4 == len(report.rows)
    assert latency.reference_deviation(report, reference) <= 0.01
    assert 160.475 == pytest.approx(report.total_ms("bottleneck-0.23", "BLE", "TX2"))
    assert all(entry["speedup"] > 1 for entry in report.speedups(reference["baseline"]))


def test_reference_transfer_times_are_consistent():
    reference = latency.load_reference()
    spread = latency.transfer_consistency(reference)
    assert ["bottleneck-0.23", "bottleneck-lossless", "png"] == list(spread)
    assert all(value < 0.02 for value in spread.values())

    channels = reference["channels"]
    for entry in reference["configs"]:
        ble = entry["transfer_ms"]["BLE"] * channels["BLE"]
        lte = entry["transfer_ms"]["4G"] * channels["4G"]
        assert abs(ble - lte) / lte < 0.001


def test_reference_profiles():
    profiles = latency.reference_profiles(latency.load_reference())
    assert [p.name for p in DEFAULT_CHANNEL_PROFILES] == [p.name for p in profiles]
    assert 0.27e6 == pytest.approx(profiles[0].data_rate)


def test_save_report(tempdir):
    report = latency.reference_report()
    paths = report.save(tempdir, config_hash="abc", baseline="png")
    assert 2 * 3 + 1 == len(paths)

    frame = pd.read_csv(os.path.join(tempdir, "latency-png-TX2.csv"))
    assert list(latency.REPORT_CSV_COLUMNS) == list(frame.columns)
    assert ["BLE", "4G", "Wi-Fi", "5G"] == frame["channel"].tolist()
    assert 2545.725 == pytest.approx(frame["total_ms"].iloc[0], abs=1e-4)

    with open(os.path.join(tempdir, "latency.json")) as f:
        document = json.load(f)
    assert "abc" == document["config_hash"]
    assert 24 == len(document["rows"])
    assert 2 * 2 * 4 == len(document["speedups"])


def test_to_frame_columns():
    frame = latency.reference_report().to_frame()
    assert list(latency.REPORT_COLUMNS) == list(frame.columns)


def test_measure_compute_costs(tiny_pipeline, tiny_teacher, tiny_dataset):
    bottleneck, raw = latency.measure_compute_costs(tiny_pipeline, tiny_teacher, tiny_dataset.val.images[:2])
    assert bottleneck.client_ms >= bottleneck.client_entropy_ms > 0
    assert bottleneck.server_ms >= bottleneck.server_entropy_ms > 0
    assert 0.0 == raw.client_ms
    assert raw.server_ms > 0
    with pytest.raises(ValueError):
        latency.measure_compute_costs(tiny_pipeline, tiny_teacher, [])

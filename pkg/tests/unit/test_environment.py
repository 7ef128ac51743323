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
from unittest.mock import patch

from svbi import _environment


def test_no_environment():
    with patch.dict(os.environ, {}, clear=True):
        assert _environment.RunEnvironment.load() is None


def test_output_dir_environment():
    with patch.dict(os.environ, {_environment.OUTPUT_DIR_ENV: "/tmp/svbi-out"}, clear=True):
        environment = _environment.RunEnvironment.load()

    assert "/tmp/svbi-out" == environment.output_dir
    assert environment.metrics_dir is None
    assert "/tmp/svbi-out" == environment.resolve_output_dir("out")
    assert "runs" == environment.resolve_metrics_dir("runs")


def test_metrics_dir_environment():
    with patch.dict(os.environ, {_environment.METRICS_DIR_ENV: "/tmp/metrics"}, clear=True):
        environment = _environment.RunEnvironment.load()

    assert "/tmp/metrics" == environment.resolve_metrics_dir("runs")
    assert "out" == environment.resolve_output_dir("out")


def test_empty_values_are_ignored():
    with patch.dict(os.environ, {_environment.OUTPUT_DIR_ENV: "", _environment.METRICS_DIR_ENV: ""}, clear=True):
        assert _environment.RunEnvironment.load() is None

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

OUTPUT_DIR_ENV = "SVBI_OUTPUT_DIR"
METRICS_DIR_ENV = "SVBI_METRICS_DIRECTORY"


class RunEnvironment(object):
    """Retrieves output locations overridden through the environment.

    Attributes:
        output_dir (str): Root of every artifact written by a command, or None.
        metrics_dir (str): Directory for run metric logs, or None.
    """

    output_dir = None
    metrics_dir = None

    def __init__(self, output_dir=None, metrics_dir=None):
        self.output_dir = output_dir
        self.metrics_dir = metrics_dir

    @classmethod
    def load(cls, output_dir_env=OUTPUT_DIR_ENV, metrics_dir_env=METRICS_DIR_ENV):
        """Loads output locations from the environment.

        Args:
            output_dir_env (str): The environment key for the output directory.
            metrics_dir_env (str): The environment key for the metrics directory.

        Returns:
            RunEnvironment: Locations loaded from the environment. None if neither key is set.
        """
        output_dir = os.environ.get(output_dir_env) or None
        metrics_dir = os.environ.get(metrics_dir_env) or None
        if output_dir is None and metrics_dir is None:
            return None
        return RunEnvironment(output_dir, metrics_dir)

    def resolve_output_dir(self, default):
        return self.output_dir or default

    def resolve_metrics_dir(self, default):
        return self.metrics_dir or default

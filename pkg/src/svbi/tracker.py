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
"""Contains the run Tracker class."""
import collections
import datetime
import json
import logging
import mimetypes
import os
import urllib.parse
import urllib.request
from math import isinf, isnan
from numbers import Number
from os.path import join

import dateutil.tz

from svbi import _environment, _utils, metrics
from svbi._utils import get_module

logger = logging.getLogger(__name__)

RUN_RECORD_FILE = "run.json"
METRICS_FILE = "metrics.jsonl"

STATUS_IN_PROGRESS = "InProgress"
STATUS_COMPLETED = "Completed"
STATUS_FAILED = "Failed"


class Tracker(object):
    """Records the provenance of one command run in a run directory.

    Trackers are Python context managers. Exceptions thrown within the ``with`` block mark the run as failed.
    Start and end times are set by the ``with`` statement and ``run.json`` is written at the end of the block
    with the parameters, the input and output artifacts (path and SHA-256), the experiment config, its hash
    and the seed.

    Metrics logged with :meth:`log_metric` go to ``metrics.jsonl`` in the run directory, or in
    ``SVBI_METRICS_DIRECTORY`` when set.

    Parameters:
        run_directory (str): Where ``run.json``, tables and metrics are written.
        command (str): The command being tracked.
    """

    def __init__(self, run_directory, command, config=None, seed=None, metrics_writer=None):
        self.run_directory = _utils.makedirs(run_directory)
        self.command = command
        self.config = config
        self.seed = seed
        self.parameters = collections.OrderedDict()
        self.input_artifacts = collections.OrderedDict()
        self.output_artifacts = collections.OrderedDict()
        self.status = {"primary_status": STATUS_IN_PROGRESS}
        self.start_time = None
        self.end_time = None
        self._metrics_writer = metrics_writer
        self._closed = False

    @classmethod
    def create(cls, output_dir, command, config=None, seed=None):
        """Create a tracker for a new run under ``<output_dir>/runs/<command>-<suffix>``.

        Examples
            .. code-block:: python

                from svbi import tracker

                with tracker.Tracker.create("out", "sweep", config=experiment, seed=0) as my_tracker:
                    my_tracker.log_parameter("objective", "sg-hd")

        Args:
            output_dir (str): The output root.
            command (str): Command name, used as the run directory prefix.
            config (api_types.ExperimentConfig): The experiment config, serialized into ``run.json``.
            seed (int): The run seed.

        Returns:
            Tracker: The tracker for the new run.
        """
        run_directory = join(output_dir, "runs", _utils.name(command))
        env = _environment.RunEnvironment.load()
        metrics_dir = env.resolve_metrics_dir(run_directory) if env else run_directory
        writer = metrics.TrainingLogWriter(join(_utils.makedirs(metrics_dir), METRICS_FILE))
        return cls(run_directory, command, config=config, seed=seed, metrics_writer=writer)

    @property
    def config_hash(self):
        return self.config.config_hash() if self.config is not None else None

    def log_parameter(self, name, value):
        """Record a single parameter value for this run.

        Overwrites any previous value recorded for the specified parameter name.

        Args:
            name (str): The name of the parameter
            value (str or numbers.Number): The value of the parameter
        """
        if self._is_input_valid("parameter", name, value):
            self.parameters[name] = value

    def log_parameters(self, parameters):
        """Record a collection of parameter values for this run.

        Examples
            .. code-block:: python

                my_tracker.log_parameters({"beta": 0.02, "objective": "hd", "seed": 0})

        Args:
            parameters (dict[str, str or numbers.Number]): The parameters to record.
        """
        filtered_parameters = {
            key: value for (key, value) in parameters.items() if self._is_input_valid("parameter", key, value)
        }
        self.parameters.update(filtered_parameters)

    def log_input(self, name, value, media_type=None):
        """Record a single input artifact for this run, with the SHA-256 of its contents if it is a file.

        Args:
            name (str): The name of the input value.
            value (str): The path or value.
            media_type (str, optional): The MediaType (MIME type) of the value
        """
        self.input_artifacts[name] = _artifact(value, media_type)

    def log_output(self, name, value, media_type=None):
        """Record a single output artifact for this run, with the SHA-256 of its contents if it is a file.

        Args:
            name (str): The name of the output value.
            value (str): The path or value.
            media_type (str, optional): The MediaType (MIME type) of the value.
        """
        self.output_artifacts[name] = _artifact(value, media_type)

    def log_artifacts(self, directory, media_type=None):
        """Record every file under ``directory`` as an output artifact named after the file.

        Args:
            directory (str): The directory of the local files.
            media_type (str, optional): The MediaType (MIME type) of the files.
        """
        for dir_file in sorted(os.listdir(directory)):
            file_path = join(directory, dir_file)
            if os.path.isfile(file_path):
                self.log_artifact(file_path=file_path, name=dir_file, media_type=media_type)

    def log_artifact(self, file_path, name=None, media_type=None):
        """Record a local file as an output artifact.

        Raises:
            ValueError: If the file does not exist.
        """
        self.log_output_artifact(file_path, name, media_type)

    def log_output_artifact(self, file_path, name=None, media_type=None):
        _require_file(file_path)
        self.log_output(name or _resolve_artifact_name(file_path), file_path, media_type)

    def log_input_artifact(self, file_path, name=None, media_type=None):
        _require_file(file_path)
        self.log_input(name or _resolve_artifact_name(file_path), file_path, media_type)

    def log_metric(self, metric_name, value, timestamp=None, iteration_number=None):
        """Record a custom scalar metric value for this run.

        Examples
            .. code-block:: python

                for epoch in range(epochs):
                    my_tracker.log_metric(metric_name='val_top1', value=0.9, iteration_number=epoch)

        Args:
            metric_name (str): The name of the metric.
            value (number): The value of the metric.
            timestamp (datetime.datetime|number, optional): The timestamp of the metric.
            iteration_number (number, optional): The integer iteration number of the metric value.
        """
        if not self._is_input_valid("metric", metric_name, value):
            return
        if self._metrics_writer is None:
            logger.debug("No metrics writer; dropping metric %s", metric_name)
            return
        self._metrics_writer.log_record(
            timestamp=timestamp, metric_name=metric_name, value=value, iteration_number=iteration_number
        )

    def log_table(self, title=None, values=None, data_frame=None, output_artifact=True):
        """Persist a table as ``<title>.csv`` and ``<title>.json`` in the run directory.

        Examples
            .. code-block:: python

                my_tracker.log_table("rd", {"beta": [0.0, 0.02], "bpp": [1.1, 0.4]})
                # or log a data frame
                my_tracker.log_table("rd", data_frame=pd.DataFrame(rows, columns=RD_CSV_COLUMNS))

        Args:
            title (str, optional): Title of the table, used as the file name.
            values (dict, optional): Column name to list of values.
            data_frame (DataFrame, optional): Pandas dataframe alternative to values.
            output_artifact (bool): Record the table as an output (default) or input artifact.

        Returns:
            str: Path of the CSV file.

        Raises:
            ValueError: If values or data_frame are invalid.
        """
        if values is None and data_frame is None:
            raise ValueError("Either values or data_frame must be supplied.")
        if values is not None and data_frame is not None:
            raise ValueError("Only one of values or data_frame may be supplied.")
        pd = get_module("pandas")
        if values is not None:
            for key in values:
                if not isinstance(values[key], list):
                    raise ValueError(
                        'Table values should be list. i.e. {"x": [1,2,3]}, instead was ' + str(type(values[key]))
                    )
            data_frame = pd.DataFrame(values)
        title = title or _utils.name("table")
        csv_path = join(self.run_directory, title + ".csv")
        data_frame.to_csv(csv_path, index=False)
        data = {"type": "Table", "version": 0, "title": title, "data": json.loads(json.dumps(data_frame.to_dict(orient="list")))}
        self._log_graph_artifact(title, data, output_artifact)
        return csv_path

    def log_confusion_matrix(self, y_true, y_pred, title=None, output_artifact=True):
        """Persist a confusion matrix computed with scikit-learn.

        Examples
            .. code-block:: python

                my_tracker.log_confusion_matrix(dataset.val.labels, predictions, title="val-confusion")

        Args:
            y_true (array): True labels.
            y_pred (array): Predicted labels.
            title (str, optional): Title of the matrix.
            output_artifact (bool): Record as an output (default) or input artifact.

        Returns:
            list[list[int]]: The matrix.

        Raises:
            ValueError: If length mismatch between y_true and y_pred.
        """
        if len(y_true) != len(y_pred):
            raise ValueError("Length mismatch between actual labels and predicted labels.")
        get_module("sklearn")
        from sklearn.metrics import confusion_matrix

        matrix = confusion_matrix(y_true, y_pred).tolist()
        data = {"type": "ConfusionMatrix", "version": 0, "title": title, "confusionMatrix": matrix}
        self._log_graph_artifact(title or _utils.name("confusion-matrix"), data, output_artifact)
        return matrix

    def _log_graph_artifact(self, name, data, output_artifact):
        path = join(self.run_directory, name + ".json")
        with open(path, "w") as f:
            json.dump(data, f, indent=2)
        if output_artifact:
            self.log_output(name, path, "application/json")
        else:
            self.log_input(name, path, "application/json")

    def _is_input_valid(self, input_type, field_name, field_value):
        if isinstance(field_value, Number) and (isnan(field_value) or isinf(field_value)):
            logger.warning("Failed to log %s %s. Received invalid value: %s.", input_type, field_name, field_value)
            return False
        return True

    def __enter__(self):
        """Updates the start time of the tracked run.

        Returns:
            obj: self.
        """
        self.start_time = datetime.datetime.now(dateutil.tz.tzlocal())
        self.status = {"primary_status": STATUS_IN_PROGRESS}
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback):
        """Updates the end time and status of the tracked run.

        exc_value (str): The exception value.
        exc_traceback (str): The stack trace of the exception.
        """
        self.end_time = datetime.datetime.now(dateutil.tz.tzlocal())
        if exc_value:
            self.status = {"primary_status": STATUS_FAILED, "message": str(exc_value)}
        else:
            self.status = {"primary_status": STATUS_COMPLETED}
        self.close()

    def to_record(self):
        record = collections.OrderedDict()
        record["command"] = self.command
        record["status"] = self.status
        record["start_time"] = self.start_time.isoformat() if self.start_time else None
        record["end_time"] = self.end_time.isoformat() if self.end_time else None
        record["seed"] = self.seed
        record["config_hash"] = self.config_hash
        record["config"] = type(self.config).to_dict(self.config) if self.config is not None else None
        record["parameters"] = dict(self.parameters)
        record["input_artifacts"] = dict(self.input_artifacts)
        record["output_artifacts"] = dict(self.output_artifacts)
        return record

    def close(self):
        """Close this tracker and write ``run.json``."""
        if self._closed:
            return
        try:
            with open(join(self.run_directory, RUN_RECORD_FILE), "w") as f:
                json.dump(self.to_record(), f, indent=2, default=str)
                f.write("\n")
        finally:
            if self._metrics_writer:
                self._metrics_writer.close()
            self._closed = True


def _artifact(value, media_type=None):
    artifact = collections.OrderedDict([("value", value), ("media_type", media_type)])
    if isinstance(value, str) and os.path.isfile(value):
        artifact["media_type"] = media_type or _guess_media_type(value)
        artifact["sha256"] = _utils.sha256_file(value)
    return artifact


def _require_file(file_path):
    if not os.path.isfile(os.path.expanduser(file_path)):
        raise ValueError("{} does not exist or is not a file. Please supply a file path.".format(file_path))


def _resolve_artifact_name(file_path):
    _, filename = os.path.split(file_path)
    if filename:
        return filename
    else:
        return _utils.name("artifact")


def _guess_media_type(file_path):
    """Guesses the media type of a file based on its file name.

    Args:
        file_path (str): Path to file.

    Returns:
        str: The guessed media type.
    """
    file_url = urllib.parse.urljoin("file:", urllib.request.pathname2url(os.path.abspath(file_path)))
    guessed_media_type, _ = mimetypes.guess_type(file_url, strict=False)
    return guessed_media_type

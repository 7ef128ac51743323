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
"""Training log module"""
import datetime
import json
import logging
import numbers
import os

import dateutil.tz

from svbi import _environment

METRICS_DIR = os.environ.get(_environment.METRICS_DIR_ENV, ".")

logger = logging.getLogger(__name__)


class TrainingLogWriter(object):
    """Writes newline-delimited JSON training records to file.

    Records are written in the order logged with sorted keys, so two seeded runs produce byte-identical logs
    as long as no timestamps are attached. An existing file is appended to unless ``overwrite`` is set.
    """

    def __init__(self, log_file_path=None, overwrite=False):
        self._log_file_path = log_file_path
        self._mode = "w" if overwrite else "a"
        self._file = None
        self._closed = False
        self.records_written = 0

    def log_record(self, timestamp=None, **fields):
        """Write a record to file.

        Args:
            timestamp (datetime or float): Optional timestamp, normalized to UTC epoch seconds.
            **fields: Record values, e.g. ``epoch``, ``step``, ``distortion``, ``rate_bpp``, ``loss``, ``lr``.

        Raises:
            TrainingLogWriterException: If the writer is closed.
            AttributeError: If file has been initialized and the writer hasn't been closed.
        """
        record = _LogRecord(fields, timestamp=timestamp)
        try:
            logger.debug("Writing record: %s", record)
            self._file.write(json.dumps(record.to_record(), sort_keys=True))
            self._file.write("\n")
        except AttributeError:
            if self._closed:
                raise TrainingLogWriterException("log_record called on a closed writer")
            elif not self._file:
                self._file = open(self._get_log_file_path(), self._mode, buffering=1)
                self._file.write(json.dumps(record.to_record(), sort_keys=True))
                self._file.write("\n")
            else:
                raise
        self.records_written += 1

    def close(self):
        """Closes the log file."""
        if not self._closed and self._file:
            self._file.close()
            self._file = None  # invalidate reference, causing subsequent log_record to fail.
        self._closed = True

    def __enter__(self):
        """Return self"""
        return self

    def __exit__(self, type, value, traceback):
        """Execute self.close()"""
        self.close()

    def __del__(self):
        """Execute self.close()"""
        self.close()

    def _get_log_file_path(self):
        pid_filename = "{}.jsonl".format(str(os.getpid()))
        log_file_path = self._log_file_path or os.path.join(METRICS_DIR, pid_filename)
        logger.debug("log_file_path=" + log_file_path)
        return log_file_path


class TrainingLogWriterException(Exception):
    """TrainingLogWriterException"""

    def __init__(self, message, errors=None):
        super().__init__(message)
        if errors:
            self.errors = errors


class _LogRecord(object):
    def __init__(self, fields, timestamp=None):
        self.fields = {}
        for key, value in fields.items():
            if isinstance(value, bool) or value is None or isinstance(value, str):
                self.fields[key] = value
            elif isinstance(value, numbers.Integral):
                self.fields[key] = int(value)
            else:
                self.fields[key] = float(value)
        if timestamp is not None:
            self.fields["timestamp"] = _normalize_timestamp(timestamp)

    def to_record(self):
        return self.fields

    def __str__(self):
        return repr(self)

    def __repr__(self):
        return "{}({})".format(
            type(self).__name__,
            ",".join(["{}={}".format(k, repr(v)) for k, v in sorted(self.fields.items())]),
        )


def _normalize_timestamp(timestamp):
    if isinstance(timestamp, datetime.datetime):
        # a naive datetime is assumed to be in the local timezone
        if not timestamp.tzinfo:
            timestamp = timestamp.replace(tzinfo=dateutil.tz.tzlocal())
        timestamp = (timestamp - timestamp.utcoffset()).replace(tzinfo=datetime.timezone.utc)
        return timestamp.timestamp()
    return float(timestamp)


def read_log(path):
    """Load the records of a training log."""
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]

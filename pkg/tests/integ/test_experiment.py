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

from svbi import cli, experiment, training
from tests import helpers


def _run(capsys, *argv):
    assert 0 == cli.main(list(argv)), capsys.readouterr().err
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]
    return lines[-1]


@pytest.fixture
def desk(tempdir):
    dataset_path = helpers.write_prepared_dataset(os.path.join(tempdir, "data"))
    config = helpers.tiny_experiment(dataset_path=dataset_path, output_dir=os.path.join(tempdir, "out"))
    config_path = os.path.join(tempdir, "experiment.json")
    config.to_json(config_path)
    return config, config_path


@pytest.mark.slow
def test_desk_workflow(desk, capsys):
    config, config_path = desk
    base = ["--config", config_path]

    pretrained = _run(capsys, *base, "pretrain")
    assert "depths-1-1-1" == pretrained["variant"]
    assert "depths-1-1-2" == _run(capsys, *base, "pretrain", "--variant", "tail")["variant"]

    maps = _run(capsys, *base, "saliency")
    assert 16 == maps["maps"]
    assert [4, 4] == maps["shape"]

    for objective in ("hd", "sg-hd"):
        swept = _run(capsys, *base, "sweep", "--objective", objective)
        assert [0.0, 0.5] == [point["beta"] for point in swept["points"]]

    summary = _run(capsys, *base, "eval-rd")
    assert {"hd", "sg-hd", "saliency_direction"} <= set(summary)
    frame = pd.read_csv(os.path.join(config.output_dir, "reports", "rd.csv"))
    assert ["beta", "bpp", "predictive_loss", "objective", "seed"] == list(frame.columns)
    assert 4 == len(frame)

    check = _run(capsys, *base, "lossless-check", "--objective", "hd", "--beta", "0.0", "--seeds", "1,2")
    assert [1, 2] == check["seeds"]
    assert max(point["predictive_loss"] for point in check["points"]) == check["worst_predictive_loss"]
    assert os.path.exists(os.path.join(config.output_dir, "reports", "lossless-hd-beta-0.0.json"))

    tuned = _run(capsys, *base, "finetune", "--beta", "0.5")
    assert tuned["compression_unchanged"]

    latency = _run(capsys, *base, "eval-latency", "--beta", "0.5", "--count", "2")
    assert len(config.channel_profiles) == len(latency["summary"]["speedups"])

    report = _run(capsys, *base, "overhead")
    assert report["decoder_overhead_pct"] > 0

    runs = os.listdir(os.path.join(config.output_dir, "runs"))
    assert 9 == len(runs)


@pytest.mark.slow
def test_training_is_reproducible(desk, tempdir, capsys):
    config, config_path = desk
    _run(capsys, "--config", config_path, "pretrain")
    payloads = []
    for output in ("first", "second"):
        output_dir = os.path.join(tempdir, output)
        teacher_dir = experiment.ExperimentPaths(output_dir).teacher_dir(config.backbone)
        os.makedirs(teacher_dir)
        source = experiment.ExperimentPaths(config.output_dir).teacher_checkpoint(config.backbone)
        with open(source, "rb") as src, open(os.path.join(teacher_dir, experiment.TEACHER_CHECKPOINT), "wb") as dst:
            dst.write(src.read())
        _run(capsys, "--config", config_path, "--output-dir", output_dir, "train", "--beta", "0.5")
        point_dir = experiment.ExperimentPaths(output_dir).point_dir("hd", 0.5, 0)
        with open(os.path.join(point_dir, training.PAYLOADS_FILE), "rb") as f:
            payloads.append(f.read())
    assert payloads[0] == payloads[1]

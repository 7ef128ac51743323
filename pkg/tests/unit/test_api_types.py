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
import pytest

from svbi import api_types
from svbi.api_types import BackboneSpec, ChannelProfile, EncoderConfig, ExperimentConfig, InvalidConfigError, RDPoint


@pytest.mark.parametrize("tag", ["hd", "HD", "sg-hd", "SG_HD", " direct-ce ", "direct_kd"])
def test_objective_parse(tag):
    assert api_types.Objective.parse(tag).value == tag.strip().lower().replace("_", "-")


def test_objective_parse_unknown():
    with pytest.raises(InvalidConfigError):
        api_types.Objective.parse("mse")


def test_backbone_spec_head_geometry():
    spec = BackboneSpec(stage_depths=(2, 2, 2), stage_channels=(32, 64, 128), head_split_stage=2)
    assert 4 == spec.head_stride
    assert 64 == spec.head_channels
    assert (64, 56, 56) == spec.head_output_shape(224, 224)


@pytest.mark.parametrize(
    "changes",
    [
        dict(stage_depths=(2, 2)),
        dict(stage_depths=(0, 2, 2)),
        dict(head_split_stage=0),
        dict(head_split_stage=3),
        dict(num_classes=0),
    ],
)
def test_backbone_spec_invalid(changes):
    with pytest.raises(InvalidConfigError) as error:
        BackboneSpec().replace(**changes).validate()
    assert error.value.errors


def test_encoder_config_total_stride():
    assert 4 == EncoderConfig().total_stride
    assert 8 == api_types.ENCODER_PROFILES["full-scale"].total_stride


def test_encoder_config_invalid():
    with pytest.raises(InvalidConfigError):
        EncoderConfig(block_strides=(2, 3, 1)).validate()
    with pytest.raises(InvalidConfigError):
        EncoderConfig(block_strides=(2, 2)).validate()


def test_train_config_invalid():
    with pytest.raises(InvalidConfigError):
        api_types.TrainConfig(beta=-1.0).validate()
    with pytest.raises(InvalidConfigError):
        api_types.TrainConfig(kd_temperature=0).validate()


def test_channel_profile_from_mbps():
    profile = ChannelProfile.from_mbps("4G", 12.0)
    assert 12e6 == profile.data_rate
    assert profile is profile.validate()


def test_channel_profile_zero_rate():
    with pytest.raises(InvalidConfigError):
        ChannelProfile(name="dead", data_rate=0).validate()


def test_default_channel_profiles():
    assert ["BLE", "4G", "Wi-Fi", "5G"] == [p.name for p in api_types.DEFAULT_CHANNEL_PROFILES]
    assert 270000.0 == pytest.approx(api_types.DEFAULT_CHANNEL_PROFILES[0].data_rate)


def test_rd_point_lossless():
    point = RDPoint(beta=0.02, bpp=0.3, predictive_loss=0.4, objective="hd", seed=1)
    assert point.is_lossless(0.4)
    assert not point.is_lossless(0.3)
    assert [0.02, 0.3, 0.4, "hd", 1] == point.as_row()


def test_experiment_config_from_dict():
    config = ExperimentConfig.from_dict(
        {
            "backbone": {"stage_depths": [2, 2, 4]},
            "channel_profiles": [{"name": "BLE", "data_rate": 270000.0}],
            "beta_grid": [0.0, 0.1],
        }
    )
    assert [2, 2, 4] == config.backbone.stage_depths
    assert "BLE" == config.channel_profiles[0].name
    assert config is config.validate()


def test_experiment_config_round_trip():
    config = ExperimentConfig(seed=3)
    assert config == ExperimentConfig.from_dict(ExperimentConfig.to_dict(config))
    assert config.config_hash() == ExperimentConfig.from_dict(ExperimentConfig.to_dict(config)).config_hash()


def test_experiment_config_empty_grid():
    with pytest.raises(InvalidConfigError):
        ExperimentConfig(beta_grid=()).validate()

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
"""Configuration and report value types."""
import enum

from svbi import _base_types


class InvalidConfigError(ValueError):
    """Raised when a configuration violates its invariants."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or []


class Objective(enum.Enum):
    """Bottleneck training objectives."""

    HD = "hd"
    SG_HD = "sg-hd"
    DIRECT_CE = "direct-ce"
    DIRECT_KD = "direct-kd"

    @classmethod
    def parse(cls, value):
        """Parse an objective tag such as ``"sg-hd"`` or ``"SG_HD"``."""
        if isinstance(value, cls):
            return value
        normalized = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == normalized:
                return member
        raise InvalidConfigError("Unknown objective {!r}, expected one of {}".format(value, [m.value for m in cls]))


class BackboneSpec(_base_types.ConfigObject):
    """Residual teacher classifier layout.

    Attributes:
        stage_depths (list[int]): Residual blocks per stage.
        stage_channels (list[int]): Output channels per stage.
        num_classes (int): Classifier outputs.
        head_split_stage (int): Stages strictly before this index form the head.
        input_channels (int): Image channels.
    """

    stage_depths = (2, 2, 2)
    stage_channels = (32, 64, 128)
    num_classes = 10
    head_split_stage = 2
    input_channels = 3

    def validate(self):
        """Check the layout constraints.

        Raises:
            InvalidConfigError: If any invariant is violated.
        """
        errors = []
        if len(self.stage_depths) != len(self.stage_channels):
            errors.append("stage_depths and stage_channels differ in length")
        if any(int(d) < 1 for d in self.stage_depths):
            errors.append("all stage depths must be >= 1")
        if any(int(c) < 1 for c in self.stage_channels):
            errors.append("all stage channels must be >= 1")
        if not 1 <= int(self.head_split_stage) < len(self.stage_depths):
            errors.append(
                "head_split_stage must be in [1, {}), got {}".format(len(self.stage_depths), self.head_split_stage)
            )
        if int(self.num_classes) < 1:
            errors.append("num_classes must be >= 1")
        if errors:
            raise InvalidConfigError("Invalid backbone spec: " + "; ".join(errors), errors)
        return self

    @property
    def head_stride(self):
        """Total stride of the head (every stage halves the resolution)."""
        return 2 ** int(self.head_split_stage)

    @property
    def head_channels(self):
        """Channels of the head output."""
        return int(self.stage_channels[int(self.head_split_stage) - 1])

    def head_output_shape(self, height, width):
        """Head output shape (C, H, W) for an input of ``height`` x ``width``."""
        return (self.head_channels, height // self.head_stride, width // self.head_stride)


class EncoderConfig(_base_types.ConfigObject):
    """Analysis transform layout: three residual blocks of two stacked 3x3 convolutions.

    Attributes:
        latent_channels (int): Channels of the latent z.
        block_channels (list[int]): Output channels of the first two blocks.
        block_strides (list[int]): Stride of each of the three blocks.
        max_parameters (int): Upper bound on the encoder parameter count.
    """

    latent_channels = 48
    block_channels = (32, 48)
    block_strides = (2, 2, 1)
    max_parameters = 150000

    @property
    def total_stride(self):
        stride = 1
        for s in self.block_strides:
            stride *= int(s)
        return stride

    def validate(self):
        errors = []
        if len(self.block_strides) != 3:
            errors.append("exactly 3 encoder blocks are required, got {}".format(len(self.block_strides)))
        if len(self.block_channels) != 2:
            errors.append("block_channels lists the widths of the first two blocks")
        if any(int(s) not in (1, 2) for s in self.block_strides):
            errors.append("block strides must be 1 or 2")
        if int(self.latent_channels) < 1:
            errors.append("latent_channels must be >= 1")
        if errors:
            raise InvalidConfigError("Invalid encoder config: " + "; ".join(errors), errors)
        return self


ENCODER_PROFILES = {
    "desk": EncoderConfig(),
    "full-scale": EncoderConfig(latent_channels=48, block_channels=(48, 64), block_strides=(2, 2, 2)),
}


class DecoderConfig(_base_types.ConfigObject):
    """Synthesis transform layout: restoration blocks, optional upsampling, transformation blocks.

    Attributes:
        hidden_channels (int): Width of the restoration blocks.
        restoration_blocks (int): Residual restoration blocks per resolution level.
        transformation_blocks (int): Residual blocks mapping to the head output channels.
    """

    hidden_channels = 64
    restoration_blocks = 1
    transformation_blocks = 1


class EntropyConfig(_base_types.ConfigObject):
    """Factorized prior and coder table settings."""

    filters = (3, 3, 3)
    init_scale = 10.0
    likelihood_bound = 2.0 ** -20
    precision = 16
    max_alphabet = 4096
    support_margin = 2


class PretrainConfig(_base_types.ConfigObject):
    """Teacher pretraining recipe."""

    epochs = 30
    batch_size = 16
    lr_start = 1e-3
    lr_end = 1e-6
    flip = True


class TrainConfig(_base_types.ConfigObject):
    """Bottleneck training recipe.

    Attributes:
        objective (str): One of ``hd``, ``sg-hd``, ``direct-ce``, ``direct-kd``.
        beta (float): Rate weight; 0 with ``hd`` is naive bottleneck injection.
        epochs (int): Training epochs.
        batch_size (int): Samples per step.
        lr_start (float): Initial learning rate.
        lr_end (float): Final learning rate of the exponential schedule.
        seed (int): Run seed.
        grad_clip (float): Global gradient-norm clip.
        kd_temperature (float): Softening temperature of the KD objective.
    """

    objective = "hd"
    beta = 0.0
    epochs = 15
    batch_size = 16
    lr_start = 1e-3
    lr_end = 1e-6
    seed = 0
    grad_clip = 1.0
    kd_temperature = 1.0

    def validate(self):
        errors = []
        Objective.parse(self.objective)
        if float(self.beta) < 0:
            errors.append("beta must be >= 0")
        if int(self.epochs) < 1:
            errors.append("epochs must be >= 1")
        if int(self.batch_size) < 1:
            errors.append("batch_size must be >= 1")
        if float(self.kd_temperature) <= 0:
            errors.append("kd_temperature must be > 0")
        if errors:
            raise InvalidConfigError("Invalid train config: " + "; ".join(errors), errors)
        return self


class FinetuneConfig(_base_types.ConfigObject):
    """Tail fine-tuning recipe for re-attachment and new downstream tasks."""

    epochs = 5
    lr = 5e-5
    batch_size = 16
    kd_temperature = 1.0


class SaliencyConfig(_base_types.ConfigObject):
    """Saliency map extraction settings."""

    floor = 0.1
    layers = None
    batch_size = 64


class ChannelProfile(_base_types.ConfigObject):
    """A wireless link characterised by its data rate.

    Attributes:
        name (str): Display name.
        data_rate (float): Bits per second.
    """

    name = None
    data_rate = None

    def validate(self):
        if self.data_rate is None or float(self.data_rate) <= 0:
            raise InvalidConfigError("Channel {!r} data rate must be > 0, got {}".format(self.name, self.data_rate))
        return self

    @classmethod
    def from_mbps(cls, name, mbps):
        return cls(name=name, data_rate=float(mbps) * 1e6)


RD_CSV_COLUMNS = ("beta", "bpp", "predictive_loss", "objective", "seed")

DEFAULT_CHANNEL_PROFILES = (
    ChannelProfile.from_mbps("BLE", 0.27),
    ChannelProfile.from_mbps("4G", 12.0),
    ChannelProfile.from_mbps("Wi-Fi", 54.0),
    ChannelProfile.from_mbps("5G", 66.9),
)


class RDPoint(_base_types.ConfigObject):
    """One rate-distortion measurement.

    Attributes:
        beta (float): Rate weight the bottleneck was trained with.
        bpp (float): Mean bits per pixel of the coded eval payloads.
        predictive_loss (float): Teacher top-1 minus pipeline top-1 in percentage points.
        objective (str): Objective tag.
        seed (int): Training seed.
    """

    beta = None
    bpp = None
    predictive_loss = None
    objective = None
    seed = None

    def is_lossless(self, grace=0.4):
        """True if the predictive loss is within the grace threshold."""
        return float(self.predictive_loss) <= grace

    def as_row(self):
        return [float(self.beta), float(self.bpp), float(self.predictive_loss), str(self.objective), int(self.seed)]


class DatasetManifest(_base_types.ConfigObject):
    """Description of a prepared desk dataset.

    Attributes:
        sample_count (int): Number of samples.
        image_dims (list[int]): Stored (H, W) after padding.
        source_dims (list[int]): (H, W) of the decoded source images.
        class_count (int): Number of classes.
        class_names (list[str]): Class folder names, index order.
        raw_bytes (list[int]): Stored file size of each sample, by sample id.
        split_hashes (dict): SHA-256 of the sorted ids of each split.
        train_ids (list[int]): Training sample ids.
        val_ids (list[int]): Validation sample ids.
        seed (int): Split seed.
        val_fraction (float): Fraction of each class held out.
        pixel_mean (float): Normalization offset applied to [0, 1] pixels.
        pixel_std (float): Normalization scale applied to [0, 1] pixels.
    """

    sample_count = None
    image_dims = None
    source_dims = None
    class_count = None
    class_names = None
    raw_bytes = None
    split_hashes = None
    train_ids = None
    val_ids = None
    seed = None
    val_fraction = None
    pixel_mean = 0.5
    pixel_std = 0.25


class ExperimentConfig(_base_types.ConfigObject):
    """Everything that determines an experiment run.

    The config is written alongside every output artifact and its hash is embedded in every report.
    """

    _custom_types = {
        "backbone": (BackboneSpec, False),
        "tail_variant": (BackboneSpec, False),
        "encoder": (EncoderConfig, False),
        "decoder": (DecoderConfig, False),
        "entropy": (EntropyConfig, False),
        "pretrain": (PretrainConfig, False),
        "train": (TrainConfig, False),
        "finetune": (FinetuneConfig, False),
        "saliency": (SaliencyConfig, False),
        "channel_profiles": (ChannelProfile, True),
    }

    dataset_path = "data"
    output_dir = "output"
    backbone = BackboneSpec()
    tail_variant = BackboneSpec(stage_depths=(2, 2, 4))
    encoder = EncoderConfig()
    decoder = DecoderConfig()
    entropy = EntropyConfig()
    pretrain = PretrainConfig()
    train = TrainConfig()
    finetune = FinetuneConfig()
    saliency = SaliencyConfig()
    objective = "hd"
    beta_grid = (0.0, 0.005, 0.02, 0.08, 0.32, 1.28)
    seeds = (0, 1, 2)
    seed = 0
    channel_profiles = DEFAULT_CHANNEL_PROFILES
    max_train_samples = None
    max_eval_samples = None
    lossless_grace = 0.4
    baseline_grace = 1.0

    def validate(self):
        self.backbone.validate()
        self.tail_variant.validate()
        self.encoder.validate()
        self.train.validate()
        Objective.parse(self.objective)
        for profile in self.channel_profiles:
            profile.validate()
        if not self.beta_grid:
            raise InvalidConfigError("beta_grid must not be empty")
        return self

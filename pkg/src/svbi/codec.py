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
"""The bottleneck that replaces the teacher head.

The client runs the analysis transform and quantizer, the server runs the synthesis transform and the
teacher tail. Encoder, decoder and prior are checkpointed separately so the client ships only the encoder.
"""
import collections
import json
import logging
import math
import os

import numpy as np

from svbi import _utils, checkpoint, nn
from svbi.api_types import BackboneSpec, DecoderConfig, EncoderConfig, EntropyConfig, InvalidConfigError
from svbi.tensor import ShapeMismatchError, Tensor, as_tensor, no_grad

logger = logging.getLogger(__name__)

ENCODER_FILE = "encoder.ckpt"
DECODER_FILE = "decoder.ckpt"
PRIOR_FILE = "prior.ckpt"
TABLES_FILE = "tables.svbc"
PIPELINE_FILE = "pipeline.json"


class UnboundComponentError(RuntimeError):
    """Raised when a pipeline stage is used before its component is attached."""


class AnalysisTransform(nn.Module):
    """Client encoder: three residual blocks of two stacked 3x3 convolutions.

    The last block produces the signed latent and has no output activation.
    """

    def __init__(self, config, input_channels, rng):
        super().__init__()
        self.config = config
        widths = [int(c) for c in config.block_channels] + [int(config.latent_channels)]
        self.blocks = nn.ModuleList()
        in_channels = input_channels
        for index, (width, stride) in enumerate(zip(widths, config.block_strides)):
            self.blocks.append(
                nn.ResidualBlock(in_channels, width, rng, stride=int(stride), activate_output=index < len(widths) - 1)
            )
            in_channels = width

    def forward(self, x):
        x = as_tensor(x)
        stride = self.config.total_stride
        if x.ndim != 4 or x.shape[2] % stride or x.shape[3] % stride:
            offending = ["axis {} = {}".format(a, x.shape[a]) for a in (2, 3) if x.ndim == 4 and x.shape[a] % stride]
            raise ShapeMismatchError(
                "Input {} not divisible by the encoder stride {}; pad at ingestion (prepare-data pads "
                "reflectively)".format(x.shape, stride),
                axes=offending or ["rank {}".format(x.ndim)],
            )
        for block in self.blocks:
            x = block(x)
        return x


class SynthesisTransform(nn.Module):
    """Server decoder: restoration blocks with optional upsampling, then transformation blocks.

    One 2x sub-pixel upsampling step is inserted per missing factor of two between the encoder stride
    and the head stride, each preceded by restoration blocks.
    """

    def __init__(self, config, latent_channels, head_channels, upsample_steps, rng):
        super().__init__()
        self.latent_channels = int(latent_channels)
        hidden = int(config.hidden_channels)
        self.stem = nn.Conv2d(self.latent_channels, hidden, 3, rng)
        self.restoration = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for step in range(upsample_steps + 1):
            for _ in range(int(config.restoration_blocks)):
                self.restoration.append(nn.ResidualBlock(hidden, hidden, rng))
            if step < upsample_steps:
                self.upsample.append(nn.UpsampleBlock(hidden, hidden, rng, factor=2))
        self.transformation = nn.ModuleList()
        in_channels = hidden
        for _ in range(max(1, int(config.transformation_blocks))):
            self.transformation.append(nn.ResidualBlock(in_channels, int(head_channels), rng))
            in_channels = int(head_channels)
        self._restoration_per_step = int(config.restoration_blocks)

    def forward(self, z):
        z = as_tensor(z)
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeMismatchError(
                "Latent {} does not match decoder input of {} channels".format(z.shape, self.latent_channels),
                axes=["axis 1 = {}".format(z.shape[1] if z.ndim > 1 else None)],
            )
        x = self.stem(z).relu()
        restoration = iter(self.restoration)
        for step in range(len(self.upsample) + 1):
            for _ in range(self._restoration_per_step):
                x = next(restoration)(x)
            if step < len(self.upsample):
                x = self.upsample[step](x).relu()
        for block in self.transformation:
            x = block(x)
        return x


def quantize(z, mode, rng=None):
    """Quantize a latent.

    Args:
        z (Tensor): The latent.
        mode (str): ``"eval"`` rounds half away from zero (no gradient); ``"train"`` adds uniform noise
            in (-1/2, 1/2) and keeps the gradient path to ``z``.
        rng (numpy.random.Generator): Noise source, required in train mode.

    Returns:
        Tensor
    """
    z = as_tensor(z)
    if mode == "eval":
        return Tensor(round_half_away(z.data))
    if mode == "train":
        if rng is None:
            raise ValueError("Train-mode quantization needs a random generator")
        noise = rng.uniform(-0.5, 0.5, size=z.shape)
        # keeps |z~ - z| < 0.5 after f32 rounding
        noise = np.clip(noise, -0.5 + 2.0 ** -16, 0.5 - 2.0 ** -16)
        return z + Tensor(noise)
    raise ValueError("Unknown quantization mode {!r}, expected 'train' or 'eval'".format(mode))


def round_half_away(values):
    values = np.asarray(values)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


class LatentCode(object):
    """Quantized latent symbols of one image.

    Attributes:
        symbols (numpy.ndarray): int32 grid (C, H', W').
        z_min (numpy.ndarray): Per-channel lower bound of the symbol alphabet.
        z_max (numpy.ndarray): Per-channel upper bound of the symbol alphabet.
        image_dims (tuple[int, int]): (H, W) of the original image, for bpp.
    """

    def __init__(self, symbols, z_min, z_max, image_dims):
        self.symbols = np.asarray(symbols, dtype=np.int32)
        self.z_min = np.asarray(z_min, dtype=np.int64)
        self.z_max = np.asarray(z_max, dtype=np.int64)
        self.image_dims = (int(image_dims[0]), int(image_dims[1]))
        if self.symbols.ndim != 3:
            raise ShapeMismatchError("Latent symbols must be (C, H, W), got {}".format(self.symbols.shape))
        if self.symbols.size:
            channels = self.symbols.shape[0]
            low = self.symbols.reshape(channels, -1).min(axis=1)
            high = self.symbols.reshape(channels, -1).max(axis=1)
            bad = np.nonzero((low < self.z_min[:channels]) | (high > self.z_max[:channels]))[0]
            if bad.size:
                raise ValueError("Symbols outside declared bounds in channels {}".format(bad.tolist()))

    @property
    def shape(self):
        return self.symbols.shape

    def __eq__(self, other):
        return (
            isinstance(other, LatentCode)
            and self.symbols.shape == other.symbols.shape
            and np.array_equal(self.symbols, other.symbols)
            and self.image_dims == other.image_dims
        )

    def __repr__(self):
        return "LatentCode(shape={}, image_dims={})".format(self.symbols.shape, self.image_dims)


class BottleneckPipeline(object):
    """Encoder, quantizer, prior and decoder bound to a teacher's head (training target) and tail.

    Args:
        encoder (AnalysisTransform): Client side analysis transform.
        decoder (SynthesisTransform): Server side synthesis transform.
        prior (entropy.FactorizedPrior): Learned latent density.
        head (backbones.Head): Frozen teacher head, needed for head distillation.
        tail (backbones.Tail): Frozen teacher tail producing logits from h~.
        tables (entropy.CdfTable): Frozen coder tables; eval symbols are clamped into their support.
    """

    def __init__(self, encoder, decoder, prior, head=None, tail=None, tables=None):
        self.encoder = encoder
        self.decoder = decoder
        self.prior = prior
        self.head = head
        self.tail = tail
        self.tables = tables

    def analyze(self, x):
        return self.encoder(x)

    def quantize(self, z, mode, rng=None):
        return quantize(z, mode, rng)

    def synthesize(self, z):
        return self.decoder(z)

    def latent_symbols(self, x):
        """Eval-mode symbols of a batch (N, C, H', W'), clamped into the table support when tables are bound."""
        with no_grad():
            z_bar = round_half_away(self.analyze(x).data).astype(np.int64)
        if self.tables is not None:
            z_bar, _ = self.tables.clamp(z_bar)
        return z_bar

    def logits_from_symbols(self, symbols):
        """Tail logits for a batch of integer symbols."""
        self._require("tail")
        with no_grad():
            return self.tail(self.synthesize(Tensor(np.asarray(symbols, dtype=np.float32))))

    def bottlenecked_forward(self, x):
        """``tail(synthesize(quantize(analyze(x), eval)))``.

        Raises:
            UnboundComponentError: If no tail is attached.
        """
        self._require("tail")
        return self.logits_from_symbols(self.latent_symbols(x))

    def __call__(self, x):
        return self.bottlenecked_forward(x)

    def _require(self, component):
        if getattr(self, component) is None:
            raise UnboundComponentError("Pipeline has no {} attached".format(component))

    def compression_modules(self):
        return collections.OrderedDict([("encoder", self.encoder), ("decoder", self.decoder), ("prior", self.prior)])

    def compression_parameters(self):
        """``(name, Parameter)`` pairs of the encoder, decoder and prior."""
        named = []
        for prefix, module in self.compression_modules().items():
            named.extend(module.named_parameters(prefix + "."))
        return named

    def compression_digest(self):
        """SHA-256 over the checkpoints of the encoder, decoder and prior."""
        state = collections.OrderedDict((name, p.data) for name, p in self.compression_parameters())
        return checkpoint.digest(state)

    def train(self):
        for module in self.compression_modules().values():
            module.train()
        return self

    def eval(self):
        for module in self.compression_modules().values():
            module.eval()
        return self

    def freeze_compression(self):
        for module in self.compression_modules().values():
            module.freeze()
        return self

    def overhead_report(self, teacher):
        """Parameter counts of the bottleneck and the decoder overhead relative to the backbone."""
        backbone = teacher.num_parameters()
        decoder = self.decoder.num_parameters()
        return collections.OrderedDict(
            [
                ("encoder_params", self.encoder.num_parameters()),
                ("decoder_params", decoder),
                ("prior_params", self.prior.num_parameters()),
                ("head_params", teacher.head.num_parameters()),
                ("backbone_params", backbone),
                ("decoder_overhead_pct", 100.0 * decoder / backbone),
            ]
        )


def upsample_steps(encoder_config, spec):
    """Number of 2x upsampling steps the decoder needs to reach the head resolution.

    Raises:
        InvalidConfigError: If the encoder stride is below the head stride or not a power-of-two multiple.
    """
    ratio = encoder_config.total_stride / float(spec.head_stride)
    steps = math.log2(ratio) if ratio >= 1 else -1
    if steps < 0 or steps != int(steps):
        raise InvalidConfigError(
            "Encoder stride {} incompatible with head stride {}".format(encoder_config.total_stride, spec.head_stride)
        )
    return int(steps)


def build_pipeline(encoder_config, decoder_config, entropy_config, spec, seed, head=None, tail=None):
    """Build a freshly initialised bottleneck for the teacher described by ``spec``.

    Raises:
        InvalidConfigError: If the encoder exceeds max_parameters or strides are incompatible.
    """
    from svbi import entropy

    encoder_config.validate()
    rng = _utils.seeded_rng(seed, "bottleneck-init")
    encoder = AnalysisTransform(encoder_config, int(spec.input_channels), rng)
    count = encoder.num_parameters()
    logger.info("Encoder parameters: %d (max %s)", count, encoder_config.max_parameters)
    if encoder_config.max_parameters is not None and count > int(encoder_config.max_parameters):
        raise InvalidConfigError(
            "Encoder has {} parameters, more than the allowed {}".format(count, encoder_config.max_parameters)
        )
    decoder = SynthesisTransform(
        decoder_config,
        encoder_config.latent_channels,
        spec.head_channels,
        upsample_steps(encoder_config, spec),
        rng,
    )
    logger.info("Decoder parameters: %d", decoder.num_parameters())
    prior = entropy.FactorizedPrior(
        int(encoder_config.latent_channels),
        filters=tuple(entropy_config.filters),
        init_scale=float(entropy_config.init_scale),
        likelihood_bound=float(entropy_config.likelihood_bound),
    )
    return BottleneckPipeline(encoder, decoder, prior, head=head, tail=tail)


def save_pipeline(pipeline, directory, encoder_config, decoder_config, entropy_config, spec):
    """Write the encoder, decoder and prior checkpoints, tables and layout description.

    Returns:
        dict: File name to SHA-256 of every written artifact.
    """
    _utils.makedirs(directory)
    digests = collections.OrderedDict()
    parts = ((ENCODER_FILE, pipeline.encoder), (DECODER_FILE, pipeline.decoder), (PRIOR_FILE, pipeline.prior))
    for filename, module in parts:
        digests[filename] = checkpoint.save(module, os.path.join(directory, filename))
    if pipeline.tables is not None:
        pipeline.tables.save(os.path.join(directory, TABLES_FILE))
        digests[TABLES_FILE] = _utils.sha256_file(os.path.join(directory, TABLES_FILE))
    layout = {
        "encoder": EncoderConfig.to_dict(encoder_config),
        "decoder": DecoderConfig.to_dict(decoder_config),
        "entropy": EntropyConfig.to_dict(entropy_config),
        "backbone": BackboneSpec.to_dict(spec),
    }
    with open(os.path.join(directory, PIPELINE_FILE), "w") as f:
        json.dump(layout, f, indent=2, sort_keys=True)
        f.write("\n")
    return digests


def load_pipeline(directory, head=None, tail=None, parts=("encoder", "decoder", "prior")):
    """Rebuild a pipeline saved by :func:`save_pipeline`.

    Args:
        directory (str): The pipeline directory.
        head (backbones.Head): Optional teacher head.
        tail (backbones.Tail): Optional teacher tail.
        parts (tuple[str]): Checkpoints to load; a client loads only ``("encoder",)``.
    """
    from svbi import entropy

    with open(os.path.join(directory, PIPELINE_FILE)) as f:
        layout = json.load(f)
    encoder_config = EncoderConfig.from_dict(layout["encoder"])
    pipeline = build_pipeline(
        encoder_config,
        DecoderConfig.from_dict(layout["decoder"]),
        EntropyConfig.from_dict(layout["entropy"]),
        BackboneSpec.from_dict(layout["backbone"]),
        seed=0,
        head=head,
        tail=tail,
    )
    files = {"encoder": ENCODER_FILE, "decoder": DECODER_FILE, "prior": PRIOR_FILE}
    for part in parts:
        checkpoint.load_into(getattr(pipeline, part), os.path.join(directory, files[part]))
    tables_path = os.path.join(directory, TABLES_FILE)
    if os.path.exists(tables_path):
        pipeline.tables = entropy.CdfTable.load(tables_path)
    return pipeline.eval()

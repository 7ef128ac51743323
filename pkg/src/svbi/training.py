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
"""Rate-distortion training of the bottleneck, evaluation and tail fine-tuning.

Only the encoder, decoder and prior are trained; the teacher head and tail stay frozen. The rate term
is normalized per input pixel so the weight ``beta`` does not depend on the image resolution.
"""
import collections
import logging
import math
import os

import numpy as np

from svbi import _utils, backbones, codec, data, entropy, functional as F, optim, range_coder
from svbi.api_types import FinetuneConfig, Objective, RDPoint, TrainConfig
from svbi.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

TRAIN_LOG_FILE = "train.jsonl"
PAYLOADS_FILE = "payloads.bin"


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite.

    Attributes:
        lr (float): Learning rate of the failing step.
        batch_id (int): Global index of the failing batch.
    """

    def __init__(self, message, lr=None, batch_id=None):
        super().__init__(message)
        self.lr = lr
        self.batch_id = batch_id


class LossTerms(object):
    """A training loss and its parts.

    Attributes:
        loss (Tensor): Scalar objective.
        distortion (Tensor): Scalar distortion (or predictive) term.
        rate_bits (Tensor): Estimated code length of the noisy latent, in bits.
        num_pixels (int): Input pixels of the batch, N * H * W.
    """

    def __init__(self, loss, distortion, rate_bits, num_pixels):
        self.loss = loss
        self.distortion = distortion
        self.rate_bits = rate_bits
        self.num_pixels = num_pixels

    @property
    def rate_bpp(self):
        return self.rate_bits.item() / self.num_pixels


def _noisy_forward(x, pipeline, rng):
    x = x if isinstance(x, Tensor) else Tensor(x)
    z_tilde = codec.quantize(pipeline.analyze(x), "train", rng)
    return x, z_tilde, pipeline.synthesize(z_tilde)


def _num_pixels(x):
    return int(x.shape[0] * x.shape[2] * x.shape[3])


def _teacher_features(pipeline, x):
    pipeline._require("head")
    with no_grad():
        return pipeline.head(x)


def hd_loss(x, pipeline, beta, rng):
    """Head distillation: ``mse(head(x), g_s(g_a(x) + noise)) + beta * rate_bits / pixels``.

    Args:
        x (array-like): Input batch.
        pipeline (codec.BottleneckPipeline): Pipeline with the frozen teacher head bound.
        beta (float): Rate weight.
        rng (numpy.random.Generator): Quantization noise source.

    Returns:
        LossTerms
    """
    x, z_tilde, h_tilde = _noisy_forward(x, pipeline, rng)
    distortion = F.mse(h_tilde, _teacher_features(pipeline, x))
    return _with_rate(distortion, z_tilde, pipeline, beta, _num_pixels(x))


def sg_hd_loss(x, pipeline, beta, rng, weights):
    """Saliency-guided head distillation; ``weights`` (N, 1, h, w) scale the squared error per location.

    With all-ones weights the value equals :func:`hd_loss` for the same noise.
    """
    x, z_tilde, h_tilde = _noisy_forward(x, pipeline, rng)
    distortion = F.weighted_mse(h_tilde, _teacher_features(pipeline, x), weights)
    return _with_rate(distortion, z_tilde, pipeline, beta, _num_pixels(x))


def direct_loss(x, pipeline, beta, rng, variant, labels=None, temperature=1.0):
    """Direct optimization through the frozen tail with cross-entropy or distillation from the teacher.

    Raises:
        ValueError: If ``variant`` is CE and no labels are given.
    """
    variant = Objective.parse(variant)
    x, z_tilde, h_tilde = _noisy_forward(x, pipeline, rng)
    pipeline._require("tail")
    logits = pipeline.tail(h_tilde)
    if variant is Objective.DIRECT_CE:
        if labels is None:
            raise ValueError("Cross-entropy objective needs labels")
        predictive = F.softmax_cross_entropy(logits, labels)
    elif variant is Objective.DIRECT_KD:
        with no_grad():
            teacher_logits = pipeline.tail(pipeline.head(x))
        predictive = F.kd_divergence(logits, teacher_logits, temperature)
    else:
        raise ValueError("Not a direct objective: {}".format(variant.value))
    return _with_rate(predictive, z_tilde, pipeline, beta, _num_pixels(x))


def _with_rate(distortion, z_tilde, pipeline, beta, num_pixels):
    rate = entropy.rate_bits(z_tilde, pipeline.prior)
    # the zero-weighted rate still gives the prior (zero) gradients at beta = 0
    loss = distortion + rate * (float(beta) / num_pixels)
    return LossTerms(loss, distortion, rate, num_pixels)


def compute_loss(objective, batch, pipeline, config, rng, saliency_store=None):
    """Dispatch a batch to the loss of ``objective``. Labels are read only by the cross-entropy objective."""
    objective = Objective.parse(objective)
    if objective is Objective.HD:
        return hd_loss(batch.images, pipeline, config.beta, rng)
    if objective is Objective.SG_HD:
        if saliency_store is None:
            raise ValueError("Saliency-guided objective needs a saliency store")
        return sg_hd_loss(batch.images, pipeline, config.beta, rng, saliency_store.weights_for(batch.sample_ids))
    if objective is Objective.DIRECT_CE:
        return direct_loss(batch.images, pipeline, config.beta, rng, objective, labels=batch.labels)
    return direct_loss(batch.images, pipeline, config.beta, rng, objective, temperature=config.kd_temperature)


class TrainResult(object):
    """Outcome of :func:`train_bottleneck`.

    Attributes:
        best_loss (float): Lowest epoch-mean loss.
        best_epoch (int): Epoch of the restored weights.
        history (list[dict]): Per-epoch means of distortion, rate and loss.
    """

    def __init__(self, best_loss, best_epoch, history):
        self.best_loss = best_loss
        self.best_epoch = best_epoch
        self.history = history


def train_bottleneck(pipeline, dataset, config=None, saliency_store=None, log_writer=None):
    """Train the encoder, decoder and prior of ``pipeline`` in place.

    The weights of the epoch with the lowest mean loss are restored at the end.

    Args:
        pipeline (codec.BottleneckPipeline): Pipeline with the teacher head (and tail) bound.
        dataset (data.ImageDataset): Training samples.
        config (TrainConfig): Objective, beta and recipe.
        saliency_store (saliency.SaliencyStore): Required by the saliency-guided objective.
        log_writer (metrics.TrainingLogWriter): Receives one record per epoch.

    Returns:
        TrainResult

    Raises:
        TrainingDivergedError: On a non-finite loss, with the learning rate and batch id.
    """
    config = (config or TrainConfig()).validate()
    objective = Objective.parse(config.objective)
    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset")
    for component in (pipeline.head, pipeline.tail):
        if component is not None:
            component.freeze().eval()

    shuffle_rng = _utils.seeded_rng(config.seed, "bottleneck-shuffle")
    noise_rng = _utils.seeded_rng(config.seed, "bottleneck-noise")
    named = pipeline.compression_parameters()
    optimizer = optim.Adam(named, lr=config.lr_start)
    total_steps = max(1, int(config.epochs) * dataset.num_batches(config.batch_size))
    best_loss, best_epoch, best_state, history, step = math.inf, 0, None, [], 0

    for epoch in range(1, int(config.epochs) + 1):
        pipeline.train()
        sums = collections.OrderedDict([("distortion", 0.0), ("rate_bpp", 0.0), ("loss", 0.0)])
        batches = 0
        for batch in data.prefetch(dataset.batches(config.batch_size, rng=shuffle_rng, shuffle=True)):
            optimizer.lr = optim.exp_lr_schedule(step, total_steps, config.lr_start, config.lr_end)
            terms = compute_loss(objective, batch, pipeline, config, noise_rng, saliency_store)
            loss = terms.loss.item()
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    "Loss became {} at batch {} (lr={:.3g}, epoch {})".format(loss, step, optimizer.lr, epoch),
                    lr=optimizer.lr,
                    batch_id=step,
                )
            optimizer.zero_grad()
            terms.loss.backward()
            optim.clip_grad_norm([p for _, p in named], config.grad_clip)
            optimizer.step()
            step += 1
            batches += 1
            sums["distortion"] += terms.distortion.item()
            sums["rate_bpp"] += terms.rate_bpp
            sums["loss"] += loss
        means = collections.OrderedDict((k, v / batches) for k, v in sums.items())
        history.append(dict(epoch=epoch, step=step, lr=optimizer.lr, **means))
        if log_writer is not None:
            log_writer.log_record(epoch=epoch, step=step, lr=optimizer.lr, **means)
        logger.info(
            "Epoch %d/%d [%s beta=%g]: distortion=%.5f rate=%.4f bpp loss=%.5f",
            epoch,
            config.epochs,
            objective.value,
            config.beta,
            means["distortion"],
            means["rate_bpp"],
            means["loss"],
        )
        if means["loss"] < best_loss:
            best_loss, best_epoch = means["loss"], epoch
            best_state = {name: p.data.copy() for name, p in named}

    for name, p in named:
        p.data = best_state[name]
    pipeline.eval()
    return TrainResult(best_loss, best_epoch, history)


def fit_tables(pipeline, dataset, entropy_config, batch_size=64):
    """Freeze coder tables over the latent range observed on ``dataset`` and bind them to the pipeline."""
    stats = entropy.LatentStats(pipeline.prior.channels)
    tables, pipeline.tables = pipeline.tables, None
    try:
        for batch in dataset.batches(batch_size):
            stats.update(pipeline.latent_symbols(batch.images))
    finally:
        pipeline.tables = tables
    pipeline.tables = entropy.freeze_tables(
        pipeline.prior,
        stats,
        precision=int(entropy_config.precision),
        margin=int(entropy_config.support_margin),
        max_alphabet=int(entropy_config.max_alphabet),
    )
    return pipeline.tables


class EvalResult(object):
    """Coded evaluation of a pipeline against its teacher.

    Attributes:
        teacher_top1 (float): Teacher top-1 accuracy.
        pipeline_top1 (float): Bottlenecked top-1 accuracy.
        predictive_loss (float): Difference in percentage points.
        bpp (float): Mean bits per pixel of the coded payloads.
        payloads (list[(int, CodedPayload)]): Sample id and payload, in sample order.
    """

    def __init__(self, teacher_top1, pipeline_top1, bpp, payloads):
        self.teacher_top1 = teacher_top1
        self.pipeline_top1 = pipeline_top1
        self.predictive_loss = 100.0 * (teacher_top1 - pipeline_top1)
        self.bpp = bpp
        self.payloads = payloads

    def rd_point(self, beta, objective, seed):
        return RDPoint(
            beta=float(beta),
            bpp=float(self.bpp),
            predictive_loss=float(self.predictive_loss),
            objective=Objective.parse(objective).value,
            seed=int(seed),
        )


def evaluate_pipeline(pipeline, teacher, dataset, batch_size=64):
    """Predictive loss and mean coded bpp of ``pipeline`` on ``dataset``.

    Every sample is range coded; bpp counts the full payload including its header.
    """
    if pipeline.tables is None:
        raise codec.UnboundComponentError("Pipeline has no coder tables; run fit_tables first")
    teacher_top1, _ = backbones.evaluate_top1(teacher, dataset, batch_size)
    correct, sizes, payloads = 0, [], []
    for batch in dataset.batches(batch_size):
        symbols = pipeline.latent_symbols(batch.images)
        predictions = backbones.argmax_logits(pipeline.logits_from_symbols(symbols))
        correct += int(np.sum(predictions == batch.labels))
        image_dims = batch.images.shape[-2:]
        for sample_id, grid in zip(batch.sample_ids, symbols):
            code = codec.LatentCode(grid, pipeline.tables.z_min, pipeline.tables.z_max, image_dims)
            payload = range_coder.encode(code, pipeline.tables)
            sizes.append(range_coder.bpp(payload))
            payloads.append((int(sample_id), payload))
    result = EvalResult(teacher_top1, correct / float(len(dataset)), float(np.mean(sizes)), payloads)
    logger.info(
        "Evaluated %d samples: teacher=%.4f pipeline=%.4f loss=%.2f pts bpp=%.4f",
        len(dataset),
        result.teacher_top1,
        result.pipeline_top1,
        result.predictive_loss,
        result.bpp,
    )
    return result


def point_directory(root, objective, beta, seed):
    """``<root>/<objective>/beta-<b>/seed-<s>`` for one sweep point."""
    return os.path.join(root, Objective.parse(objective).value, _utils.format_beta(beta), "seed-{}".format(seed))


def train_point(experiment, teacher, dataset, objective, beta, seed, saliency_store=None, output_dir=None):
    """Train, freeze, code and evaluate one (objective, beta, seed) configuration.

    Args:
        experiment (ExperimentConfig): Architecture and recipes.
        teacher (backbones.SplitModel): The pretrained teacher; its head and tail are bound and frozen.
        dataset (data.DeskDataset): Train split for training and tables, val split for evaluation.
        objective (str): Objective tag.
        beta (float): Rate weight.
        seed (int): Initialization, shuffling and noise seed.
        saliency_store (saliency.SaliencyStore): Needed by the saliency-guided objective.
        output_dir (str): Sweep root; the point's checkpoints, tables, log and payloads go below it.

    Returns:
        (RDPoint, codec.BottleneckPipeline)
    """
    from svbi import metrics

    config = experiment.train.replace(objective=Objective.parse(objective).value, beta=float(beta), seed=int(seed))
    pipeline = codec.build_pipeline(
        experiment.encoder,
        experiment.decoder,
        experiment.entropy,
        teacher.spec,
        seed=seed,
        head=teacher.head,
        tail=teacher.tail,
    )
    directory = point_directory(output_dir, objective, beta, seed) if output_dir else None
    if directory:
        _utils.makedirs(directory)
        with metrics.TrainingLogWriter(os.path.join(directory, TRAIN_LOG_FILE), overwrite=True) as log_writer:
            train_bottleneck(pipeline, dataset.train, config, saliency_store, log_writer)
    else:
        train_bottleneck(pipeline, dataset.train, config, saliency_store)
    fit_tables(pipeline, dataset.train, experiment.entropy)
    result = evaluate_pipeline(pipeline, teacher, dataset.val)
    point = result.rd_point(beta, objective, seed)
    if directory:
        codec.save_pipeline(
            pipeline, directory, experiment.encoder, experiment.decoder, experiment.entropy, teacher.spec
        )
        range_coder.write_payloads(os.path.join(directory, PAYLOADS_FILE), result.payloads)
    return point, pipeline


def beta_sweep(betas, objective, experiment, teacher, dataset, seed=0, saliency_store=None, output_dir=None):
    """One :class:`RDPoint` per beta, trained and evaluated with the same teacher, data and seed.

    Raises:
        ValueError: If ``betas`` is empty.
    """
    betas = list(betas)
    if not betas:
        raise ValueError("beta_sweep needs at least one beta")
    points = []
    for beta in betas:
        point, _ = train_point(experiment, teacher, dataset, objective, beta, seed, saliency_store, output_dir)
        logger.info("Sweep point %s: bpp=%.4f predictive_loss=%.2f", point.as_row(), point.bpp, point.predictive_loss)
        points.append(point)
    lossless = lossless_configuration(points, experiment.lossless_grace)
    if lossless is not None:
        logger.info("Lossless configuration: beta=%g at %.4f bpp", lossless.beta, lossless.bpp)
    else:
        logger.warning("No lossless configuration within %.2f points in the sweep", experiment.lossless_grace)
    return points


def lossless_configuration(points, grace=0.4):
    """The lowest-bpp point whose predictive loss is within ``grace`` points, or None."""
    lossless = [p for p in points if p.is_lossless(grace)]
    if not lossless:
        return None
    return min(lossless, key=lambda p: (p.bpp, -p.beta))


def count_bpp_inversions(points):
    """Adjacent pairs of a beta-sorted sweep where the higher beta has the higher bpp."""
    ordered = sorted(points, key=lambda p: p.beta)
    return sum(1 for a, b in zip(ordered, ordered[1:]) if b.bpp > a.bpp)


def lossless_identity(points, grace=0.4):
    """Worst predictive loss of one configuration over its seeds, and whether it stays within ``grace``.

    Raises:
        ValueError: If ``points`` is empty or mixes configurations.
    """
    points = list(points)
    if not points:
        raise ValueError("lossless_identity needs at least one point")
    configurations = set((p.objective, p.beta) for p in points)
    if len(configurations) > 1:
        raise ValueError("Points of several configurations: {}".format(sorted(configurations)))
    worst = max(p.predictive_loss for p in points)
    return {
        "beta": float(points[0].beta),
        "objective": points[0].objective,
        "seeds": sorted(int(p.seed) for p in points),
        "worst_predictive_loss": worst,
        "lossless": worst <= grace,
    }


def lossless_check(experiment, teacher, dataset, objective, beta, seeds, saliency_store=None, output_dir=None):
    """Retrain one configuration over several seeds and report the worst predictive loss.

    Returns:
        dict: :func:`lossless_identity` of the retrained points, plus the per-seed ``points``.
    """
    points = [
        train_point(experiment, teacher, dataset, objective, beta, seed, saliency_store, output_dir)[0]
        for seed in seeds
    ]
    report = lossless_identity(points, experiment.lossless_grace)
    report["points"] = points
    return report


def grace_report(points, grace=0.4):
    """Rows of the points with the loss relative to the grace threshold, applied at report time only."""
    rows = []
    for p in points:
        row = RDPoint.to_dict(p)
        row["grace"] = grace
        row["relative_loss"] = p.predictive_loss - grace
        row["lossless"] = p.is_lossless(grace)
        rows.append(row)
    return rows


def saliency_direction(hd_points, sg_points):
    """Compare bpp of plain and saliency-guided training at matched (beta, seed).

    Returns:
        dict: Per-pair rows, the mean bpp difference (SG minus HD) and how many pairs SG wins.
    """
    hd = {(p.beta, p.seed): p for p in hd_points}
    rows = []
    for p in sg_points:
        match = hd.get((p.beta, p.seed))
        if match is not None:
            rows.append(
                {
                    "beta": p.beta,
                    "seed": p.seed,
                    "hd_bpp": match.bpp,
                    "sg_bpp": p.bpp,
                    "hd_predictive_loss": match.predictive_loss,
                    "sg_predictive_loss": p.predictive_loss,
                }
            )
    if not rows:
        raise ValueError("No matching (beta, seed) pairs between the two sweeps")
    return {
        "pairs": rows,
        "mean_bpp_delta": float(np.mean([r["sg_bpp"] - r["hd_bpp"] for r in rows])),
        "sg_lower": sum(1 for r in rows if r["sg_bpp"] < r["hd_bpp"]),
    }


class FinetuneResult(object):
    """Outcome of :func:`finetune_tail`.

    Attributes:
        top1 (float): Validation top-1 of the pipeline with the fine-tuned tail.
        digest_before (str): Compression checkpoint digest before fine-tuning.
        digest_after (str): Compression checkpoint digest after fine-tuning.
        history (list[dict]): Per-epoch losses.
    """

    def __init__(self, top1, digest_before, digest_after, history):
        self.top1 = top1
        self.digest_before = digest_before
        self.digest_after = digest_after
        self.history = history


def _bottleneck_features(pipeline):
    def features(images):
        with no_grad():
            return pipeline.synthesize(Tensor(pipeline.latent_symbols(images).astype(np.float32)))

    return features


def _teacher_head_features(teacher):
    def features(images):
        with no_grad():
            return teacher.head(Tensor(images))

    return features


def train_tail(tail, features, dataset, config=None, seed=0, reference=None, log_writer=None):
    """Train ``tail`` on fixed features with Adam at a constant learning rate.

    Args:
        tail (backbones.Tail): The tail to train; its parameters are unfrozen.
        features (callable): Maps an image batch to the tail input.
        dataset (data.DeskDataset): Train split for training, val split for the reported accuracy.
        config (FinetuneConfig): Epochs, learning rate, batch size and distillation temperature.
        seed (int): Shuffling seed.
        reference (backbones.SplitModel): Distill from this model's logits; cross-entropy on labels if None.
        log_writer (metrics.TrainingLogWriter): Receives one record per epoch.

    Returns:
        (float, list[dict]): Validation top-1 and per-epoch history.
    """
    config = config or FinetuneConfig()
    tail.unfreeze()
    optimizer = optim.Adam(tail.named_parameters(), lr=config.lr)
    rng = _utils.seeded_rng(seed, "finetune-shuffle")
    history = []
    for epoch in range(1, int(config.epochs) + 1):
        tail.train()
        losses = []
        for batch in data.prefetch(dataset.train.batches(int(config.batch_size), rng=rng, shuffle=True)):
            logits = tail(features(batch.images))
            if reference is None:
                loss = F.softmax_cross_entropy(logits, batch.labels)
            else:
                with no_grad():
                    target = reference(Tensor(batch.images))
                loss = F.kd_divergence(logits, target, config.kd_temperature)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if log_writer is not None:
            log_writer.log_record(epoch=epoch, loss=float(np.mean(losses)), lr=optimizer.lr)
        logger.info("Tail epoch %d/%d: loss=%.5f", epoch, config.epochs, np.mean(losses))
    tail.eval()

    def classify(images):
        return tail(features(images.data if isinstance(images, Tensor) else images))

    top1, _ = backbones.evaluate_top1(classify, dataset.val)
    return top1, history


def finetune_tail(pipeline, tail, dataset, config=None, seed=0, reference=None, log_writer=None):
    """Fine-tune a tail behind the frozen compression model and attach it to the pipeline.

    Args:
        pipeline (codec.BottleneckPipeline): Trained pipeline with coder tables.
        tail (backbones.Tail): Tail of another depth variant (re-attachment) or a new task head.
        dataset (data.DeskDataset): Dataset labelled for the tail's task.
        config (FinetuneConfig): Recipe, five epochs at 5e-5 by default.
        seed (int): Shuffling seed.
        reference (backbones.SplitModel): Teacher to distill from when re-attaching; cross-entropy if None.
        log_writer (metrics.TrainingLogWriter): Optional epoch log.

    Returns:
        FinetuneResult

    Raises:
        optim.FrozenParameterError: If anything tries to update the compression parameters.
    """
    pipeline.freeze_compression()
    digest_before = pipeline.compression_digest()
    backbones.attach_tail(pipeline, tail)
    top1, history = train_tail(tail, _bottleneck_features(pipeline), dataset, config, seed, reference, log_writer)
    tail.freeze()
    digest_after = pipeline.compression_digest()
    if digest_after != digest_before:
        raise optim.FrozenParameterError("Compression parameters changed during tail fine-tuning")
    logger.info("Fine-tuned tail: top1=%.4f, compression digest %s unchanged", top1, digest_after[:16])
    return FinetuneResult(top1, digest_before, digest_after, history)


def feature_baseline(teacher, tail, dataset, config=None, seed=0):
    """Top-1 of ``tail`` trained with cross-entropy on the teacher's own head features (no bottleneck)."""
    teacher.head.freeze()
    top1, _ = train_tail(tail, _teacher_head_features(teacher), dataset, config, seed)
    return top1

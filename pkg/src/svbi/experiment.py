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
"""Output layout and the workflow steps behind every command.

Layout under the output root::

    teacher/<variant>/model.ckpt, train.jsonl
    saliency/saliency.bin
    bottleneck/<objective>/beta-<b>/seed-<s>/{encoder,decoder,prior}.ckpt, tables.svbc, pipeline.json,
        train.jsonl, payloads.bin
    finetune/<task>/<objective>/beta-<b>/seed-<s>/tail.ckpt, finetune.jsonl
    reports/
    runs/<command>-<suffix>/run.json
"""
import collections
import json
import logging
import os

import numpy as np
import pandas as pd

from svbi import _utils, backbones, checkpoint, codec, data, latency, metrics, range_coder, saliency, training
from svbi.api_types import RD_CSV_COLUMNS, ExperimentConfig, Objective, RDPoint

logger = logging.getLogger(__name__)

TEACHER_CHECKPOINT = "model.ckpt"
TAIL_CHECKPOINT = "tail.ckpt"
TASKS = ("reattach", "coarse")


def variant_name(spec):
    """``depths-2-2-2`` for a backbone with stage depths (2, 2, 2)."""
    return "depths-" + "-".join(str(int(d)) for d in spec.stage_depths)


class ExperimentPaths(object):
    """Locations of every artifact under one output root."""

    def __init__(self, root):
        self.root = root

    def teacher_dir(self, spec):
        return os.path.join(self.root, "teacher", variant_name(spec))

    def teacher_checkpoint(self, spec):
        return os.path.join(self.teacher_dir(spec), TEACHER_CHECKPOINT)

    @property
    def saliency_store(self):
        return os.path.join(self.root, "saliency", "saliency.bin")

    @property
    def bottleneck_root(self):
        return os.path.join(self.root, "bottleneck")

    def point_dir(self, objective, beta, seed):
        return training.point_directory(self.bottleneck_root, objective, beta, seed)

    def finetune_dir(self, task, objective, beta, seed):
        return training.point_directory(os.path.join(self.root, "finetune", task), objective, beta, seed)

    @property
    def reports_dir(self):
        return os.path.join(self.root, "reports")


def load_experiment(path=None, **overrides):
    """Load an :class:`ExperimentConfig` from JSON (or the defaults) and apply non-None overrides.

    Raises:
        InvalidConfigError: If the resulting config is invalid.
    """
    experiment = ExperimentConfig.from_json(path) if path else ExperimentConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    if changes:
        experiment = experiment.replace(**changes)
    return experiment.validate()


def load_dataset(experiment, task=None):
    """The prepared dataset, relabelled for the coarse downstream task when ``task == "coarse"``."""
    dataset = data.DeskDataset.load(
        experiment.dataset_path,
        max_train_samples=experiment.max_train_samples,
        max_eval_samples=experiment.max_eval_samples,
    )
    if task == "coarse":
        return dataset.relabel(data.coarse_label)
    return dataset


def load_teacher(experiment, paths, spec=None):
    """The pretrained teacher of ``spec`` (default: the experiment backbone).

    Raises:
        FileNotFoundError: If the variant has not been pretrained.
    """
    spec = spec or experiment.backbone
    path = paths.teacher_checkpoint(spec)
    if not os.path.exists(path):
        raise FileNotFoundError("No teacher checkpoint at {}; run pretrain first".format(path))
    return backbones.load_teacher(spec, path)


def _log_history(tracker, records, names, prefix=""):
    """Per-epoch metrics of a training history into the run's metric log."""
    for record in records:
        for name in names:
            if name in record:
                tracker.log_metric(prefix + name, record[name], iteration_number=record.get("epoch"))


def pretrain(experiment, paths, spec=None, tracker=None):
    """Pretrain a teacher variant and keep its best-by-validation checkpoint."""
    spec = spec or experiment.backbone
    dataset = load_dataset(experiment)
    teacher = backbones.build_teacher(spec, experiment.seed)
    directory = _utils.makedirs(paths.teacher_dir(spec))
    with metrics.TrainingLogWriter(os.path.join(directory, training.TRAIN_LOG_FILE), overwrite=True) as log_writer:
        result = backbones.pretrain_teacher(
            teacher,
            dataset,
            seed=experiment.seed,
            config=experiment.pretrain,
            checkpoint_path=paths.teacher_checkpoint(spec),
            log_writer=log_writer,
        )
    if tracker is not None:
        tracker.log_parameters({"variant": variant_name(spec), "val_top1": result.top1})
        tracker.log_input("dataset", experiment.dataset_path)
        tracker.log_artifact(paths.teacher_checkpoint(spec), name="teacher")
        _log_history(tracker, result.history, ("loss", "val_top1"), prefix="pretrain_")
        _, predictions = backbones.evaluate_top1(teacher, dataset.val)
        tracker.log_confusion_matrix(dataset.val.labels, predictions, title="val-confusion")
    return result


def compute_saliency(experiment, paths, tracker=None):
    """Precompute and persist saliency maps of the training split."""
    teacher = load_teacher(experiment, paths)
    dataset = load_dataset(experiment)
    _utils.makedirs(os.path.dirname(paths.saliency_store))
    store = saliency.precompute_dataset_saliency(teacher, dataset.train, experiment.saliency, paths.saliency_store)
    if tracker is not None:
        tracker.log_parameters({"maps": len(store), "layers": ",".join(store.layers)})
        tracker.log_input_artifact(paths.teacher_checkpoint(experiment.backbone), name="teacher")
        tracker.log_artifact(paths.saliency_store, name="saliency")
    return store


def _saliency_for(objective, paths):
    if Objective.parse(objective) is not Objective.SG_HD:
        return None
    if not os.path.exists(paths.saliency_store):
        raise FileNotFoundError("No saliency store at {}; run saliency first".format(paths.saliency_store))
    return saliency.SaliencyStore.load(paths.saliency_store)


def train(experiment, paths, objective, beta, seed, tracker=None):
    """Train and evaluate one bottleneck configuration.

    Returns:
        RDPoint
    """
    teacher = load_teacher(experiment, paths)
    dataset = load_dataset(experiment)
    point, _ = training.train_point(
        experiment, teacher, dataset, objective, beta, seed, _saliency_for(objective, paths), paths.bottleneck_root
    )
    if tracker is not None:
        directory = paths.point_dir(objective, beta, seed)
        tracker.log_parameters(RDPoint.to_dict(point))
        tracker.log_input_artifact(paths.teacher_checkpoint(experiment.backbone), name="teacher")
        if Objective.parse(objective) is Objective.SG_HD:
            tracker.log_input_artifact(paths.saliency_store, name="saliency")
        tracker.log_artifacts(directory)
        history = metrics.read_log(os.path.join(directory, training.TRAIN_LOG_FILE))
        _log_history(tracker, history, ("distortion", "rate_bpp", "loss"))
    return point


def write_rd_csv(points, path):
    """RD CSV with the ``beta,bpp,predictive_loss,objective,seed`` header."""
    frame = pd.DataFrame([p.as_row() for p in points], columns=list(RD_CSV_COLUMNS))
    frame.to_csv(path, index=False)
    return path


def sweep(experiment, paths, objective, seed, betas=None, tracker=None):
    """Train every beta of the grid and write ``reports/rd-<objective>-seed-<s>.csv``.

    Returns:
        (list[RDPoint], str): The points and the CSV path.
    """
    teacher = load_teacher(experiment, paths)
    dataset = load_dataset(experiment)
    points = training.beta_sweep(
        betas if betas is not None else experiment.beta_grid,
        objective,
        experiment,
        teacher,
        dataset,
        seed=seed,
        saliency_store=_saliency_for(objective, paths),
        output_dir=paths.bottleneck_root,
    )
    _utils.makedirs(paths.reports_dir)
    name = "rd-{}-seed-{}".format(Objective.parse(objective).value, seed)
    csv_path = write_rd_csv(points, os.path.join(paths.reports_dir, name + ".csv"))
    if tracker is not None:
        tracker.log_table(name, data_frame=pd.read_csv(csv_path))
        tracker.log_artifact(csv_path)
    return points, csv_path


def evaluate_persisted(point_dir, teacher, dataset, objective, beta, seed, teacher_top1=None):
    """RD point recomputed from a point's persisted payloads: bpp from their sizes, accuracy from decoding them.

    Raises:
        FileNotFoundError: If the point has no checkpoints or payloads.
    """
    payload_path = os.path.join(point_dir, training.PAYLOADS_FILE)
    for required in (codec.PIPELINE_FILE, codec.DECODER_FILE, codec.TABLES_FILE, training.PAYLOADS_FILE):
        if not os.path.exists(os.path.join(point_dir, required)):
            raise FileNotFoundError("Missing {} for beta={} seed={} in {}".format(required, beta, seed, point_dir))
    pipeline = codec.load_pipeline(point_dir, tail=teacher.tail, parts=("decoder",))
    labels = dict(zip(dataset.sample_ids.tolist(), dataset.labels.tolist()))
    correct, sizes = 0, []
    for sample_id, payload in range_coder.read_payloads(payload_path):
        code = range_coder.decode(payload, pipeline.tables)
        prediction = backbones.argmax_logits(pipeline.logits_from_symbols(code.symbols[None]))[0]
        correct += int(prediction == labels[int(sample_id)])
        sizes.append(range_coder.bpp(payload))
    if not sizes:
        raise ValueError("No payloads in {}".format(payload_path))
    if teacher_top1 is None:
        teacher_top1, _ = backbones.evaluate_top1(teacher, dataset)
    result = training.EvalResult(teacher_top1, correct / float(len(sizes)), float(np.mean(sizes)), [])
    return result.rd_point(beta, objective, seed)


def rd_summary(points, experiment):
    """Per-objective lossless configuration, bpp inversions and grace report, plus the saliency comparison."""
    summary = collections.OrderedDict()
    by_objective = collections.OrderedDict()
    for p in points:
        by_objective.setdefault(p.objective, []).append(p)
    for objective, group in by_objective.items():
        lossless = training.lossless_configuration(group, experiment.lossless_grace)
        seeds = sorted(set(p.seed for p in group))
        summary[objective] = {
            "lossless": RDPoint.to_dict(lossless) if lossless is not None else None,
            "bpp_inversions": {str(s): training.count_bpp_inversions([p for p in group if p.seed == s]) for s in seeds},
            "grace": training.grace_report(group, experiment.lossless_grace),
            "min_predictive_loss": min(p.predictive_loss for p in group),
        }
        if lossless is not None:
            matched = [p for p in group if p.beta == lossless.beta]
            summary[objective]["lossless_identity"] = training.lossless_identity(matched, experiment.lossless_grace)
    hd, sg = by_objective.get(Objective.HD.value), by_objective.get(Objective.SG_HD.value)
    if hd and sg:
        lossless = training.lossless_configuration(hd, experiment.lossless_grace)
        if lossless is not None:
            hd = [p for p in hd if p.beta == lossless.beta]
            sg = [p for p in sg if p.beta == lossless.beta]
        try:
            summary["saliency_direction"] = training.saliency_direction(hd, sg)
        except ValueError:
            logger.warning("No matched (beta, seed) pairs between hd and sg-hd")
    return summary


def rd_table(points):
    """Objective x beta table of mean bpp and mean predictive loss over seeds."""
    frame = pd.DataFrame([RDPoint.to_dict(p) for p in points])
    table = frame.groupby(["objective", "beta"])[["bpp", "predictive_loss"]].mean().reset_index()
    return table.sort_values(["objective", "beta"]).reset_index(drop=True)


def lossless_check(experiment, paths, objective, beta, seeds=None, tracker=None):
    """Retrain one configuration over ``seeds`` (default: the config seeds) and report whether it stays lossless.

    The retrained points are persisted like sweep points and the report goes to
    ``reports/lossless-<objective>-beta-<b>.json``.

    Returns:
        dict: The per-seed points, the worst predictive loss and the verdict.
    """
    seeds = list(seeds if seeds is not None else experiment.seeds)
    teacher = load_teacher(experiment, paths)
    dataset = load_dataset(experiment)
    report = training.lossless_check(
        experiment,
        teacher,
        dataset,
        objective,
        beta,
        seeds,
        saliency_store=_saliency_for(objective, paths),
        output_dir=paths.bottleneck_root,
    )
    report["points"] = [RDPoint.to_dict(p) for p in report["points"]]
    report["config_hash"] = experiment.config_hash()
    name = "lossless-{}-{}.json".format(Objective.parse(objective).value, _utils.format_beta(beta))
    path = os.path.join(_utils.makedirs(paths.reports_dir), name)
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    if tracker is not None:
        tracker.log_parameters({"worst_predictive_loss": report["worst_predictive_loss"], "seeds": len(seeds)})
        tracker.log_artifact(path)
    return report


def persisted_objectives(experiment, paths, seeds):
    """Objectives whose every (beta, seed) point of the grid has persisted payloads."""
    found = []
    for objective in Objective:
        points = [paths.point_dir(objective.value, b, s) for b in experiment.beta_grid for s in seeds]
        if all(os.path.exists(os.path.join(p, training.PAYLOADS_FILE)) for p in points):
            found.append(objective.value)
    return found


def eval_rd(experiment, paths, objectives=None, seeds=None, tracker=None):
    """Rebuild the RD CSV of every (objective, beta, seed) from persisted checkpoints and payloads.

    Objectives default to every objective with a complete persisted grid for ``seeds``. Writes ``reports/rd.csv``,
    ``reports/rd-table.csv`` and ``reports/rd-summary.json``.

    Returns:
        (list[RDPoint], dict)

    Raises:
        FileNotFoundError: If a grid point has not been trained.
    """
    seeds = list(seeds if seeds is not None else [experiment.seed])
    if not objectives:
        objectives = persisted_objectives(experiment, paths, seeds) or [experiment.objective]
    objectives = [Objective.parse(o).value for o in objectives]
    teacher = load_teacher(experiment, paths)
    dataset = load_dataset(experiment)
    teacher_top1, _ = backbones.evaluate_top1(teacher, dataset.val)
    points = []
    for objective in objectives:
        for seed in seeds:
            for beta in experiment.beta_grid:
                point_dir = paths.point_dir(objective, beta, seed)
                points.append(
                    evaluate_persisted(point_dir, teacher, dataset.val, objective, beta, seed, teacher_top1)
                )
    reports = _utils.makedirs(paths.reports_dir)
    csv_path = write_rd_csv(points, os.path.join(reports, "rd.csv"))
    table_path = os.path.join(reports, "rd-table.csv")
    rd_table(points).to_csv(table_path, index=False)
    summary = rd_summary(points, experiment)
    summary["config_hash"] = experiment.config_hash()
    summary["teacher_top1"] = teacher_top1
    summary_path = os.path.join(reports, "rd-summary.json")
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, default=float)
        f.write("\n")
    if tracker is not None:
        tracker.log_table("rd", data_frame=pd.read_csv(csv_path))
        for path in (csv_path, table_path, summary_path):
            tracker.log_artifact(path)
    return points, summary


def _fresh_tail(spec, seed):
    return backbones.build_teacher(spec, seed).tail


def finetune(experiment, paths, objective, beta, seed, task="reattach", tracker=None):
    """Fine-tune a tail behind a trained, frozen bottleneck.

    ``reattach`` distills a tail of the ``tail_variant`` teacher from that teacher; ``coarse`` trains a fresh
    tail with cross-entropy on the 5-class relabelling and compares it with the same tail trained on the
    teacher's own head features.

    Returns:
        dict: Accuracies, predictive losses and the compression digests.
    """
    if task not in TASKS:
        raise ValueError("Unknown fine-tuning task {!r}; expected one of {}".format(task, TASKS))
    teacher = load_teacher(experiment, paths)
    point_dir = paths.point_dir(objective, beta, seed)
    pipeline = codec.load_pipeline(point_dir, head=teacher.head, tail=teacher.tail)
    directory = _utils.makedirs(paths.finetune_dir(task, objective, beta, seed))
    dataset = load_dataset(experiment)
    report = collections.OrderedDict([("task", task), ("objective", objective), ("beta", beta), ("seed", seed)])

    if task == "reattach":
        teacher_top1, _ = backbones.evaluate_top1(teacher, dataset.val)
        original_top1, _ = backbones.evaluate_top1(pipeline, dataset.val)
        reference = load_teacher(experiment, paths, experiment.tail_variant)
        tail = load_teacher(experiment, paths, experiment.tail_variant).tail
        reference_top1, _ = backbones.evaluate_top1(reference, dataset.val)
        report["original_predictive_loss"] = 100.0 * (teacher_top1 - original_top1)
    else:
        coarse_classes = len(set(data.coarse_label(c) for c in range(dataset.num_classes)))
        dataset = dataset.relabel(data.coarse_label)
        spec = experiment.backbone.replace(num_classes=coarse_classes)
        reference = None
        tail = _fresh_tail(spec, seed)
        reference_top1 = training.feature_baseline(teacher, _fresh_tail(spec, seed), dataset, experiment.finetune, seed)
        report["feature_baseline_top1"] = reference_top1

    with metrics.TrainingLogWriter(os.path.join(directory, "finetune.jsonl"), overwrite=True) as log_writer:
        result = training.finetune_tail(pipeline, tail, dataset, experiment.finetune, seed, reference, log_writer)
    checkpoint.save(tail, os.path.join(directory, TAIL_CHECKPOINT))
    report["top1"] = result.top1
    report["predictive_loss"] = 100.0 * (reference_top1 - result.top1)
    report["compression_digest"] = result.digest_after
    report["compression_unchanged"] = result.digest_before == result.digest_after
    with open(os.path.join(directory, "finetune.json"), "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    if tracker is not None:
        tracker.log_parameters({k: v for k, v in report.items() if not isinstance(v, bool)})
        tracker.log_input_artifact(os.path.join(point_dir, codec.DECODER_FILE), name="decoder")
        _log_history(tracker, result.history, ("loss",), prefix="tail_")
        tracker.log_artifacts(directory)
    return report


def eval_latency(experiment, paths, reference=False, objective=None, beta=None, seed=None, count=32, tracker=None):
    """Latency report, from the published inputs (``reference``) or from a trained point measured on this machine.

    Desk mode uses the point's persisted payload sizes, the stored-file sizes of the same samples as the raw
    baseline and compute costs measured over ``count`` validation images.

    Returns:
        (latency.LatencyReport, dict): The report and its summary (speedups, deviation from published totals).
    """
    summary = collections.OrderedDict()
    if reference:
        inputs = latency.load_reference()
        report = latency.reference_report(inputs)
        baseline = inputs["baseline"]
        summary["max_deviation_ms"] = latency.reference_deviation(report, inputs)
        summary["transfer_consistency"] = latency.transfer_consistency(inputs)
        directory = os.path.join(paths.reports_dir, "latency-reference")
    else:
        objective = objective or experiment.objective
        beta = experiment.beta_grid[0] if beta is None else beta
        seed = experiment.seed if seed is None else seed
        teacher = load_teacher(experiment, paths)
        dataset = load_dataset(experiment)
        point_dir = paths.point_dir(objective, beta, seed)
        pipeline = codec.load_pipeline(point_dir, head=teacher.head, tail=teacher.tail)
        records = range_coder.read_payloads(os.path.join(point_dir, training.PAYLOADS_FILE))
        raw_sizes = [dataset.manifest.raw_bytes[int(sid)] for sid, _ in records]
        images = list(dataset.val.images[: int(count)])
        bottleneck_costs, raw_costs = latency.measure_compute_costs(pipeline, teacher, images)
        report = latency.desk_report(
            [len(p) for _, p in records], raw_sizes, bottleneck_costs, raw_costs, experiment.channel_profiles
        )
        baseline = "raw"
        summary["compute"] = {
            "bottleneck": latency.ComputeCosts.to_dict(bottleneck_costs),
            "raw": latency.ComputeCosts.to_dict(raw_costs),
        }
        directory = os.path.join(paths.reports_dir, "latency")
    summary["speedups"] = report.speedups(baseline)
    written = report.save(directory, experiment.config_hash(), baseline)
    with open(os.path.join(directory, "latency-summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    if tracker is not None:
        tracker.log_table("latency", data_frame=report.to_frame())
        for path in written:
            tracker.log_artifact(path)
    return report, summary


def overhead(experiment, paths, profile=None):
    """Parameter counts of the bottleneck and the decoder overhead relative to the teacher."""
    from svbi.api_types import ENCODER_PROFILES

    encoder = ENCODER_PROFILES[profile] if profile else experiment.encoder
    try:
        teacher = load_teacher(experiment, paths)
    except FileNotFoundError:
        teacher = backbones.build_teacher(experiment.backbone, experiment.seed)
    pipeline = codec.build_pipeline(
        encoder, experiment.decoder, experiment.entropy, teacher.spec, experiment.seed, teacher.head, teacher.tail
    )
    report = pipeline.overhead_report(teacher)
    report["encoder_total_stride"] = encoder.total_stride
    report["decoder_upsample_steps"] = codec.upsample_steps(encoder, teacher.spec)
    return report


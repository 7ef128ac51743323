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
"""The ``svbi`` command line tool.

Every command prints a JSON line with the config hash and seed, then a JSON line with its result. Failures exit
with status 1 and a single JSON diagnostic line on stderr.
"""
import argparse
import json
import logging
import os
import sys

from svbi import _environment, codec, data, experiment, runtime, tracker
from svbi.api_types import DatasetManifest, Objective

logger = logging.getLogger(__name__)


def _floats(value):
    return [float(v) for v in value.split(",") if v.strip()]


def _ints(value):
    return [int(v) for v in value.split(",") if v.strip()]


def _add_point_arguments(parser, required=True):
    parser.add_argument("--objective", default=None, help="hd, sg-hd, direct-ce or direct-kd")
    parser.add_argument("--beta", type=float, required=required, default=None, help="rate weight")


def build_parser():
    parser = argparse.ArgumentParser(prog="svbi", description="Shallow variational bottleneck injection toolkit")
    parser.add_argument("--config", help="ExperimentConfig JSON file")
    parser.add_argument("--output-dir", help="output root (overrides the config and SVBI_OUTPUT_DIR)")
    parser.add_argument("--dataset", help="prepared dataset directory")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--log-level", default="INFO")
    commands = parser.add_subparsers(dest="command", required=True)

    prepare = commands.add_parser("prepare-data", help="decode, normalize and split a class-per-folder image set")
    prepare.add_argument("--source", required=True)
    prepare.add_argument("--out", required=True)
    prepare.add_argument("--val-fraction", type=float, default=0.2)
    prepare.add_argument("--stride", type=int, default=4)

    pretrain = commands.add_parser("pretrain", help="pretrain a teacher variant")
    pretrain.add_argument("--variant", choices=("backbone", "tail"), default="backbone")

    commands.add_parser("saliency", help="precompute saliency maps of the training split")

    train = commands.add_parser("train", help="train one bottleneck configuration")
    _add_point_arguments(train)

    sweep = commands.add_parser("sweep", help="train every beta of the grid")
    sweep.add_argument("--objective", default=None)
    sweep.add_argument("--betas", type=_floats, default=None, help="comma separated override of the beta grid")

    finetune = commands.add_parser("finetune", help="fine-tune a tail behind a frozen bottleneck")
    _add_point_arguments(finetune)
    finetune.add_argument("--task", choices=experiment.TASKS, default="reattach")

    check = commands.add_parser("lossless-check", help="retrain one configuration over several seeds")
    _add_point_arguments(check)
    check.add_argument("--seeds", type=_ints, default=None, help="comma separated seeds (default: the config seeds)")

    eval_rd = commands.add_parser("eval-rd", help="rate-distortion report from persisted payloads")
    eval_rd.add_argument("--objectives", default=None, help="comma separated objectives (default: all persisted)")
    eval_rd.add_argument("--seeds", type=_ints, default=None, help="comma separated seeds")

    eval_latency = commands.add_parser("eval-latency", help="latency report per channel")
    eval_latency.add_argument("--reference", action="store_true", help="use the published latency inputs")
    _add_point_arguments(eval_latency, required=False)
    eval_latency.add_argument("--count", type=int, default=32, help="images timed in desk mode")

    serve = commands.add_parser("serve", help="run the split server")
    _add_point_arguments(serve, required=False)
    serve.add_argument("--point", help="bottleneck directory (default: from objective, beta and seed)")
    serve.add_argument("--address", default="127.0.0.1:5555")

    infer = commands.add_parser("infer", help="classify one image through a split server")
    _add_point_arguments(infer, required=False)
    infer.add_argument("--point", help="bottleneck directory (default: from objective, beta and seed)")
    infer.add_argument("--image", required=True)
    infer.add_argument("--server", required=True, help="host:port")
    infer.add_argument("--shape", type=_ints, default=None, help="C,H,W of a raw float32 image file")
    infer.add_argument("--timeout", type=float, default=10.0)

    overhead = commands.add_parser("overhead", help="bottleneck parameter counts and decoder overhead")
    overhead.add_argument("--profile", choices=("desk", "full-scale"), default=None)
    return parser


def _emit(document):
    print(json.dumps(document, default=str))
    sys.stdout.flush()


def _point_dir(args, config, paths):
    if getattr(args, "point", None):
        return args.point
    beta = config.beta_grid[0] if args.beta is None else args.beta
    return paths.point_dir(args.objective or config.objective, beta, config.seed)


def _manifest(config):
    path = os.path.join(config.dataset_path, data.MANIFEST_FILE)
    return DatasetManifest.from_json(path) if os.path.exists(path) else None


def run(args):
    """Execute a parsed command and return its result document."""
    if args.command == "prepare-data":
        seed = args.seed if args.seed is not None else 0
        _emit({"command": args.command, "config_hash": None, "seed": seed})
        manifest = data.prepare_dataset(args.source, args.out, seed, args.val_fraction, args.stride)
        return DatasetManifest.to_dict(manifest)

    env = _environment.RunEnvironment.load()
    config = experiment.load_experiment(args.config, seed=args.seed, dataset_path=args.dataset)
    output_dir = args.output_dir or (env.resolve_output_dir(config.output_dir) if env else config.output_dir)
    paths = experiment.ExperimentPaths(output_dir)
    _emit({"command": args.command, "config_hash": config.config_hash(), "seed": config.seed})

    if args.command == "serve":
        teacher = experiment.load_teacher(config, paths)
        pipeline = codec.load_pipeline(_point_dir(args, config, paths), tail=teacher.tail, parts=("decoder",))
        manifest = _manifest(config)
        service = runtime.InferenceService.from_pipeline(pipeline, image_dims=manifest.image_dims if manifest else None)
        server = runtime.serve(args.address, service)
        return {"sessions": dict(server.sessions)}
    if args.command == "infer":
        pipeline = codec.load_pipeline(_point_dir(args, config, paths), parts=("encoder",))
        image = data.load_image_file(args.image, _manifest(config), args.shape)
        return runtime.client_infer(args.server, pipeline, image, args.timeout).to_dict()
    if args.command == "overhead":
        return experiment.overhead(config, paths, args.profile)

    with tracker.Tracker.create(output_dir, args.command, config=config, seed=config.seed) as run_tracker:
        run_tracker.log_parameters({"command": args.command, "config_hash": config.config_hash()})
        objective = Objective.parse(getattr(args, "objective", None) or config.objective).value
        if args.command == "pretrain":
            spec = config.tail_variant if args.variant == "tail" else config.backbone
            result = experiment.pretrain(config, paths, spec, run_tracker)
            return {"variant": experiment.variant_name(spec), "val_top1": result.top1, "history": result.history}
        if args.command == "saliency":
            store = experiment.compute_saliency(config, paths, run_tracker)
            return {"maps": len(store), "shape": list(store.shape), "layers": list(store.layers)}
        if args.command == "train":
            point = experiment.train(config, paths, objective, args.beta, config.seed, run_tracker)
            return type(point).to_dict(point)
        if args.command == "sweep":
            points, csv_path = experiment.sweep(config, paths, objective, config.seed, args.betas, run_tracker)
            return {"csv": csv_path, "points": [type(p).to_dict(p) for p in points]}
        if args.command == "finetune":
            return experiment.finetune(config, paths, objective, args.beta, config.seed, args.task, run_tracker)
        if args.command == "lossless-check":
            return experiment.lossless_check(config, paths, objective, args.beta, args.seeds, run_tracker)
        if args.command == "eval-rd":
            objectives = args.objectives.split(",") if args.objectives else None
            _, summary = experiment.eval_rd(config, paths, objectives, args.seeds, run_tracker)
            return summary
        if args.command == "eval-latency":
            report, summary = experiment.eval_latency(
                config, paths, args.reference, objective, args.beta, config.seed, args.count, run_tracker
            )
            return {"rows": report.rows, "summary": summary}
    raise ValueError("Unknown command {!r}".format(args.command))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _emit(run(args))
    except KeyboardInterrupt:
        return 130
    except Exception as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        diagnostic = {"error": type(e).__name__, "message": str(e), "command": args.command}
        sys.stderr.write(json.dumps(diagnostic) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

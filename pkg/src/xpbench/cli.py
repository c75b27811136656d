"""Command-line driver.

Subcommands mirror the pipeline stages (``simulate`` .. ``report`` plus
``pipeline`` for the whole chain against a run directory), and ``explain``
additionally works standalone on a saved model file and an instances CSV.
The ``XPB_LOG`` environment variable sets the log level.
"""

import argparse
import logging
import os
import sys
import time

from . import pipeline
from .errors import XpbenchError


def _add_common(parser):
    parser.add_argument("--config", required=True, help="run config document")
    parser.add_argument("--out", required=True, help="run directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--workers", type=int, default=1,
                        help="parallel instance workers for the explain stage")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="xpbench",
        description="black-box explainer benchmark pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in pipeline.STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage (and nothing after)")
        _add_common(p)
        if stage == "explain":
            p.add_argument("--method", default=None,
                           choices=["lime", "kshap", "pshap", "cem", "dice"],
                           help="restrict to one method")
            p.add_argument("--model", default=None,
                           help="standalone mode: model file instead of a run dir")
            p.add_argument("--instances", default=None,
                           help="standalone mode: instances CSV")
            p.add_argument("--background", default=None,
                           help="standalone mode: background instances CSV")

    p = sub.add_parser("pipeline", help="run every stage in order")
    _add_common(p)
    return parser


def _load_config(args):
    config = pipeline.load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _standalone_explain(args, config):
    """Explain instances from a CSV against a saved model file."""
    from .predictor import load_model
    from .importance import write_importance_csv
    from .predictor import load_instances_csv

    log = logging.getLogger("xpbench.cli")
    handle = load_model(args.model)
    instances = load_instances_csv(args.instances)
    background_src = args.background or args.instances
    bg_instances = load_instances_csv(background_src)
    import numpy as np
    background = np.stack([inst.values for inst in bg_instances])
    sample_sd = np.stack([inst.values for inst in instances]).std(axis=0)
    cfgs = pipeline._explainer_configs(config)
    method = args.method or "kshap"
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, f"importance_{method}.csv")
    vectors = []
    week_count = instances[0].week_count
    names = instances[0].feature_names
    for inst in instances:
        if inst.values.size != handle.dim:
            raise XpbenchError(
                f"instance {inst.instance_id} width {inst.values.size} "
                f"!= model width {handle.dim}")
        started = time.perf_counter()
        tmp = os.path.join(args.out, f".{method}_{inst.instance_id}.csv")
        cf_tmp = os.path.join(args.out, f"counterfactuals_{method}_{inst.instance_id}.csv") \
            if method in ("cem", "dice") else None
        pipeline.explain_one(method, args.model, inst.values, inst.instance_id,
                             week_count, names, background, sample_sd,
                             background, cfgs, config["seed"], tmp, cf_tmp)
        from .importance import read_importance_csv
        vecs, _, _ = read_importance_csv(tmp)
        os.remove(tmp)
        vectors.extend(vecs)
        log.info("%s on %s took %.2fs", method, inst.instance_id,
                 time.perf_counter() - started)
    write_importance_csv(out_path, vectors, week_count, names)
    print(out_path)
    return 0


def main(argv=None):
    level = os.environ.get("XPB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "explain" and args.model:
            if not args.instances:
                raise XpbenchError("standalone explain needs --instances")
            return _standalone_explain(args, config)
        if args.command == "explain" and args.method:
            config["explain.methods"] = (args.method,)
        if args.command == "pipeline":
            pipeline.run_pipeline(config, args.out, workers=args.workers)
        else:
            index = pipeline.STAGES.index(args.command)
            pipeline.run_pipeline(config, args.out, workers=args.workers,
                                  only_stages=pipeline.STAGES[: index + 1])
        return 0
    except XpbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

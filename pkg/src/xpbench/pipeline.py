"""Resumable end-to-end runs: simulate/ingest -> features -> filter -> train ->
sample -> explain -> agree -> report.

A run directory carries a manifest recording, per stage, a digest of the
config slice the stage depends on, a digest of its input files, and digests
of its outputs.  Re-running skips stages whose slices, inputs and outputs all
match, so an interrupted run resumes where it stopped; the explain stage
additionally resumes per instance.  Everything is deterministic given the
config and seed: two runs produce byte-identical bundles.
"""

import csv
import hashlib
import json
import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import agreement, cohort, counterfactual, featgen, lime, shapley, simgen, svgplot
from .errors import ConfigError, InsufficientClassError, NoExplanationError, StageError
from .importance import ImportanceVector, read_importance_csv, write_importance_csv
from .predictor import (
    LabeledDataset,
    balanced_accuracy,
    load_model,
    save_model,
    stratified_split,
    train_logistic,
    train_sequence_net,
)

log = logging.getLogger(__name__)

STAGES = ("simulate", "features", "filter", "train", "sample",
          "explain", "agree", "report")

# key -> (type tag, default); the whole registry doubles as the unknown-key guard
CONFIG_SPEC = {
    "seed": ("int", 7),
    "course.source": ("str", "synthetic"),
    "course.id": ("str", "course"),
    "course.events": ("str", ""),
    "course.schedule": ("str", ""),
    "course.grades": ("str", ""),
    "course.labels": ("str", ""),
    "task.kind": ("str", "success"),
    "task.week": ("int", 5),
    "sim.students": ("int", 300),
    "sim.weeks": ("int", 0),
    "sim.videos_per_week": ("int", 4),
    "sim.quizzes_per_week": ("int", 2),
    "sim.alpha": ("float", 0.8),
    "sim.noise_sd": ("float", 0.08),
    "sim.dag": ("str", "dsp1"),
    "sim.target_pass_rate": ("float", -1.0),
    "sim.engagement_min": ("float", 0.15),
    "sim.engagement_max": ("float", 1.0),
    "featgen.session_gap_minutes": ("float", 30.0),
    "featgen.start_weekday": ("int", 0),
    "filter.enabled": ("bool", True),
    "train.kind": ("str", "mlp"),
    "train.hidden_sizes": ("ints", (32, 16)),
    "train.epochs": ("int", 15),
    "train.learning_rate": ("float", 0.001),
    "train.batch_size": ("int", 32),
    "train.l2": ("float", 0.001),
    "train.test_fraction": ("float", 0.2),
    "sample.n": ("int", 100),
    "explain.methods": ("strs", ("lime", "kshap", "pshap", "cem", "dice")),
    "lime.num_samples": ("int", 1000),
    "lime.kernel_width": ("float", -1.0),
    "lime.perturbation_scale": ("float", 1.0),
    "lime.ridge_strength": ("float", 1.0),
    "shap.num_coalitions": ("int", 2048),
    "shap.background_size": ("int", 100),
    "shap.num_permutations": ("int", 10),
    "cem.l1_weight": ("float", 0.1),
    "cem.l2_weight": ("float", 1.0),
    "cem.attack_weight": ("float", 10.0),
    "cem.margin": ("float", 0.05),
    "cem.max_steps": ("int", 2000),
    "cem.restarts": ("int", 5),
    "dice.k": ("int", 4),
    "dice.lambda1": ("float", 0.5),
    "dice.lambda2": ("float", 1.0),
    "dice.max_steps": ("int", 5000),
    "dice.change_tolerance": ("float", 0.01),
    "agree.top_k": ("int", 10),
}

# config slices each stage's behavior depends on
_STAGE_PREFIXES = {
    "simulate": ("seed", "course.", "sim."),
    "features": ("featgen.", "task."),
    "filter": ("filter.",),
    "train": ("seed", "task.", "train."),
    "sample": ("seed", "sample.", "task."),
    "explain": ("seed", "explain.", "lime.", "shap.", "cem.", "dice."),
    "agree": ("agree.", "course.id", "explain.methods"),
    "report": (),
}


def _convert(key, raw):
    tag = CONFIG_SPEC[key][0]
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"bad boolean {raw!r}")
        if tag == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if tag == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"key {key}: {exc}") from None


def parse_config(text):
    """Parse the flat key-value config document; unknown keys are hard errors."""
    config = {key: default for key, (_, default) in CONFIG_SPEC.items()}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in CONFIG_SPEC:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        config[key] = _convert(key, raw.strip())
    return config


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def _digest_bytes(data):
    return hashlib.sha256(data).hexdigest()


def _digest_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_digest(config, prefixes):
    keys = sorted(k for k in config
                  if any(k == p or k.startswith(p) for p in prefixes))
    blob = json.dumps({k: config[k] for k in keys}, sort_keys=True)
    return _digest_bytes(blob.encode())


def _full_config_digest(config):
    return _digest_bytes(json.dumps(
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in config.items()},
        sort_keys=True).encode())


class RunManifest:
    """Stage completion flags plus the digests that justify skipping them."""

    def __init__(self, out_dir, config):
        self.out_dir = out_dir
        self.path = os.path.join(out_dir, "manifest.json")
        self.data = {
            "run_id": _full_config_digest(config)[:12],
            "config_hash": _full_config_digest(config),
            "seed": config["seed"],
            "stages": {},
        }

    @classmethod
    def open_or_create(cls, out_dir, config):
        manifest = cls(out_dir, config)
        if os.path.exists(manifest.path):
            with open(manifest.path) as fh:
                recorded = json.load(fh)
            if recorded.get("config_hash") == manifest.data["config_hash"]:
                manifest.data = recorded
                manifest.data.pop("failed_stage", None)
            # a changed config invalidates everything; keep the fresh manifest
        return manifest

    def save(self):
        tmp = self.path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.data, fh, sort_keys=True, indent=1)
            fh.write("\n")
        os.replace(tmp, self.path)

    def stage_fresh(self, name, cfg_digest, input_digest):
        entry = self.data["stages"].get(name)
        if (not entry or not entry.get("complete")
                or entry.get("config_digest") != cfg_digest
                or entry.get("input_digest") != input_digest):
            return False
        for rel, digest in entry.get("outputs", {}).items():
            path = os.path.join(self.out_dir, rel)
            if not os.path.exists(path) or _digest_file(path) != digest:
                return False
        return True

    def record_stage(self, name, cfg_digest, input_digest, output_paths):
        outputs = {}
        for rel in sorted(output_paths):
            outputs[rel] = _digest_file(os.path.join(self.out_dir, rel))
        self.data["stages"][name] = {
            "complete": True,
            "config_digest": cfg_digest,
            "input_digest": input_digest,
            "outputs": outputs,
        }
        self.save()


def _input_digest(out_dir, rel_paths, extra=""):
    parts = [extra]
    for rel in sorted(rel_paths):
        path = rel if os.path.isabs(rel) else os.path.join(out_dir, rel)
        parts.append(rel + ":" + (_digest_file(path) if os.path.exists(path) else "missing"))
    return _digest_bytes("|".join(parts).encode())


# ---------------------------------------------------------------------------
# stage implementations

def _data_paths():
    return {
        "events": "data/events.csv",
        "schedule": "data/schedule.txt",
        "grades": "data/grades.csv",
        "labels": "data/labels.csv",
    }


def _write_labels_csv(path, student_ids, labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "label"])
        for sid, lab in zip(student_ids, labels):
            writer.writerow([sid, int(lab)])


def _read_labels_csv(path):
    ids, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for sid, lab in reader:
            ids.append(sid)
            labels.append(int(lab))
    return ids, np.array(labels, dtype=int)


def _sim_config(config):
    return simgen.SimConfig(
        student_count=config["sim.students"],
        week_count=config["sim.weeks"] or None,
        videos_per_week=config["sim.videos_per_week"],
        quizzes_per_week=config["sim.quizzes_per_week"],
        engagement_range=(config["sim.engagement_min"], config["sim.engagement_max"]),
        prereq_weight=config["sim.alpha"],
        noise_sd=config["sim.noise_sd"],
        target_pass_rate=(config["sim.target_pass_rate"]
                          if config["sim.target_pass_rate"] >= 0 else None),
        seed=config["seed"],
    )


def stage_simulate(config, out_dir):
    paths = _data_paths()
    os.makedirs(os.path.join(out_dir, "data"), exist_ok=True)
    if config["course.source"] == "files":
        for key, source_key in (("events", "course.events"),
                                ("schedule", "course.schedule"),
                                ("grades", "course.grades"),
                                ("labels", "course.labels")):
            source = config[source_key]
            if not source or not os.path.exists(source):
                raise StageError("simulate", f"missing input file {source!r}")
            shutil.copyfile(source, os.path.join(out_dir, paths[key]))
        return list(paths.values())
    if config["course.source"] != "synthetic":
        raise StageError("simulate", f"unknown course.source {config['course.source']!r}")
    dag = simgen.dsp1_skill_dag() if config["sim.dag"] == "dsp1" \
        else simgen.chain_skill_dag(max(config["sim.weeks"], 2))
    event_log, schedule, book, labels = simgen.generate_course(dag, _sim_config(config))
    featgen.write_event_log(event_log, os.path.join(out_dir, paths["events"]))
    featgen.write_schedule(schedule, os.path.join(out_dir, paths["schedule"]))
    featgen.write_gradebook(book, os.path.join(out_dir, paths["grades"]))
    _write_labels_csv(os.path.join(out_dir, paths["labels"]), book.student_ids, labels)
    return list(paths.values())


def _up_to_week(config, schedule):
    if config["task.kind"] == "week_assignment":
        return min(config["task.week"], schedule.week_count)
    return schedule.week_count


def stage_features(config, out_dir):
    paths = _data_paths()
    event_log = featgen.parse_event_log(os.path.join(out_dir, paths["events"]))
    schedule = featgen.parse_schedule(os.path.join(out_dir, paths["schedule"]))
    book = featgen.parse_gradebook(os.path.join(out_dir, paths["grades"]))
    extract_cfg = featgen.ExtractConfig(
        session_gap_seconds=config["featgen.session_gap_minutes"] * 60.0,
        start_weekday=config["featgen.start_weekday"],
    )
    tensor = featgen.extract_features(event_log, schedule, book,
                                      _up_to_week(config, schedule), extract_cfg)
    normalized = featgen.normalize(tensor)
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    featgen.write_feature_csv(normalized, os.path.join(out_dir, "features/tensor.csv"))
    return ["features/tensor.csv"]


def stage_filter(config, out_dir):
    paths = _data_paths()
    book = featgen.parse_gradebook(os.path.join(out_dir, paths["grades"]))
    ids, labels = _read_labels_csv(os.path.join(out_dir, paths["labels"]))
    os.makedirs(os.path.join(out_dir, "filter"), exist_ok=True)
    if config["filter.enabled"] and book.grades.shape[1] >= 2:
        dropout = cohort.fit_dropout_filter(book.grades[:, :2], labels)
        retained = cohort.filter_early_dropouts(dropout, book.grades[:, :2], ids)
        threshold = dropout.threshold
        save_model(dropout.model, os.path.join(out_dir, "filter/model.txt"))
        extra = ["filter/model.txt"]
    else:
        retained, threshold, extra = list(ids), None, []
    with open(os.path.join(out_dir, "filter/retained.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id"])
        for sid in retained:
            writer.writerow([sid])
    with open(os.path.join(out_dir, "filter/filter.json"), "w") as fh:
        json.dump({"threshold": threshold, "retained": len(retained),
                   "total": len(ids)}, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return ["filter/retained.csv", "filter/filter.json", *extra]


def _read_retained(out_dir):
    with open(os.path.join(out_dir, "filter/retained.csv"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [row[0] for row in reader]


def _task_labels(config, out_dir, retained_ids):
    paths = _data_paths()
    if config["task.kind"] == "week_assignment":
        book = featgen.parse_gradebook(os.path.join(out_dir, paths["grades"]))
        keep = [book.student_ids.index(sid) for sid in retained_ids]
        sub = featgen.GradeBook(tuple(retained_ids), book.grades[keep])
        return simgen.assignment_labels(sub, config["task.week"])
    ids, labels = _read_labels_csv(os.path.join(out_dir, paths["labels"]))
    index = {sid: i for i, sid in enumerate(ids)}
    return np.array([labels[index[sid]] for sid in retained_ids], dtype=int)


def _retained_tensor(out_dir, retained_ids):
    tensor = featgen.read_feature_csv(os.path.join(out_dir, "features/tensor.csv"))
    index = {sid: i for i, sid in enumerate(tensor.student_ids)}
    return tensor.subset([index[sid] for sid in retained_ids])


def stage_train(config, out_dir):
    retained = _read_retained(out_dir)
    tensor = _retained_tensor(out_dir, retained)
    labels = _task_labels(config, out_dir, retained)
    train_idx, test_idx = stratified_split(labels, config["train.test_fraction"],
                                           seed=config["seed"])
    dataset = LabeledDataset(tensor.subset(train_idx), labels[train_idx],
                             [retained[i] for i in train_idx])
    if config["train.kind"] == "logistic":
        handle = train_logistic(dataset.features.flat_matrix(), dataset.labels,
                                l2_strength=config["train.l2"],
                                week_count=tensor.week_count,
                                feature_names=tensor.feature_names)
    else:
        handle = train_sequence_net(
            dataset,
            hidden_sizes=config["train.hidden_sizes"],
            epochs=config["train.epochs"],
            learning_rate=config["train.learning_rate"],
            batch_size=config["train.batch_size"],
            seed=config["seed"],
            week_shared=config["train.kind"] == "mlp-weekshared",
        )
    os.makedirs(os.path.join(out_dir, "model"), exist_ok=True)
    save_model(handle, os.path.join(out_dir, "model/model.txt"))
    test_pred = (handle.predict(tensor.subset(test_idx).flat_matrix()) >= 0.5).astype(int)
    metrics = {
        "train_size": int(train_idx.size),
        "test_size": int(test_idx.size),
        "test_balanced_accuracy": (
            balanced_accuracy(labels[test_idx], test_pred)
            if np.unique(labels[test_idx]).size == 2 else None),
    }
    with open(os.path.join(out_dir, "model/metrics.json"), "w") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "model/train_split.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "role"])
        for i in train_idx:
            writer.writerow([retained[i], "train"])
        for i in test_idx:
            writer.writerow([retained[i], "test"])
    return ["model/model.txt", "model/metrics.json", "model/train_split.csv"]


def stage_sample(config, out_dir):
    retained = _read_retained(out_dir)
    tensor = _retained_tensor(out_dir, retained)
    labels = _task_labels(config, out_dir, retained)
    handle = load_model(os.path.join(out_dir, "model/model.txt"))
    probs = handle.predict(tensor.flat_matrix())
    try:
        sample = cohort.representative_sample(probs, labels, config["sample.n"],
                                              seed=config["seed"])
    except InsufficientClassError as exc:
        raise StageError("sample", str(exc)) from exc
    os.makedirs(os.path.join(out_dir, "sample"), exist_ok=True)
    cohort.write_sample_csv(sample, retained, os.path.join(out_dir, "sample/sample.csv"))
    return ["sample/sample.csv"]


def _read_sample_ids(out_dir):
    with open(os.path.join(out_dir, "sample/sample.csv"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [row[0] for row in reader]


def _train_ids(out_dir):
    ids = []
    with open(os.path.join(out_dir, "model/train_split.csv"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for sid, role in reader:
            if role == "train":
                ids.append(sid)
    return ids


def instance_seed(seed, method, instance_id):
    """Stable per-instance stream: identical regardless of worker layout."""
    digest = hashlib.sha256(f"{seed}:{method}:{instance_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _explainer_configs(config):
    return {
        "lime": {
            "num_samples": config["lime.num_samples"],
            "kernel_width": (config["lime.kernel_width"]
                             if config["lime.kernel_width"] > 0 else None),
            "perturbation_scale": config["lime.perturbation_scale"],
            "ridge_strength": config["lime.ridge_strength"],
        },
        "shap": {
            "num_coalitions": config["shap.num_coalitions"],
            "background_size": config["shap.background_size"],
            "num_permutations": config["shap.num_permutations"],
        },
        "cem": {
            "l1_weight": config["cem.l1_weight"],
            "l2_weight": config["cem.l2_weight"],
            "attack_weight": config["cem.attack_weight"],
            "margin": config["cem.margin"],
            "max_steps": config["cem.max_steps"],
            "restarts": config["cem.restarts"],
        },
        "dice": {
            "k": config["dice.k"],
            "lambda1": config["dice.lambda1"],
            "lambda2": config["dice.lambda2"],
            "max_steps": config["dice.max_steps"],
            "change_tolerance": config["dice.change_tolerance"],
        },
    }


def _write_cf_rows(path, instance_id, week_count, feature_names, original,
                   counterfactuals, converged_flags):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "cf_index", "converged", "week",
                         "feature", "original", "counterfactual"])
        fcount = len(feature_names)
        for ci, cf in enumerate(counterfactuals):
            for w in range(1, week_count + 1):
                for f, name in enumerate(feature_names):
                    pos = (w - 1) * fcount + f
                    writer.writerow([instance_id, ci, int(converged_flags[ci]),
                                     w, name, repr(float(original[pos])),
                                     repr(float(cf[pos]))])


def explain_one(method, model_path, values, instance_id, week_count,
                feature_names, background, sample_sd, train_scales,
                explainer_cfg, seed, out_path, cf_path=None):
    """Explain a single instance and write its per-instance files."""
    from .predictor import Instance  # local import keeps workers light

    handle = _cached_model(model_path)
    inst = Instance(np.asarray(values, dtype=float), week_count,
                    tuple(feature_names), instance_id=instance_id)
    iseed = instance_seed(seed, method, instance_id)
    started = time.perf_counter()
    if method == "lime":
        vec = lime.lime_explain(handle, inst, background,
                                lime.LimeConfig(seed=iseed, **explainer_cfg["lime"]))
    elif method in ("kshap", "pshap"):
        cfg = shapley.ShapConfig(seed=iseed, **explainer_cfg["shap"])
        fn = shapley.kernel_shap if method == "kshap" else shapley.permutation_shap
        _, vec = fn(handle, inst, background, cfg)
    elif method == "cem":
        res = counterfactual.cem_pertinent_negative(
            handle, inst, sample_sd,
            counterfactual.CemConfig(seed=iseed, **explainer_cfg["cem"]))
        vec = res.importance
        _write_cf_rows(cf_path, instance_id, week_count, feature_names,
                       res.original, [res.pn], [res.converged])
    elif method == "dice":
        cfg = counterfactual.DiceConfig(seed=iseed, **explainer_cfg["dice"])
        cfset = counterfactual.dice_generate(handle, inst, train_scales, cfg)
        try:
            vec = counterfactual.dice_importance(cfset, cfg.change_tolerance)
        except NoExplanationError:
            vec = ImportanceVector(np.zeros(len(values)), "dice", instance_id,
                                   flags=("no_converged_counterfactuals",))
        _write_cf_rows(cf_path, instance_id, week_count, feature_names,
                       cfset.original, list(cfset.counterfactuals),
                       list(cfset.converged))
    else:
        raise StageError("explain", f"unknown method {method!r}")
    write_importance_csv(out_path, [vec], week_count, feature_names)
    log.info("explained %s/%s in %.2fs", method, instance_id,
             time.perf_counter() - started)
    return out_path


_MODEL_CACHE = {}


def _cached_model(path):
    key = (path, os.path.getmtime(path))
    if key not in _MODEL_CACHE:
        _MODEL_CACHE.clear()
        _MODEL_CACHE[key] = load_model(path)
    return _MODEL_CACHE[key]


def _explain_task(task):
    return explain_one(**task)


def stage_explain(config, out_dir, workers=1):
    retained = _read_retained(out_dir)
    tensor = _retained_tensor(out_dir, retained)
    sample_ids = _read_sample_ids(out_dir)
    index = {sid: i for i, sid in enumerate(retained)}
    flat = tensor.flat_matrix()
    train_ids = _train_ids(out_dir)
    background = flat[[index[sid] for sid in train_ids]]
    sample_matrix = flat[[index[sid] for sid in sample_ids]]
    sample_sd = sample_matrix.std(axis=0)
    model_path = os.path.join(out_dir, "model/model.txt")
    explainer_cfg = _explainer_configs(config)
    methods = config["explain.methods"]

    outputs = []
    tasks = []
    for method in methods:
        mdir = os.path.join(out_dir, "explain", method)
        os.makedirs(mdir, exist_ok=True)
        for sid in sample_ids:
            rel = f"explain/{method}/{sid}.csv"
            cf_rel = f"explain/{method}/{sid}.cf.csv" if method in ("cem", "dice") else None
            outputs.append(rel)
            if cf_rel:
                outputs.append(cf_rel)
            out_path = os.path.join(out_dir, rel)
            if os.path.exists(out_path) and _valid_instance_file(out_path):
                continue  # crash-resume: keep finished instances
            tasks.append(dict(
                method=method, model_path=model_path,
                values=flat[index[sid]], instance_id=sid,
                week_count=tensor.week_count, feature_names=tensor.feature_names,
                background=background, sample_sd=sample_sd,
                train_scales=background, explainer_cfg=explainer_cfg,
                seed=config["seed"], out_path=out_path,
                cf_path=os.path.join(out_dir, cf_rel) if cf_rel else None,
            ))

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_explain_task, tasks, chunksize=4))
    else:
        for task in tasks:
            _explain_task(task)

    # merge per-instance files (sorted by the sample order) per method
    for method in methods:
        merged = os.path.join(out_dir, f"explain/{method}.csv")
        with open(merged, "w", newline="") as out:
            writer = csv.writer(out)
            writer.writerow(["instance_id", "method", "week", "feature", "score"])
            for sid in sample_ids:
                with open(os.path.join(out_dir, f"explain/{method}/{sid}.csv"),
                          newline="") as fh:
                    reader = csv.reader(fh)
                    next(reader)
                    writer.writerows(reader)
        outputs.append(f"explain/{method}.csv")
    sd_path = "explain/feature_sd.csv"
    with open(os.path.join(out_dir, sd_path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["week", "feature", "sd"])
        fcount = tensor.feature_count
        for w in range(1, tensor.week_count + 1):
            for f, name in enumerate(tensor.feature_names):
                writer.writerow([w, name, repr(float(sample_sd[(w - 1) * fcount + f]))])
    outputs.append(sd_path)
    return outputs


def _valid_instance_file(path):
    try:
        vectors, _, _ = read_importance_csv(path)
        return len(vectors) == 1
    except Exception:
        return False


def stage_agree(config, out_dir):
    sample_ids = _read_sample_ids(out_dir)
    runs = []
    for method in config["explain.methods"]:
        vectors, week_count, _ = read_importance_csv(
            os.path.join(out_dir, f"explain/{method}.csv"))
        by_id = {vec.instance_id: vec.scores for vec in vectors}
        matrix = np.stack([by_id[sid] for sid in sample_ids])
        runs.append(agreement.MethodRun(method, config["course.id"],
                                        tuple(sample_ids), matrix, week_count))
    report = agreement.build_agreement_report(runs, top_k=config["agree.top_k"])
    adir = os.path.join(out_dir, "agree")
    os.makedirs(adir, exist_ok=True)
    agreement.write_matrix_csv(os.path.join(adir, "spearman.csv"),
                               report.spearman, report.methods)
    agreement.write_matrix_csv(os.path.join(adir, "jsd.csv"),
                               report.jsd, report.methods)
    labels = [(m, report.course) for m in report.methods]
    agreement.write_pca_csv(os.path.join(adir, "pca.csv"), labels, report.pca_coords)
    outputs = ["agree/spearman.csv", "agree/jsd.csv", "agree/pca.csv"]
    tensor_names = _retained_tensor(out_dir, _read_retained(out_dir)).feature_names
    for method, heatmap in report.heatmaps.items():
        rel = f"agree/heatmap_{method}.csv"
        agreement.write_heatmap_csv(os.path.join(out_dir, rel), heatmap, tensor_names)
        outputs.append(rel)
    return outputs


def stage_report(config, out_dir):
    rdir = os.path.join(out_dir, "report")
    os.makedirs(rdir, exist_ok=True)
    outputs = []
    for name in ("spearman", "jsd"):
        src = os.path.join(out_dir, f"agree/{name}.csv")
        shutil.copyfile(src, os.path.join(rdir, f"{name}.csv"))
        outputs.append(f"report/{name}.csv")
    for method in config["explain.methods"]:
        heatmap, names = agreement.read_heatmap_csv(
            os.path.join(out_dir, f"agree/heatmap_{method}.csv"))
        svg = svgplot.heatmap_svg(
            heatmap.T, names, [f"w{w + 1}" for w in range(heatmap.shape[0])],
            title=f"{method} rank scores ({config['course.id']})")
        rel = f"report/heatmap_{method}.svg"
        with open(os.path.join(out_dir, rel), "w") as fh:
            fh.write(svg)
        outputs.append(rel)
    with open(os.path.join(out_dir, "agree/pca.csv"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        points = [(float(r[2]), float(r[3]), r[1], r[0]) for r in reader]
    svg = svgplot.scatter_svg(points, title="importance profiles (PCA)")
    with open(os.path.join(out_dir, "report/pca.svg"), "w") as fh:
        fh.write(svg)
    outputs.append("report/pca.svg")
    return outputs


_STAGE_INPUTS = {
    "simulate": lambda c, d: [],
    "features": lambda c, d: list(_data_paths().values()),
    "filter": lambda c, d: [_data_paths()["grades"], _data_paths()["labels"]],
    "train": lambda c, d: ["features/tensor.csv", "filter/retained.csv",
                           _data_paths()["grades"], _data_paths()["labels"]],
    "sample": lambda c, d: ["features/tensor.csv", "filter/retained.csv",
                            "model/model.txt"],
    "explain": lambda c, d: ["features/tensor.csv", "model/model.txt",
                             "model/train_split.csv", "sample/sample.csv"],
    "agree": lambda c, d: [f"explain/{m}.csv" for m in c["explain.methods"]],
    "report": lambda c, d: (["agree/spearman.csv", "agree/jsd.csv", "agree/pca.csv"]
                            + [f"agree/heatmap_{m}.csv" for m in c["explain.methods"]]),
}

_STAGE_FN = {
    "simulate": stage_simulate,
    "features": stage_features,
    "filter": stage_filter,
    "train": stage_train,
    "sample": stage_sample,
    "explain": stage_explain,
    "agree": stage_agree,
    "report": stage_report,
}


def run_pipeline(config, out_dir, workers=1, only_stages=None):
    """Execute the stages in order against ``out_dir``; returns the manifest.

    Stages whose config slice, inputs and recorded outputs are unchanged are
    skipped.  On failure the manifest records the failed stage and earlier
    outputs stay intact.
    """
    if isinstance(config, str):
        config = load_config(config)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.snapshot"), "w") as fh:
        for key in sorted(config):
            value = config[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")
    manifest = RunManifest.open_or_create(out_dir, config)
    stages = only_stages or STAGES
    for name in stages:
        cfg_digest = config_digest(config, _STAGE_PREFIXES[name])
        input_digest = _input_digest(out_dir, _STAGE_INPUTS[name](config, out_dir))
        if manifest.stage_fresh(name, cfg_digest, input_digest):
            log.info("stage %s up to date, skipping", name)
            continue
        log.info("running stage %s", name)
        try:
            if name == "explain":
                outputs = stage_explain(config, out_dir, workers=workers)
            else:
                outputs = _STAGE_FN[name](config, out_dir)
        except Exception as exc:
            manifest.data["failed_stage"] = name
            manifest.save()
            if isinstance(exc, StageError):
                raise
            raise StageError(name, str(exc)) from exc
        manifest.record_stage(name, cfg_digest, input_digest, outputs)
    return manifest

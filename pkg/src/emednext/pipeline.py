"""Batch drivers for preprocess / infer / postprocess / evaluate.

Directory layout::

    <input_dir>/<case>/<case>-{flair,t1,t1ce,t2}.nii.gz [+ <case>-seg.nii.gz]
    <work_dir>/preprocessed/<case>/<case>-{image,label}.nii.gz, <case>-meta.json
    <work_dir>/acc/<case>/{tc,wt,et}.f64 + state.json
    <work_dir>/probs/<case>-probs.nii.gz          (model space, TC/WT/ET)
    <work_dir>/manifests/<case>.jsonl             (append-only, one line per stage)
    <output_dir>/<case>-seg.nii.gz                (original space)
    <output_dir>/report.{json,csv}

Failures are per case; only configuration problems abort a run.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .inference import (
    EnsembleAccumulator,
    SlidingWindowConfig,
    accumulate_model,
    check_weights,
    normalize_ensemble,
    restore_to_original_space,
    tta_predict,
)
from .metrics import MetricsReport, evaluate_case
from .model import ModelFormatError, load_model
from .postprocess import PostprocessConfig, postprocess_pipeline
from .preprocess import MODALITIES, CaseMeta, PreprocessConfig, stack_case
from .volume import ProbMaps, read_labels, read_nifti, write_nifti

log = logging.getLogger(__name__)

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    dilation_vox: int = 1
    tolerances: tuple[float, float] = (0.5, 1.0)


@dataclass(frozen=True)
class PipelineConfig:
    input_dir: str
    work_dir: str
    output_dir: str
    models: tuple[str, ...] = ()
    weights: tuple[tuple[float, float, float], ...] | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    sliding_window: SlidingWindowConfig = field(default_factory=SlidingWindowConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        dirs = [os.path.abspath(d) for d in (self.input_dir, self.work_dir, self.output_dir)]
        if len(set(dirs)) != 3:
            raise ConfigError("input_dir, work_dir and output_dir must be distinct")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        nested = {
            "preprocess": PreprocessConfig,
            "sliding_window": SlidingWindowConfig,
            "postprocess": PostprocessConfig,
            "eval": EvalConfig,
        }
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown config keys: {sorted(set(d) - known)}")
        try:
            for key, typ in nested.items():
                if key in d and isinstance(d[key], dict):
                    d[key] = typ(**d[key])
            if "models" in d:
                d["models"] = tuple(d["models"])
            if d.get("weights") is not None:
                d["weights"] = tuple(tuple(float(v) for v in row) for row in d["weights"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def weight_table(self) -> np.ndarray:
        if self.weights is None:
            return np.ones((len(self.models), 3))
        if len(self.weights) != len(self.models):
            raise ConfigError("need one weight triple per model")
        try:
            return check_weights(self.weights)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # paths
    def preprocessed_dir(self, case_id: str) -> Path:
        return Path(self.work_dir) / "preprocessed" / case_id

    def image_path(self, case_id: str) -> Path:
        return self.preprocessed_dir(case_id) / f"{case_id}-image.nii.gz"

    def label_path(self, case_id: str) -> Path:
        return self.preprocessed_dir(case_id) / f"{case_id}-label.nii.gz"

    def meta_path(self, case_id: str) -> Path:
        return self.preprocessed_dir(case_id) / f"{case_id}-meta.json"

    def acc_dir(self, case_id: str) -> Path:
        return Path(self.work_dir) / "acc" / case_id

    def probs_path(self, case_id: str) -> Path:
        return Path(self.work_dir) / "probs" / f"{case_id}-probs.nii.gz"

    def seg_path(self, case_id: str) -> Path:
        return Path(self.output_dir) / f"{case_id}-seg.nii.gz"

    def gt_path(self, case_id: str) -> Path:
        return Path(self.input_dir) / case_id / f"{case_id}-seg.nii.gz"


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class ManifestWriter:
    """Append-only JSON-lines manifests, one file per case. Only the parent process writes."""

    def __init__(self, work_dir):
        self.root = Path(work_dir) / "manifests"
        self.root.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        with open(self.root / f"{record['case_id']}.jsonl", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self, case_id: str) -> list[dict]:
        path = self.root / f"{case_id}.jsonl"
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _record(case_id, stage, started, inputs=(), outputs=(), warnings=(), error=None) -> dict:
    return {
        "case_id": case_id,
        "stage": stage,
        "status": "failed" if error else "ok",
        "started": started,
        "finished": time.time(),
        "input_hashes": {str(p): sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
        "warnings": list(warnings),
        "error": error,
    }


def _run_cases(fn, cfg: PipelineConfig, case_ids, *args) -> list[dict]:
    if cfg.workers > 1 and len(case_ids) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(fn, [cfg] * len(case_ids), case_ids, *[[a] * len(case_ids) for a in args]))
    return [fn(cfg, c, *args) for c in case_ids]


def _finish(cfg: PipelineConfig, records: list[dict]) -> int:
    writer = ManifestWriter(cfg.work_dir)
    for r in records:
        writer.append(r)
        if r["status"] != "ok":
            log.warning("case %s failed at %s: %s", r["case_id"], r["stage"], r["error"])
    return EXIT_PARTIAL if any(r["status"] != "ok" for r in records) else EXIT_OK


def _guard(stage):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(cfg, case_id, *args):
            started = time.time()
            try:
                return fn(cfg, case_id, started, *args)
            except Exception as exc:  # per-case failure, keep the run going
                log.debug("%s", traceback.format_exc())
                return _record(case_id, stage, started, error=f"{type(exc).__name__}: {exc}")
        return inner
    return wrap


def discover_cases(input_dir) -> list[str]:
    root = Path(input_dir)
    if not root.is_dir():
        raise ConfigError(f"input directory {root} does not exist")
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def _preprocessed_cases(cfg: PipelineConfig) -> list[str]:
    root = Path(cfg.work_dir) / "preprocessed"
    return sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


@_guard("preprocess")
def preprocess_case(cfg: PipelineConfig, case_id: str, started: float) -> dict:
    case_dir = Path(cfg.input_dir) / case_id
    paths = [case_dir / f"{case_id}-{m}.nii.gz" for m in MODALITIES]
    missing = [p.name for p in paths if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"missing modality files: {', '.join(missing)}")
    vols = [read_nifti(p) for p in paths]
    seg_path = cfg.gt_path(case_id)
    label = read_labels(seg_path) if seg_path.is_file() else None
    image, out_label, meta = stack_case(vols, label, cfg.preprocess, case_id=case_id)
    out_dir = cfg.preprocessed_dir(case_id)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = [cfg.image_path(case_id), cfg.meta_path(case_id)]
    write_nifti(image, outputs[0])
    meta.save(outputs[1])
    if out_label is not None:
        write_nifti(out_label, cfg.label_path(case_id))
        outputs.append(cfg.label_path(case_id))
    inputs = paths + ([seg_path] if label is not None else [])
    return _record(case_id, "preprocess", started, inputs, outputs, meta.warnings)


def cmd_preprocess(cfg: PipelineConfig) -> int:
    cases = discover_cases(cfg.input_dir)
    records = _run_cases(preprocess_case, cfg, cases)
    return _finish(cfg, records)


def model_ids(cfg: PipelineConfig) -> list[str]:
    return [f"{i}:{Path(m).name}" for i, m in enumerate(cfg.models)]


def load_models(cfg: PipelineConfig):
    if not cfg.models:
        raise ConfigError("no models configured for inference")
    models = []
    for path in cfg.models:
        try:
            models.append(load_model(path))
        except ModelFormatError as exc:
            raise ConfigError(f"corrupt model at {path}: {exc}") from exc
    return models


@_guard("infer")
def infer_case(cfg: PipelineConfig, case_id: str, started: float, models=None) -> dict:
    image_path = cfg.image_path(case_id)
    image = read_nifti(image_path)
    ids = model_ids(cfg)
    weights = cfg.weight_table()
    acc_dir = cfg.acc_dir(case_id)
    acc_dir.parent.mkdir(parents=True, exist_ok=True)
    acc = EnsembleAccumulator.load(acc_dir)
    # an accumulator built from a different model list cannot be resumed
    if acc is not None and (
        acc.geometry.shape != image.shape
        or [m["id"] for m in acc.models] != ids[: len(acc.models)]
    ):
        acc = None
    if acc is None:
        acc = EnsembleAccumulator(image.geometry)
    if models is None:
        models = load_models(cfg)
    for model_id, model, w in zip(ids, models, weights):
        if acc.has_model(model_id):
            continue
        probs = tta_predict(image, model, cfg.sliding_window)
        accumulate_model(acc, probs, w, model_id=model_id, directory=acc_dir)
    final = normalize_ensemble(acc)
    out = cfg.probs_path(case_id)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_nifti(final, out)
    inputs = [image_path] + [Path(m) / "manifest.json" for m in cfg.models]
    return _record(case_id, "infer", started, inputs, [out])


def cmd_infer(cfg: PipelineConfig) -> int:
    models = load_models(cfg)  # aborts before any case on a corrupt model
    cfg.weight_table()
    cases = _preprocessed_cases(cfg)
    if cfg.workers > 1:
        records = _run_cases(infer_case, cfg, cases)
    else:
        records = [infer_case(cfg, c, models) for c in cases]
    return _finish(cfg, records)


def _read_probs(path) -> ProbMaps:
    vol = read_nifti(path)
    if vol.channels != 3:
        raise ValueError(f"{path} holds {vol.channels} channels, expected 3")
    return ProbMaps.from_array(np.clip(vol.data, 0, 1), vol.geometry)


@_guard("postprocess")
def postprocess_case(cfg: PipelineConfig, case_id: str, started: float) -> dict:
    meta_path = cfg.meta_path(case_id)
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing meta file {meta_path}")
    meta = CaseMeta.load(meta_path)
    probs_path = cfg.probs_path(case_id)
    probs = restore_to_original_space(_read_probs(probs_path), meta)
    seg = postprocess_pipeline(probs, cfg.postprocess)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    out = cfg.seg_path(case_id)
    write_nifti(seg, out)
    return _record(case_id, "postprocess", started, [meta_path, probs_path], [out])


def cmd_postprocess(cfg: PipelineConfig) -> int:
    cases = _preprocessed_cases(cfg)
    return _finish(cfg, _run_cases(postprocess_case, cfg, cases))


@_guard("evaluate")
def evaluate_one(cfg: PipelineConfig, case_id: str, started: float) -> dict:
    pred_path, gt_path = cfg.seg_path(case_id), cfg.gt_path(case_id)
    pred, gt = read_labels(pred_path), read_labels(gt_path)
    if pred.geometry.shape != gt.geometry.shape:
        raise ValueError(f"prediction {pred.geometry.shape} and ground truth {gt.geometry.shape} differ")
    row = evaluate_case(pred, gt, gt.geometry.spacing, cfg.eval.dilation_vox, cfg.eval.tolerances)
    rec = _record(case_id, "evaluate", started, [pred_path, gt_path])
    rec["metrics"] = row
    return rec


def cmd_evaluate(cfg: PipelineConfig) -> int:
    cases = [c for c in discover_cases(cfg.input_dir) if cfg.gt_path(c).is_file()]
    records = _run_cases(evaluate_one, cfg, cases)
    report = MetricsReport({r["case_id"]: r["metrics"] for r in records if r["status"] == "ok"})
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    records = [{k: v for k, v in r.items() if k != "metrics"} for r in records]
    records.append(_record("_cohort", "evaluate", time.time(), outputs=[out / "report.json", out / "report.csv"]))
    return _finish(cfg, records)


def cmd_pipeline(cfg: PipelineConfig) -> int:
    codes = [cmd_preprocess(cfg)]
    codes.append(cmd_infer(cfg))
    codes.append(cmd_postprocess(cfg))
    codes.append(cmd_evaluate(cfg))
    return max(codes)


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    post = {k: v for k, v in kw.pop("postprocess", {}).items() if v is not None}
    top = {k: v for k, v in kw.items() if v is not None}
    if post:
        top["postprocess"] = replace(cfg.postprocess, **post)
    try:
        return replace(cfg, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

"""Config-driven experiment cells and Table-style result rendering."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import yaml

from .config import ModelConfig
from .data import (
    Manifest,
    ToyCorpusSpec,
    generate_toy_corpus,
    make_sd_splits,
    make_si_folds,
    make_slu_splits,
    make_sv_trials,
    write_trials,
)
from .errors import ConfigError, DataError, SSLFinetuneError
from .finetune import (
    DEFAULT_LRS,
    Example,
    FreezePolicy,
    RunName,
    SLUHead,
    TaskData,
    UtteranceClassifier,
    fit,
    save_finetuned,
)
from .heads import sv_score
from .metrics import TrialScore, equal_error_rate, write_scores
from .model import SpeechEncoder, load_pretrained
from .objectives import initial_targets
from .pretrain import PretrainConfig, pretrain

logger = logging.getLogger(__name__)

TASKS = ("SER-SD", "SER-SI", "SV", "SLU")
COLUMNS = ("SER-SD", "SER-SI", "SV", "IC", "SF")
TABLE_COLUMNS = {"1": ("SER-SD", "SER-SI", "SV"), "2": ("IC", "SF"), "all": COLUMNS}
COLUMN_TITLES = {"SER-SD": "SER-SD (WA%)", "SER-SI": "SER-SI (WA%)", "SV": "SV (EER%)",
                 "IC": "IC (ACC%)", "SF": "SF (F1%)"}


def _task_family(task: str) -> str:
    return task.split("-")[0]


@dataclass
class ExperimentConfig:
    run_name: str
    task: str
    model: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    lrs: list | None = None
    seeds: list | None = None
    epochs: int = 30
    patience: int = 10
    batch_size: int = 8
    checkpoint: str | None = None
    pretrained_root: str | None = None
    pretrain_epochs: int = 0
    pretrain_lr: float = 5e-4
    max_folds: int | None = None
    sv: dict = field(default_factory=lambda: {"held_out_speakers": 4, "trials_per_speaker": 10})
    slu: dict = field(default_factory=dict)

    def __post_init__(self):
        self.name  # validates
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lrs is not None and (len(self.lrs) != 2 or min(self.lrs) < 0):
            raise ConfigError("lrs must be [encoder_lr, downstream_lr] with non-negative values")
        if not self.data or ("manifest" not in self.data and "toy" not in self.data):
            raise ConfigError("data needs either 'manifest' or 'toy'")
        cfg = self.model_config()
        if cfg.variant != self.name.variant_tag or cfg.size_preset != self.name.size_tag:
            raise ConfigError(f"run name {self.run_name} disagrees with model {cfg.variant}-{cfg.size_preset}")
        if self.name.asr_tag and not (self.checkpoint or self.pretrained_root):
            raise ConfigError("-960h runs need an externally provided checkpoint")

    @property
    def name(self) -> RunName:
        return RunName.parse(self.run_name)

    @property
    def policy(self) -> FreezePolicy:
        return self.name.policy

    @property
    def init_lrs(self) -> tuple[float, float]:
        return tuple(self.lrs) if self.lrs is not None else DEFAULT_LRS[_task_family(self.task)]

    @property
    def seed_list(self) -> list[int]:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [0] if self.task == "SLU" else [0, 1, 2, 3, 4]

    def model_config(self) -> ModelConfig:
        overrides = dict(self.model)
        for key, expected in (("variant", self.name.variant_tag), ("size_preset", self.name.size_tag)):
            given = overrides.pop(key, expected)
            if given != expected:
                raise ConfigError(f"model {key}={given!r} disagrees with run name {self.run_name}")
        try:
            base = ModelConfig.preset(self.name.variant_tag, self.name.size_tag)
            d = base.to_dict()
            d.update(overrides)
            return ModelConfig.from_dict(d)
        except TypeError as e:
            raise ConfigError(f"bad model field: {e}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "run_name" not in d or "task" not in d:
            raise ConfigError("config needs 'run_name' and 'task'")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | os.PathLike, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as f:
                d = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        for key, value in (overrides or {}).items():
            set_dotted(d, key, value)
        return cls.from_dict(d)


def set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def load_data(config: ExperimentConfig, work_dir: Path | None = None) -> Manifest:
    if "manifest" in config.data:
        manifest = Manifest.load(config.data["manifest"], config.data.get("root"))
    else:
        try:
            spec = ToyCorpusSpec(**{k: (tuple(v) if isinstance(v, list) else v)
                                    for k, v in config.data["toy"].items()})
        except TypeError as e:
            raise ConfigError(f"bad toy corpus spec: {e}") from None
        manifest = generate_toy_corpus(spec)
    task = "semantics" if config.task == "SLU" else ("emotion" if config.task.startswith("SER") else None)
    manifest.validate(task)
    return manifest


def init_encoder(config: ExperimentConfig, seed: int, pretrain_waves: dict | None = None) -> SpeechEncoder:
    if config.checkpoint:
        return SpeechEncoder.load(config.checkpoint)
    if config.pretrained_root:
        return load_pretrained(config.name.model_name, config.pretrained_root)
    torch.manual_seed(seed)
    encoder = SpeechEncoder(config.model_config())
    if config.pretrain_epochs and pretrain_waves:
        pcfg = PretrainConfig(epochs=config.pretrain_epochs, lr=config.pretrain_lr, seed=seed,
                              batch_size=config.batch_size)
        targets = None
        if encoder.cfg.variant == "hbt":
            targets = [initial_targets(pretrain_waves, k, seed) for k in encoder.cfg.num_clusters_per_ensemble]
        pretrain(encoder, pretrain_waves, pcfg, targets)
    encoder.eval()
    return encoder


def _examples(manifest: Manifest, ids, target_fn) -> list[Example]:
    by_id = manifest.by_id()
    return [Example(u, manifest.waveform(by_id[u]), target_fn(by_id[u])) for u in sorted(ids)]


@dataclass
class SplitOutcome:
    split: int
    seed: int | None
    metrics: dict[str, float]
    best_epoch: int
    history: list[dict]


def _run_split(config, manifest, split_id, seed, train_ids, valid_ids, head_factory, target_fn, run_dir):
    train = _examples(manifest, train_ids, target_fn)
    valid = _examples(manifest, valid_ids, target_fn)
    encoder = init_encoder(config, seed, {e.utt_id: e.waveform for e in train})
    head = head_factory(encoder.cfg.embed_dim)
    before = encoder.checksums()
    result = fit(encoder, head, TaskData(train, valid), config.policy, config.init_lrs, seed=seed,
                 epochs=config.epochs, patience=config.patience, batch_size=config.batch_size)
    after = encoder.checksums()
    if config.policy is FreezePolicy.FROZEN and (before["cnn"], before["transformer"]) != (after["cnn"], after["transformer"]):
        raise SSLFinetuneError("frozen encoder changed during training")
    if config.policy is FreezePolicy.PARTIAL and before["cnn"] != after["cnn"]:
        raise SSLFinetuneError("CNN parameters changed under partial fine-tuning")
    split_dir = run_dir / f"split-{split_id}"
    split_dir.mkdir(parents=True, exist_ok=True)
    history = [asdict(r) for r in result.history]
    with open(split_dir / "metrics.jsonl", "w", encoding="utf-8") as f:
        for r in history:
            f.write(json.dumps(r) + "\n")
    return encoder, head, result, history, split_dir


def run(config: ExperimentConfig, out_dir: str | os.PathLike, force: bool = False) -> dict:
    """Execute one experiment cell and persist its run directory.

    A finished run with the same config digest is reused unless ``force``.
    """
    run_dir = Path(out_dir) / config.run_name / config.task
    result_path = run_dir / "result.json"
    if result_path.exists() and not force:
        cached = json.loads(result_path.read_text(encoding="utf-8"))
        if cached.get("config_digest") == config.digest() and cached.get("status") == "ok":
            logger.info("reusing cached result %s", result_path)
            return cached
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run_dir / "config.yaml", yaml.safe_dump(config.to_dict(), sort_keys=True))

    manifest = load_data(config)
    outcomes: list[SplitOutcome] = []
    status, error = "ok", None
    try:
        if config.task in ("SER-SD", "SER-SI"):
            classes = sorted({e.emotion for e in manifest})
            cidx = {c: i for i, c in enumerate(classes)}
            if config.task == "SER-SD":
                plans = make_sd_splits(manifest, config.seed_list)
            else:
                plans = make_si_folds(manifest)
                if config.max_folds:
                    plans = plans[: config.max_folds]
            for plan in plans:
                seed = plan.seed if plan.seed is not None else plan.fold_id
                encoder, head, res, hist, sdir = _run_split(
                    config, manifest, plan.fold_id, seed, plan.train, plan.validation,
                    lambda d: UtteranceClassifier(d, len(classes)), lambda e: cidx[e.emotion], run_dir,
                )
                test = _examples(manifest, plan.test, lambda e: cidx[e.emotion])
                wa = head.evaluate(encoder, test)
                save_finetuned(sdir / "best.pt", encoder, head,
                               {"task": config.task, "classes": classes, "run_name": config.run_name})
                outcomes.append(SplitOutcome(plan.fold_id, seed, {config.task: wa}, res.best_epoch, hist))

        elif config.task == "SV":
            proto = make_sv_trials(manifest, config.sv.get("held_out_speakers", 4),
                                   config.sv.get("trials_per_speaker", 10), seed=config.sv.get("seed", 0),
                                   plan_seeds=config.seed_list)
            write_trials(run_dir / "trials.txt", proto.trials)
            sidx = {s: i for i, s in enumerate(proto.id_speakers)}
            trial_ids = sorted({u for t in proto.trials for u in (t.enroll_id, t.test_id)})
            for plan in proto.plans:
                encoder, head, res, hist, sdir = _run_split(
                    config, manifest, plan.fold_id, plan.seed, plan.train, plan.validation,
                    lambda d: UtteranceClassifier(d, len(sidx)), lambda e: sidx[e.speaker], run_dir,
                )
                emb = head.embeddings(encoder, _examples(manifest, trial_ids, lambda e: 0))
                scores = [TrialScore(t.enroll_id, t.test_id, sv_score(emb[t.enroll_id], emb[t.test_id]), t.label)
                          for t in proto.trials]
                write_scores(sdir / "scores.txt", scores)
                save_finetuned(sdir / "best.pt", encoder, head,
                               {"task": "SV", "speakers": proto.id_speakers, "run_name": config.run_name})
                outcomes.append(SplitOutcome(plan.fold_id, plan.seed, {"SV": equal_error_rate(scores)},
                                             res.best_epoch, hist))

        else:
            plan = make_slu_splits(manifest)
            if not plan.train or not plan.validation or not plan.test:
                raise DataError("SLU corpus needs non-empty train, validation and test splits")
            slu_kw = dict(config.slu)
            val_beam = slu_kw.pop("validation_beam_width", None)
            for i, seed in enumerate(config.seed_list):
                def factory(d):
                    h = SLUHead(d, **slu_kw)
                    if val_beam is not None:
                        h.validation_beam_width = val_beam
                    return h
                encoder, head, res, hist, sdir = _run_split(
                    config, manifest, i, seed, plan.train, plan.validation, factory,
                    lambda e: e.semantics, run_dir,
                )
                test = _examples(manifest, plan.test, lambda e: e.semantics)
                scores = head.scores(encoder, test)
                save_finetuned(sdir / "best.pt", encoder, head, {"task": "SLU", "run_name": config.run_name})
                outcomes.append(SplitOutcome(i, seed, scores, res.best_epoch, hist))
    except SSLFinetuneError as e:
        if isinstance(e, (ConfigError, DataError)) and not outcomes:
            raise
        status, error = "partial", f"{type(e).__name__}: {e}"
        logger.error("run %s/%s failed: %s", config.run_name, config.task, error)

    keys = sorted({k for o in outcomes for k in o.metrics})
    metrics = {k: float(np.mean([o.metrics[k] for o in outcomes])) for k in keys}
    record = {
        "run_name": config.run_name,
        "task": config.task,
        "metrics": metrics,
        "splits": [{"split": o.split, "seed": o.seed, "metrics": o.metrics, "best_epoch": o.best_epoch}
                   for o in outcomes],
        "num_splits": len(outcomes),
        "status": status,
        "error": error,
        "config_digest": config.digest(),
    }
    _atomic_write(result_path, json.dumps(record, indent=2, sort_keys=True))
    if status != "ok":
        raise PartialRunError(record, error)
    return record


class PartialRunError(SSLFinetuneError):
    def __init__(self, record, message):
        super().__init__(message)
        self.record = record


def collect_results(results_dir: str | os.PathLike) -> list[dict]:
    return [json.loads(p.read_text(encoding="utf-8")) for p in sorted(Path(results_dir).rglob("result.json"))]


# ---------------------------------------------------------------------------
# tables


_VARIANT_ORDER = {"w2v": 0, "hbt": 1}
_SIZE_ORDER = {"base": 0, "large": 1, "toy": 2}
_POLICY_ORDER = {"EF": 0, "PF": 1, "Frozen": 2}


def row_order_key(run_name: str):
    """Result-table ordering: fine-tuned blocks by model, EF before PF, then Frozen rows."""
    try:
        n = RunName.parse(run_name)
    except ConfigError:
        return (3, 0, 0, 0, 0, run_name)
    frozen = n.policy_tag == "Frozen"
    return (int(frozen), _VARIANT_ORDER[n.variant_tag], _SIZE_ORDER[n.size_tag], int(bool(n.asr_tag)),
            _POLICY_ORDER[n.policy_tag], run_name)


def table_rows(records: Iterable[dict], columns: Sequence[str] = COLUMNS) -> list[dict]:
    seen, rows = set(), {}
    for rec in records:
        key = (rec["run_name"], rec["task"])
        if key in seen:
            raise ConfigError(f"duplicate result for {key[0]} / {key[1]}")
        seen.add(key)
        row = rows.setdefault(rec["run_name"], {c: None for c in columns})
        for metric, value in rec["metrics"].items():
            if metric in row:
                row[metric] = value
    return [{"model": name, **rows[name]} for name in sorted(rows, key=row_order_key)]


def emit_table(records: Iterable[dict], columns: Sequence[str] = COLUMNS, fmt: str = "text") -> str:
    """Render results as a text table (``-`` for missing cells), JSON or CSV."""
    records = list(records)
    if not records:
        raise ConfigError("no result records to tabulate")
    rows = table_rows(records, columns)
    if fmt == "json":
        return json.dumps(rows, indent=2)
    cell = lambda v: "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"
    if fmt == "csv":
        lines = [",".join(["model", *columns])]
        lines += [",".join([r["model"], *[cell(r[c]) for c in columns]]) for r in rows]
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ConfigError(f"unknown table format {fmt!r}")
    header = ["Model", *[COLUMN_TITLES.get(c, c) for c in columns]]
    body = [[r["model"], *[cell(r[c]) for c in columns]] for r in rows]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]
    fmt_row = lambda xs: "  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(xs, widths)))
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([fmt_row(header), rule, *[fmt_row(b) for b in body]]) + "\n"

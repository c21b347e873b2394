"""End-to-end experiment orchestration.

A declarative config drives the stage graph:

  corpus/features -> teacher -> soft-target export -> student(s)
                  -> multi-condition                -> evaluation -> report

Every stage's output lands in a content-addressed cache directory keyed by
the config fields and upstream stage keys that affect it, so re-runs reuse
finished work and any isolated stage reproduces the same artifact bytes.
All randomness descends from the global seed through tagged streams.

The student path never touches frame labels: it consumes noisy features and
the teacher's sparse target stream only, and regenerated noisy copies for
the data-size sweep are materialized without label files at all.
"""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, pcm16_roundtrip
from .codec import CodecParams, SparseTargets
from .corpus import Corpus, SimConfig, generate_corpus, read_labels, write_labels
from .estimator import FrameClassifier
from .features import FeatureMatrix, lfbe, mel_bank, read_lfbe, write_lfbe
from .metrics import evaluate, werr
from .net import load_model, save_model
from .seeding import stable_u32_words
from .stgt import decode_stream, encode_stream

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "StageError",
    "ExperimentConfig",
    "RunReport",
    "SystemRow",
    "ExperimentRunner",
    "run_experiment",
    "sweep_tk",
    "sweep_size",
    "emit_report",
    "load_config",
]


class ConfigError(ValueError):
    """Invalid or malformed experiment configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(*parts) -> int:
    """A 63-bit sub-seed from a tag path."""
    words = stable_u32_words(*parts)
    return (words[0] | (words[1] << 32)) & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def _pair(value, name: str) -> tuple:
    seq = tuple(value)
    if len(seq) != 2:
        raise ConfigError(f"{name} must be a [lo, hi] pair")
    return seq


@dataclass(frozen=True)
class CorpusSection:
    n_utts: int = 2000
    n_classes: int = 40
    n_test_utts: int = 240
    transcribed_fraction: float = 0.1
    snr_range_db: tuple = (0.0, 30.0)
    t60_range_s: tuple = (0.5, 0.9)
    test_t60_range_s: tuple = (0.52, 0.92)
    noises_per_utt: tuple = (1, 3)
    noise_bank_size: int = 16
    room_dim_ranges: tuple = ((4.0, 8.0), (3.0, 6.0), (2.4, 3.5))
    sample_rate: int = 16000
    max_reflection_order: int = 12
    utt_frames: tuple = (70, 130)
    segment_frames: tuple = (10, 26)

    def __post_init__(self):
        if not 0.0 < self.transcribed_fraction <= 1.0:
            raise ConfigError("transcribed_fraction must lie in (0, 1]")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        for name in ("snr_range_db", "t60_range_s", "test_t60_range_s", "noises_per_utt",
                     "utt_frames", "segment_frames"):
            object.__setattr__(self, name, _pair(getattr(self, name), name))
        dims = tuple(_pair(p, "room_dim_ranges entry") for p in self.room_dim_ranges)
        if len(dims) != 3:
            raise ConfigError("room_dim_ranges needs three [lo, hi] pairs")
        object.__setattr__(self, "room_dim_ranges", dims)

    def sim_config(self, seed: int, test: bool = False) -> SimConfig:
        return SimConfig(
            snr_range_db=self.snr_range_db,
            t60_range_s=self.test_t60_range_s if test else self.t60_range_s,
            noises_per_utt=tuple(int(v) for v in self.noises_per_utt),
            room_dim_ranges=self.room_dim_ranges,
            seed=seed,
            sample_rate=self.sample_rate,
            noise_bank_size=self.noise_bank_size,
            max_reflection_order=self.max_reflection_order,
            utt_frames=tuple(int(v) for v in self.utt_frames),
            segment_frames=tuple(int(v) for v in self.segment_frames),
        )


@dataclass(frozen=True)
class FeaturesSection:
    win_s: float = 0.025
    hop_s: float = 0.010
    n_fft: int = 512
    n_mels: int = 64
    fmin: float = 20.0
    fmax: float = 7600.0


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple = (48,)
    context: int = 2
    recurrent: bool = False
    label_delay: int = 3

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 0.2
    momentum: float = 0.9
    epochs: int = 4
    batch_size: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")


@dataclass(frozen=True)
class StudentSection(TrainSection):
    # Each system is a (temperature, k) cell; k is an int or "max".
    systems: tuple = ((1.0, "max"), (2.0, 20), (5.0, 5))

    def __post_init__(self):
        super().__post_init__()
        cells = []
        for entry in self.systems:
            t, k = tuple(entry)
            cells.append((float(t), _check_k_label(k)))
        object.__setattr__(self, "systems", tuple(cells))


def _check_k_label(k) -> int | str:
    if isinstance(k, str):
        if k != "max":
            raise ConfigError(f"k must be an integer or 'max', got {k!r}")
        return k
    k = int(k)
    if k < 1:
        raise ConfigError("k must be at least 1")
    return k


@dataclass(frozen=True)
class CodecSection:
    k: int = 20
    temperature: float = 2.0
    floor_policy: str | float = "auto"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("codec k must be at least 1")
        if self.temperature <= 0:
            raise ConfigError("codec temperature must be positive")
        if isinstance(self.floor_policy, str) and self.floor_policy != "auto":
            raise ConfigError("floor_policy must be 'auto' or a number")


@dataclass(frozen=True)
class SweepSection:
    temperatures: tuple = (1.0, 2.0, 5.0)
    ks: tuple = (5, 20, 40, "max")
    size_multipliers: tuple = (1, 2, 4, 6)
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "temperatures", tuple(float(t) for t in self.temperatures))
        object.__setattr__(self, "ks", tuple(_check_k_label(k) for k in self.ks))
        object.__setattr__(self, "size_multipliers", tuple(int(m) for m in self.size_multipliers))
        if any(m < 1 for m in self.size_multipliers):
            raise ConfigError("size multipliers must be at least 1")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs/default"


_SECTIONS = {
    "corpus": CorpusSection,
    "features": FeaturesSection,
    "model": ModelSection,
    "teacher": TrainSection,
    "multicond": TrainSection,
    "student": StudentSection,
    "codec": CodecSection,
    "sweep": SweepSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TrainSection = field(default_factory=TrainSection)
    multicond: TrainSection = field(default_factory=TrainSection)
    student: StudentSection = field(default_factory=StudentSection)
    codec: CodecSection = field(default_factory=CodecSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)
    seed: int = 0

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        data = dict(data)
        seed = data.pop("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, cls in _SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _build_section(cls, section, name)
        return ExperimentConfig(seed=seed, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=list)

    def hash(self) -> str:
        """Semantic hash: covers everything except where outputs are written."""
        d = self.to_dict()
        d.pop("output", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def resolve_k(self, k_label) -> int:
        return self.corpus.n_classes if k_label == "max" else int(k_label)


def load_config(path: str | Path | None = None, *, seed: int | None = None,
                out: str | None = None) -> ExperimentConfig:
    """Config from a TOML file (or all defaults), with CLI overrides applied."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(data)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if out is not None:
        cfg = replace(cfg, output=OutputSection(dir=out))
    return cfg


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemRow:
    system: str
    clean_ter: float
    noisy_ter: float
    clean_werr: float
    noisy_werr: float


@dataclass(frozen=True)
class RunReport:
    rows: tuple[SystemRow, ...]
    seed: int
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "seed": self.seed,
            "config_hash": self.config_hash,
        }

    @staticmethod
    def from_dict(d: dict) -> "RunReport":
        return RunReport(
            tuple(SystemRow(**r) for r in d["rows"]),
            d["seed"],
            d["config_hash"],
        )


TABLE_HEADER = ["system", "clean_ter", "noisy_ter", "clean_werr", "noisy_werr"]
GRID_HEADER = ["temperature", "k", "clean_ter", "noisy_ter", "clean_werr", "noisy_werr"]
SIZE_HEADER = ["multiplier", "clean_ter", "noisy_ter", "clean_werr", "noisy_werr"]


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def emit_report(report, out_dir: str | Path, kind: str | None = None) -> list[Path]:
    """Write CSV tables (and plot data for sweeps); returns the paths written.

    Accepts a :class:`RunReport`, a T-by-k grid (list of (T, k_label, clean
    TER, noisy TER, clean WERR, noisy WERR)), or a size report (list of
    (multiplier, ...)). ``kind`` ("run" | "grid" | "size") disambiguates
    empty lists; non-empty lists are recognized by row arity. Column order
    is fixed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(report, RunReport) or kind == "run":
        rows = [[r.system, _fmt(r.clean_ter), _fmt(r.noisy_ter), _fmt(r.clean_werr), _fmt(r.noisy_werr)]
                for r in report.rows]
        path = out / "tables.csv"
        _write_csv(path, TABLE_HEADER, rows)
        written.append(path)
        with open(out / "report.json", "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(out / "report.json")
        return written
    if kind is None:
        if report and len(report[0]) == 6:
            kind = "grid"
        elif report and len(report[0]) == 5:
            kind = "size"
        else:
            kind = "grid"
    if kind == "grid":
        rows = [[t, k, _fmt(ct), _fmt(nt), _fmt(cw), _fmt(nw)] for t, k, ct, nt, cw, nw in report]
        path = out / "grid.csv"
        _write_csv(path, GRID_HEADER, rows)
        written.append(path)
        plot = [[k, _fmt(nw), f"T={t:g}-noisy"] for t, k, _, _, _, nw in report]
        plot += [[k, _fmt(cw), f"T={t:g}-clean"] for t, k, _, _, cw, _ in report]
        ppath = out / "plot_grid.csv"
        _write_csv(ppath, ["x", "y", "series"], plot)
        written.append(ppath)
    elif kind == "size":
        rows = [[m, _fmt(ct), _fmt(nt), _fmt(cw), _fmt(nw)] for m, ct, nt, cw, nw in report]
        path = out / "size.csv"
        _write_csv(path, SIZE_HEADER, rows)
        written.append(path)
        plot = [[m, _fmt(nw), "noisy"] for m, _, _, _, nw in report]
        plot += [[m, _fmt(cw), "clean"] for m, _, _, cw, _ in report]
        ppath = out / "plot_size.csv"
        _write_csv(ppath, ["x", "y", "series"], plot)
        written.append(ppath)
    else:
        raise ValueError(f"unknown report kind {kind!r}")
    return written


# ---------------------------------------------------------------------------
# Stage cache
# ---------------------------------------------------------------------------


class StageCache:
    """Content-addressed stage outputs with atomic completion."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(stage: str, payload: dict) -> str:
        blob = json.dumps({"stage": stage, "payload": payload}, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    def dir_for(self, stage: str, key: str) -> Path:
        return self.root / f"{stage}-{key[:16]}"

    def materialize(self, stage: str, payload: dict, builder) -> Path:
        """Return the stage dir, running ``builder(tmp_dir)`` on a miss.

        The build happens in a temp dir renamed into place on success, so
        concurrent builders and interrupted runs leave no torn outputs.
        """
        key = self.key(stage, payload)
        final = self.dir_for(stage, key)
        if (final / ".complete").exists():
            return final
        tmp = self.root / f".tmp-{stage}-{key[:16]}-{time.monotonic_ns()}"
        tmp.mkdir(parents=True)
        try:
            builder(tmp)
            with open(tmp / ".complete", "w") as f:
                f.write(key + "\n")
            try:
                tmp.rename(final)
            except OSError:
                if (final / ".complete").exists():
                    shutil.rmtree(tmp)  # another worker finished first
                else:
                    raise
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return final


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


class ExperimentRunner:
    """Executes the stage graph for one config and seed."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir if out_dir is not None else cfg.output.dir)
        self.cache = StageCache(self.out_dir / "cache")
        self._mem: dict = {}
        self.timings: dict[str, float] = {}

    # -- helpers ----------------------------------------------------------

    def _timed(self, name: str, fn):
        start = time.perf_counter()
        try:
            result = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start
        return result

    def _mel_bank(self):
        if "mel_bank" not in self._mem:
            f = self.cfg.features
            self._mem["mel_bank"] = mel_bank(self.cfg.corpus.sample_rate, f.n_fft, f.n_mels, f.fmin, f.fmax)
        return self._mem["mel_bank"]

    def _features_of(self, buf: AudioBuffer) -> FeatureMatrix:
        f = self.cfg.features
        return lfbe(pcm16_roundtrip(buf), self._mel_bank(), f.win_s, f.hop_s, f.n_fft)

    # -- corpus + features stage -------------------------------------------

    def _corpus_payload(self, split: str, copy: int) -> dict:
        return {
            "corpus": asdict(self.cfg.corpus),
            "features": asdict(self.cfg.features),
            "seed": self.cfg.seed,
            "split": split,
            "copy": copy,
        }

    def _generate_split(self, split: str, copy: int) -> Corpus:
        c = self.cfg.corpus
        test = split == "test"
        sim = c.sim_config(derive_seed(self.cfg.seed, "corpus", split), test=test)
        n = c.n_test_utts if test else c.n_utts
        return generate_corpus(sim, n, c.n_classes, stream_tag=split, copy=copy)

    def corpus_stage(self, split: str, copy: int = 0) -> Path:
        """Features (and labels for base copies) for one corpus split.

        Copies beyond the first are noisy-side redraws over the same clean
        audio: only noisy features and the manifest are materialized, never
        label files.
        """
        payload = self._corpus_payload(split, copy)

        def build(tmp: Path):
            corpus = self._generate_split(split, copy)
            (tmp / "feats").mkdir()
            rows = []
            tokens = {}
            if copy == 0:
                (tmp / "labels").mkdir()
            for record, row in zip(corpus.records, corpus.manifest):
                write_lfbe(tmp / "feats" / f"{record.id}.noisy.lfbe", self._features_of(record.noisy))
                if copy == 0:
                    write_lfbe(tmp / "feats" / f"{record.id}.clean.lfbe", self._features_of(record.clean))
                    write_labels(tmp / "labels" / f"{record.id}.lbl", record.frame_labels)
                    tokens[record.id] = [int(t) for t in record.token_refs]
                rows.append(row)
            with open(tmp / "manifest.jsonl", "w") as f:
                for row in rows:
                    f.write(json.dumps(row, sort_keys=True) + "\n")
            if copy == 0:
                with open(tmp / "tokens.json", "w") as f:
                    json.dump(tokens, f, sort_keys=True)
                    f.write("\n")

        return self._timed(f"corpus-{split}-{copy}", lambda: self.cache.materialize("corpus", payload, build))

    def _utt_ids(self, split: str) -> list[str]:
        stage = self.corpus_stage(split, 0)
        with open(stage / "manifest.jsonl") as f:
            return [json.loads(line)["id"] for line in f if line.strip()]

    def _load_feats(self, split: str, kind: str, copy: int = 0) -> list[FeatureMatrix]:
        stage = self.corpus_stage(split, copy)
        key = ("feats", stage, kind)
        if key not in self._mem:
            f = self.cfg.features
            ids = self._utt_ids(split)
            self._mem[key] = [
                read_lfbe(stage / "feats" / f"{uid}.{kind}.lfbe", f.hop_s, f.win_s) for uid in ids
            ]
        return self._mem[key]

    def _load_labels(self, split: str) -> list[np.ndarray]:
        stage = self.corpus_stage(split, 0)
        key = ("labels", stage)
        if key not in self._mem:
            ids = self._utt_ids(split)
            self._mem[key] = [read_labels(stage / "labels" / f"{uid}.lbl") for uid in ids]
        return self._mem[key]

    def _load_tokens(self, split: str) -> list[np.ndarray]:
        stage = self.corpus_stage(split, 0)
        with open(stage / "tokens.json") as f:
            tokens = json.load(f)
        return [np.asarray(tokens[uid], dtype=np.int64) for uid in self._utt_ids(split)]

    def _transcribed_count(self) -> int:
        c = self.cfg.corpus
        return max(1, round(c.transcribed_fraction * c.n_utts))

    # -- model stages --------------------------------------------------------

    def _classifier(self, section: TrainSection, loss: str, temperature: float, seed_tag: str) -> FrameClassifier:
        m = self.cfg.model
        return FrameClassifier(
            hidden_dims=m.hidden_dims,
            context=m.context,
            recurrent=m.recurrent,
            label_delay=m.label_delay,
            n_classes=self.cfg.corpus.n_classes,
            learning_rate=section.learning_rate,
            momentum=section.momentum,
            epochs=section.epochs,
            batch_size=section.batch_size,
            loss=loss,
            temperature=temperature,
            seed=derive_seed(self.cfg.seed, seed_tag),
        )

    def _hard_model_stage(self, name: str, kind: str) -> Path:
        section = self.cfg.teacher if name == "teacher" else self.cfg.multicond
        corpus_key = self.corpus_stage("train", 0).name
        payload = {
            "model": asdict(self.cfg.model),
            "train": asdict(section),
            "corpus_key": corpus_key,
            "transcribed": self._transcribed_count(),
            "kind": kind,
            "name": name,
            "seed": self.cfg.seed,
        }

        def build(tmp: Path):
            n = self._transcribed_count()
            feats = self._load_feats("train", kind)[:n]
            labels = self._load_labels("train")[:n]
            clf = self._classifier(section, "hard", 1.0, name)
            clf.fit(feats, labels)
            save_model(tmp / "model.dnet", clf.net_, {
                "system": name,
                "loss": "hard",
                "train": asdict(section),
                "seed": self.cfg.seed,
                "data_hash": corpus_key,
                "loss_trace": clf.loss_trace_,
            })

        return self._timed(name, lambda: self.cache.materialize(name, payload, build))

    def teacher_stage(self) -> Path:
        """Hard cross-entropy on the transcribed clean subset."""
        return self._hard_model_stage("teacher", "clean")

    def multicond_stage(self) -> Path:
        """Hard cross-entropy on the transcribed noisy subset."""
        return self._hard_model_stage("multicond", "noisy")

    # -- soft targets ---------------------------------------------------------

    def teacher_logits_stage(self) -> Path:
        """Teacher forward pass over the full clean training set."""
        teacher_key = self.teacher_stage().name
        corpus_key = self.corpus_stage("train", 0).name
        payload = {"teacher_key": teacher_key, "corpus_key": corpus_key}

        def build(tmp: Path):
            params, _ = load_model(self.teacher_stage() / "model.dnet")
            from .net import forward

            (tmp / "logits").mkdir()
            for uid, feats in zip(self._utt_ids("train"), self._load_feats("train", "clean")):
                mat = forward(params, feats)
                write_lfbe(tmp / "logits" / f"{uid}.lfbe", FeatureMatrix(mat, 0.0, 0.0))

        return self._timed("teacher-logits", lambda: self.cache.materialize("teacher-logits", payload, build))

    def stgt_stage(self, k: int) -> Path:
        """Sparse soft-target export at a given k (header T is advisory)."""
        logits_key = self.teacher_logits_stage().name
        payload = {"logits_key": logits_key, "k": k, "advisory_t": self.cfg.codec.temperature}

        def build(tmp: Path):
            logits_dir = self.teacher_logits_stage() / "logits"
            ids = self._utt_ids("train")
            params = CodecParams(k=k, temperature=self.cfg.codec.temperature)
            entries = ((uid, read_lfbe(logits_dir / f"{uid}.lfbe").frames) for uid in ids)
            with open(tmp / "targets.stgt", "wb") as sink:
                encode_stream(entries, params, sink)

        return self._timed(f"soft-targets-k{k}", lambda: self.cache.materialize("stgt", payload, build))

    def _load_targets(self, k: int) -> list[SparseTargets]:
        stage = self.stgt_stage(k)
        key = ("stgt", stage)
        if key not in self._mem:
            with open(stage / "targets.stgt", "rb") as f:
                _, utts = decode_stream(f)
            by_id = dict(utts)
            self._mem[key] = [by_id[uid] for uid in self._utt_ids("train")]
        return self._mem[key]

    # -- students ---------------------------------------------------------------

    def student_stage(self, temperature: float, k_label, multiplier: int = 1) -> Path:
        """Soft-target training on noisy features, initialized from the teacher."""
        k = self.cfg.resolve_k(k_label)
        stgt_key = self.stgt_stage(k).name
        teacher_key = self.teacher_stage().name
        copies = list(range(multiplier))
        copy_keys = [self.corpus_stage("train", c).name for c in copies]
        payload = {
            "model": asdict(self.cfg.model),
            "train": asdict(self.cfg.student),
            "stgt_key": stgt_key,
            "teacher_key": teacher_key,
            "copy_keys": copy_keys,
            "temperature": temperature,
            "seed": self.cfg.seed,
        }
        name = f"student-T{temperature:g}-k{k_label}" + (f"-x{multiplier}" if multiplier > 1 else "")

        def build(tmp: Path):
            targets = self._load_targets(k)
            feats: list[FeatureMatrix] = []
            tgts: list[SparseTargets] = []
            for c in copies:
                feats.extend(self._load_feats("train", "noisy", copy=c))
                tgts.extend(targets)
            init, _ = load_model(self.teacher_stage() / "model.dnet")
            clf = self._classifier(self.cfg.student, "soft", temperature, "student")
            clf.fit(feats, tgts, init=init)
            save_model(tmp / "model.dnet", clf.net_, {
                "system": name,
                "loss": "soft",
                "temperature": temperature,
                "k": k,
                "multiplier": multiplier,
                "train": asdict(self.cfg.student),
                "seed": self.cfg.seed,
                "data_hash": stgt_key,
                "loss_trace": clf.loss_trace_,
            })

        return self._timed(name, lambda: self.cache.materialize("student", payload, build))

    # -- evaluation --------------------------------------------------------------

    def evaluate_model(self, model_dir: Path) -> dict[str, float]:
        memo_key = ("eval", model_dir)
        if memo_key in self._mem:
            return self._mem[memo_key]
        params, _ = load_model(model_dir / "model.dnet")
        labels = self._load_labels("test")
        tokens = self._load_tokens("test")
        out = {}
        for kind in ("clean", "noisy"):
            feats = self._load_feats("test", kind)
            report = evaluate(params, list(zip(feats, labels, tokens)))
            out[f"{kind}_ter"] = report.token_error_rate
            out[f"{kind}_acc"] = report.frame_accuracy
        self._mem[memo_key] = out
        return out

    # -- experiment protocols ------------------------------------------------------

    def run(self) -> RunReport:
        """Full protocol: baseline, multi-condition, and the student roster."""
        systems: list[tuple[str, Path]] = [
            ("teacher", self.teacher_stage()),
            ("multicond", self.multicond_stage()),
        ]
        for t, k_label in self.cfg.student.systems:
            systems.append((f"student-T{t:g}-k{k_label}", self.student_stage(t, k_label)))
        scores = {name: self._timed(f"eval-{name}", lambda d=path: self.evaluate_model(d))
                  for name, path in systems}
        base = scores["teacher"]
        rows = [
            SystemRow(
                name,
                s["clean_ter"],
                s["noisy_ter"],
                werr(base["clean_ter"], s["clean_ter"]),
                werr(base["noisy_ter"], s["noisy_ter"]),
            )
            for name, s in scores.items()
        ]
        report = RunReport(tuple(rows), self.cfg.seed, self.cfg.hash())
        self._write_timings()
        return report

    def _cell(self, temperature: float, k_label) -> tuple:
        base = self.evaluate_model(self.teacher_stage())
        s = self.evaluate_model(self.student_stage(temperature, k_label))
        return (
            temperature,
            k_label,
            s["clean_ter"],
            s["noisy_ter"],
            werr(base["clean_ter"], s["clean_ter"]),
            werr(base["noisy_ter"], s["noisy_ter"]),
        )

    def sweep_tk(self, temperatures=None, ks=None, jobs: int = 1) -> list[tuple]:
        """One student per (T, k) cell, shared teacher/init/seed; grid rows."""
        temperatures = self.cfg.sweep.temperatures if temperatures is None else temperatures
        ks = self.cfg.sweep.ks if ks is None else ks
        cells = [(float(t), k) for t in temperatures for k in ks]
        if jobs > 1:
            cfg_dict = self.cfg.to_dict()
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(_run_cell, [(cfg_dict, str(self.out_dir), t, k) for t, k in cells]))
        else:
            rows = [self._cell(t, k) for t, k in cells]
        self._write_timings()
        return rows

    def sweep_size(self, multipliers=None) -> list[tuple]:
        """Students at the codec operating point with m-times noisy redraws."""
        multipliers = self.cfg.sweep.size_multipliers if multipliers is None else multipliers
        t = self.cfg.codec.temperature
        k_label = self.cfg.codec.k
        base = self.evaluate_model(self.teacher_stage())
        rows = []
        for m in multipliers:
            s = self.evaluate_model(self.student_stage(t, k_label, multiplier=int(m)))
            rows.append((
                int(m),
                s["clean_ter"],
                s["noisy_ter"],
                werr(base["clean_ter"], s["clean_ter"]),
                werr(base["noisy_ter"], s["noisy_ter"]),
            ))
        self._write_timings()
        return rows

    def _write_timings(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "timings.json", "w") as f:
            json.dump(self.timings, f, indent=2, sort_keys=True)
            f.write("\n")


def _run_cell(args) -> tuple:
    cfg_dict, out_dir, t, k = args
    runner = ExperimentRunner(ExperimentConfig.from_dict(cfg_dict), out_dir)
    return runner._cell(t, k)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunReport:
    return ExperimentRunner(cfg, out_dir).run()


def sweep_tk(cfg: ExperimentConfig, temperatures=None, ks=None,
             out_dir: str | Path | None = None, jobs: int = 1) -> list[tuple]:
    return ExperimentRunner(cfg, out_dir).sweep_tk(temperatures, ks, jobs=jobs)


def sweep_size(cfg: ExperimentConfig, multipliers=None, out_dir: str | Path | None = None) -> list[tuple]:
    return ExperimentRunner(cfg, out_dir).sweep_size(multipliers)

"""Experiment configuration: flat key-value files and stable hashing.

Config files are plain text, one ``section.key = value`` per line, with
``#`` comments. Values are coerced to bool/int/float/str, and comma
sequences become tuples. Hashes are computed over canonical sorted JSON, so
key order never matters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .synthgen import GenConfig
from .student import StudentHyper
from .teacher import TeacherHyper


class UsageError(ValueError):
    """Bad user input: unknown keys, malformed values, unreadable files."""


def _coerce(raw: str):
    text = raw.strip()
    if "," in text:
        return tuple(_coerce(part) for part in text.split(",") if part.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict:
    """Parse flat key-value lines into a dict of coerced values."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise UsageError(f"line {lineno}: empty key")
        out[key] = _coerce(value)
    return out


def config_hash(flat: dict, length: int = 12) -> str:
    """Stable content hash of a flat config dict, order independent."""
    canon = json.dumps(flat, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:length]


DEFAULTS: dict = {
    # synthetic world
    "gen.n_music": 200,
    "gen.n_videos": 2000,
    "gen.n_uploaders": 120,
    "gen.n_pgc_pairs": 1000,
    "gen.F_video": 32,
    "gen.F_music": 24,
    "gen.N_g": 6,
    "gen.latent_dim_true": 8,
    "gen.confound_strength": 1.5,
    "gen.match_strength": 2.0,
    "gen.popularity_zipf_s": 1.0,
    "gen.dirichlet_alpha": 0.3,
    "gen.noise_sigma": 0.05,
    "gen.seed": 0,
    "gen.genre_mix": None,
    # split
    "split.method": "strong",  # strong | genre_ratio
    "split.ratios": (0.8, 0.1, 0.1),
    "split.n_strata": 10,
    "split.X": 0.8,
    "split.genre_a": 0,
    "split.genre_b": 1,
    "split.seed": 0,
    # teacher
    "teacher.enabled": True,
    "teacher.latent_dim": 16,
    "teacher.epochs": 50,
    "teacher.batch_size": 256,
    "teacher.lr": 1e-3,
    "teacher.weight_decay": 1e-3,
    "teacher.dropout": 0.2,
    "teacher.margin": 0.05,
    "teacher.n_hard": 40,
    "teacher.m2v_weight": 1.0,
    "teacher.recon_weight": 1.0,
    "teacher.holdout_fraction": 0.1,
    # student
    "student.latent_dim": 16,
    "student.epochs": 40,
    "student.batch_size": 256,
    "student.lr": 1e-3,
    "student.weight_decay": 1e-3,
    "student.dropout": 0.2,
    "student.margin": 0.05,
    "student.n_hard": 40,
    "student.m2v_weight": 1.0,
    "student.recon_weight": 1.0,
    "student.kt_weight_video": 0.0,
    "student.kt_weight_music": 0.0,
    "student.kt_direction": "teacher_to_student",
    "student.deconfounder_mode": "batch_average",
    "student.ips": False,
    "student.ips_floor": 0.01,
    # evaluation
    "eval.Ks": (15, 25),
    "eval.sampler": "all",  # all | diverse | matching
    "eval.fraction": 1.0,
    # ablation sweep cells
    "ablation.deconfounder_modes": ("batch_average", "global_average", "off"),
    "ablation.teacher_weights": (0.4, 4.0, 40.0),
    # run
    "seeds": (0,),
    "outdir": "runs/default",
    "pipeline.stages": ("generate", "split", "teacher", "student", "evaluate"),
}

_STAGE_ORDER = ("generate", "split", "teacher", "student", "evaluate")


@dataclass
class ExperimentConfig:
    """Typed access over a merged flat config dict."""

    flat: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = sorted(set(self.flat) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(DEFAULTS)
        merged.update(self.flat)
        self.flat = merged

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from exc
        return cls(parse_config_text(text))

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls({})

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        flat = dict(self.flat)
        flat.update(overrides)
        return ExperimentConfig(flat)

    def _section(self, prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.flat.items() if k.startswith(prefix + ".")}

    def hash(self) -> str:
        # Where results land and how far the pipeline runs do not affect
        # results; leave them out so reruns hash identically.
        semantic = {k: v for k, v in self.flat.items() if k not in ("outdir", "pipeline.stages")}
        return config_hash(semantic)

    def section_hash(self, *prefixes: str) -> str:
        sub = {k: v for k, v in self.flat.items() for p in prefixes if k == p or k.startswith(p + ".")}
        return config_hash(sub)

    # typed sections -------------------------------------------------------

    def gen_config(self, seed: int | None = None) -> GenConfig:
        kwargs = self._section("gen")
        if seed is not None:
            kwargs["seed"] = seed
        if isinstance(kwargs.get("genre_mix"), (int, float)):
            raise UsageError("gen.genre_mix must be a comma list or none")
        return GenConfig(**kwargs)

    def teacher_hyper(self) -> TeacherHyper:
        kwargs = self._section("teacher")
        kwargs.pop("enabled", None)
        return TeacherHyper(**kwargs)

    def student_hyper(self, **overrides) -> StudentHyper:
        kwargs = self._section("student")
        kwargs.update(overrides)
        return StudentHyper(**kwargs)

    @property
    def teacher_enabled(self) -> bool:
        return bool(self.flat["teacher.enabled"])

    @property
    def seeds(self) -> tuple[int, ...]:
        seeds = self.flat["seeds"]
        if isinstance(seeds, int):
            return (seeds,)
        return tuple(int(s) for s in seeds)

    @property
    def outdir(self) -> str:
        return str(self.flat["outdir"])

    @property
    def stages(self) -> tuple[str, ...]:
        raw = self.flat["pipeline.stages"]
        stages = (raw,) if isinstance(raw, str) else tuple(raw)
        bad = [s for s in stages if s not in _STAGE_ORDER]
        if bad:
            raise UsageError(f"unknown pipeline stages: {bad}")
        return tuple(s for s in _STAGE_ORDER if s in stages)

    @property
    def eval_ks(self) -> tuple[int, ...]:
        ks = self.flat["eval.Ks"]
        if isinstance(ks, int):
            return (ks,)
        return tuple(int(k) for k in ks)

    def write_text(self) -> str:
        lines = ["# bgmatch experiment config"]
        for key in sorted(self.flat):
            value = self.flat[key]
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

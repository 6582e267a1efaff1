"""Synthetic paired image/report corpus.

Images are patch-feature grids ``[H, W, C]``. Every category owns a small
region (a few grid cells) and a signed channel pattern that is stamped into
the grid when the category is active. Reports are one three-token sentence per
category in fixed order: ``<noun> <finding-word> .`` when active and
``<noun> <normal-word> .`` otherwise. Most samples are all-normal.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
N_LABELS = 14


class ConfigError(ValueError):
    """Invalid corpus or run configuration."""


class DataError(ValueError):
    """Malformed dataset file or record."""


_NOUNS = (
    "lungs", "heart", "pleura", "mediastinum", "aorta", "spine", "ribs",
    "diaphragm", "trachea", "hila", "clavicles", "tissue", "vessels", "airspace",
)
_FINDINGS = (
    "opacity", "enlarged", "effusion", "widened", "tortuous", "degenerative", "fracture",
    "elevated", "deviated", "prominent", "lesion", "emphysema", "congested", "consolidation",
)
_NORMALS = ("clear", "normal", "intact", "unremarkable", "stable", "midline")


@dataclass
class CategorySpec:
    noun: str
    finding: str
    normal: str
    cells: list[list[int]]
    channels: list[int]
    signs: list[float]


@dataclass
class CorpusSpec:
    seed: int = 0
    n_samples: int = 1000
    normal_prob: float = 0.6
    height: int = 4
    width: int = 4
    channels: int = 32
    noise: float = 0.5
    amplitude: float = 1.5
    max_len: int = 48
    label_count_probs: list[float] = field(default_factory=lambda: [0.6, 0.3, 0.1])
    prevalence: list[float] = field(default_factory=list)
    categories: list[CategorySpec] = field(default_factory=list)

    def validate(self) -> None:
        problems = []
        if not self.categories:
            problems.append("categories: at least one category is required")
        if self.n_samples < 0:
            problems.append("n_samples: must be >= 0")
        if not 0.0 <= self.normal_prob <= 1.0:
            problems.append("normal_prob: must lie in [0, 1]")
        if min(self.height, self.width, self.channels) < 1:
            problems.append("height/width/channels: must be positive")
        if self.noise < 0:
            problems.append("noise: must be >= 0")
        if self.prevalence and len(self.prevalence) != len(self.categories):
            problems.append("prevalence: one weight per category required")
        if not self.label_count_probs or any(p < 0 for p in self.label_count_probs):
            problems.append("label_count_probs: non-negative weights required")
        for k, cat in enumerate(self.categories):
            for r, c in cat.cells:
                if not (0 <= r < self.height and 0 <= c < self.width):
                    problems.append(f"categories[{k}].cells: ({r}, {c}) outside grid")
            if any(not 0 <= ch < self.channels for ch in cat.channels):
                problems.append(f"categories[{k}].channels: out of range")
            if len(cat.signs) != len(cat.channels):
                problems.append(f"categories[{k}].signs: length must match channels")
        findings = [c.finding for c in self.categories]
        if len(set(findings)) != len(findings):
            problems.append("categories: finding words must be unique")
        needed = 2 + 3 * len(self.categories)
        if self.max_len < needed:
            problems.append(f"max_len: reports need {needed} tokens")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def n_labels(self) -> int:
        return len(self.categories)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "CorpusSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown corpus spec keys: {', '.join(unknown)}")
        raw = dict(raw)
        try:
            raw["categories"] = [CategorySpec(**c) for c in raw.get("categories", [])]
            spec = cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad category entry: {exc}") from exc
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, text: str) -> "CorpusSpec":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"corpus spec is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("corpus spec must be a JSON object")
        return cls.from_dict(raw)


def default_spec(seed: int = 0, n_samples: int = 1000, **overrides) -> CorpusSpec:
    """The standard 14-category toy spec; layout is drawn from ``seed``."""
    rng = np.random.default_rng([seed, 7])
    height, width = overrides.get("height", 4), overrides.get("width", 4)
    channels = overrides.get("channels", 32)
    cells = rng.permutation(height * width)
    cats = []
    for k in range(N_LABELS):
        cell = int(cells[k % len(cells)])
        chans = sorted(int(c) for c in rng.choice(channels, size=4, replace=False))
        signs = [float(s) for s in rng.choice([-1.0, 1.0], size=4)]
        cats.append(
            CategorySpec(
                noun=_NOUNS[k],
                finding=_FINDINGS[k],
                normal=_NORMALS[k % len(_NORMALS)],
                cells=[[cell // width, cell % width]],
                channels=chans,
                signs=signs,
            )
        )
    prevalence = [float(w) for w in 0.85 ** np.arange(N_LABELS)]
    spec = CorpusSpec(seed=seed, n_samples=n_samples, categories=cats, prevalence=prevalence)
    for key, value in overrides.items():
        if not hasattr(spec, key):
            raise ConfigError(f"unknown corpus spec key: {key}")
        setattr(spec, key, value)
    spec.validate()
    return spec


class Vocabulary:
    """Token/id bijection with PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ConfigError("vocabulary must start with the four reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_spec(cls, spec: CorpusSpec) -> "Vocabulary":
        words = list(SPECIAL_TOKENS) + ["."]
        for cat in spec.categories:
            for w in (cat.noun, cat.finding, cat.normal):
                if w not in words:
                    words.append(w)
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] if 0 <= i < len(self.tokens) else SPECIAL_TOKENS[UNK] for i in ids]

    def to_json(self) -> str:
        return json.dumps(self.tokens)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [H, W, C]
    report: list[int]
    labels: np.ndarray  # [N_labels] of {0, 1}

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Sample)
            and self.id == other.id
            and self.report == other.report
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.labels, other.labels)
        )


class KeywordLabeler:
    """Rule-based stand-in for an automatic report labeler.

    ``y[k] = 1`` iff category k's finding word occurs in the report.
    """

    def __init__(self, finding_ids: Sequence[int]):
        self.finding_ids = list(finding_ids)
        self._lookup = {t: k for k, t in enumerate(self.finding_ids)}

    @classmethod
    def from_spec(cls, spec: CorpusSpec, vocab: Vocabulary) -> "KeywordLabeler":
        return cls([vocab.id(c.finding) for c in spec.categories])

    @property
    def n_labels(self) -> int:
        return len(self.finding_ids)

    def __call__(self, report: Iterable[int]) -> np.ndarray:
        y = np.zeros(self.n_labels, dtype=np.int64)
        for t in report:
            k = self._lookup.get(int(t))
            if k is not None:
                y[k] = 1
        return y


def label_report(report: Iterable[int], labeler: KeywordLabeler) -> np.ndarray:
    return labeler(report)


def flip_image(image: np.ndarray) -> np.ndarray:
    """Mirror the patch grid left-right; channels are untouched."""
    return np.ascontiguousarray(np.asarray(image)[:, ::-1, :])


def render_report(labels: np.ndarray, spec: CorpusSpec, vocab: Vocabulary) -> list[int]:
    words = []
    for k, cat in enumerate(spec.categories):
        words += [cat.noun, cat.finding if labels[k] else cat.normal, "."]
    return [BOS] + vocab.encode(words) + [EOS]


def generate_corpus(spec: CorpusSpec) -> list[Sample]:
    spec.validate()
    vocab = Vocabulary.from_spec(spec)
    rng = np.random.default_rng(spec.seed)
    n_labels = spec.n_labels
    anatomy = rng.normal(size=(spec.height, spec.width, spec.channels))
    prevalence = np.asarray(spec.prevalence or np.ones(n_labels), dtype=np.float64)
    prevalence = prevalence / prevalence.sum()
    count_probs = np.asarray(spec.label_count_probs, dtype=np.float64)
    count_probs = count_probs / count_probs.sum()

    samples = []
    for u in range(spec.n_samples):
        labels = np.zeros(n_labels, dtype=np.int64)
        if rng.random() >= spec.normal_prob:
            n_active = min(int(rng.choice(len(count_probs), p=count_probs)) + 1, n_labels)
            labels[rng.choice(n_labels, size=n_active, replace=False, p=prevalence)] = 1
        image = anatomy + spec.noise * rng.normal(size=anatomy.shape)
        for k in np.flatnonzero(labels):
            cat = spec.categories[k]
            for r, c in cat.cells:
                image[r, c, cat.channels] += spec.amplitude * np.asarray(cat.signs)
        samples.append(Sample(f"s{u:05d}", image, render_report(labels, spec, vocab), labels))
    return samples


def split_corpus(samples: Sequence[Sample], seed: int, fractions=(0.7, 0.1, 0.2)):
    """Seeded shuffle into train/val/test."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n = len(samples)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    picked = [samples[i] for i in order]
    return picked[:n_train], picked[n_train : n_train + n_val], picked[n_train + n_val :]


def save_dataset(samples: Iterable[Sample], path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "id": s.id,
                "image": s.image.tolist(),
                "report": vocab.decode(s.report),
                "labels": [int(v) for v in s.labels],
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path, vocab: Vocabulary) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image = np.asarray(rec["image"], dtype=np.float64)
                labels = np.asarray(rec["labels"], dtype=np.int64)
                report = vocab.encode(rec["report"])
                if image.ndim != 3:
                    raise ValueError(f"image must be [H][W][C], got {image.ndim} dims")
                if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
                    raise ValueError("labels must be a flat 0/1 array")
                samples.append(Sample(str(rec["id"]), image, report, labels))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return samples


def write_corpus_dir(out_dir, spec: CorpusSpec, samples: Sequence[Sample], split_seed: int | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.from_spec(spec)
    train, val, test = split_corpus(samples, spec.seed if split_seed is None else split_seed)
    (out / "corpus_spec.json").write_text(spec.to_json())
    (out / "vocab.json").write_text(vocab.to_json())
    for name, part in (("train", train), ("val", val), ("test", test)):
        save_dataset(part, out / f"{name}.jsonl", vocab)
    return {"train": len(train), "val": len(val), "test": len(test)}


def read_corpus_dir(data_dir):
    d = Path(data_dir)
    try:
        spec = CorpusSpec.from_json((d / "corpus_spec.json").read_text())
        vocab = Vocabulary.from_json((d / "vocab.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing corpus file: {exc.filename}") from exc
    splits = {}
    for name in ("train", "val", "test"):
        p = d / f"{name}.jsonl"
        splits[name] = load_dataset(p, vocab) if p.exists() else []
    return spec, vocab, splits

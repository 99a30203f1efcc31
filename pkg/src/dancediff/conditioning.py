"""Music features and style-prompt embeddings fed to the denoiser.

Real audio extractors and text encoders are not run here: beat features are
synthesised from a beat grid, and text embeddings are either deterministic
pseudo-embeddings or loaded from a precomputed embedding file.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GENRES = ("Break", "Pop", "Lock", "Middle Hip-hop", "LA-style Hip-hop",
          "House", "Waack", "Krump", "Street Jazz", "Ballet Jazz")

DESCRIPTION_TEMPLATE = ("Please generate a detailed description of the dance [g], including the "
                        "characteristics of the dance in terms of body movement.")

PROMPT_KINDS = ("one_hot", "genre_name", "description")

PULSE_SIGMA_FRAMES = 2.0
NOISE_AMPLITUDE = 0.05
BEATS_PER_BAR = 4


class UnknownGenreError(KeyError):
    pass


class ConditionShapeError(ValueError):
    pass


@dataclass
class AudioCondition:
    fps: float
    features: np.ndarray  # (F, d_c)
    beat_times: np.ndarray  # seconds
    bpm: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.beat_times = np.asarray(self.beat_times, dtype=np.float64).reshape(-1)
        if self.features.ndim != 2:
            raise ConditionShapeError(f"features must be (F, d_c), got {self.features.shape}")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.beat_times))):
            raise ValueError("audio condition contains non-finite values")
        if np.any(np.diff(self.beat_times) <= 0):
            raise ValueError("beat_times must be strictly increasing")
        duration = self.n_frames / self.fps
        if self.beat_times.size and (self.beat_times[0] < 0 or self.beat_times[-1] > duration + 1e-9):
            raise ValueError(f"beat_times must lie within [0, {duration}] s")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def slice(self, start: int, stop: int) -> "AudioCondition":
        t0, t1 = start / self.fps, stop / self.fps
        keep = (self.beat_times >= t0 - 1e-9) & (self.beat_times <= t1 + 1e-9)
        beats = np.clip(self.beat_times[keep] - t0, 0.0, None)
        return AudioCondition(self.fps, self.features[start:stop].copy(), beats, self.bpm)

    def to_dict(self) -> dict:
        return {"fps": float(self.fps), "bpm": float(self.bpm),
                "beat_times": self.beat_times.tolist(), "features": self.features.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AudioCondition":
        return cls(fps=d["fps"], features=np.asarray(d["features"], dtype=np.float64),
                   beat_times=np.asarray(d["beat_times"], dtype=np.float64), bpm=d["bpm"])


@dataclass
class StylePrompt:
    kind: str
    genre: str
    text: str
    embedding: np.ndarray

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.embedding)) or not np.any(self.embedding):
            raise ValueError("style embedding must be finite and nonzero")

    def to_dict(self) -> dict:
        return {"genre": self.genre, "kind": self.kind, "text": self.text,
                "embedding": self.embedding.tolist()}


def beat_grid(bpm: float, duration: float) -> np.ndarray:
    """Beat times k * 60 / bpm inside [0, duration]."""
    period = 60.0 / bpm
    n = int(np.floor(duration / period + 1e-9)) + 1
    return np.arange(n) * period


def beat_features(beat_times, bpm: float, fps: float, F: int, d_c: int = 16, seed: int = 0) -> np.ndarray:
    """Synthetic per-frame music features.

    Channels: Gaussian beat pulse (sigma 2 frames, peak 1 on a beat frame),
    sin and cos of the 4-beat bar phase, bpm / 200, then seeded uniform noise
    in [-0.05, 0.05].
    """
    if F <= 0:
        raise ConditionShapeError(f"frame count must be positive, got {F}")
    if d_c < 4:
        raise ConditionShapeError(f"need at least 4 feature channels, got {d_c}")
    if not 0 < bpm <= 300:
        raise ValueError(f"bpm must lie in (0, 300], got {bpm}")
    beat_times = np.asarray(beat_times, dtype=np.float64).reshape(-1)
    frames = np.arange(F, dtype=np.float64)
    out = np.zeros((F, d_c))
    if beat_times.size:
        d = frames[:, None] - beat_times[None, :] * fps
        out[:, 0] = np.exp(-d ** 2 / (2 * PULSE_SIGMA_FRAMES ** 2)).max(axis=1)
    t0 = beat_times[0] if beat_times.size else 0.0
    phase = 2 * np.pi * (frames / fps - t0) * (bpm / 60.0) / BEATS_PER_BAR
    out[:, 1] = np.sin(phase)
    out[:, 2] = np.cos(phase)
    out[:, 3] = bpm / 200.0
    if d_c > 4:
        rng = np.random.default_rng(seed)
        out[:, 4:] = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(F, d_c - 4))
    return out


def make_audio(bpm: float, seconds: float, fps: float, d_c: int = 16, seed: int = 0) -> AudioCondition:
    F = int(round(seconds * fps))
    beats = beat_grid(bpm, F / fps)
    return AudioCondition(fps, beat_features(beats, bpm, fps, F, d_c, seed), beats, bpm)


def resolve_genre(genre) -> tuple[int, str]:
    """Map a 1-based style id or a genre name to (id, display name)."""
    if isinstance(genre, (int, np.integer)):
        if not 1 <= genre <= len(GENRES):
            raise UnknownGenreError(f"style id {genre} outside 1..{len(GENRES)}")
        return int(genre), GENRES[genre - 1]
    key = str(genre).strip().lower()
    for i, name in enumerate(GENRES):
        if key == name.lower():
            return i + 1, name
    if key.isdigit():
        return resolve_genre(int(key))
    raise UnknownGenreError(f"unknown genre {genre!r}")


def prompt_text(kind: str, genre_name: str) -> str:
    if kind == "description":
        return DESCRIPTION_TEMPLATE.replace("[g]", genre_name)
    return genre_name


def pseudo_embedding(text: str, d_s: int) -> np.ndarray:
    """Unit vector seeded from a SHA-256 of the text."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(d_s)
    return v / np.linalg.norm(v)


def load_embedding_file(path, genre=None, kind=None) -> dict:
    """Read an embedding JSON object, or pick the matching entry from a list of them."""
    data = json.loads(Path(path).read_text())
    entries = data if isinstance(data, list) else [data]
    for entry in entries:
        missing = [k for k in ("genre", "kind", "text", "embedding") if k not in entry]
        if missing:
            raise ValueError(f"{path}: embedding entry missing field(s) {missing}")
    if len(entries) == 1:
        return entries[0]
    for entry in entries:
        if (genre is None or str(entry["genre"]).lower() == str(genre).lower()) and \
                (kind is None or entry["kind"] == kind):
            return entry
    raise UnknownGenreError(f"{path}: no embedding for genre={genre!r} kind={kind!r}")


def encode_style(kind: str, genre, n_styles: int = len(GENRES), d_s: int = 32,
                 embedding_file=None) -> StylePrompt:
    """Build a style prompt of the given kind.

    ``genre`` is a 1-based style id or a genre name. One-hot prompts place a
    unit entry at index id-1. Text prompts use a precomputed embedding file
    when given, otherwise a pseudo-embedding of the prompt text.
    """
    if kind not in PROMPT_KINDS:
        raise ValueError(f"prompt kind must be one of {PROMPT_KINDS}, got {kind!r}")
    if embedding_file is not None and kind != "one_hot":
        entry = load_embedding_file(embedding_file, None if isinstance(genre, int) else genre, kind)
        emb = np.asarray(entry["embedding"], dtype=np.float64)
        if emb.shape != (d_s,):
            raise ConditionShapeError(f"embedding file has width {emb.size}, expected {d_s}")
        return StylePrompt(kind, str(entry["genre"]), entry["text"], emb)

    style_id, name = resolve_genre(genre)
    if kind == "one_hot":
        if style_id > n_styles:
            raise UnknownGenreError(f"style id {style_id} outside 1..{n_styles}")
        if d_s < n_styles:
            raise ConditionShapeError(f"one-hot needs d_s >= {n_styles}, got {d_s}")
        emb = np.zeros(d_s)
        emb[style_id - 1] = 1.0
        return StylePrompt(kind, name, name, emb)
    text = prompt_text(kind, name)
    return StylePrompt(kind, name, text, pseudo_embedding(text, d_s))


def save_embedding(prompt: StylePrompt, path) -> None:
    Path(path).write_text(json.dumps(prompt.to_dict()))

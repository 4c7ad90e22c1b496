"""Synthetic repetition sequences standing in for backbone video features.

Each sequence repeats one smooth motif several times over a slowly drifting
background.  A cycle is a bump: the motif trajectory is multiplied by a
sin(pi * phase) envelope, so feature energy departs from the background only
inside annotated cycles.  An optional interruption plants a single
occurrence of an unrelated motif, which is never annotated.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Interval

PERIOD_CLASSES = ("short", "medium", "long")
SHORT_BELOW = 30
LONG_ABOVE = 60


class GenerationError(ValueError):
    """The requested cycles cannot be packed into the sequence."""


class FormatError(ValueError):
    """Dataset file is malformed, truncated or corrupt."""


def period_class_of(mean_frames: float) -> str:
    if mean_frames < SHORT_BELOW:
        return "short"
    if mean_frames > LONG_ABOVE:
        return "long"
    return "medium"


@dataclass(frozen=True)
class GeneratorConfig:
    T: int = 128
    C_in: int = 16
    count_range: tuple[int, int] = (2, 10)
    period_range: tuple[int, int] = (8, 56)
    motif_dim: int = 4
    harmonics: int = 3
    noise_std: float = 0.1
    interruption_probability: float = 0.3
    background_drift_std: float = 0.3
    period_jitter: float = 0.15
    amplitude: float = 1.5
    master_seed: int = 0

    def __post_init__(self) -> None:
        from .model import ConfigError

        object.__setattr__(self, "count_range", tuple(int(v) for v in self.count_range))
        object.__setattr__(self, "period_range", tuple(int(v) for v in self.period_range))
        n_min, n_max = self.count_range
        p_min, p_max = self.period_range
        if self.T < 1 or self.C_in < 1 or self.motif_dim < 1 or self.harmonics < 1:
            raise ConfigError("T", "T, C_in, motif_dim and harmonics must be positive")
        if not 1 <= n_min <= n_max:
            raise ConfigError("count_range", f"need 1 <= N_min <= N_max, got {self.count_range}")
        if not 2 <= p_min <= p_max:
            raise ConfigError("period_range", f"need 2 <= min <= max, got {self.period_range}")
        if n_max * p_min > self.T:
            raise ConfigError("count_range", f"N_max * min_period = {n_max * p_min} exceeds T = {self.T}")
        if self.noise_std < 0 or self.background_drift_std < 0:
            raise ConfigError("noise_std", "noise levels must be >= 0")
        if not 0.0 <= self.interruption_probability <= 1.0:
            raise ConfigError("interruption_probability", "must lie in [0, 1]")
        if not 0.0 <= self.period_jitter < 1.0:
            raise ConfigError("period_jitter", "must lie in [0, 1)")


@dataclass
class SequenceSample:
    features: np.ndarray
    cycles: list[Interval]
    true_count: int
    period_class: str
    seed: int
    interruptions: list[tuple[int, int]] = field(default_factory=list, compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SequenceSample):
            return NotImplemented
        return (
            self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
            and self.cycles == other.cycles
            and self.true_count == other.true_count
            and self.period_class == other.period_class
            and self.seed == other.seed
        )

    @property
    def T(self) -> int:
        return self.features.shape[0]

    def cycle_frames(self) -> list[tuple[int, int]]:
        """Annotated cycles as [start, end) frame ranges."""
        t = self.T
        return [(int(round(c.start * t)), int(round(c.end * t))) for c in self.cycles]


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


class _Motif:
    """Smooth closed trajectory over one cycle phase, projected to the feature width."""

    def __init__(self, rng: np.random.Generator, cfg: GeneratorConfig):
        k = np.arange(1, cfg.harmonics + 1)
        self.k = k
        self.a = rng.normal(size=(cfg.motif_dim, cfg.harmonics)) / k
        self.b = rng.normal(size=(cfg.motif_dim, cfg.harmonics)) / k
        self.proj = rng.normal(size=(cfg.motif_dim, cfg.C_in)) / np.sqrt(cfg.motif_dim)

    def render(self, length: int, gain: float) -> np.ndarray:
        phase = (np.arange(length) + 0.5) / length
        arg = 2 * np.pi * phase[:, None] * self.k[None, :]
        traj = np.cos(arg) @ self.a.T + np.sin(arg) @ self.b.T
        envelope = np.sin(np.pi * phase)[:, None]
        return gain * envelope * (traj @ self.proj)


def _split_slack(rng: np.random.Generator, slack: int, slots: int) -> np.ndarray:
    if slots == 0:
        return np.zeros(0, dtype=int)
    return rng.multinomial(slack, rng.dirichlet(np.ones(slots)))


def generate_sample(cfg: GeneratorConfig, index: int) -> SequenceSample:
    seed = sample_seed(cfg.master_seed, index)
    rng = np.random.default_rng(seed)
    t = cfg.T
    n_min, n_max = cfg.count_range
    p_min, p_max = cfg.period_range
    n = int(rng.integers(n_min, n_max + 1))
    want_interruption = rng.random() < cfg.interruption_probability

    # cycles are separated by at least one background frame
    longest = int(np.floor((t - (n - 1)) / (n * (1.0 + cfg.period_jitter))))
    hi = min(p_max, longest)
    if hi < p_min:
        raise GenerationError(f"{n} cycles of at least {p_min} frames do not fit in T={t}")
    base = int(rng.integers(p_min, hi + 1))
    jitter = rng.uniform(1.0 - cfg.period_jitter, 1.0 + cfg.period_jitter, n)
    lengths = np.maximum(2, np.round(base * jitter)).astype(int)
    while lengths.sum() > t - (n - 1):
        lengths[np.argmax(lengths)] -= 1

    slack = t - int(lengths.sum()) - (n - 1)
    segments: list[tuple[str, int]] = [("cycle", int(L)) for L in lengths]
    int_len = 0
    if want_interruption:
        # needs one extra separating frame
        room = slack - 1
        lo = max(4, base // 2)
        if room >= lo:
            int_len = int(rng.integers(lo, min(room, max(lo, base)) + 1))
            segments.insert(int(rng.integers(0, n + 1)), ("interruption", int_len))
            slack -= int_len + 1
    gaps = _split_slack(rng, slack, len(segments) + 1)

    motif = _Motif(rng, cfg)
    distractor = _Motif(rng, cfg)
    frames = np.arange(t)[:, None] / t
    drift = np.zeros((t, cfg.C_in))
    for k in (1, 2):
        amp = rng.normal(0.0, cfg.background_drift_std / k, cfg.C_in)
        phase = rng.uniform(0, 2 * np.pi, cfg.C_in)
        drift += amp * np.cos(2 * np.pi * k * frames / 2 + phase)
    features = drift

    cycles: list[Interval] = []
    interruptions: list[tuple[int, int]] = []
    cursor = int(gaps[0])
    for i, (kind, length) in enumerate(segments):
        if kind == "cycle":
            gain = cfg.amplitude * rng.uniform(0.9, 1.1)
            features[cursor : cursor + length] += motif.render(length, gain)
            cycles.append(Interval((cursor + length / 2.0) / t, length / t))
        else:
            features[cursor : cursor + length] += distractor.render(length, cfg.amplitude)
            interruptions.append((cursor, cursor + length))
        cursor += length + 1 + int(gaps[i + 1])
    features = features + rng.normal(0.0, cfg.noise_std, features.shape) if cfg.noise_std > 0 else features

    mean_len = float(np.mean([c.duration * t for c in cycles]))
    return SequenceSample(
        features=features.astype(np.float32),
        cycles=cycles,
        true_count=len(cycles),
        period_class=period_class_of(mean_len),
        seed=seed,
        interruptions=interruptions,
    )


def generate_split(cfg: GeneratorConfig, n_train: int, n_val: int, n_test: int):
    """Train, validation and test lists drawn from disjoint, consecutive index ranges."""
    bounds = np.cumsum([0, n_train, n_val, n_test])
    return tuple([generate_sample(cfg, i) for i in range(bounds[k], bounds[k + 1])] for k in range(3))


# -- dataset file --------------------------------------------------------------------

MAGIC = b"TRC1"
_RECORD_HEADER = struct.Struct("<IIIQB")


def encode_records(samples: Sequence[SequenceSample]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(samples))]
    for s in samples:
        t, c = s.features.shape
        body = _RECORD_HEADER.pack(t, c, s.true_count, s.seed, PERIOD_CLASSES.index(s.period_class))
        body += np.array([[iv.midpoint, iv.duration] for iv in s.cycles], dtype="<f8").reshape(-1).tobytes()
        body += np.ascontiguousarray(s.features, dtype="<f4").tobytes()
        parts.append(body)
        parts.append(struct.pack("<I", zlib.crc32(body)))
    return b"".join(parts)


def decode_records(raw: bytes) -> list[SequenceSample]:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError("missing TRC1 magic")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    out = []
    for r in range(count):
        if off + _RECORD_HEADER.size > len(raw):
            raise FormatError(f"record {r}: truncated header")
        t, c, n, seed, code = _RECORD_HEADER.unpack_from(raw, off)
        if code >= len(PERIOD_CLASSES) or t == 0 or c == 0:
            raise FormatError(f"record {r}: malformed header")
        size = _RECORD_HEADER.size + 16 * n + 4 * t * c
        if off + size + 4 > len(raw):
            raise FormatError(f"record {r}: truncated payload")
        body = raw[off : off + size]
        (crc,) = struct.unpack_from("<I", raw, off + size)
        if zlib.crc32(body) != crc:
            raise FormatError(f"record {r}: checksum mismatch")
        pos = _RECORD_HEADER.size
        ann = np.frombuffer(body, dtype="<f8", count=2 * n, offset=pos).reshape(n, 2)
        pos += 16 * n
        feats = np.frombuffer(body, dtype="<f4", count=t * c, offset=pos).reshape(t, c).astype(np.float32)
        cycles = [Interval(float(m), float(d)) for m, d in ann]
        out.append(SequenceSample(feats, cycles, int(n), PERIOD_CLASSES[code], int(seed)))
        off += size + 4
    if off != len(raw):
        raise FormatError("trailing bytes after last record")
    return out


def write_dataset(samples: Sequence[SequenceSample], path) -> None:
    Path(path).write_bytes(encode_records(samples))


def read_dataset(path) -> list[SequenceSample]:
    return decode_records(Path(path).read_bytes())


def config_dict(cfg: GeneratorConfig) -> dict:
    d = asdict(cfg)
    d["count_range"] = list(cfg.count_range)
    d["period_range"] = list(cfg.period_range)
    return d

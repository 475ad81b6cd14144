"""Synthetic surveillance-style videos, PGM frame I/O and sliding windows.

Layout on disk::

    root/manifest
    root/train/video_0000/frame_000000.pgm
    root/test/video_0008/frame_000000.pgm

Manifest grammar (one record per line, ``#`` starts a comment)::

    version 1
    frame_size <S>
    video <id> <train|test> <frame_count> [<start>:<end>,...]

Anomalous intervals are half-open frame ranges ``[start, end)``; train
videos never carry any.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .diffcore import ConfigError

WINDOW = 4
MANIFEST_VERSION = 1
ANOMALY_TYPES = ("fast_sprite", "shape_change", "new_object")


class PgmError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# -- PGM -------------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def parse_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary (P5) 8-bit PGM image."""
    pos = 0
    n = len(buf)

    def token():
        nonlocal pos
        while pos < n:
            c = buf[pos:pos + 1]
            if c == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PgmError(f"unexpected end of header at byte {start}")
        return buf[start:pos], start

    magic, at = token()
    if magic != b"P5":
        raise PgmError(f"bad magic {magic!r} at byte {at}, expected P5")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, at = token()
        if not tok.isdigit() or int(tok) <= 0:
            raise PgmError(f"invalid {name} {tok!r} at byte {at}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval > 255:
        raise PgmError(f"maxval {maxval} at byte {at} needs 16-bit samples, unsupported")
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise PgmError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = w * h
    if n - pos < need:
        raise PgmError(f"truncated payload at byte {n}: expected {need} bytes from byte {pos}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def to_unit(frames: np.ndarray) -> np.ndarray:
    """uint8 pixels -> [-1, 1]."""
    return np.asarray(frames, dtype=np.float64) / 127.5 - 1.0


# -- manifest --------------------------------------------------------------

@dataclass
class VideoEntry:
    id: str
    split: str
    frame_count: int
    label_runs: list = field(default_factory=list)

    def labels(self) -> np.ndarray:
        y = np.zeros(self.frame_count, dtype=np.int64)
        for a, b in self.label_runs:
            y[a:b] = 1
        return y


@dataclass
class DatasetManifest:
    root: Path
    frame_size: int
    videos: list
    # generator bookkeeping: video id -> [(start, end, anomaly type)]; not persisted
    schedule: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [v for v in self.videos if v.split == name]

    def video_dir(self, entry: VideoEntry) -> Path:
        return Path(self.root) / entry.split / entry.id


def format_manifest(m: DatasetManifest) -> str:
    lines = ["# dlanac dataset manifest", f"version {MANIFEST_VERSION}", f"frame_size {m.frame_size}"]
    for v in m.videos:
        rec = f"video {v.id} {v.split} {v.frame_count}"
        if v.label_runs:
            rec += " " + ",".join(f"{a}:{b}" for a, b in v.label_runs)
        lines.append(rec)
    return "\n".join(lines) + "\n"


def parse_manifest(text: str, root) -> DatasetManifest:
    version = frame_size = None
    videos = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        try:
            if key == "version":
                version = int(parts[1])
            elif key == "frame_size":
                frame_size = int(parts[1])
            elif key == "video":
                vid, split, count = parts[1], parts[2], int(parts[3])
                if split not in ("train", "test"):
                    raise ManifestError(f"line {lineno}: unknown split {split!r}")
                runs = []
                if len(parts) > 4:
                    for r in parts[4].split(","):
                        a, b = (int(x) for x in r.split(":"))
                        if not 0 <= a < b <= count:
                            raise ManifestError(f"line {lineno}: interval {r} outside [0, {count})")
                        runs.append((a, b))
                if split == "train" and runs:
                    raise ManifestError(f"line {lineno}: train video {vid} has anomaly intervals")
                videos.append(VideoEntry(vid, split, count, runs))
            else:
                raise ManifestError(f"line {lineno}: unknown key {key!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"line {lineno}: malformed record {raw!r}") from exc
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {version}")
    if frame_size is None:
        raise ManifestError("manifest lacks frame_size")
    return DatasetManifest(Path(root), frame_size, videos)


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest"
    if not path.exists():
        raise ManifestError(f"no manifest at {path}")
    return parse_manifest(path.read_text(), root)


# -- videos and windows ----------------------------------------------------

@dataclass
class Video:
    id: str
    frames: np.ndarray          # (T, S, S) uint8
    labels: np.ndarray          # (T,) int

    @property
    def window_count(self) -> int:
        return max(0, len(self.frames) - WINDOW)


def load_video(m: DatasetManifest, entry: VideoEntry) -> Video:
    d = m.video_dir(entry)
    frames = np.stack([read_pgm(d / f"frame_{i:06d}.pgm") for i in range(entry.frame_count)])
    return Video(entry.id, frames, entry.labels())


def load_video_dir(path) -> Video:
    """Frames of a directory of ``frame_*.pgm`` files, labels all zero."""
    path = Path(path)
    files = sorted(path.glob("frame_*.pgm"))
    if not files:
        raise FileNotFoundError(f"no frame_*.pgm files in {path}")
    frames = np.stack([read_pgm(f) for f in files])
    return Video(path.name, frames, np.zeros(len(files), dtype=np.int64))


def load_split(m: DatasetManifest, split: str) -> list:
    return [load_video(m, e) for e in m.split(split)]


def load_window(video: Video, t: int):
    """Frames ``t-4 .. t-1`` stacked on channels and frame ``t`` as the target, in [-1, 1]."""
    if not WINDOW <= t < len(video.frames):
        raise IndexError(f"window target {t} outside [{WINDOW}, {len(video.frames)})")
    window = to_unit(video.frames[t - WINDOW:t])
    target = to_unit(video.frames[t:t + 1])
    return window, target


def window_index(videos: list) -> list:
    """Every valid ``(video_position, t)`` pair."""
    return [(i, t) for i, v in enumerate(videos) for t in range(WINDOW, len(v.frames))]


def batch_windows(videos: list, pairs, dtype=np.float32):
    xs, ys = zip(*(load_window(videos[i], t) for i, t in pairs))
    return np.stack(xs).astype(dtype), np.stack(ys).astype(dtype)


# -- synthetic generator ---------------------------------------------------

@dataclass
class SynthConfig:
    frame_size: int = 64
    n_train_videos: int = 8
    n_test_videos: int = 4
    frames_per_video: int = 200
    sprite_count: tuple = (1, 3)
    normal_speed: tuple = (0.5, 1.5)
    anomaly_types: tuple = ANOMALY_TYPES
    anomaly_rate: float = 0.25
    fast_factor: float = 4.0
    seed: int = 0

    def __post_init__(self):
        self.sprite_count = tuple(self.sprite_count)
        self.normal_speed = tuple(self.normal_speed)
        self.anomaly_types = tuple(self.anomaly_types)
        if not 0 < self.normal_speed[0] <= self.normal_speed[1]:
            raise ConfigError("normal speeds must be positive and ordered")
        if not 1 <= self.sprite_count[0] <= self.sprite_count[1]:
            raise ConfigError("sprite_count must be an ordered range starting at >= 1")
        if self.fast_factor < 3:
            raise ConfigError("fast_factor must be at least 3")
        if not 0 <= self.anomaly_rate < 1:
            raise ConfigError("anomaly_rate must lie in [0, 1)")
        unknown = set(self.anomaly_types) - set(ANOMALY_TYPES)
        if unknown:
            raise ConfigError(f"unknown anomaly types {sorted(unknown)}")
        if self.frames_per_video < 2 * WINDOW + 8:
            raise ConfigError("videos too short")


PRESETS = {
    "default": SynthConfig(),
    "small": SynthConfig(frame_size=32, n_train_videos=6, n_test_videos=4, frames_per_video=120),
    "tiny": SynthConfig(frame_size=16, n_train_videos=2, n_test_videos=2, frames_per_video=40),
}


def preset(name: str, **overrides) -> SynthConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


def _background(S: int, rng: np.random.Generator) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((S, S)), sigma=S / 16.0, mode="wrap")
    tex = (tex - tex.min()) / (np.ptp(tex) + 1e-12)
    yy, xx = np.mgrid[0:S, 0:S]
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + 0.5 * yy) / (S / 4.0))
    return 60.0 + 45.0 * tex + 15.0 * stripes


def _box_coverage(S, cy, cx, hy, hx):
    # exact area of overlap between each pixel and an axis-aligned box
    ax = np.arange(S) + 0.5
    cov_y = np.clip(np.minimum(ax + 0.5, cy + hy) - np.maximum(ax - 0.5, cy - hy), 0, 1)
    cov_x = np.clip(np.minimum(ax + 0.5, cx + hx) - np.maximum(ax - 0.5, cx - hx), 0, 1)
    return cov_y[:, None] * cov_x[None, :]


def _disc_coverage(S, cy, cx, r):
    ax = np.arange(S) + 0.5
    d = np.sqrt((ax[:, None] - cy) ** 2 + (ax[None, :] - cx) ** 2)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def _shape_mask(kind: str, S: int, cy: float, cx: float, size: float) -> np.ndarray:
    if kind == "square":
        return _box_coverage(S, cy, cx, size / 2, size / 2)
    if kind == "ring":
        r = size
        return np.clip(_disc_coverage(S, cy, cx, r) - _disc_coverage(S, cy, cx, r - max(1.0, size / 3)), 0, 1)
    if kind == "cross":
        a = _box_coverage(S, cy, cx, size, size / 5)
        b = _box_coverage(S, cy, cx, size / 5, size)
        return np.maximum(a, b)
    if kind == "disc":
        return _disc_coverage(S, cy, cx, size * 0.75)
    raise ValueError(kind)


@dataclass
class _Sprite:
    pos: np.ndarray
    vel: np.ndarray
    size: float
    shade: float
    kind: str = "square"


def _spawn_sprite(S, rng, speed_range, size, shade=225.0, kind="square"):
    margin = size
    pos = rng.uniform(margin, S - margin, size=2)
    ang = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(*speed_range)
    return _Sprite(pos, speed * np.array([np.sin(ang), np.cos(ang)]), size, shade, kind)


def _advance(sp: _Sprite, S: int, factor: float = 1.0) -> None:
    lo, hi = sp.size / 2, S - sp.size / 2
    sp.pos = sp.pos + factor * sp.vel
    for k in range(2):
        if sp.pos[k] < lo:
            sp.pos[k] = 2 * lo - sp.pos[k]
            sp.vel[k] = -sp.vel[k]
        elif sp.pos[k] > hi:
            sp.pos[k] = 2 * hi - sp.pos[k]
            sp.vel[k] = -sp.vel[k]
        sp.pos[k] = min(max(sp.pos[k], lo), hi)


def _paint(canvas, sp: _Sprite, S, kind=None, size=None, shade=None):
    m = _shape_mask(kind or sp.kind, S, sp.pos[0], sp.pos[1], size or sp.size)
    s = sp.shade if shade is None else shade
    return canvas * (1 - m) + s * m


def schedule_anomalies(n_frames: int, rate: float, types, rng: np.random.Generator) -> list:
    """Non-overlapping ``(start, end, type)`` intervals covering about ``rate`` of the video."""
    if rate <= 0 or not types:
        return []
    total = max(4, int(round(rate * n_frames)))
    n_int = 1 if total < 24 else 2
    lengths = [total // n_int + (1 if i < total % n_int else 0) for i in range(n_int)]
    # place intervals left to right with random gaps, none before the first full window
    slack = n_frames - 2 * WINDOW - sum(lengths) - 4 * (n_int - 1)
    if slack < 0:
        raise ConfigError("anomaly_rate too high for video length")
    cuts = np.sort(rng.integers(0, slack + 1, size=n_int))
    out, cursor = [], 2 * WINDOW
    prev_cut = 0
    for length, cut in zip(lengths, cuts):
        start = cursor + (cut - prev_cut)
        out.append((int(start), int(start + length), str(rng.choice(list(types)))))
        cursor = start + length + 4
        prev_cut = cut
    return out


def render_video(S: int, n_frames: int, background: np.ndarray, cfg: SynthConfig,
                 rng: np.random.Generator, anomalies=()) -> np.ndarray:
    size = max(3.0, S / 10.0)
    n_sprites = int(rng.integers(cfg.sprite_count[0], cfg.sprite_count[1] + 1))
    sprites = [_spawn_sprite(S, rng, cfg.normal_speed, size) for _ in range(n_sprites)]
    frames = np.empty((n_frames, S, S), dtype=np.uint8)
    intruder = None
    for t in range(n_frames):
        active = next((a for a in anomalies if a[0] <= t < a[1]), None)
        kind = active[2] if active else None
        canvas = background.copy()
        for i, sp in enumerate(sprites):
            if i == 0 and kind == "shape_change":
                canvas = _paint(canvas, sp, S, kind=("cross", "ring")[t % 2], size=size * 1.4)
            else:
                canvas = _paint(canvas, sp, S)
        if kind == "new_object":
            if intruder is None:
                intruder = _spawn_sprite(S, rng, cfg.normal_speed, size * 1.2, shade=20.0, kind="disc")
            canvas = _paint(canvas, intruder, S)
            _advance(intruder, S)
        else:
            intruder = None
        frames[t] = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        for i, sp in enumerate(sprites):
            _advance(sp, S, cfg.fast_factor if (i == 0 and kind == "fast_sprite") else 1.0)
    return frames


def generate_synthetic(cfg: SynthConfig, root) -> DatasetManifest:
    """Write a labeled synthetic dataset under ``root`` and return its manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise OSError(f"cannot write to {root}")
    ss = np.random.SeedSequence(cfg.seed)
    scene_ss, *video_ss = ss.spawn(1 + cfg.n_train_videos + cfg.n_test_videos)
    background = _background(cfg.frame_size, np.random.default_rng(scene_ss))
    entries, schedule = [], {}
    for k, vss in enumerate(video_ss):
        rng = np.random.default_rng(vss)
        split = "train" if k < cfg.n_train_videos else "test"
        anomalies = []
        if split == "test":
            anomalies = schedule_anomalies(cfg.frames_per_video, cfg.anomaly_rate, cfg.anomaly_types, rng)
        frames = render_video(cfg.frame_size, cfg.frames_per_video, background, cfg, rng, anomalies)
        entry = VideoEntry(f"video_{k:04d}", split, cfg.frames_per_video,
                           [(a, b) for a, b, _ in anomalies])
        d = root / split / entry.id
        d.mkdir(parents=True, exist_ok=True)
        for t, img in enumerate(frames):
            write_pgm(d / f"frame_{t:06d}.pgm", img)
        entries.append(entry)
        schedule[entry.id] = anomalies
    m = DatasetManifest(root, cfg.frame_size, entries, schedule)
    (root / "manifest").write_text(format_manifest(m))
    return m


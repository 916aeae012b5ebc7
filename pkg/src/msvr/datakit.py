"""Benchmark dataset construction: manifests, filtering, splits, synthesis.

The pipeline mirrors a single-camera tracking corpus turned into a
re-identification benchmark: per-video trajectories carry one identity each;
short trajectories and tiny boxes are filtered out; identities split into
disjoint train/test halves; each surviving trajectory is partitioned into
"near" and "far" pseudo-views by box area so probe and gallery images of one
identity always come from opposite views, one image each (single-shot).

A deterministic synthetic generator renders toy vehicles (identity-coded
hue, body shape, window layout, and wheels, with scale sweep, noise, motion
blur, brightness shifts, and occasional occlusion bars) so the whole
pipeline runs end to end without any external imagery.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pyramid import Image, load_image, write_ppm

log = logging.getLogger(__name__)

MANIFEST_HEADER = "#track-manifest\tv1"
SPLIT_FORMAT = "benchmark-split/1"

MIN_TRAJECTORY_FRAMES = 20
MIN_BOX_SIDE = 24.0

NEAR = "near"
FAR = "far"


class DataError(ValueError):
    """Manifest or split data is malformed or inconsistent."""


@dataclass(frozen=True)
class TrackRecord:
    video_id: str
    track_id: int
    frame_index: int
    x: float
    y: float
    w: float
    h: float
    image_path: str

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class Trajectory:
    identity: int
    video_id: str
    records: list[TrackRecord] = field(default_factory=list)

    def validate(self) -> None:
        for r in self.records:
            if r.w <= 0 or r.h <= 0:
                raise DataError(
                    f"identity {self.identity}: non-positive box {r.w}x{r.h} "
                    f"at frame {r.frame_index}"
                )
            if r.video_id != self.video_id:
                raise DataError(f"identity {self.identity}: mixed video ids")
        frames = [r.frame_index for r in self.records]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise DataError(f"identity {self.identity}: frame indices not strictly increasing")


@dataclass
class BenchmarkSplit:
    train: list[tuple[str, int]]  # (image_path, identity)
    probe: list[tuple[str, int, str]]  # (image_path, identity, pseudo_view)
    gallery: list[tuple[str, int, str]]
    train_ids: list[int]
    test_ids: list[int]

    def validate(self) -> None:
        train_set, test_set = set(self.train_ids), set(self.test_ids)
        if train_set & test_set:
            raise DataError("train and test identity sets overlap")
        for name, entries in (("probe", self.probe), ("gallery", self.gallery)):
            ids = [identity for _, identity, _ in entries]
            if len(ids) != len(set(ids)):
                raise DataError(f"{name} has more than one image for some identity")
            stray = set(ids) - test_set
            if stray:
                raise DataError(f"{name} contains non-test identities {sorted(stray)}")
        gallery_view = {identity: view for _, identity, view in self.gallery}
        for _, identity, view in self.probe:
            if identity not in gallery_view:
                raise DataError(f"probe identity {identity} missing from gallery")
            if gallery_view[identity] == view:
                raise DataError(f"identity {identity}: probe and gallery share view {view}")

    def to_dict(self) -> dict:
        return {
            "format": SPLIT_FORMAT,
            "id_partition": {"train": self.train_ids, "test": self.test_ids},
            "train": [[p, i] for p, i in self.train],
            "probe": [[p, i, v] for p, i, v in self.probe],
            "gallery": [[p, i, v] for p, i, v in self.gallery],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSplit":
        if d.get("format") != SPLIT_FORMAT:
            raise DataError(f"unsupported split format {d.get('format')!r}")
        return cls(
            train=[(p, int(i)) for p, i in d["train"]],
            probe=[(p, int(i), v) for p, i, v in d["probe"]],
            gallery=[(p, int(i), v) for p, i, v in d["gallery"]],
            train_ids=[int(i) for i in d["id_partition"]["train"]],
            test_ids=[int(i) for i in d["id_partition"]["test"]],
        )


def save_split(split: BenchmarkSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(split.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_split(path) -> BenchmarkSplit:
    with open(path, encoding="utf-8") as f:
        return BenchmarkSplit.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# manifest I/O (TSV, one record per line)

def write_manifest(trajectories: Sequence[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(MANIFEST_HEADER + "\n")
        for traj in trajectories:
            for r in traj.records:
                f.write(
                    f"{r.video_id}\t{r.track_id}\t{r.frame_index}\t"
                    f"{r.x:g}\t{r.y:g}\t{r.w:g}\t{r.h:g}\t{r.image_path}\t{traj.identity}\n"
                )


def load_manifest(path) -> list[Trajectory]:
    groups: dict[tuple[str, int, int], Trajectory] = {}
    with open(path, encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
        if first != MANIFEST_HEADER:
            raise DataError(f"{path}:1: missing manifest header (got {first!r})")
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 9:
                raise DataError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            try:
                record = TrackRecord(
                    video_id=parts[0],
                    track_id=int(parts[1]),
                    frame_index=int(parts[2]),
                    x=float(parts[3]),
                    y=float(parts[4]),
                    w=float(parts[5]),
                    h=float(parts[6]),
                    image_path=parts[7],
                )
                identity = int(parts[8])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            key = (record.video_id, record.track_id, identity)
            traj = groups.get(key)
            if traj is None:
                traj = groups[key] = Trajectory(identity=identity, video_id=record.video_id)
            traj.records.append(record)
    trajectories = list(groups.values())
    for traj in trajectories:
        traj.records.sort(key=lambda r: r.frame_index)
        traj.validate()
    return trajectories


# ---------------------------------------------------------------------------
# protocol operations

def filter_trajectories(
    trajectories: Iterable[Trajectory],
    min_frames: int = MIN_TRAJECTORY_FRAMES,
    min_box_side: float = MIN_BOX_SIDE,
) -> list[Trajectory]:
    """Drop short trajectories, then undersized boxes, then re-check length.

    A trajectory shorter than ``min_frames`` is removed outright; within the
    survivors any box narrower or shorter than ``min_box_side`` is dropped,
    and a trajectory left with fewer than ``min_frames`` usable boxes is
    removed as well.
    """
    kept = []
    for traj in trajectories:
        if len(traj.records) < min_frames:
            continue
        usable = [r for r in traj.records if r.w >= min_box_side and r.h >= min_box_side]
        if len(usable) < min_frames:
            continue
        kept.append(Trajectory(identity=traj.identity, video_id=traj.video_id, records=usable))
    return kept


def split_ids(ids: Sequence[int], seed: int) -> tuple[list[int], list[int]]:
    """Disjoint train/test halves (train gets the odd element), seeded."""
    ids = list(ids)
    if len(ids) < 2:
        raise DataError(f"need at least 2 identities to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate identities in split input")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(sorted(ids)))
    cut = (len(order) + 1) // 2
    return sorted(int(i) for i in order[:cut]), sorted(int(i) for i in order[cut:])


def assign_pseudo_views(trajectory: Trajectory) -> list[str]:
    """Tag each record near or far by box-area rank within its trajectory.

    The larger-area half (ties broken toward earlier frames) is "near"; with
    an odd count the extra record goes to near.
    """
    records = trajectory.records
    ranked = sorted(range(len(records)), key=lambda i: (-records[i].area, records[i].frame_index))
    n_near = (len(records) + 1) // 2
    views = [FAR] * len(records)
    for i in ranked[:n_near]:
        views[i] = NEAR
    return views


def build_split(
    trajectories: Sequence[Trajectory],
    seed: int,
    train_subsample: int = 2,
) -> BenchmarkSplit:
    """Assemble the single-shot benchmark split from filtered trajectories.

    Train identities contribute every ``train_subsample``-th frame (with a
    seeded phase per trajectory); each test identity contributes exactly one
    near and one far image, assigned to probe or gallery by a seeded coin.
    Test identities whose near or far bucket is empty are skipped with a
    warning.
    """
    if train_subsample < 1:
        raise ValueError(f"train_subsample must be >= 1, got {train_subsample}")
    by_identity: dict[int, list[Trajectory]] = {}
    for traj in trajectories:
        by_identity.setdefault(traj.identity, []).append(traj)

    train_ids, test_ids = split_ids(sorted(by_identity), seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))

    train: list[tuple[str, int]] = []
    for identity in train_ids:
        for traj in by_identity[identity]:
            phase = int(rng.integers(0, train_subsample))
            for r in traj.records[phase::train_subsample]:
                train.append((r.image_path, identity))

    probe: list[tuple[str, int, str]] = []
    gallery: list[tuple[str, int, str]] = []
    kept_test_ids: list[int] = []
    for identity in test_ids:
        near_pool: list[TrackRecord] = []
        far_pool: list[TrackRecord] = []
        for traj in by_identity[identity]:
            for record, view in zip(traj.records, assign_pseudo_views(traj)):
                (near_pool if view == NEAR else far_pool).append(record)
        if not near_pool or not far_pool:
            log.warning("identity %d lacks a %s image; skipped from the test sets",
                        identity, NEAR if not near_pool else FAR)
            continue
        near_pick = near_pool[int(rng.integers(0, len(near_pool)))]
        far_pick = far_pool[int(rng.integers(0, len(far_pool)))]
        if rng.uniform() < 0.5:
            probe.append((near_pick.image_path, identity, NEAR))
            gallery.append((far_pick.image_path, identity, FAR))
        else:
            probe.append((far_pick.image_path, identity, FAR))
            gallery.append((near_pick.image_path, identity, NEAR))
        kept_test_ids.append(identity)

    split = BenchmarkSplit(
        train=train,
        probe=probe,
        gallery=gallery,
        train_ids=list(train_ids),
        test_ids=kept_test_ids,
    )
    split.validate()
    return split


# ---------------------------------------------------------------------------
# dataset statistics

@dataclass
class DatasetStats:
    n_images: int
    n_ids: int
    n_videos: int
    mean_width: float
    mean_height: float
    side_histogram_edges: list[float]
    side_histogram_counts: list[int]


def compute_stats(trajectories: Sequence[Trajectory], bin_width: float = 32.0) -> DatasetStats:
    """Counts, mean box size, and a histogram of max(w, h) per box."""
    widths, heights, sides = [], [], []
    videos, identities = set(), set()
    for traj in trajectories:
        identities.add(traj.identity)
        videos.add(traj.video_id)
        for r in traj.records:
            widths.append(r.w)
            heights.append(r.h)
            sides.append(max(r.w, r.h))
    n = len(widths)
    if n == 0:
        return DatasetStats(0, 0, 0, 0.0, 0.0, [], [])
    top = math.ceil(max(sides) / bin_width) * bin_width
    edges = list(np.arange(0.0, top + bin_width / 2, bin_width))
    counts, _ = np.histogram(sides, bins=edges)
    return DatasetStats(
        n_images=n,
        n_ids=len(identities),
        n_videos=len(videos),
        mean_width=float(np.mean(widths)),
        mean_height=float(np.mean(heights)),
        side_histogram_edges=[float(e) for e in edges],
        side_histogram_counts=[int(c) for c in counts],
    )


def write_stats_csv(stats: DatasetStats, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("key,value\n")
        f.write(f"images,{stats.n_images}\n")
        f.write(f"ids,{stats.n_ids}\n")
        f.write(f"videos,{stats.n_videos}\n")
        f.write(f"mean_width,{stats.mean_width:g}\n")
        f.write(f"mean_height,{stats.mean_height:g}\n")
        f.write("bin_low,bin_high,count\n")
        for lo, hi, c in zip(
            stats.side_histogram_edges[:-1],
            stats.side_histogram_edges[1:],
            stats.side_histogram_counts,
        ):
            f.write(f"{lo:g},{hi:g},{c}\n")


# ---------------------------------------------------------------------------
# synthetic data generation

FRAME_WIDTH = 960.0
FRAME_HEIGHT = 540.0
_GOLDEN = 0.6180339887498949


@dataclass(frozen=True)
class VehicleStyle:
    hue: float
    saturation: float
    value: float
    aspect: float
    roundness: float
    cabin_width: float
    cabin_shift: float
    n_windows: int
    window_rgb: tuple[float, float, float]
    wheel_radius: float
    wheel_xs: tuple[float, float]
    has_stripe: bool
    stripe_rgb: tuple[float, float, float]

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.hue,
                self.saturation,
                self.value,
                self.aspect,
                self.roundness,
                self.cabin_width,
                self.cabin_shift,
                float(self.n_windows),
                *self.window_rgb,
                self.wheel_radius,
                *self.wheel_xs,
                float(self.has_stripe),
                *self.stripe_rgb,
            ]
        )


def _hsv_to_rgb(h, s, v):
    h = h % 1.0
    i = int(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]


def identity_style(identity: int, seed: int) -> VehicleStyle:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2, int(identity)]))
    hue = (0.11 + identity * _GOLDEN + rng.uniform(-0.02, 0.02)) % 1.0
    window_hue = rng.uniform(0.52, 0.65)
    return VehicleStyle(
        hue=hue,
        saturation=rng.uniform(0.6, 0.95),
        value=rng.uniform(0.6, 0.95),
        aspect=rng.uniform(1.4, 2.3),
        roundness=rng.uniform(2.5, 6.0),
        cabin_width=rng.uniform(0.4, 0.62),
        cabin_shift=rng.uniform(-0.12, 0.12),
        n_windows=int(rng.integers(1, 4)),
        window_rgb=_hsv_to_rgb(window_hue, rng.uniform(0.3, 0.6), rng.uniform(0.15, 0.4)),
        wheel_radius=rng.uniform(0.09, 0.135),
        wheel_xs=(rng.uniform(0.16, 0.3), rng.uniform(0.7, 0.84)),
        has_stripe=bool(rng.uniform() < 0.5),
        stripe_rgb=_hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.4, 0.9), rng.uniform(0.3, 0.9)),
    )


def _directional_blur(pixels: np.ndarray, direction: tuple[int, int], length: int) -> np.ndarray:
    if length <= 1:
        return pixels
    dy, dx = direction
    acc = np.zeros_like(pixels)
    padded = np.pad(
        pixels,
        ((0, 0), (abs(dy) * length, abs(dy) * length), (abs(dx) * length, abs(dx) * length)),
        mode="edge",
    )
    h, w = pixels.shape[1:]
    oy, ox = abs(dy) * length, abs(dx) * length
    for k in range(length):
        ys = oy + k * dy
        xs = ox + k * dx
        acc += padded[:, ys : ys + h, xs : xs + w]
    return acc / length


def render_vehicle(style: VehicleStyle, side: int, rng: np.random.Generator) -> Image:
    """Draw one frame of a vehicle at the given square resolution."""
    s = int(side)
    yy, xx = np.mgrid[0:s, 0:s]
    yy = (yy + 0.5) / s
    xx = (xx + 0.5) / s

    # muted background with a vertical gradient
    base = rng.uniform(0.3, 0.7)
    cast = rng.uniform(-0.06, 0.06, 3)
    img = np.empty((3, s, s))
    gradient = base + 0.18 * (yy - 0.5)
    for c in range(3):
        img[c] = np.clip(gradient + cast[c], 0.05, 0.95)

    cx = 0.5 + rng.uniform(-0.04, 0.04)
    cy = 0.58 + rng.uniform(-0.04, 0.04)
    ax = 0.37 * (1.0 + rng.uniform(-0.05, 0.05))
    ay = ax / style.aspect
    p = style.roundness
    body = (np.abs(xx - cx) / ax) ** p + (np.abs(yy - cy) / ay) ** p <= 1.0
    body_rgb = _hsv_to_rgb(style.hue, style.saturation, style.value)
    for c in range(3):
        img[c][body] = body_rgb[c]

    # cabin with tinted window panes
    cab_half = style.cabin_width * ax
    cab_cx = cx + style.cabin_shift * ax
    cab_top = cy - 1.45 * ay
    cab_bot = cy - 0.25 * ay
    cabin = (
        (xx >= cab_cx - cab_half)
        & (xx <= cab_cx + cab_half)
        & (yy >= cab_top)
        & (yy <= cab_bot)
    )
    for c in range(3):
        img[c][cabin] = body_rgb[c] * 0.85
    pane_w = 2 * cab_half / style.n_windows
    for k in range(style.n_windows):
        lo = cab_cx - cab_half + k * pane_w + 0.12 * pane_w
        hi = cab_cx - cab_half + (k + 1) * pane_w - 0.12 * pane_w
        pane = (
            (xx >= lo)
            & (xx <= hi)
            & (yy >= cab_top + 0.12 * (cab_bot - cab_top))
            & (yy <= cab_bot - 0.12 * (cab_bot - cab_top))
        )
        for c in range(3):
            img[c][pane] = style.window_rgb[c]

    if style.has_stripe:
        stripe = body & (yy >= cy + 0.15 * ay) & (yy <= cy + 0.45 * ay)
        for c in range(3):
            img[c][stripe] = style.stripe_rgb[c]

    wheel_y = cy + 0.95 * ay
    for wx_frac in style.wheel_xs:
        wx = cx - ax + wx_frac * 2 * ax
        dist2 = (xx - wx) ** 2 + (yy - wheel_y) ** 2
        wheel = dist2 <= style.wheel_radius**2
        hub = dist2 <= (0.45 * style.wheel_radius) ** 2
        for c in range(3):
            img[c][wheel] = 0.08
            img[c][hub] = 0.55

    # nuisance factors: brightness, motion blur, sensor noise, occlusion
    img *= rng.uniform(0.7, 1.3)
    if rng.uniform() < 0.5:
        direction = [(0, 1), (1, 0), (1, 1), (1, -1)][int(rng.integers(0, 4))]
        length = int(rng.integers(2, max(3, s // 24) + 1))
        img = _directional_blur(img, direction, length)
    img += rng.normal(0.0, rng.uniform(0.01, 0.05), img.shape)
    if rng.uniform() < 0.25:
        bw = int(s * rng.uniform(0.15, 0.45))
        bh = int(s * rng.uniform(0.08, 0.2))
        if rng.uniform() < 0.5:
            bw, bh = bh, bw
        bx = int(rng.integers(0, max(1, s - bw)))
        by = int(rng.integers(0, max(1, s - bh)))
        img[:, by : by + bh, bx : bx + bw] = rng.uniform(0.1, 0.6)

    return Image(np.clip(img, 0.0, 1.0))


def _trajectory_sides(rng, frames: int, base_side: int) -> list[int]:
    """A geometric small-to-large sweep with log jitter, maybe reversed.

    Frames of one trajectory simulate a vehicle approaching (or receding
    from) the camera, which also gives the near/far split a physical
    meaning. For the default base_side the sweep covers at least [40, 200].
    """
    lo = int(rng.integers(32, min(41, base_side)))
    hi = int(rng.integers(max(lo + 1, int(base_side * 0.72)), base_side + 1))
    if frames == 1:
        return [int(np.sqrt(lo * hi))]
    sides = np.exp(np.linspace(np.log(lo), np.log(hi), frames))
    sides *= np.exp(rng.uniform(-0.06, 0.06, frames))
    sides = np.clip(np.rint(sides), 32, base_side).astype(int)
    sides[0], sides[-1] = lo, hi
    if rng.uniform() < 0.5:
        sides = sides[::-1]
    return [int(v) for v in sides]


def generate_synthetic(
    out_dir,
    n_ids: int,
    frames_per_id: int = 30,
    base_side: int = 280,
    seed: int = 0,
    ids_per_video: int = 5,
) -> list[Trajectory]:
    """Render a full synthetic corpus and its manifest under ``out_dir``.

    Deterministic given ``seed``: identical calls produce byte-identical
    image files and manifest. Returns the trajectories (paths relative to
    ``out_dir``, where ``manifest.tsv`` is written).
    """
    if n_ids < 2:
        raise DataError(f"need at least 2 identities, got {n_ids}")
    if base_side < 48:
        raise ValueError(f"base_side too small to be useful: {base_side}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    trajectories = []
    for identity in range(n_ids):
        style = identity_style(identity, seed)
        sides_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3, identity]))
        sides = _trajectory_sides(sides_rng, frames_per_id, base_side)
        id_dir = out_dir / "images" / f"id{identity:05d}"
        id_dir.mkdir(exist_ok=True)
        traj = Trajectory(identity=identity, video_id=f"vid{identity // ids_per_video:04d}")
        for frame, side in enumerate(sides):
            frame_rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), 4, identity, frame])
            )
            image = render_vehicle(style, side, frame_rng)
            rel_path = f"images/id{identity:05d}/f{frame:04d}.ppm"
            write_ppm(image, out_dir / rel_path)
            x = float(frame_rng.uniform(0, FRAME_WIDTH - side))
            depth = 1.0 - (side - 32) / max(1, base_side - 32)
            y_max = max(1.0, FRAME_HEIGHT - side)
            y = float(np.clip(depth * 0.7 * y_max + frame_rng.uniform(0, 0.2 * y_max), 0, y_max))
            traj.records.append(
                TrackRecord(
                    video_id=traj.video_id,
                    track_id=identity,
                    frame_index=frame,
                    x=round(x, 1),
                    y=round(y, 1),
                    w=float(side),
                    h=float(side),
                    image_path=rel_path,
                )
            )
        trajectories.append(traj)
    write_manifest(trajectories, out_dir / "manifest.tsv")
    return trajectories


# ---------------------------------------------------------------------------
# image access for training and evaluation

class ImageDataset:
    """Lazily decoded, cached (Image, label) sequence over manifest images."""

    def __init__(self, entries: Sequence[tuple[str, int]], root):
        self.entries = list(entries)
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> tuple[Image, int]:
        path, label = self.entries[index]
        arr = self._cache.get(path)
        if arr is None:
            arr = load_image(self.root / path).pixels
            self._cache[path] = arr
        return Image(arr), int(label)


def relabel_for_training(split: BenchmarkSplit) -> tuple[list[tuple[str, int]], dict[int, int]]:
    """Map train identities to contiguous class indices 0..n-1."""
    mapping = {identity: idx for idx, identity in enumerate(sorted(split.train_ids))}
    entries = [(path, mapping[identity]) for path, identity in split.train]
    return entries, mapping

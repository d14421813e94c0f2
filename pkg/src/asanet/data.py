"""Deterministic synthetic pedestrian sequences.

Each identity owns a fixed ID-relevant attribute signature (gender, top
color, bottom color, bag) plus private body proportions and a small hue
jitter; each tracklet of that identity varies only the ID-irrelevant factors
(pose, motion, occlusion), the camera and the background. Frames are layered
sprites on a noise background:

  * gender sets the torso/hip width ratio,
  * top/bottom color fill the torso and leg rectangles,
  * a bag is a dark satchel blob beside the torso,
  * pose shows as face pixels (front), a hair-only head (back) or a
    narrowed silhouette (side),
  * motion shows per frame as leg stride width and torso lean (standing /
    walking / running) and as horizontal translation of 0 / 1 / 3 px per
    frame,
  * occlusion draws a gray bar across the figure.

Every random choice flows from the dataset seed, so a seed reproduces the
dataset bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyTrackletError, FormatError

RE_ATTRIBUTES = (("gender", 2), ("top_color", 5), ("bottom_color", 5), ("bag", 2))
IR_ATTRIBUTES = (("pose", 3), ("motion", 3), ("occluded", 1))
NUM_RE_ATTRS = sum(n for _, n in RE_ATTRIBUTES)   # 14
NUM_IR_ATTRS = sum(n for _, n in IR_ATTRIBUTES)   # 7

POSES = ("front", "back", "side")
MOTIONS = ("standing", "walking", "running")
MOTION_SPEED = (0, 1, 3)  # px per frame

_PALETTES = {
    "a": {
        "top": [(0.85, 0.10, 0.10), (0.10, 0.70, 0.15), (0.10, 0.20, 0.85),
                (0.85, 0.80, 0.10), (0.55, 0.10, 0.70)],
        "bottom": [(0.08, 0.08, 0.08), (0.92, 0.92, 0.92), (0.10, 0.10, 0.45),
                   (0.45, 0.30, 0.12), (0.35, 0.42, 0.12)],
        "skin": (0.90, 0.75, 0.60),
        "hair": (0.22, 0.16, 0.10),
        "bag": (0.50, 0.05, 0.05),
        "bg_base": 0.42,
        "bg_noise": 0.10,
        "bg_cells": (8, 4),
    },
    "b": {
        "top": [(0.70, 0.25, 0.20), (0.25, 0.60, 0.30), (0.20, 0.30, 0.70),
                (0.75, 0.70, 0.25), (0.50, 0.25, 0.60)],
        "bottom": [(0.18, 0.18, 0.18), (0.80, 0.80, 0.85), (0.20, 0.20, 0.50),
                   (0.50, 0.38, 0.20), (0.40, 0.45, 0.22)],
        "skin": (0.85, 0.70, 0.55),
        "hair": (0.30, 0.24, 0.16),
        "bag": (0.42, 0.10, 0.12),
        "bg_base": 0.30,
        "bg_noise": 0.14,
        "bg_cells": (16, 8),
    },
}


@dataclass
class IdentitySpec:
    identity: int
    gender: int
    top_color: int
    bottom_color: int
    bag: int
    torso_rows: int       # torso height in px
    shoulder_width: int
    hip_width: int
    hue_jitter: list[float]


@dataclass
class TrackletSpec:
    tracklet: int
    identity: int         # -1 marks a person-free distractor
    pose: int
    motion: int
    occluded: int
    camera: int
    bg_seed: int
    length: int
    start_x: int


@dataclass
class SyntheticDataset:
    manifest: dict
    frames: np.ndarray    # (n_tracklets, length, 3, H, W) float32
    identities: list[IdentitySpec] = field(default_factory=list)
    tracklets: list[TrackletSpec] = field(default_factory=list)

    @property
    def num_tracklets(self) -> int:
        return len(self.tracklets)

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.manifest["image"])

    @property
    def frames_per_tracklet(self) -> int:
        return int(self.manifest["frames_per_tracklet"])

    def split(self, name: str) -> list[int]:
        return list(self.manifest["splits"][name])

    @property
    def num_train_identities(self) -> int:
        return len({self.tracklets[i].identity for i in self.split("train")})

    def labels(self, indices=None) -> np.ndarray:
        idx = range(self.num_tracklets) if indices is None else indices
        return np.array([self.tracklets[i].identity for i in idx])

    def cameras(self, indices=None) -> np.ndarray:
        idx = range(self.num_tracklets) if indices is None else indices
        return np.array([self.tracklets[i].camera for i in idx])

    def re_labels(self, indices=None) -> np.ndarray:
        idx = range(self.num_tracklets) if indices is None else indices
        rows = []
        by_id = {s.identity: s for s in self.identities}
        for i in idx:
            t = self.tracklets[i]
            if t.identity < 0:
                rows.append(np.zeros(NUM_RE_ATTRS))
            else:
                rows.append(encode_re(by_id[t.identity]))
        return np.array(rows)

    def ir_labels(self, indices=None) -> np.ndarray:
        idx = range(self.num_tracklets) if indices is None else indices
        return np.array([encode_ir(self.tracklets[i]) for i in idx])

    def train_groups(self) -> dict[int, list[int]]:
        """Train-split tracklet indices grouped by identity."""
        groups: dict[int, list[int]] = {}
        for i in self.split("train"):
            groups.setdefault(self.tracklets[i].identity, []).append(i)
        return groups


def encode_re(spec: IdentitySpec) -> np.ndarray:
    """One-hot encoding of the ID-relevant attributes (14 binary outputs)."""
    out = np.zeros(NUM_RE_ATTRS)
    offset = 0
    for name, count in RE_ATTRIBUTES:
        out[offset + getattr(spec, name)] = 1.0
        offset += count
    return out


def encode_ir(spec: TrackletSpec) -> np.ndarray:
    """One-hot pose and motion plus the occlusion flag (7 binary outputs)."""
    out = np.zeros(NUM_IR_ATTRS)
    if spec.identity < 0:
        return out
    out[spec.pose] = 1.0
    out[3 + spec.motion] = 1.0
    out[6] = float(spec.occluded)
    return out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _background(palette: dict, height: int, width: int, camera: int,
                rng: np.random.Generator) -> np.ndarray:
    cells_h, cells_w = palette["bg_cells"]
    coarse = rng.standard_normal((cells_h, cells_w, 3))
    noise = np.kron(coarse, np.ones((height // cells_h, width // cells_w, 1)))
    img = palette["bg_base"] + palette["bg_noise"] * noise
    # mild per-camera tint so cameras are distinguishable but not dominant
    tint = np.zeros(3)
    tint[camera % 3] = 0.04
    return img + tint


def _bounce(x: int, lo: int, hi: int) -> int:
    """Reflect x into [lo, hi] (triangle wave)."""
    if hi <= lo:
        return lo
    span = hi - lo
    period = 2 * span
    x = (x - lo) % period
    return lo + (x if x <= span else period - x)


def render_frame(ident: IdentitySpec, track: TrackletSpec, frame_index: int,
                 background: np.ndarray, palette: dict) -> np.ndarray:
    """Render one (H, W, 3) frame of a tracklet.

    Moving figures leave faint after-images at their previous positions, so
    the walking/running distinction is visible in every single frame (it
    survives spatial pooling) and not only in the frame-to-frame offset."""
    img = background.copy()
    height, width = img.shape[:2]
    jitter = np.asarray(ident.hue_jitter)
    top = np.asarray(palette["top"][ident.top_color]) + jitter
    bottom = np.asarray(palette["bottom"][ident.bottom_color]) + jitter
    skin = np.asarray(palette["skin"])
    hair = np.asarray(palette["hair"])
    dark = np.array((0.05, 0.05, 0.05))

    side = track.pose == 2
    torso_w = max(3, ident.shoulder_width // 2 if side else ident.shoulder_width)
    hip_w = max(3, ident.hip_width // 2 if side else ident.hip_width)

    speed = MOTION_SPEED[track.motion]
    body_w = max(torso_w, hip_w) + 6  # room for stride and bag
    lo, hi = body_w // 2 + 1, width - body_w // 2 - 1

    head_top = height // 8
    head_h = height // 8
    torso_top = head_top + head_h
    torso_bot = torso_top + ident.torso_rows
    leg_bot = int(height * 0.88)

    def fill(r0, r1, c0, c1, color, alpha=1.0):
        r0, r1 = max(r0, 0), min(r1, height)
        c0, c1 = max(c0, 0), min(c1, width)
        if r0 < r1 and c0 < c1:
            img[r0:r1, c0:c1] *= 1.0 - alpha
            img[r0:r1, c0:c1] += alpha * np.asarray(color)

    def draw_body(cx, alpha):
        # head: back of head is all hair, the front shows eye pixels, the
        # side is a narrow profile; long hair reaches the shoulders
        head_w = max(3, (4 if side else 8) * width // 32)
        fill(head_top, torso_top, cx - head_w // 2, cx + (head_w + 1) // 2,
             skin, alpha)
        if track.pose == 1:
            fill(head_top, torso_top, cx - head_w // 2, cx + (head_w + 1) // 2,
                 hair, alpha)
        else:
            fill(head_top, head_top + head_h // 3, cx - head_w // 2,
                 cx + (head_w + 1) // 2, hair, alpha)
            if track.pose == 0:
                eye_r = head_top + head_h // 2
                fill(eye_r, eye_r + 1, cx - 2, cx - 1, dark, alpha)
                fill(eye_r, eye_r + 1, cx + 1, cx + 2, dark, alpha)
            else:  # side profile: hair covers the trailing half
                fill(head_top, torso_top, cx, cx + (head_w + 1) // 2, hair, alpha)
        if ident.gender == 1:
            fill(torso_top, torso_top + head_h, cx - head_w // 2 - 1,
                 cx - head_w // 2 + 1, hair, alpha)
            fill(torso_top, torso_top + head_h, cx + (head_w + 1) // 2 - 1,
                 cx + (head_w + 1) // 2 + 1, hair, alpha)

        # torso, leaning into the direction of travel when running
        lean = 2 if track.motion == 2 else 0
        fill(torso_top, torso_bot, cx - torso_w // 2 + lean,
             cx + (torso_w + 1) // 2 + lean, top, alpha)

        # legs: the stride splits them, alternating with frame parity
        stride = (0, 2, 4)[track.motion]
        swing = stride if frame_index % 2 == 0 else -stride
        if track.motion == 0:
            fill(torso_bot, leg_bot, cx - hip_w // 2, cx + (hip_w + 1) // 2,
                 bottom, alpha)
        else:
            leg_w = max(2, hip_w // 2 - 1)
            fill(torso_bot, leg_bot, cx - hip_w // 2 - swing // 2,
                 cx - hip_w // 2 - swing // 2 + leg_w, bottom, alpha)
            fill(torso_bot, leg_bot, cx + (hip_w + 1) // 2 - leg_w + swing // 2,
                 cx + (hip_w + 1) // 2 + swing // 2, bottom, alpha)

        if ident.bag:
            bag_top = torso_top + 2
            bag_side = cx + (torso_w + 1) // 2 + (2 if track.motion == 2 else 0)
            fill(bag_top, bag_top + ident.torso_rows // 2, bag_side,
                 bag_side + 4, palette["bag"], alpha)

    cx_now = _bounce(track.start_x + speed * frame_index, lo, hi)
    if track.motion == 2:
        draw_body(_bounce(track.start_x + speed * (frame_index - 2), lo, hi), 0.18)
    if track.motion != 0:
        draw_body(_bounce(track.start_x + speed * (frame_index - 1), lo, hi), 0.38)
    draw_body(cx_now, 1.0)

    if track.occluded:
        bar_top = int(height * 0.45)
        fill(bar_top, bar_top + height // 6, 0, width, (0.5, 0.5, 0.5))

    return np.clip(img, 0.0, 1.0)


def _render_distractor(background: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Person-free clutter: background plus a few random boxes."""
    img = background.copy()
    height, width = img.shape[:2]
    for _ in range(int(rng.integers(1, 4))):
        r0 = int(rng.integers(0, height - 6))
        c0 = int(rng.integers(0, width - 4))
        color = rng.uniform(0.1, 0.9, size=3)
        img[r0 : r0 + int(rng.integers(3, 10)), c0 : c0 + int(rng.integers(2, 6))] = color
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def gen_dataset(
    seed: int,
    num_identities: int = 20,
    tracklets_per_identity: int = 8,
    cameras: int = 2,
    frames_per_tracklet: int = 12,
    image: tuple[int, int] = (64, 32),
    palette: str = "a",
    query_per_identity: int = 1,
    gallery_per_identity: int = 2,
    unmatched_queries: int = 0,
    distractors: int = 0,
) -> SyntheticDataset:
    """Generate a dataset; the same arguments always yield identical bytes."""
    if num_identities < 2:
        raise ConfigError("need at least 2 identities")
    if tracklets_per_identity < 2:
        raise ConfigError("need at least 2 tracklets per identity")
    if cameras < 1:
        raise ConfigError("need at least 1 camera")
    if palette not in _PALETTES:
        raise ConfigError(f"unknown palette {palette!r}")
    if frames_per_tracklet < 1:
        raise ConfigError("tracklets need at least 1 frame")
    split_n = query_per_identity + gallery_per_identity
    if split_n >= tracklets_per_identity:
        raise ConfigError("query+gallery tracklets must leave at least one for training")
    if unmatched_queries > num_identities // 2:
        raise ConfigError("too many unmatched-query identities")

    height, width = image
    pal = _PALETTES[palette]
    if height % pal["bg_cells"][0] or width % pal["bg_cells"][1]:
        raise ConfigError(f"image {image} not divisible by background cells {pal['bg_cells']}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))

    # unique attribute signature per identity (cycled if more than 100 ids)
    combos = [(g, t, b, bg) for g in range(2) for t in range(5)
              for b in range(5) for bg in range(2)]
    order = rng.permutation(len(combos))
    identities = []
    for ident in range(num_identities):
        g, t, b, bag = combos[order[ident % len(combos)]]
        identities.append(IdentitySpec(
            identity=ident,
            gender=g, top_color=t, bottom_color=b, bag=bag,
            torso_rows=int(height * 0.3) + int(rng.integers(-2, 3)),
            shoulder_width=(int(width * 0.45) if g == 0 else int(width * 0.32))
            + int(rng.integers(-1, 2)),
            hip_width=(int(width * 0.3) if g == 0 else int(width * 0.45))
            + int(rng.integers(-1, 2)),
            hue_jitter=[float(x) for x in rng.uniform(-0.06, 0.06, size=3)],
        ))

    tracklets = []
    all_frames = []
    for ident_spec in identities:
        pm_combos = [(p, m) for p in range(3) for m in range(3)]
        pm_order = rng.permutation(9)
        for j in range(tracklets_per_identity):
            pose, motion = pm_combos[pm_order[j % 9]]
            track = TrackletSpec(
                tracklet=len(tracklets),
                identity=ident_spec.identity,
                pose=pose,
                motion=motion,
                occluded=1 if j % 4 == 3 else 0,
                camera=j % cameras,
                bg_seed=int(rng.integers(0, 2**31)),
                length=frames_per_tracklet,
                start_x=int(rng.integers(width // 4, 3 * width // 4)),
            )
            tracklets.append(track)
            bg_rng = np.random.default_rng(track.bg_seed)
            bg = _background(pal, height, width, track.camera, bg_rng)
            clip = [render_frame(ident_spec, track, f, bg, pal)
                    for f in range(frames_per_tracklet)]
            all_frames.append(np.stack(clip))

    for _ in range(distractors):
        track = TrackletSpec(
            tracklet=len(tracklets), identity=-1, pose=0, motion=0, occluded=0,
            camera=int(rng.integers(0, cameras)),
            bg_seed=int(rng.integers(0, 2**31)),
            length=frames_per_tracklet,
            start_x=0,
        )
        tracklets.append(track)
        bg_rng = np.random.default_rng(track.bg_seed)
        bg = _background(pal, height, width, track.camera, bg_rng)
        all_frames.append(np.stack([
            _render_distractor(bg, bg_rng) for _ in range(frames_per_tracklet)
        ]))

    # splits: per identity the first tracklets train, then queries, then
    # gallery; "unmatched" identities donate their gallery slots to extra
    # queries instead (their queries can only match each other when the
    # query set is merged into the gallery)
    train, query, gallery = [], [], []
    unmatched_ids = set(range(num_identities - unmatched_queries, num_identities))
    for ident in range(num_identities):
        idxs = [t.tracklet for t in tracklets if t.identity == ident]
        if ident in unmatched_ids:
            train.extend(idxs[:-2])
            query.extend(idxs[-2:])
        else:
            train.extend(idxs[: tracklets_per_identity - split_n])
            query.extend(idxs[tracklets_per_identity - split_n:
                              tracklets_per_identity - gallery_per_identity])
            gallery.extend(idxs[tracklets_per_identity - gallery_per_identity:])
    gallery.extend(t.tracklet for t in tracklets if t.identity < 0)

    frames = np.stack(all_frames).transpose(0, 1, 4, 2, 3).astype("<f4")
    manifest = {
        "seed": seed,
        "palette": palette,
        "image": [height, width],
        "frames_per_tracklet": frames_per_tracklet,
        "cameras": cameras,
        "schema": {
            "re": [[n, c] for n, c in RE_ATTRIBUTES],
            "ir": [[n, c] for n, c in IR_ATTRIBUTES],
        },
        "identities": [asdict(s) for s in identities],
        "tracklets": [asdict(s) for s in tracklets],
        "splits": {"train": train, "query": query, "gallery": gallery},
        "frames_dtype": "<f4",
        "frames_shape": list(frames.shape),
    }
    return SyntheticDataset(manifest=manifest, frames=frames,
                            identities=identities, tracklets=tracklets)


def save_dataset(dataset: SyntheticDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.json", "w") as fh:
        json.dump(dataset.manifest, fh, sort_keys=True, indent=1)
    (path / "frames.bin").write_bytes(np.ascontiguousarray(dataset.frames).tobytes())


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read dataset manifest at {path}: {exc}") from exc
    shape = tuple(manifest["frames_shape"])
    raw = (path / "frames.bin").read_bytes()
    expect = int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise FormatError(f"frames.bin has {len(raw)} bytes, expected {expect}")
    frames = np.frombuffer(raw, dtype=manifest["frames_dtype"]).reshape(shape)
    identities = [IdentitySpec(**d) for d in manifest["identities"]]
    tracklets = [TrackletSpec(**d) for d in manifest["tracklets"]]
    return SyntheticDataset(manifest=manifest, frames=frames,
                            identities=identities, tracklets=tracklets)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def constrained_random_sample(length: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Split the clip into ``count`` equal chunks and draw one frame per chunk.

    Indices come out strictly increasing. Clips shorter than ``count`` wrap
    cyclically (0, 1, ..., L-1, 0, 1, ...) to pad while preserving order.
    """
    if count < 1:
        raise ConfigError("must sample at least one frame")
    if length == 0:
        raise EmptyTrackletError("cannot sample frames from an empty tracklet")
    if length < count:
        return np.arange(count) % length
    edges = [length * j // count for j in range(count + 1)]
    return np.array([int(rng.integers(edges[j], edges[j + 1])) for j in range(count)])


@dataclass
class TrackletBatch:
    frames: np.ndarray        # (B, T, 3, H, W) float64
    identities: np.ndarray    # (B,)
    re_labels: np.ndarray     # (B, 14)
    ir_labels: np.ndarray     # (B, 7)
    cameras: np.ndarray       # (B,)
    tracklet_ids: np.ndarray  # (B,)


class PKBatchSampler:
    """Emits batches of P distinct identities x K tracklets each.

    One epoch is a full pass over the identities in shuffled order; a short
    final chunk is topped up with distinct identities drawn from the rest.
    Identities with fewer than K tracklets are sampled with replacement.
    """

    def __init__(self, groups: dict[int, list[int]], p: int, k: int,
                 rng: np.random.Generator):
        self.groups = {i: list(v) for i, v in groups.items() if v}
        if len(self.groups) < p:
            raise ConfigError(
                f"need at least {p} identities with tracklets, have {len(self.groups)}"
            )
        self.p = p
        self.k = k
        self.rng = rng
        self._ids = sorted(self.groups)

    def epoch(self) -> list[list[int]]:
        """Tracklet-index batches covering every identity at least once."""
        order = [self._ids[i] for i in self.rng.permutation(len(self._ids))]
        batches = []
        for start in range(0, len(order), self.p):
            chunk = order[start : start + self.p]
            if len(chunk) < self.p:
                rest = [i for i in self._ids if i not in chunk]
                extra = self.rng.choice(len(rest), size=self.p - len(chunk), replace=False)
                chunk = chunk + [rest[i] for i in extra]
            batch = []
            for ident in chunk:
                pool = self.groups[ident]
                if len(pool) >= self.k:
                    picks = self.rng.choice(len(pool), size=self.k, replace=False)
                else:
                    picks = self.rng.integers(0, len(pool), size=self.k)
                batch.extend(pool[i] for i in picks)
            batches.append(batch)
        return batches


def make_batch(dataset: SyntheticDataset, tracklet_indices, frames_per_clip: int,
               rng: np.random.Generator) -> TrackletBatch:
    """Assemble clips for the given tracklets using constrained frame sampling."""
    clips = []
    for idx in tracklet_indices:
        track = dataset.tracklets[idx]
        picks = constrained_random_sample(track.length, frames_per_clip, rng)
        clips.append(dataset.frames[idx, picks].astype(np.float64))
    indices = list(tracklet_indices)
    return TrackletBatch(
        frames=np.stack(clips),
        identities=dataset.labels(indices),
        re_labels=dataset.re_labels(indices),
        ir_labels=dataset.ir_labels(indices),
        cameras=dataset.cameras(indices),
        tracklet_ids=np.array(indices),
    )

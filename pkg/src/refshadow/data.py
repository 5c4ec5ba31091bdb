"""Dataset schema, loader, validator, statistics and a synthetic generator.

On-disk layout::

    <root>/manifest.json
    <root>/videos/<video_id>/frames/00000.png ...
    <root>/videos/<video_id>/masks/<record_id>/00000.png ...

The manifest is one JSON document: a ``videos`` map (video_id -> split) and a
``records`` list. Each record pairs one video with one referring expression
and per-frame binary masks of the referred shadow. Frames are RGB PNG, masks
single-channel PNG with values {0, 255}, paths relative to the manifest.

The synthetic scenes hold a bright, lightly noisy background, a saturated
moving rectangle ("object") whose gray/saturation keeps it out of the shadow
priors, a darkened sheared quadrilateral ("shadow") with an exact rasterized
mask, and a few dark speckles small enough for a 5x5 opening to remove.
"""
from __future__ import annotations

import json
import numpy as np
from dataclasses import dataclass, field
from pathlib import Path

from . import imageio
from .errors import ConfigError, DatasetError

# observed expression length range used by the validator
WORD_MIN = 6
WORD_MAX = 27

SHADOW_TYPES = ("hard", "soft")
MOTIONS = ("stable", "moving")
SCENES = ("indoor", "outdoor", "day", "night")


def word_count(expression: str) -> int:
    """Lowercase whitespace tokenization."""
    return len(expression.lower().split())


def tokenize(expression: str) -> list[str]:
    return expression.lower().split()


@dataclass
class AnnotationRecord:
    video_id: str
    expression: str
    frames: list[dict]  # {"frame": path, "mask": path} relative to root
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise DatasetError(f"{self.video_id}: record has no frames")
        if not self.expression.strip():
            raise DatasetError(f"{self.video_id}: empty expression")


@dataclass
class DatasetManifest:
    root: Path
    records: list[AnnotationRecord]
    split: dict  # video_id -> "train" | "test"

    def records_for(self, split: str) -> list[AnnotationRecord]:
        return [r for r in self.records if self.split.get(r.video_id) == split]

    def frame_path(self, rel) -> Path:
        return self.root / rel

    def to_json_obj(self) -> dict:
        return {
            "videos": dict(self.split),
            "records": [
                {
                    "video_id": r.video_id,
                    "expression": r.expression,
                    "attributes": r.attributes,
                    "frames": r.frames,
                }
                for r in self.records
            ],
        }


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json_obj(), indent=1))


def load_manifest(path) -> DatasetManifest:
    """Load and validate manifest structure; masks are decoded lazily."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest does not parse: {e}") from e
    root = path.parent
    split = obj.get("videos", {})
    for vid, s in split.items():
        if s not in ("train", "test"):
            raise DatasetError(f"{vid}: unknown split {s!r}")
    records = []
    for ri, rec in enumerate(obj.get("records", [])):
        try:
            record = AnnotationRecord(
                video_id=rec["video_id"],
                expression=rec["expression"],
                frames=rec["frames"],
                attributes=rec.get("attributes", {}),
            )
        except (KeyError, TypeError) as e:
            raise DatasetError(f"record {ri}: malformed ({e})") from e
        for fi, fr in enumerate(record.frames):
            for key in ("frame", "mask"):
                if key not in fr:
                    raise DatasetError(
                        f"record {ri} ({record.video_id}) frame {fi}: missing {key!r}")
                if not (root / fr[key]).exists():
                    raise DatasetError(
                        f"record {ri} ({record.video_id}) frame {fi}: "
                        f"{key} file not found: {fr[key]}")
        records.append(record)
    return DatasetManifest(root=root, records=records, split=split)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(manifest: DatasetManifest) -> ValidationReport:
    """Content checks beyond load-time structure; returns findings, never raises."""
    violations = []
    seen_split: dict[str, str] = {}
    for vid, s in sorted(manifest.split.items()):
        if vid in seen_split and seen_split[vid] != s:
            violations.append(f"{vid}: appears in both splits")
        seen_split[vid] = s
    for rec in sorted(manifest.records, key=lambda r: r.video_id):
        if rec.video_id not in manifest.split:
            violations.append(f"{rec.video_id}: record video missing from split map")
        n = word_count(rec.expression)
        if not WORD_MIN <= n <= WORD_MAX:
            violations.append(
                f"{rec.video_id}: expression has {n} words, outside "
                f"[{WORD_MIN},{WORD_MAX}]")
        for fi, fr in enumerate(rec.frames):
            frame = imageio.read_frame(manifest.frame_path(fr["frame"]))
            mask_vals = imageio.mask_values(manifest.frame_path(fr["mask"]))
            if frame.shape[:2] != mask_vals.shape:
                violations.append(
                    f"{rec.video_id} frame {fi}: frame {frame.shape[:2]} vs "
                    f"mask {mask_vals.shape} dimensions")
            bad = np.setdiff1d(np.unique(mask_vals), [0, 255])
            if bad.size:
                violations.append(
                    f"{rec.video_id} frame {fi}: non-binary mask values "
                    f"{bad.tolist()}")
    return ValidationReport(violations)


@dataclass
class StatsReport:
    pair_count: int
    min_words: int
    max_words: int
    mean_words: float
    vocabulary_size: int
    attribute_histograms: dict

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def stats(manifest: DatasetManifest) -> StatsReport:
    counts = [word_count(r.expression) for r in manifest.records]
    vocab = set()
    hists: dict = {}
    for r in manifest.records:
        vocab.update(tokenize(r.expression))
        for key, val in r.attributes.items():
            if not isinstance(val, (str, int, bool, float)):
                continue  # only categorical attributes are histogrammed
            hists.setdefault(key, {})
            hists[key][val] = hists[key].get(val, 0) + 1
    return StatsReport(
        pair_count=sum(len(r.frames) for r in manifest.records),
        min_words=min(counts) if counts else 0,
        max_words=max(counts) if counts else 0,
        mean_words=float(np.mean(counts)) if counts else 0.0,
        vocabulary_size=len(vocab),
        attribute_histograms=hists,
    )


# --- synthetic generation -----------------------------------------------------

@dataclass
class SynthConfig:
    n_videos: int = 28
    n_train: int = 20
    frames_per_video: int = 12
    height: int = 48
    width: int = 48
    object_size: tuple = (10, 16)      # side range, pixels
    shadow_darkening: tuple = (0.42, 0.50)
    n_shadows: int = 1                 # shadows (and objects) per video
    n_speckles: int = 10               # dark distractor dots per frame
    speckle_size: int = 3              # dot side; must stay below the kernel
    n_dapples: int = 3                 # checkerboard distractor patches per video
    dapple_size: tuple = (7, 12)       # side range of dappled regions
    include_position_single: bool = True  # position phrase for 1-shadow scenes
    motion_pair_every: int = 0         # every k-th video gets a moving/stable
                                       # twin pair told apart by motion only
    flicker_prob: float = 0.0          # chance per frame (after the first
                                       # clip) of a lighting transient: the
                                       # true shadow washes out while a
                                       # look-alike one-frame composite
                                       # appears at a random location
    seed: int = 0

    def __post_init__(self):
        if min(self.height, self.width, self.n_videos,
               self.frames_per_video) <= 0:
            raise ConfigError("sizes must be positive")
        lo, hi = self.shadow_darkening
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError("darkening factors must lie in (0,1)")
        if not 0 < self.n_train <= self.n_videos:
            raise ConfigError("n_train must be in 1..n_videos")
        if self.n_shadows < 1:
            raise ConfigError("n_shadows must be >= 1")


def rasterize_quad(quad: np.ndarray, height: int, width: int) -> np.ndarray:
    """Fill a convex CCW quadrilateral; a pixel is inside iff its center
    satisfies cross(edge, center - vertex) >= 0 for every edge."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.ones((height, width), dtype=bool)
    for i in range(4):
        x1, y1 = quad[i]
        x2, y2 = quad[(i + 1) % 4]
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        inside &= cross >= 0.0
    return inside


def _ccw(quad: np.ndarray) -> np.ndarray:
    # signed area; flip if the ordering is clockwise
    x, y = quad[:, 0], quad[:, 1]
    area = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return quad if area > 0 else quad[::-1]


def _position_phrase(cx: float, cy: float, width: int, height: int) -> str:
    horiz = "left" if cx < width / 2 else "right"
    vert = "upper" if cy < height / 2 else "lower"
    return f"{vert} {horiz}"


def _expression(rng: np.random.Generator, shadow_type: str, motion: str,
                shape: str, position: str, multi: bool,
                include_position_single: bool,
                motion_only: bool = False) -> str:
    motion_phrase = "is moving across the ground" if motion == "moving" \
        else "is staying still on the ground"
    if motion_only:
        # twin scenes: only the motion tells the two shadows apart
        return f"the {shadow_type} shadow that {motion_phrase}"
    with_position = multi or (include_position_single and rng.random() < 0.5)
    if with_position:
        return (f"the {shadow_type} shadow of the {shape} in the "
                f"{position} {motion_phrase}")
    return f"the {shadow_type} shadow of the {shape} {motion_phrase}"


OBJECT_COLORS = ((235, 190, 60), (215, 205, 70), (230, 170, 80))
SPECKLE_VALUE = 100


def _scene_quads(rng: np.random.Generator, cfg: SynthConfig,
                 force_moving: bool | None = None):
    """Per-shadow geometry: object rect, shadow quad, velocity."""
    h, w = cfg.height, cfg.width
    side = rng.integers(cfg.object_size[0], cfg.object_size[1] + 1)
    aspect = rng.uniform(0.7, 1.4)
    ow, oh = max(4, int(side * aspect)), int(side)
    ox = rng.uniform(8, max(9, w - ow - 14))
    oy = rng.uniform(4, max(5, h - oh - 14))
    shear = rng.uniform(-3.0, 3.0)
    # thick enough to survive a 5x5 opening
    drop = rng.uniform(7.0, 11.0)
    moving = rng.random() < 0.5 if force_moving is None else force_moving
    # drift stays within ~6 px over a 12-frame video so the quad never leaves
    vx = rng.uniform(0.3, 0.55) * (1 if rng.random() < 0.5 else -1) if moving else 0.0
    vy = rng.uniform(-0.25, 0.25) if moving else 0.0
    color = OBJECT_COLORS[int(rng.integers(len(OBJECT_COLORS)))]
    return {
        "obj": np.array([ox, oy, ow, oh], dtype=float),
        "shear": shear, "drop": drop,
        "v": np.array([vx, vy]),
        "moving": moving,
        "color": color,
        "darkening": rng.uniform(*cfg.shadow_darkening),
        "shadow_type": "soft" if rng.random() < 0.35 else "hard",
    }


def _scene_footprint(scene: dict, cfg: SynthConfig) -> np.ndarray:
    """Union of the scene's shadow and object pixels over every frame."""
    occ = np.zeros((cfg.height, cfg.width), dtype=bool)
    for t in range(cfg.frames_per_video):
        occ |= rasterize_quad(_shadow_quad(scene, t, cfg.height, cfg.width),
                              cfg.height, cfg.width)
        x0, y0, x1, y1 = _object_rect(scene, t, cfg.height, cfg.width)
        occ[y0:y1, x0:x1] = True
    return occ


def _motion_pair_scenes(rng: np.random.Generator, cfg: SynthConfig) -> list:
    """A moving scene and a stable twin of the same shadow type, placed so
    their footprints never touch; only motion can tell the records apart."""
    first = _scene_quads(rng, cfg, force_moving=True)
    foot = _scene_footprint(first, cfg)
    second = None
    for _ in range(40):
        candidate = _scene_quads(rng, cfg, force_moving=False)
        candidate["shadow_type"] = first["shadow_type"]
        second = candidate
        if not (foot & _scene_footprint(candidate, cfg)).any():
            break
    return [first, second]


def _flicker_scene(rng: np.random.Generator, cfg: SynthConfig,
                   base_scene: dict) -> dict:
    """A one-frame object+shadow composite at a fresh location, sharing the
    base scene's colors so a single frame cannot tell it from the referred
    shadow. Drawn a little smaller than the scene range so a clear spot
    exists even around large persistent composites."""
    h, w = cfg.height, cfg.width
    scene = dict(base_scene)
    side = int(rng.integers(8, 13))
    ow = max(4, int(side * rng.uniform(0.7, 1.4)))
    oh = side
    # static composites need no drift margin, so they may use the full canvas
    scene["obj"] = np.array([rng.uniform(1, max(2, w - ow - 4)),
                             rng.uniform(1, max(2, h - oh - 13)),
                             float(ow), float(oh)])
    scene["shear"] = rng.uniform(-3.0, 3.0)
    scene["drop"] = rng.uniform(7.0, 11.0)
    scene["v"] = np.array([0.0, 0.0])
    return scene


def _shadow_quad(scene: dict, t: int, height: int, width: int) -> np.ndarray:
    ox, oy, ow, oh = scene["obj"] + np.array([*(scene["v"] * t), 0, 0])
    x0, x1 = ox, ox + ow
    ybot = oy + oh
    sh = scene["shear"]
    dr = scene["drop"]
    quad = np.array([
        [x0, ybot], [x1, ybot],
        [x1 + sh, ybot + dr], [x0 + sh, ybot + dr],
    ])
    quad[:, 0] = np.clip(quad[:, 0], 1.0, width - 1.0)
    quad[:, 1] = np.clip(quad[:, 1], 1.0, height - 1.0)
    return _ccw(quad)


def _object_rect(scene: dict, t: int, height: int, width: int):
    ox, oy, ow, oh = scene["obj"] + np.array([*(scene["v"] * t), 0, 0])
    x0 = int(np.clip(ox, 0, width - 1))
    y0 = int(np.clip(oy, 0, height - 1))
    x1 = int(np.clip(ox + ow, 0, width))
    y1 = int(np.clip(oy + oh, 0, height))
    return x0, y0, x1, y1


def generate_synthetic(cfg: SynthConfig, out_dir) -> tuple[Path, DatasetManifest]:
    """Render the dataset to disk and return (manifest_path, manifest)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create output directory {out}: {e}") from e
    rng = np.random.default_rng(cfg.seed)
    records = []
    split = {}
    for vi in range(cfg.n_videos):
        vid = f"vid{vi:04d}"
        split[vid] = "train" if vi < cfg.n_train else "test"
        frames_dir = out / "videos" / vid / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        base = rng.uniform(210, 228)
        pair_video = (cfg.motion_pair_every > 0
                      and vi % cfg.motion_pair_every == cfg.motion_pair_every - 1)
        if pair_video:
            scenes = _motion_pair_scenes(rng, cfg)
        else:
            scenes = [_scene_quads(rng, cfg) for _ in range(cfg.n_shadows)]
        scene_tag = SCENES[int(rng.integers(len(SCENES)))]
        masks_per_scene: list[list[np.ndarray]] = [[] for _ in scenes]
        # pixel-checkerboard distractors: patch-mean twins of a shadow that the
        # color priors never select; placed clear of every frame's shadow/object
        blocked = np.zeros((cfg.height, cfg.width), dtype=bool)
        for scene in scenes:
            for t in range(cfg.frames_per_video):
                blocked |= rasterize_quad(
                    _shadow_quad(scene, t, cfg.height, cfg.width),
                    cfg.height, cfg.width)
                x0, y0, x1, y1 = _object_rect(scene, t, cfg.height, cfg.width)
                blocked[y0:y1, x0:x1] = True
        dapples = []
        for _ in range(cfg.n_dapples):
            for _attempt in range(20):
                side = int(rng.integers(cfg.dapple_size[0], cfg.dapple_size[1] + 1))
                dy = int(rng.integers(0, cfg.height - side))
                dx = int(rng.integers(0, cfg.width - side))
                if not blocked[dy:dy + side, dx:dx + side].any():
                    dapples.append((dy, dx, side))
                    blocked[dy:dy + side, dx:dx + side] = True
                    break
        flicker_frames: list[int] = []
        dapple_mask = np.zeros((cfg.height, cfg.width), dtype=bool)
        for dy, dx, side in dapples:
            dapple_mask[dy:dy + side, dx:dx + side] = True
        for t in range(cfg.frames_per_video):
            noise = rng.uniform(-5, 5, size=(cfg.height, cfg.width))
            img = np.clip(base + noise, 0, 255)[..., None].repeat(3, axis=2)
            for dy, dx, side in dapples:
                ys, xs = np.mgrid[dy:dy + side, dx:dx + side]
                checker = (ys + xs) % 2 == 0
                img[dy:dy + side, dx:dx + side][checker] = 0.0
            # lighting transient: a one-frame look-alike composite placed
            # clear of this frame's shadows/objects and the dapples, never in
            # a ground-truth mask (it may reuse ground where a shadow sits in
            # other frames); the true shadow washes out on the same frame
            frame_blocked = dapple_mask.copy()
            for scene in scenes:
                frame_blocked |= rasterize_quad(
                    _shadow_quad(scene, t, cfg.height, cfg.width),
                    cfg.height, cfg.width)
                x0, y0, x1, y1 = _object_rect(scene, t, cfg.height, cfg.width)
                frame_blocked[y0:y1, x0:x1] = True
            flicker = None
            if cfg.flicker_prob > 0.0 and t >= 3 \
                    and rng.random() < cfg.flicker_prob:
                for _attempt in range(60):
                    cand = _flicker_scene(rng, cfg, scenes[0])
                    foot = rasterize_quad(
                        _shadow_quad(cand, 0, cfg.height, cfg.width),
                        cfg.height, cfg.width)
                    x0, y0, x1, y1 = _object_rect(cand, 0, cfg.height, cfg.width)
                    foot[y0:y1, x0:x1] = True
                    if not (foot & frame_blocked).any():
                        flicker = cand
                        flicker_frames.append(t)
                        break
            # shadows darken the background before the objects paint over it
            flicker_bits = np.zeros((cfg.height, cfg.width), dtype=bool)
            if flicker is not None:
                flicker_bits = rasterize_quad(
                    _shadow_quad(flicker, 0, cfg.height, cfg.width),
                    cfg.height, cfg.width)
                img[flicker_bits] *= flicker["darkening"]
            for si, scene in enumerate(scenes):
                quad = _shadow_quad(scene, t, cfg.height, cfg.width)
                bits = rasterize_quad(quad, cfg.height, cfg.width)
                # on transient frames the lighting largely washes the true
                # shadow out (still faintly visible, but too bright for the
                # color priors) while the look-alike appears elsewhere; the
                # annotation keeps the true location, so temporal context is
                # the cue that resolves the two
                shade = scene["darkening"]
                if flicker is not None and si == 0:
                    shade = 1.0 - (1.0 - shade) * 0.25
                img[bits] *= shade
                masks_per_scene[si].append(bits)
            for scene in scenes:
                x0, y0, x1, y1 = _object_rect(scene, t, cfg.height, cfg.width)
                img[y0:y1, x0:x1] = scene["color"]
            if flicker is not None:
                x0, y0, x1, y1 = _object_rect(flicker, 0, cfg.height, cfg.width)
                img[y0:y1, x0:x1] = flicker["color"]
            occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
            occupied |= flicker_bits
            if flicker is not None:
                x0, y0, x1, y1 = _object_rect(flicker, 0, cfg.height, cfg.width)
                occupied[y0:y1, x0:x1] = True
            for si in range(len(scenes)):
                occupied |= masks_per_scene[si][t]
            ss = cfg.speckle_size
            for _ in range(cfg.n_speckles):
                sy = int(rng.integers(0, cfg.height - ss))
                sx = int(rng.integers(0, cfg.width - ss))
                if not occupied[sy:sy + ss, sx:sx + ss].any():
                    img[sy:sy + ss, sx:sx + ss] = SPECKLE_VALUE
            imageio.write_frame(frames_dir / f"{t:05d}.png",
                                np.clip(img, 0, 255).astype(np.uint8))
        for si, scene in enumerate(scenes):
            rec_id = f"rec{vi:04d}_{si}"
            mask_dir = out / "videos" / vid / "masks" / rec_id
            mask_dir.mkdir(parents=True, exist_ok=True)
            frame_list = []
            for t in range(cfg.frames_per_video):
                imageio.write_mask(mask_dir / f"{t:05d}.png", masks_per_scene[si][t])
                frame_list.append({
                    "frame": f"videos/{vid}/frames/{t:05d}.png",
                    "mask": f"videos/{vid}/masks/{rec_id}/{t:05d}.png",
                })
            quad0 = _shadow_quad(scene, 0, cfg.height, cfg.width)
            pos = _position_phrase(quad0[:, 0].mean(), quad0[:, 1].mean(),
                                   cfg.width, cfg.height)
            motion = "moving" if scene["moving"] else "stable"
            shape = "square" if 0.85 <= scene["obj"][2] / scene["obj"][3] <= 1.15 \
                else "rectangle"
            expr = _expression(rng, scene["shadow_type"], motion, shape, pos,
                               multi=len(scenes) > 1,
                               include_position_single=cfg.include_position_single,
                               motion_only=pair_video)
            records.append(AnnotationRecord(
                video_id=vid,
                expression=expr,
                frames=frame_list,
                attributes={
                    "shadow_type": scene["shadow_type"],
                    "motion": motion,
                    "scene": scene_tag,
                    "flicker_frames": list(flicker_frames),
                },
            ))
    manifest = DatasetManifest(root=out, records=records, split=split)
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path, manifest


def gt_box_from_mask(bits: np.ndarray) -> np.ndarray:
    """Normalized (cx, cy, w, h) bounding box of a binary mask."""
    h, w = bits.shape
    ys, xs = np.nonzero(bits)
    if ys.size == 0:
        return np.zeros(4)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return np.array([(x0 + x1) / 2 / w, (y0 + y1) / 2 / h,
                     (x1 - x0) / w, (y1 - y0) / h])

"""Procedural stick-figure people with exact label maps.

Used so every stage can be trained and tested without the licensed datasets.
Multi-person scenes are labelled in the 19-group MHP taxonomy, single-person
fashion shots in the 16-group DeepFashion taxonomy, so the reduction tables
are exercised exactly as for real data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .semantics import SemanticMap, get_taxonomy

PART_LABELS = {
    "mhp": {
        "hat": 1, "hair": 2, "face": 11, "arm_l": 14, "arm_r": 15, "leg_l": 12, "leg_r": 13,
        "neck": 18, "upper": 4, "dress": 7, "skirt": 5, "pants": 6, "belt": 8,
        "shoe_l": 9, "shoe_r": 10, "bag": 16,
    },
    "deepfashion": {
        "hat": 7, "hair": 13, "face": 14, "arm_l": 15, "arm_r": 15, "leg_l": 15, "leg_r": 15,
        "neck": 15, "upper": 1, "dress": 4, "skirt": 3, "pants": 5, "belt": 10,
        "shoe_l": 11, "shoe_r": 11, "bag": 12,
    },
}


@dataclass(frozen=True)
class Appearance:
    gender: str
    skin: tuple
    hair: tuple
    upper: tuple
    lower: tuple
    shoes: tuple
    long_hair: bool
    dress: bool
    skirt: bool
    hat: bool
    bag: bool


@dataclass(frozen=True)
class Pose:
    arm_l: float  # radians from hanging straight down, positive = raised outward
    arm_r: float
    leg_l: float
    leg_r: float
    lean: float


def _color(rng, lo=20, hi=235):
    return tuple(int(c) for c in rng.integers(lo, hi, 3))


def random_appearance(rng: np.random.Generator, gender: str | None = None) -> Appearance:
    gender = gender or ("women" if rng.random() < 0.5 else "men")
    woman = gender == "women"
    dress = woman and rng.random() < 0.35
    return Appearance(
        gender=gender,
        skin=tuple(int(c) for c in np.array([224, 172, 140]) * rng.uniform(0.55, 1.05)),
        hair=_color(rng, 10, 120),
        upper=_color(rng),
        lower=_color(rng),
        shoes=_color(rng, 5, 90),
        long_hair=woman and rng.random() < 0.8 or (not woman and rng.random() < 0.1),
        dress=dress,
        skirt=woman and not dress and rng.random() < 0.5,
        hat=rng.random() < 0.15,
        bag=rng.random() < 0.2,
    )


def random_pose(rng: np.random.Generator) -> Pose:
    return Pose(
        arm_l=float(rng.uniform(0.05, 1.9)),
        arm_r=float(rng.uniform(0.05, 1.9)),
        leg_l=float(rng.uniform(0.0, 0.45)),
        leg_r=float(rng.uniform(0.0, 0.45)),
        lean=float(rng.uniform(-0.08, 0.08)),
    )


def draw_person(labels: Image.Image, rgb: Image.Image, cx: float, foot_y: float, height: float,
                app: Appearance, pose: Pose, taxonomy: str) -> None:
    """Paint one person (back to front) into an 'L' label image and an RGB image."""
    ids = PART_LABELS[taxonomy]
    dl, dr = ImageDraw.Draw(labels), ImageDraw.Draw(rgb)
    u = height / 8.0  # head-height unit
    sin, cos = math.sin(pose.lean), math.cos(pose.lean)

    def pt(dx, dy_up):
        # body coordinates (dx right, dy up from the feet) -> image coords, leaning about the feet
        return (cx + dx * cos + dy_up * sin, foot_y - (dy_up * cos - dx * sin))

    def poly(points, part, color):
        dl.polygon(points, fill=ids[part])
        dr.polygon(points, fill=color)

    def limb(p0, angle_dir, length, width, part, color):
        x0, y0 = p0
        x1, y1 = x0 + length * math.sin(angle_dir), y0 + length * math.cos(angle_dir)
        nx, ny = math.cos(angle_dir) * width / 2, -math.sin(angle_dir) * width / 2
        pts = [(x0 - nx, y0 - ny), (x0 + nx, y0 + ny), (x1 + nx, y1 + ny), (x1 - nx, y1 - ny)]
        poly(pts, part, color)
        return (x1, y1)

    def ellipse(center, rx, ry, part, color):
        x, y = center
        box = [x - rx, y - ry, x + rx, y + ry]
        dl.ellipse(box, fill=ids[part])
        dr.ellipse(box, fill=color)

    hip_y, shoulder_y, neck_y = 4.0 * u, 6.2 * u, 6.6 * u
    half_w = 0.75 * u
    leg_len, arm_len = 4.0 * u, 2.9 * u
    limb_w = 0.45 * u

    if app.long_hair:  # hair behind the shoulders
        poly([pt(-0.7 * u, 7.3 * u), pt(0.7 * u, 7.3 * u), pt(0.8 * u, 5.6 * u), pt(-0.8 * u, 5.6 * u)],
             "hair", app.hair)

    feet = []
    for side, ang, part in ((-1, pose.leg_l, "leg_l"), (1, pose.leg_r, "leg_r")):
        start = pt(side * 0.4 * u, hip_y)
        direction = pose.lean + side * ang * 0.6
        end = limb(start, direction, leg_len, limb_w * 1.2, part, app.skin)
        feet.append((end, direction))
        if not app.skirt and not app.dress:
            limb(start, direction, leg_len * 0.9, limb_w * 1.3, "pants", app.lower)
    for (fx, fy), direction in feet:
        ellipse((fx, fy), 0.35 * u, 0.18 * u, "shoe_l" if fx < cx else "shoe_r", app.shoes)

    torso = [pt(-half_w, shoulder_y), pt(half_w, shoulder_y), pt(half_w * 0.85, hip_y), pt(-half_w * 0.85, hip_y)]
    if app.dress:
        poly(torso, "dress", app.upper)
        poly([pt(-half_w * 0.85, hip_y), pt(half_w * 0.85, hip_y), pt(1.3 * u, 2.3 * u), pt(-1.3 * u, 2.3 * u)],
             "dress", app.upper)
    else:
        if app.skirt:
            poly([pt(-half_w * 0.9, hip_y + 0.2 * u), pt(half_w * 0.9, hip_y + 0.2 * u),
                  pt(1.2 * u, 2.6 * u), pt(-1.2 * u, 2.6 * u)], "skirt", app.lower)
        else:
            poly([pt(-half_w * 0.9, hip_y + 0.3 * u), pt(half_w * 0.9, hip_y + 0.3 * u),
                  pt(half_w * 0.9, hip_y - 0.6 * u), pt(-half_w * 0.9, hip_y - 0.6 * u)], "pants", app.lower)
        poly(torso, "upper", app.upper)
        poly([pt(-half_w * 0.85, hip_y + 0.12 * u), pt(half_w * 0.85, hip_y + 0.12 * u),
              pt(half_w * 0.85, hip_y - 0.08 * u), pt(-half_w * 0.85, hip_y - 0.08 * u)],
             "belt", tuple(int(c * 0.4) for c in app.lower))

    for side, ang, part in ((-1, pose.arm_l, "arm_l"), (1, pose.arm_r, "arm_r")):
        start = pt(side * half_w * 0.95, shoulder_y - 0.15 * u)
        direction = pose.lean + side * ang
        limb(start, direction, arm_len, limb_w, part, app.skin)
        limb(start, direction, arm_len * 0.35, limb_w * 1.25, "upper", app.upper)

    poly([pt(-0.2 * u, neck_y + 0.3 * u), pt(0.2 * u, neck_y + 0.3 * u), pt(0.2 * u, shoulder_y), pt(-0.2 * u, shoulder_y)],
         "neck", app.skin)
    head = pt(0, 7.25 * u)
    ellipse(head, 0.42 * u, 0.55 * u, "face", app.skin)
    poly([pt(-0.48 * u, 7.35 * u), pt(0.48 * u, 7.35 * u), pt(0.4 * u, 7.85 * u), pt(-0.4 * u, 7.85 * u)],
         "hair", app.hair)
    if app.hat:
        poly([pt(-0.6 * u, 7.7 * u), pt(0.6 * u, 7.7 * u), pt(0.45 * u, 8.15 * u), pt(-0.45 * u, 8.15 * u)],
             "hat", tuple(255 - c for c in app.hair))
    if app.bag:
        bx, by = pt(1.15 * u, 4.4 * u)
        poly([(bx - 0.3 * u, by - 0.35 * u), (bx + 0.3 * u, by - 0.35 * u),
              (bx + 0.3 * u, by + 0.35 * u), (bx - 0.3 * u, by + 0.35 * u)], "bag", (120, 70, 30))


# -- multi-person scenes -----------------------------------------------------

@dataclass
class SyntheticScene:
    scene_id: str
    image: np.ndarray  # H x W x 3 uint8
    person_maps: list  # SemanticMap per person, MHP taxonomy
    genders: list


def _scene_background(h, w, rng):
    horizon = int(h * rng.uniform(0.3, 0.45))
    img = np.empty((h, w, 3), np.uint8)
    sky, ground = np.array(_color(rng, 120, 230)), np.array(_color(rng, 40, 160))
    t = np.linspace(0, 1, h)[:, None, None]
    img[:] = np.where(np.arange(h)[:, None, None] < horizon, sky * (1 - 0.3 * t), ground * (0.7 + 0.3 * t))
    return img, horizon


def make_scene(rng: np.random.Generator, scene_id: str, size=(240, 320), n_persons: int | None = None):
    """A scene of 2-4 people standing on a ground plane (size is H, W)."""
    h, w = size
    n = n_persons or int(rng.choice([2, 3, 3, 4]))
    bg, horizon = _scene_background(h, w, rng)
    # persons on the plane: height grows linearly with distance of the feet below the horizon
    k = rng.uniform(0.8, 1.05)
    slots = np.sort(rng.permutation(np.linspace(0.12, 0.88, 6))[:n])
    persons = []
    for sx in slots:
        foot = rng.uniform(horizon + 0.35 * (h - horizon), h - 4)
        height = k * (foot - horizon)
        cx = sx * w + rng.uniform(-0.04, 0.04) * w
        persons.append((foot, cx, height))
    persons.sort()  # farther (smaller foot y) first; annotation order doubles as z-order
    rgb = Image.fromarray(bg)
    maps, genders = [], []
    tax = get_taxonomy("mhp")
    for foot, cx, height in persons:
        lab = Image.new("L", (w, h), 0)
        app = random_appearance(rng)
        draw_person(lab, rgb, cx, foot, height, app, random_pose(rng), "mhp")
        maps.append(SemanticMap(np.array(lab), tax))
        genders.append(app.gender)
    return SyntheticScene(scene_id, np.array(rgb), maps, genders)


# -- single-person fashion shots --------------------------------------------

FASHION_SIZE = (256, 176)  # H, W as in the fashion dataset


@dataclass
class FashionSample:
    sample_id: str
    image: np.ndarray
    smap: SemanticMap  # deepfashion taxonomy
    gender: str
    identity: str


def make_fashion_sample(rng, app: Appearance, sample_id: str, identity: str, size=FASHION_SIZE,
                        pose: Pose | None = None, background=(238, 238, 236)) -> FashionSample:
    h, w = size
    lab = Image.new("L", (w, h), 0)
    rgb = Image.new("RGB", (w, h), background)
    pose = pose or random_pose(rng)
    height = h * rng.uniform(0.78, 0.88)
    foot = h * 0.5 + height / 2 + rng.uniform(-2, 2)
    cx = w / 2 + rng.uniform(-4, 4)
    draw_person(lab, rgb, cx, foot, height, app, pose, "deepfashion")
    return FashionSample(sample_id, np.array(rgb), SemanticMap(np.array(lab), get_taxonomy("deepfashion")),
                         app.gender, identity)


def make_fashion_identity(rng, identity: str, n_poses: int = 2, size=FASHION_SIZE, gender=None):
    app = random_appearance(rng, gender)
    return [make_fashion_sample(rng, app, f"{identity}_{i}", identity, size) for i in range(n_poses)]

"""Procedural paired try-on data with exact ground-truth warps.

Every sample is built the same way: a garment is rendered flat in a canonical
frame, a body pose defines one closed-form backward map per body part (torso,
upper/lower arms), the per-part maps are stitched into a single backward flow
field, and the garment is placed on the body by warping it with that flow.
Because the person image is *composited from the warped garment itself*, the
stored flow is an exact warping oracle: re-warping the garment with it
reproduces the garment region of the person bit for bit.

The per-part structure is deliberate: a single smooth flow cannot represent
the piecewise field around articulated arms, which is what makes grouped
warping measurably better than a single-flow baseline on this data.

All coordinates are normalized to [-1, 1] per axis (x across width, y across
height, y grows downward) with align_corners pixel placement.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import binary_dilation

from . import geometry
from .diskio import sha256_file, write_array_zip
from .errors import ConfigError, MissingArtifactError

# ---------------------------------------------------------------------------
# canonical garment / body geometry (normalized units)
# ---------------------------------------------------------------------------

SHOULDER_Y = -0.38          # canonical shoulder line
HEM_Y = 0.45                # canonical hem line
SHOULDER_HALF = 0.30        # canonical torso half-width at the shoulders
HEM_HALF = 0.30             # canonical torso half-width at the hem
ARM_ANGLE0 = math.radians(35.0)  # canonical arm angle from straight down
UPPER_LEN = 0.33            # shoulder -> elbow
FORE_LEN = 0.31             # elbow -> wrist
SLEEVE_HALF = 0.10          # garment sleeve half-width
ARM_HALF = 0.13             # part-membership half-width around the arm bone
JITTER_AMP = 0.012          # amplitude of the smooth flow perturbation
GRAY = 0.5                  # fill value for the inpaint ring in the agnostic

BASE_SHAPES = ("tshirt", "tank", "long_sleeve")
PATTERNS = ("solid", "stripes", "checker", "logo_patch")

#: Condition layout: 8 keypoint heatmaps + 9 one-hot body-part planes + 1 preserve mask.
CONDITION_CHANNELS = 18
KEYPOINT_NAMES = ("neck", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r",
                  "wrist_l", "wrist_r", "pelvis")
PART_PLANE_NAMES = ("background", "head", "neck", "torso", "upper_arm_l",
                    "forearm_l", "upper_arm_r", "forearm_r", "legs")

#: Inclusive bounds for the 8 pose parameters, in storage order.
POSE_BOUNDS = {
    "shoulder_half": (0.26, 0.38),
    "arm_angle_l": (math.radians(10.0), math.radians(70.0)),
    "arm_angle_r": (math.radians(10.0), math.radians(70.0)),
    "lean": (-0.10, 0.10),
    "hip_half": (0.24, 0.36),
    "neck_len": (0.06, 0.14),
    "scale": (0.85, 1.08),
    "x_offset": (-0.10, 0.10),
}
POSE_PARAM_NAMES = tuple(POSE_BOUNDS)

DATASET_FORMAT_VERSION = 1
SAMPLE_ARRAY_NAMES = ("garment", "condition", "person", "agnostic_composite",
                      "gt_warped_garment", "inpaint_mask", "gt_flow")


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GarmentSpec:
    seed: int
    base_shape: str
    palette: tuple  # three RGB triples in [0, 1]
    pattern: str
    pattern_scale: float

    def validate(self) -> "GarmentSpec":
        if self.base_shape not in BASE_SHAPES:
            raise ConfigError(f"base_shape: unknown shape {self.base_shape!r}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern: unknown pattern {self.pattern!r}")
        if not self.pattern_scale > 0:
            raise ConfigError(f"pattern_scale: must be > 0, got {self.pattern_scale}")
        pal = np.asarray(self.palette, dtype=np.float64)
        if pal.shape != (3, 3) or pal.min() < 0 or pal.max() > 1:
            raise ConfigError("palette: need three RGB colors in [0, 1]")
        return self


@dataclass(frozen=True)
class BodySpec:
    seed: int
    pose_params: tuple  # 8 reals, order = POSE_PARAM_NAMES
    skin_tone: tuple    # RGB in [0, 1]

    def validate(self) -> "BodySpec":
        if len(self.pose_params) != 8:
            raise ConfigError(f"pose_params: need 8 values, got {len(self.pose_params)}")
        for name, value in zip(POSE_PARAM_NAMES, self.pose_params):
            lo, hi = POSE_BOUNDS[name]
            if not (lo - 1e-9 <= value <= hi + 1e-9):
                raise ConfigError(f"pose_params: {name}={value} outside [{lo}, {hi}]")
        tone = np.asarray(self.skin_tone, dtype=np.float64)
        if tone.shape != (3,) or tone.min() < 0 or tone.max() > 1:
            raise ConfigError("skin_tone: need RGB in [0, 1]")
        return self

    def pose(self) -> dict:
        return dict(zip(POSE_PARAM_NAMES, map(float, self.pose_params)))


@dataclass
class TryOnSample:
    garment: np.ndarray             # [3, H, W], the flat in-shop garment G
    condition: np.ndarray           # [18, H, W] pose/part/preserve conditioning
    person: np.ndarray              # [3, H, W] person wearing the garment
    agnostic_composite: np.ndarray  # [3, H, W] person with the inpaint ring blanked
    gt_warped_garment: np.ndarray   # [3, H, W] garment warped onto the body
    inpaint_mask: np.ndarray        # [1, H, W] binary region to synthesize
    gt_flow: np.ndarray             # [2, H, W] exact backward warp (normalized)


def canonical_pose() -> tuple:
    """Pose parameters under which the torso and upper-arm maps are the
    identity.  Forearm bends are drawn from the body seed, not the pose, so
    the forearms may still rotate about the elbows."""
    return (SHOULDER_HALF, ARM_ANGLE0, ARM_ANGLE0, 0.0, HEM_HALF, 0.10, 1.0, 0.0)


def sample_garment_spec(rng: np.random.Generator) -> GarmentSpec:
    palette = rng.uniform(0.05, 0.90, size=(3, 3))
    return GarmentSpec(
        seed=int(rng.integers(0, 2**31 - 1)),
        base_shape=str(rng.choice(BASE_SHAPES)),
        palette=tuple(tuple(float(v) for v in row) for row in palette),
        pattern=str(rng.choice(PATTERNS)),
        pattern_scale=float(rng.uniform(0.7, 1.4)),
    )


def sample_body_spec(rng: np.random.Generator) -> BodySpec:
    pose = tuple(float(rng.uniform(lo, hi)) for lo, hi in POSE_BOUNDS.values())
    skin = rng.uniform((0.45, 0.30, 0.22), (0.95, 0.80, 0.68))
    return BodySpec(
        seed=int(rng.integers(0, 2**31 - 1)),
        pose_params=pose,
        skin_tone=tuple(float(v) for v in skin),
    )


# ---------------------------------------------------------------------------
# rendering helpers
# ---------------------------------------------------------------------------

def _pixel_grid(h: int, w: int):
    """Normalized coordinate grids X, Y of shape [H, W] (align_corners)."""
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    return np.meshgrid(xs, ys)


def _arm_dir(angle: float, side: int):
    """Unit direction of an arm at `angle` from straight down; side -1 = left."""
    return (side * math.sin(angle), math.cos(angle))


def _panel_half(y, taper_top=SHOULDER_HALF, taper_bottom=HEM_HALF):
    t = np.clip((y - SHOULDER_Y) / (HEM_Y - SHOULDER_Y), 0.0, 1.0)
    return taper_top * (1.0 - t) + taper_bottom * t


def render_garment(spec: GarmentSpec, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Render the flat garment; returns (rgb [3,H,W] on white, alpha [1,H,W])."""
    spec.validate()
    h, w = resolution
    X, Y = _pixel_grid(h, w)
    pal = np.asarray(spec.palette, dtype=np.float64)

    # --- silhouette ---
    if spec.base_shape == "tank":
        top_half, neck_rx, neck_ry = 0.20, 0.13, 0.14
    else:
        top_half, neck_rx, neck_ry = SHOULDER_HALF, 0.11, 0.085
    half = _panel_half(Y, taper_top=top_half)
    torso = (np.abs(X) <= half) & (Y >= SHOULDER_Y) & (Y <= HEM_Y)
    neck_d = (X / neck_rx) ** 2 + ((Y - SHOULDER_Y) / neck_ry) ** 2
    torso &= neck_d >= 1.0

    sleeves = np.zeros_like(torso)
    cuffs = np.zeros_like(torso)
    if spec.base_shape != "tank":
        upper_frac = 0.55 if spec.base_shape == "tshirt" else 1.0
        for side in (-1, 1):
            dx, dy = _arm_dir(ARM_ANGLE0, side)
            nx, ny = dy, -dx
            sx, sy = side * SHOULDER_HALF, SHOULDER_Y
            u = (X - sx) * dx + (Y - sy) * dy
            v = (X - sx) * nx + (Y - sy) * ny
            sleeves |= (u >= 0.0) & (u <= upper_frac * UPPER_LEN) & (np.abs(v) <= SLEEVE_HALF)
            if spec.base_shape == "long_sleeve":
                ex, ey = sx + UPPER_LEN * dx, sy + UPPER_LEN * dy
                uf = (X - ex) * dx + (Y - ey) * dy
                vf = (X - ex) * nx + (Y - ey) * ny
                fore = (uf >= 0.0) & (uf <= FORE_LEN) & (np.abs(vf) <= SLEEVE_HALF * 0.85)
                sleeves |= fore
                cuffs |= fore & (uf >= FORE_LEN - 0.06)
    alpha = torso | sleeves

    # --- pattern ---
    rng = np.random.default_rng(spec.seed)
    phase = rng.uniform(0.0, 1.0, size=2)
    rgb = np.empty((3, h, w), dtype=np.float64)
    rgb[:] = pal[0][:, None, None]
    if spec.pattern == "stripes":
        band = 0.16 * spec.pattern_scale
        sel = (np.floor((Y + 1.0 + phase[0]) / band).astype(np.int64) % 2) == 0
        for c in range(3):
            rgb[c][sel] = pal[1][c]
    elif spec.pattern == "checker":
        cell = 0.18 * spec.pattern_scale
        sel = ((np.floor((X + 1.0 + phase[0]) / cell) + np.floor((Y + 1.0 + phase[1]) / cell))
               .astype(np.int64) % 2) == 0
        for c in range(3):
            rgb[c][sel] = pal[1][c]
    elif spec.pattern == "logo_patch":
        cx = float(rng.uniform(-0.06, 0.06))
        cy = float(rng.uniform(-0.12, 0.02))
        hw_ = 0.12 * spec.pattern_scale
        hh_ = 0.11 * spec.pattern_scale
        sel = (np.abs(X - cx) <= hw_) & (np.abs(Y - cy) <= hh_)
        for c in range(3):
            rgb[c][sel] = pal[2][c]

    # collar band and cuffs in the accent color give high-frequency anchors
    collar = (neck_d >= 1.0) & (neck_d <= 1.45) & (Y >= SHOULDER_Y - 0.02)
    for c in range(3):
        rgb[c][collar] = pal[2][c]
        rgb[c][cuffs] = pal[2][c]

    rgb = np.where(alpha[None], rgb, 1.0)  # white in-shop background
    return rgb.astype(np.float32), alpha[None].astype(np.float32)


# ---------------------------------------------------------------------------
# pose maps: closed-form backward warps per body part
# ---------------------------------------------------------------------------

def _pose_points(pose: dict):
    """Target-space pivot points for both arms plus derived forearm bends."""
    sc = pose["scale"]
    sh_y = SHOULDER_Y * sc
    out = {"sh_y": sh_y, "hem": (pose["x_offset"] + pose["lean"] * sc, HEM_Y * sc)}
    for side, key in ((-1, "l"), (1, "r")):
        theta = pose[f"arm_angle_{key}"]
        qx = pose["x_offset"] + side * pose["shoulder_half"] * sc
        dx, dy = _arm_dir(theta, side)
        ex, ey = qx + sc * UPPER_LEN * dx, sh_y + sc * UPPER_LEN * dy
        out[f"shoulder_{key}"] = (qx, sh_y)
        out[f"elbow_{key}"] = (ex, ey)
        out[f"theta_{key}"] = theta
    return out


def _rigid_backward(px, py, pivot_src, pivot_dst, dtheta, scale):
    """Inverse of p -> pivot_dst + scale * R(dtheta) (p - pivot_src)."""
    rx, ry = px - pivot_dst[0], py - pivot_dst[1]
    c, s = math.cos(-dtheta), math.sin(-dtheta)
    ux = (c * rx - s * ry) / scale
    uy = (s * rx + c * ry) / scale
    return pivot_src[0] + ux, pivot_src[1] + uy


def backward_part_maps(body: BodySpec, resolution):
    """Per-pixel backward maps and part selection.

    Returns (flow [2,H,W] float64 without jitter, part_id [H,W] int) where
    part ids index (torso=0, upper_l=1, fore_l=2, upper_r=3, fore_r=4).
    Selection: a pixel belongs to the highest-priority part whose backward map
    lands inside that part's canonical region (forearms > upper arms > torso).
    """
    pose = body.pose()
    h, w = resolution
    X, Y = _pixel_grid(h, w)
    pts = _pose_points(pose)
    sc = pose["scale"]
    rng = np.random.default_rng(body.seed)
    bends = {"l": float(rng.uniform(0.0, math.radians(50.0))),
             "r": float(rng.uniform(0.0, math.radians(50.0)))}

    # torso backward map (smoothly blended width, exact closed form)
    y_src = Y / sc
    t = np.clip((y_src - SHOULDER_Y) / (HEM_Y - SHOULDER_Y), 0.0, 1.0)
    wr = (pose["shoulder_half"] / SHOULDER_HALF) * (1.0 - t) + (pose["hip_half"] / HEM_HALF) * t
    cx = pose["x_offset"] + pose["lean"] * sc * t
    x_src_torso = (X - cx) / (sc * wr)
    maps = [(x_src_torso, y_src)]
    members = [np.ones((h, w), dtype=bool)]  # torso is the fallback part

    order = [0]
    pid = 1
    for side, key in ((-1, "l"), (1, "r")):
        theta = pts[f"theta_{key}"]
        d0x, d0y = _arm_dir(ARM_ANGLE0, side)
        n0x, n0y = d0y, -d0x
        s_src = (side * SHOULDER_HALF, SHOULDER_Y)
        e_src = (s_src[0] + UPPER_LEN * d0x, s_src[1] + UPPER_LEN * d0y)
        dth_up = side * (ARM_ANGLE0 - theta)  # rotation taking canonical dir to posed dir
        # upper arm
        ux, uy = _rigid_backward(X, Y, s_src, pts[f"shoulder_{key}"], dth_up, sc)
        au = (ux - s_src[0]) * d0x + (uy - s_src[1]) * d0y
        av = (ux - s_src[0]) * n0x + (uy - s_src[1]) * n0y
        m_up = (au >= -0.02) & (au <= UPPER_LEN + 0.02) & (np.abs(av) <= ARM_HALF)
        # forearm, pivoting at the elbow with an extra bend
        theta_f = theta + bends[key]
        dth_fo = side * (ARM_ANGLE0 - theta_f)
        fx, fy = _rigid_backward(X, Y, e_src, pts[f"elbow_{key}"], dth_fo, sc)
        fu = (fx - e_src[0]) * d0x + (fy - e_src[1]) * d0y
        fv = (fx - e_src[0]) * n0x + (fy - e_src[1]) * n0y
        m_fo = (fu >= -0.02) & (fu <= FORE_LEN + 0.05) & (np.abs(fv) <= ARM_HALF)

        maps.append((ux, uy))
        members.append(m_up)
        maps.append((fx, fy))
        members.append(m_fo)
        # priority: this forearm, then this upper arm
        order = [pid + 1, pid] + order
        pid += 2

    part_id = np.zeros((h, w), dtype=np.int64)
    chosen = np.zeros((h, w), dtype=bool)
    for k in order:
        sel = members[k] & ~chosen
        part_id[sel] = k
        chosen |= sel

    sx = np.zeros((h, w))
    sy = np.zeros((h, w))
    for k, (mx, my) in enumerate(maps):
        sel = part_id == k
        sx[sel] = mx[sel]
        sy[sel] = my[sel]
    flow = np.stack([sx - X, sy - Y])
    return flow, part_id, pts, bends


def _smooth_jitter(body_seed: int, X, Y) -> np.ndarray:
    """Low-frequency sinusoidal perturbation added to the backward flow."""
    rng = np.random.default_rng(np.random.SeedSequence([int(body_seed), 77]))
    freqs = rng.uniform(2.0, 4.5, size=4)
    ph = rng.uniform(0.0, 2.0 * math.pi, size=4)
    jx = JITTER_AMP * np.sin(freqs[0] * Y + ph[0]) * np.sin(freqs[1] * X + ph[1])
    jy = JITTER_AMP * np.sin(freqs[2] * X + ph[2]) * np.sin(freqs[3] * Y + ph[3])
    return np.stack([jx, jy])


# ---------------------------------------------------------------------------
# body rendering and conditioning
# ---------------------------------------------------------------------------

def _capsule(X, Y, a, b, radius):
    """Distance-to-segment test; True inside the capsule from a to b."""
    abx, aby = b[0] - a[0], b[1] - a[1]
    denom = abx * abx + aby * aby
    t = np.clip(((X - a[0]) * abx + (Y - a[1]) * aby) / max(denom, 1e-12), 0.0, 1.0)
    dx = X - (a[0] + t * abx)
    dy = Y - (a[1] + t * aby)
    return dx * dx + dy * dy <= radius * radius


def render_body(body: BodySpec, resolution):
    """Base person (no garment) plus the 9 exact one-hot part planes."""
    pose = body.pose()
    h, w = resolution
    X, Y = _pixel_grid(h, w)
    pts = _pose_points(pose)
    sc = pose["scale"]
    rng = np.random.default_rng(np.random.SeedSequence([int(body.seed), 11]))
    bg = np.clip(0.84 + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    pants = np.clip(np.array([0.18, 0.20, 0.24]) + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    skin = np.asarray(body.skin_tone)

    _, part_id, pts, bends = backward_part_maps(body, resolution)

    neck_top_y = pts["sh_y"] - pose["neck_len"] * sc
    head_c = (pose["x_offset"], neck_top_y - 0.13 * sc)
    head = ((X - head_c[0]) / (0.13 * sc)) ** 2 + ((Y - head_c[1]) / (0.15 * sc)) ** 2 <= 1.0
    neck = (np.abs(X - pose["x_offset"]) <= 0.055 * sc) & (Y >= neck_top_y - 0.02) & (Y <= pts["sh_y"] + 0.03)

    arms = {}
    wrists = {}
    for key in ("l", "r"):
        side = -1 if key == "l" else 1
        theta_f = pts[f"theta_{key}"] + bends[key]
        wdx, wdy = _arm_dir(theta_f, side)
        e = pts[f"elbow_{key}"]
        wrist = (e[0] + sc * FORE_LEN * wdx, e[1] + sc * FORE_LEN * wdy)
        wrists[key] = wrist
        arms[f"upper_{key}"] = _capsule(X, Y, pts[f"shoulder_{key}"], e, 0.085 * sc)
        arms[f"fore_{key}"] = _capsule(X, Y, e, wrist, 0.075 * sc)

    y_src = Y / sc
    t = np.clip((y_src - SHOULDER_Y) / (HEM_Y - SHOULDER_Y), 0.0, 1.0)
    half_t = (pose["shoulder_half"] * (1.0 - t) + pose["hip_half"] * t) * sc
    cx = pose["x_offset"] + pose["lean"] * sc * t
    torso = (np.abs(X - cx) <= half_t) & (Y >= pts["sh_y"] - 0.02) & (Y <= pts["hem"][1] + 0.02)
    legs = (Y > pts["hem"][1] - 0.02) & (np.abs(X - pts["hem"][0]) <= pose["hip_half"] * sc * 0.96)

    # exact one-hot planes via first-match priority
    planes = np.zeros((9, h, w), dtype=np.float32)
    taken = np.zeros((h, w), dtype=bool)
    ordered = [
        ("head", head), ("neck", neck),
        ("fore_l", arms["fore_l"]), ("fore_r", arms["fore_r"]),
        ("upper_l", arms["upper_l"]), ("upper_r", arms["upper_r"]),
        ("torso", torso), ("legs", legs),
    ]
    name_to_plane = {"background": 0, "head": 1, "neck": 2, "torso": 3, "upper_l": 4,
                     "fore_l": 5, "upper_r": 6, "fore_r": 7, "legs": 8}
    colors = {"head": skin, "neck": skin, "fore_l": skin, "fore_r": skin,
              "upper_l": skin, "upper_r": skin, "torso": skin, "legs": pants}
    img = np.empty((3, h, w), dtype=np.float64)
    img[:] = bg[:, None, None]
    for name, mask in ordered:
        sel = mask & ~taken
        planes[name_to_plane[name]][sel] = 1.0
        for c in range(3):
            img[c][sel] = colors[name][c]
        taken |= sel
    planes[0][~taken] = 1.0

    keypoints = {
        "neck": (pose["x_offset"], neck_top_y),
        "shoulder_l": pts["shoulder_l"], "shoulder_r": pts["shoulder_r"],
        "elbow_l": pts["elbow_l"], "elbow_r": pts["elbow_r"],
        "wrist_l": wrists["l"], "wrist_r": wrists["r"],
        "pelvis": pts["hem"],
    }
    return img.astype(np.float32), planes, keypoints


def _keypoint_heatmaps(keypoints: dict, resolution, sigma_px: float = 1.5) -> np.ndarray:
    h, w = resolution
    X, Y = _pixel_grid(h, w)
    px = (X + 1.0) * (w - 1) / 2.0
    py = (Y + 1.0) * (h - 1) / 2.0
    maps = np.zeros((len(KEYPOINT_NAMES), h, w), dtype=np.float32)
    for i, name in enumerate(KEYPOINT_NAMES):
        kx, ky = keypoints[name]
        kpx = (kx + 1.0) * (w - 1) / 2.0
        kpy = (ky + 1.0) * (h - 1) / 2.0
        d2 = (px - kpx) ** 2 + (py - kpy) ** 2
        maps[i] = np.exp(-d2 / (2.0 * sigma_px**2)).astype(np.float32)
    return maps


# ---------------------------------------------------------------------------
# sample assembly
# ---------------------------------------------------------------------------

def generate_sample(garment_spec: GarmentSpec, body_spec: BodySpec,
                    resolution=(64, 48), levels: int = 3) -> TryOnSample:
    """Build one fully consistent paired record.

    The returned ``gt_flow`` satisfies, by construction,
    ``geometry.grid_sample(garment, gt_flow) == gt_warped_garment`` (the same
    call produced it), and the agnostic equals the person wherever the inpaint
    mask is zero.
    """
    garment_spec.validate()
    body_spec.validate()
    h, w = resolution
    if h % (2**levels) or w % (2**levels) or h <= 0 or w <= 0:
        raise ConfigError(
            f"resolution: ({h}, {w}) must be positive and divisible by {2**levels}"
        )

    g_rgb, g_alpha = render_garment(garment_spec, resolution)
    flow_parts, _, _, _ = backward_part_maps(body_spec, resolution)
    X, Y = _pixel_grid(h, w)
    gt_flow = (flow_parts + _smooth_jitter(body_spec.seed, X, Y)).astype(np.float32)

    rgba = np.concatenate([g_rgb, g_alpha], axis=0)
    warped = geometry.grid_sample(torch.from_numpy(rgba), torch.from_numpy(gt_flow)).numpy()
    # bilinear weights can overshoot by ~1 ulp in float32; keep values in range
    warped_rgb, warped_alpha = np.clip(warped[:3], 0.0, 1.0), warped[3]
    region = (warped_alpha >= 0.5).astype(np.float32)[None]

    body_img, planes, keypoints = render_body(body_spec, resolution)
    person = body_img * (1.0 - region) + warped_rgb * region

    mask = binary_dilation(region[0] > 0.5, structure=np.ones((3, 3), dtype=bool),
                           iterations=2).astype(np.float32)[None]
    ring = mask * (1.0 - region)
    agnostic = person * (1.0 - mask) + warped_rgb * region + GRAY * ring

    condition = np.concatenate([
        _keypoint_heatmaps(keypoints, resolution),
        planes,
        (1.0 - mask),
    ], axis=0).astype(np.float32)
    assert condition.shape[0] == CONDITION_CHANNELS

    return TryOnSample(
        garment=g_rgb.astype(np.float32),
        condition=condition,
        person=person.astype(np.float32),
        agnostic_composite=agnostic.astype(np.float32),
        gt_warped_garment=warped_rgb.astype(np.float32),
        inpaint_mask=mask.astype(np.float32),
        gt_flow=gt_flow,
    )


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

def save_sample(path: Path, sample: TryOnSample) -> None:
    arrays = {name: getattr(sample, _FIELD_BY_NAME[name]) for name in SAMPLE_ARRAY_NAMES}
    write_array_zip(path, arrays)


_FIELD_BY_NAME = {
    "garment": "garment",
    "condition": "condition",
    "person": "person",
    "agnostic_composite": "agnostic_composite",
    "gt_warped_garment": "gt_warped_garment",
    "inpaint_mask": "inpaint_mask",
    "gt_flow": "gt_flow",
}


def load_sample(path: str | Path) -> TryOnSample:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"sample file not found: {path}")
    with np.load(path) as data:
        kwargs = {_FIELD_BY_NAME[name]: np.ascontiguousarray(data[name]) for name in SAMPLE_ARRAY_NAMES}
    return TryOnSample(**kwargs)


def build_dataset(n_train: int, n_test: int, seed: int, out_dir: str | Path,
                  resolution=(64, 48)) -> dict:
    """Generate both splits and write them plus a JSON-line manifest.

    Layout: ``out_dir/{train,test}/sample_*.npz`` and ``out_dir/manifest.jsonl``
    whose first line is a header record and remaining lines describe one sample
    each (with a sha256 of the file, so determinism is checkable from the
    manifest alone).  Re-running with identical arguments rewrites identical
    bytes.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train/n_test: must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    header = {
        "kind": "header",
        "format_version": DATASET_FORMAT_VERSION,
        "n_train": n_train,
        "n_test": n_test,
        "resolution": list(resolution),
        "seed": seed,
        "arrays": list(SAMPLE_ARRAY_NAMES),
        "condition_channels": CONDITION_CHANNELS,
    }
    lines = [json.dumps(header, sort_keys=True)]
    manifest = dict(header, samples=[])

    for split, split_code, count in (("train", 0, n_train), ("test", 1, n_test)):
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        for i in range(count):
            g_rng = np.random.default_rng(np.random.SeedSequence([seed, split_code, i, 0]))
            b_rng = np.random.default_rng(np.random.SeedSequence([seed, split_code, i, 1]))
            gspec = sample_garment_spec(g_rng)
            bspec = sample_body_spec(b_rng)
            sample = generate_sample(gspec, bspec, resolution=resolution)
            rel = f"{split}/sample_{i:05d}.npz"
            save_sample(out_dir / rel, sample)
            record = {
                "kind": "sample",
                "split": split,
                "index": i,
                "file": rel,
                "sha256": sha256_file(out_dir / rel),
                "garment": dataclasses.asdict(gspec),
                "body": dataclasses.asdict(bspec),
            }
            lines.append(json.dumps(record, sort_keys=True))
            manifest["samples"].append(record)

    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    manifest["checksum"] = manifest_checksum(out_dir)
    return manifest


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "manifest.jsonl"
    if not path.is_file():
        raise MissingArtifactError(f"dataset manifest not found: {path}")
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    samples = [json.loads(ln) for ln in lines[1:] if ln.strip()]
    return dict(header, samples=samples)


def manifest_checksum(dataset_dir: str | Path) -> str:
    path = Path(dataset_dir) / "manifest.jsonl"
    if not path.is_file():
        raise MissingArtifactError(f"dataset manifest not found: {path}")
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TryOnDataset:
    """Lazy reader over one split of a generated dataset directory."""

    def __init__(self, dataset_dir: str | Path, split: str):
        if split not in ("train", "test"):
            raise ConfigError(f"split: expected 'train' or 'test', got {split!r}")
        self.dir = Path(dataset_dir)
        self.split = split
        manifest = load_manifest(self.dir)
        self.resolution = tuple(manifest["resolution"])
        self.files = [r["file"] for r in manifest["samples"] if r["split"] == split]
        if not self.files:
            raise MissingArtifactError(f"no '{split}' samples listed in {self.dir}/manifest.jsonl")

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, idx: int) -> TryOnSample:
        return load_sample(self.dir / self.files[idx])

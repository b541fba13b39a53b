"""Synthetic two-view scenes with exact ground-truth geometry.

Shared 3-D points are sampled in front of a pinhole camera A; camera B
is A rotated rigidly about an axis through the scene centroid (so the
relative rotation angle is exactly the configured orbit angle) plus a
random baseline offset.  Shared points project into both frames and
become matched keypoints; per-image unmatched keypoints get their own
depth and are placed so their reprojection stays well clear (>10 px)
of every keypoint in the other image, which makes them non-repeatable
by construction.  Cross-projections are computed by unprojecting each
(possibly jittered) keypoint at its known depth and projecting into
the other camera - the synthetic analog of depth-map reprojection.

Descriptors: matched pairs share a random unit latent plus Gaussian
noise, renormalized; unmatched keypoints get independent unit vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .encoder import KeypointSet
from .training import GroundTruthLabels, make_labels

ROTATION_BAND_DEG = (6.0, 60.0)  # valid configuration band for orbit angles
CROSS_MARGIN_PX = 12.0  # unmatched keypoints stay this far from the other image
INTRA_MARGIN_PX = 6.0  # minimum spacing between keypoints within an image


@dataclass
class SceneConfig:
    num_shared_points: int = 64
    num_unmatched_per_image: int = 64
    image_size: tuple[int, int] = (640, 480)
    focal_length: float = 500.0
    rotation_range_deg: tuple[float, float] = (10.0, 30.0)
    translation_range: tuple[float, float] = (0.1, 0.5)
    descriptor_noise: float = 0.1
    descriptor_dim: int = 32
    jitter_px: float = 0.5  # per-axis uniform jitter on matched projections
    depth_range: tuple[float, float] = (4.0, 8.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rotation_range_deg
        if lo < ROTATION_BAND_DEG[0] or hi > ROTATION_BAND_DEG[1] or lo > hi:
            raise ValueError(
                f"rotation range {self.rotation_range_deg} outside {ROTATION_BAND_DEG}")
        if self.descriptor_noise < 0:
            raise ValueError("descriptor noise must be >= 0")
        if self.num_shared_points < 1 or self.num_unmatched_per_image < 0:
            raise ValueError("need >= 1 shared point and >= 0 unmatched")


@dataclass
class PairSample:
    kps_a: KeypointSet
    kps_b: KeypointSet
    proj_a_to_b: np.ndarray  # exact cross-projection of every A keypoint
    proj_b_to_a: np.ndarray
    labels: GroundTruthLabels
    num_shared: int


class Camera:
    """Pinhole camera: world-to-camera rotation, camera center, intrinsics."""

    def __init__(self, r_wc: np.ndarray, center: np.ndarray,
                 focal: float, image_size):
        self.r_wc = r_wc
        self.center = center
        self.focal = focal
        self.cx = image_size[0] / 2.0
        self.cy = image_size[1] / 2.0

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.center) @ self.r_wc.T

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and camera-frame depths of world points."""
        cam = self.to_camera(np.atleast_2d(pts))
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * cam[:, 0] / z + self.cx
            v = self.focal * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def unproject(self, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
        """World points of pixels at the given camera-frame depths."""
        px = np.atleast_2d(pixels)
        d = np.asarray(depths).reshape(-1)
        x = (px[:, 0] - self.cx) / self.focal * d
        y = (px[:, 1] - self.cy) / self.focal * d
        cam = np.stack([x, y, d], axis=1)
        return cam @ self.r_wc + self.center


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    a = axis / np.linalg.norm(axis)
    kmat = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return (np.eye(3) + np.sin(angle_rad) * kmat
            + (1 - np.cos(angle_rad)) * (kmat @ kmat))


def relative_rotation_angle_deg(cam_a: Camera, cam_b: Camera) -> float:
    r_rel = cam_b.r_wc @ cam_a.r_wc.T
    cos = np.clip((np.trace(r_rel) - 1) / 2, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def _in_frame(px: np.ndarray, image_size, margin: float) -> np.ndarray:
    w, h = image_size
    return ((px[:, 0] >= margin) & (px[:, 0] <= w - margin)
            & (px[:, 1] >= margin) & (px[:, 1] <= h - margin))


def _min_dist(point: np.ndarray, others: np.ndarray) -> float:
    if len(others) == 0:
        return np.inf
    return float(np.sqrt(((others - point) ** 2).sum(axis=1)).min())


def generate_scene(config: SceneConfig) -> PairSample:
    """Build one labeled two-view sample; deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    w, h = config.image_size
    margin = 2.0
    max_pose_tries = 20

    cam_a = Camera(np.eye(3), np.zeros(3), config.focal_length, config.image_size)
    for pose_try in range(max_pose_tries):
        angle = np.radians(rng.uniform(*config.rotation_range_deg))
        axis = rng.normal(size=3)
        baseline = rng.normal(size=3)
        baseline *= rng.uniform(*config.translation_range) / np.linalg.norm(baseline)
        centroid = np.array([0.0, 0.0, np.mean(config.depth_range)])
        r = rotation_about_axis(axis, angle)
        center_b = centroid - r @ centroid + baseline
        cam_b = Camera(r.T, center_b, config.focal_length, config.image_size)

        shared = _sample_shared_points(config, rng, cam_a, cam_b, margin)
        if shared is not None:
            break
    else:
        raise RuntimeError(f"no workable camera pose in {max_pose_tries} tries")

    pts3d, px_a_true, px_b_true, depth_a, depth_b = shared
    ns = config.num_shared_points

    # jitter matched projections (unprojection below re-derives exact geometry)
    jit = config.jitter_px
    px_a = px_a_true + rng.uniform(-jit, jit, size=(ns, 2))
    px_b = px_b_true + rng.uniform(-jit, jit, size=(ns, 2))

    pos_a = [px_a]
    pos_b = [px_b]
    dep_a = [depth_a]
    dep_b = [depth_b]

    # reprojections of the (jittered) shared keypoints, used for margin checks
    reproj_ab = cam_b.project(cam_a.unproject(px_a, depth_a))[0]
    reproj_ba = cam_a.project(cam_b.unproject(px_b, depth_b))[0]

    unmatched = _place_unmatched(config, rng, cam_a, cam_b,
                                 np.vstack(pos_a), np.vstack(pos_b),
                                 reproj_ab, reproj_ba, margin)
    ua_px, ua_depth, ub_px, ub_depth = unmatched
    if len(ua_px):
        pos_a.append(ua_px)
        dep_a.append(ua_depth)
    if len(ub_px):
        pos_b.append(ub_px)
        dep_b.append(ub_depth)

    pos_a = np.vstack(pos_a)
    pos_b = np.vstack(pos_b)
    dep_a = np.concatenate(dep_a)
    dep_b = np.concatenate(dep_b)

    proj_a_to_b = cam_b.project(cam_a.unproject(pos_a, dep_a))[0]
    proj_b_to_a = cam_a.project(cam_b.unproject(pos_b, dep_b))[0]

    desc_a, desc_b = _raw_descriptors(config, rng, len(pos_a), len(pos_b), ns)
    kps_a = KeypointSet(pos_a, desc_a, config.image_size)
    kps_b = KeypointSet(pos_b, desc_b, config.image_size)
    labels = make_labels(proj_a_to_b, proj_b_to_a, kps_a, kps_b)
    return PairSample(kps_a, kps_b, proj_a_to_b, proj_b_to_a, labels, ns)


def _sample_shared_points(config, rng, cam_a, cam_b, margin):
    """Points visible with margin in both frames; None if the pose is bad."""
    ns = config.num_shared_points
    pts, px_a, px_b, da, db = [], [], [], [], []
    budget = ns * 200
    while len(pts) < ns and budget > 0:
        budget -= 1
        pix = rng.uniform([margin, margin],
                          [config.image_size[0] - margin, config.image_size[1] - margin])
        depth = rng.uniform(*config.depth_range)
        p3 = cam_a.unproject(pix[None, :], [depth])[0]
        pb, zb = cam_b.project(p3)
        if zb[0] <= 0.1 or not _in_frame(pb, config.image_size, margin)[0]:
            continue
        if (_min_dist(pix, np.array(px_a).reshape(-1, 2)) < INTRA_MARGIN_PX
                or _min_dist(pb[0], np.array(px_b).reshape(-1, 2)) < INTRA_MARGIN_PX):
            continue
        pts.append(p3)
        px_a.append(pix)
        px_b.append(pb[0])
        da.append(depth)
        db.append(zb[0])
    if len(pts) < ns:
        return None
    return (np.array(pts), np.array(px_a), np.array(px_b),
            np.array(da), np.array(db))


def _place_unmatched(config, rng, cam_a, cam_b, kp_a, kp_b,
                     reproj_ab, reproj_ba, margin):
    """Unmatched keypoints whose reprojections stay clear of the other image.

    Acceptance for an A-side point: in frame, separated from existing A
    keypoints, and its reprojection into B at least CROSS_MARGIN_PX from
    every B keypoint.  The point's own position must also keep clear of
    reprojections arriving from B so it cannot disturb those labels.
    """
    nu = config.num_unmatched_per_image

    def place(n, own_kps, own_incoming, cam_from, cam_to, other_kps_getter):
        placed_px, placed_depth = [], []
        budget = n * 500
        while len(placed_px) < n and budget > 0:
            budget -= 1
            pix = rng.uniform([margin, margin],
                              [config.image_size[0] - margin,
                               config.image_size[1] - margin])
            if _min_dist(pix, np.vstack([own_kps] + ([np.array(placed_px).reshape(-1, 2)]
                                                     if placed_px else []))) < INTRA_MARGIN_PX:
                continue
            if _min_dist(pix, own_incoming) < CROSS_MARGIN_PX:
                continue
            depth = rng.uniform(*config.depth_range)
            p3 = cam_from.unproject(pix[None, :], [depth])[0]
            reproj, z = cam_to.project(p3)
            if z[0] <= 0.1:  # behind the other camera: trivially non-repeatable
                placed_px.append(pix)
                placed_depth.append(depth)
                continue
            if _min_dist(reproj[0], other_kps_getter()) < CROSS_MARGIN_PX:
                continue
            placed_px.append(pix)
            placed_depth.append(depth)
        if len(placed_px) < n:
            raise RuntimeError("could not place enough unmatched keypoints; "
                               "lower the counts or enlarge the image")
        return np.array(placed_px).reshape(-1, 2), np.array(placed_depth)

    ua_px, ua_depth = place(nu, kp_a, reproj_ba, cam_a, cam_b, lambda: kp_b)
    # B-side placements must also avoid the reprojections of A's unmatched
    if len(ua_px):
        extra_ab = cam_b.project(cam_a.unproject(ua_px, ua_depth))[0]
        incoming_b = np.vstack([reproj_ab, extra_ab])
        all_a = np.vstack([kp_a, ua_px])
    else:
        incoming_b = reproj_ab
        all_a = kp_a
    ub_px, ub_depth = place(nu, kp_b, incoming_b, cam_b, cam_a, lambda: all_a)
    return ua_px, ua_depth, ub_px, ub_depth


def _raw_descriptors(config, rng, m, n, num_shared):
    return synthesize_descriptors_arrays(
        m, n, num_shared, config.descriptor_dim, config.descriptor_noise, rng)


def synthesize_descriptors_arrays(m: int, n: int, num_shared: int, dim: int,
                                  noise: float, rng: np.random.Generator):
    """Unit descriptors: the first num_shared rows of each side share a
    latent per pair; everything else is independent."""
    if dim < 2:
        raise ValueError("descriptor dimension must be >= 2")

    def unit(v):
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    latents = unit(rng.normal(size=(num_shared, dim)))
    desc_a = np.zeros((m, dim))
    desc_b = np.zeros((n, dim))
    desc_a[:num_shared] = unit(latents + noise * rng.normal(size=(num_shared, dim)))
    desc_b[:num_shared] = unit(latents + noise * rng.normal(size=(num_shared, dim)))
    if m > num_shared:
        desc_a[num_shared:] = unit(rng.normal(size=(m - num_shared, dim)))
    if n > num_shared:
        desc_b[num_shared:] = unit(rng.normal(size=(n - num_shared, dim)))
    return desc_a.astype(np.float32), desc_b.astype(np.float32)


def synthesize_descriptors(sample: PairSample, dim: int, noise: float,
                           seed: int = 0):
    """Fresh descriptors for an existing sample's match structure."""
    rng = np.random.default_rng(seed)
    return synthesize_descriptors_arrays(
        len(sample.kps_a), len(sample.kps_b), sample.num_shared, dim, noise, rng)


def generate_dataset(config: SceneConfig, count: int) -> list[PairSample]:
    """A list of samples with seeds config.seed, config.seed+1, ..."""
    from dataclasses import replace
    return [generate_scene(replace(config, seed=config.seed + i))
            for i in range(count)]


# ---------------------------------------------------------------------------
# On-disk dataset (pair files + manifest)
# ---------------------------------------------------------------------------

def write_dataset(directory, config: SceneConfig, count: int) -> list[Path]:
    """Write pairs as keypoint-file pairs plus a labels sidecar per pair."""
    from .storage import save_keypoints
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(count):
        from dataclasses import replace
        sample = generate_scene(replace(config, seed=config.seed + i))
        stem = directory / f"pair_{i:05d}"
        save_keypoints(stem.with_name(stem.name + "_a.json"), sample.kps_a)
        save_keypoints(stem.with_name(stem.name + "_b.json"), sample.kps_b)
        sidecar = {
            "matches": sample.labels.matches.tolist(),
            "non_repeatable_a": sample.labels.non_repeatable_a.tolist(),
            "non_repeatable_b": sample.labels.non_repeatable_b.tolist(),
            "num_a": sample.labels.num_a,
            "num_b": sample.labels.num_b,
        }
        labels_path = stem.with_name(stem.name + "_labels.json")
        labels_path.write_text(json.dumps(sidecar))
        written.append(stem)
    manifest = {
        "count": count,
        "seed": config.seed,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(config).items()},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return written


def load_dataset(directory) -> list[PairSample]:
    """Load pairs written by write_dataset (labels from the sidecars)."""
    from .storage import load_keypoints
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    samples = []
    for i in range(manifest["count"]):
        stem = directory / f"pair_{i:05d}"
        kps_a = load_keypoints(f"{stem}_a.json")
        kps_b = load_keypoints(f"{stem}_b.json")
        sidecar_path = Path(f"{stem}_labels.json")
        if not sidecar_path.exists():
            raise FileNotFoundError(f"missing labels sidecar {sidecar_path}")
        raw = json.loads(sidecar_path.read_text())
        labels = GroundTruthLabels(
            matches=np.array(raw["matches"], dtype=np.int64).reshape(-1, 2),
            non_repeatable_a=np.array(raw["non_repeatable_a"], dtype=np.int64),
            non_repeatable_b=np.array(raw["non_repeatable_b"], dtype=np.int64),
            num_a=raw["num_a"], num_b=raw["num_b"],
        )
        samples.append(PairSample(kps_a, kps_b,
                                  proj_a_to_b=np.zeros((labels.num_a, 2)),
                                  proj_b_to_a=np.zeros((labels.num_b, 2)),
                                  labels=labels, num_shared=len(labels.matches)))
    return samples

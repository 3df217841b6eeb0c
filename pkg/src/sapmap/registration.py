"""Scale-resolving registration of SfM camera trajectories against SLAM
subtrajectories.

An SfM reconstruction lives in its own arbitrary-scale frame; matching its
camera positions against the temporally corresponding SLAM poses and solving
the closed-form least-squares similarity (Umeyama) recovers the metric scale
and places the cameras, and any dense cloud exported with them, in the map
frame.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .core import (PointCloud, Pose, SimilarityTransform, Trajectory,
                   quat_from_matrix, quat_multiply, quat_normalize)
from .errors import AssociationError, DegenerateGeometryError, FrameMismatchError

COPLANARITY_RATIO = 1e-3
COLLINEARITY_RATIO = 1e-8


@dataclass(frozen=True)
class Subtrajectory:
    """Slice of a session trajectory covering one sapling's capture window."""

    sapling_id: str
    session_id: str
    poses: Trajectory
    source_span: tuple

    def __len__(self):
        return len(self.poses)


def extract_subtrajectory(traj: Trajectory, t_start: float, t_end: float,
                          sapling_id: str = "", session_id: str = "") -> Subtrajectory:
    """All poses with timestamp in [t_start, t_end], order preserved."""
    if not t_start < t_end:
        raise ValueError(f"t_start {t_start} must be before t_end {t_end}")
    selected = tuple(p for p in traj.poses if t_start <= p.timestamp <= t_end)
    if not selected:
        raise AssociationError(
            f"window [{t_start}, {t_end}] contains no poses "
            f"(trajectory spans [{traj.start_time}, {traj.end_time}])"
        )
    return Subtrajectory(
        sapling_id=sapling_id,
        session_id=session_id,
        poses=Trajectory(traj.frame_id, selected),
        source_span=(float(t_start), float(t_end)),
    )


def umeyama(source, target, with_scale: bool = True) -> SimilarityTransform:
    """Closed-form least-squares similarity mapping `source` onto `target`.

    Scale comes from the ratio of the covariance trace to the source
    variance, rotation from the SVD of the cross-covariance with determinant
    correction, translation from the centroids. With ``with_scale=False`` the
    scale is pinned to 1 (rigid fit).

    Raises :class:`DegenerateGeometryError` when the source points are all
    coincident (or coincident up to a line, where the rotation about that
    line is unobservable).
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape:
        raise ValueError(f"point set shapes differ: {src.shape} vs {dst.shape}")
    if src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected (n, 3) point arrays, got {src.shape}")
    n = src.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 point pairs, got {n}")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    var_src = (src_c ** 2).sum() / n
    cov = dst_c.T @ src_c / n

    u_svd, d_svd, vt = np.linalg.svd(cov)
    if d_svd[0] <= 0.0 or d_svd[1] / d_svd[0] < COLLINEARITY_RATIO:
        raise DegenerateGeometryError(
            "source/target correspondences are collinear or coincident; "
            "the rotation is not uniquely determined"
        )
    s_diag = np.ones(3)
    if np.linalg.det(u_svd) * np.linalg.det(vt) < 0:
        s_diag[2] = -1.0
    rot = u_svd @ np.diag(s_diag) @ vt

    if with_scale:
        if var_src <= 0.0:
            raise DegenerateGeometryError(
                "zero source variance: scale is unobservable"
            )
        scale = float((d_svd * s_diag).sum() / var_src)
        if scale <= 0.0:
            raise DegenerateGeometryError(f"non-positive fitted scale {scale}")
    else:
        scale = 1.0
    translation = mu_dst - scale * rot @ mu_src
    return SimilarityTransform(scale, quat_from_matrix(rot), translation)


def singular_value_ratio(points) -> float:
    """Smallest/largest singular value of the centred point set; a coplanarity
    diagnostic (near-zero means the points lie close to a plane)."""
    pts = np.asarray(points, dtype=float)
    centred = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centred, compute_uv=False)
    if svals[0] == 0.0:
        return 0.0
    return float(svals[-1] / svals[0])


@dataclass(frozen=True)
class RegistrationResult:
    """Similarity transform from the SfM frame into the map frame plus the
    aligned camera trajectory and fit diagnostics."""

    transform: SimilarityTransform
    rms_residual: float
    pair_count: int
    aligned: Trajectory
    coplanar_warning: bool = False

    def __post_init__(self):
        if self.pair_count < 3:
            raise ValueError(f"pair_count must be >= 3, got {self.pair_count}")


def _match_by_timestamp(sfm: Trajectory, sub: Trajectory, max_gap: float):
    """Index pairs (sfm_i, slam_j) of nearest-timestamp matches within max_gap."""
    sfm_t = sfm.timestamps
    slam_t = sub.timestamps
    idx = np.searchsorted(slam_t, sfm_t)
    if len(slam_t) > 1:
        idx = np.clip(idx, 1, len(slam_t) - 1)
        left = slam_t[idx - 1]
        right = slam_t[idx]
        idx = np.where(np.abs(sfm_t - left) <= np.abs(right - sfm_t), idx - 1, idx)
    else:
        idx = np.zeros_like(idx)
    gaps = np.abs(slam_t[idx] - sfm_t)
    keep = np.nonzero(gaps <= max_gap)[0]
    return keep, idx[keep]


def register_sfm(sfm: Trajectory, slam_sub: Subtrajectory,
                 max_gap: float = 0.05, with_scale: bool = True) -> RegistrationResult:
    """Register an SfM trajectory onto a SLAM subtrajectory.

    Positions of temporally matched pose pairs feed the Umeyama fit
    (orientations are not used: conventions differ between SfM tools); the
    recovered similarity is then applied to every SfM pose, composing
    rotations and scaling/rotating translations. A nearly coplanar camera
    path (common for dome-shaped captures) sets ``coplanar_warning`` instead
    of failing.
    """
    sfm_keep, slam_idx = _match_by_timestamp(sfm, slam_sub.poses, max_gap)
    if len(sfm_keep) < 3:
        raise AssociationError(
            f"only {len(sfm_keep)} SfM poses matched the subtrajectory within "
            f"{max_gap} s; need at least 3"
        )
    src = sfm.positions[sfm_keep]
    dst = slam_sub.poses.positions[slam_idx]
    transform = umeyama(src, dst, with_scale=with_scale)
    transform = SimilarityTransform(
        transform.scale, transform.rotation, transform.translation,
        source_frame=sfm.frame_id, target_frame=slam_sub.poses.frame_id,
    )

    coplanar = singular_value_ratio(src) < COPLANARITY_RATIO
    if coplanar:
        warnings.warn(
            "SfM camera positions are nearly coplanar; the fitted similarity "
            "may be weakly conditioned",
            stacklevel=2,
        )

    residuals = transform.apply(src) - dst
    rms = float(np.sqrt((residuals ** 2).sum(axis=1).mean()))

    q_t = transform.rotation
    aligned_poses = tuple(
        Pose(
            p.timestamp,
            quat_normalize(quat_multiply(q_t, p.rotation)),
            transform.apply(p.translation),
        )
        for p in sfm.poses
    )
    aligned = Trajectory(slam_sub.poses.frame_id, aligned_poses)
    return RegistrationResult(
        transform=transform,
        rms_residual=rms,
        pair_count=int(len(sfm_keep)),
        aligned=aligned,
        coplanar_warning=bool(coplanar),
    )


def transform_cloud(cloud: PointCloud, t: SimilarityTransform,
                    target_frame: str) -> PointCloud:
    """Map every point through `t`; colors survive untouched and the frame tag
    is replaced. The cloud's tag must match the transform's source frame when
    the transform carries one."""
    if t.source_frame is not None and cloud.frame_id != t.source_frame:
        raise FrameMismatchError(
            f"cloud is in frame {cloud.frame_id!r} but transform maps from "
            f"{t.source_frame!r}"
        )
    return PointCloud(t.apply(cloud.points), cloud.colors, target_frame)

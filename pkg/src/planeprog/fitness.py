"""Matching loss for a candidate program, with analytic gradients.

The score of a program is the sum over adjacent-index centroid pairs of
the squared feature difference; sampling is bilinear, so the loss is
piecewise differentiable in every continuous parameter.

Two evaluation forms are provided:

* ``eval_loss`` scores a program directly against an (already
  fronto-parallel) feature map — the identity-pose special case;
* ``eval_loss_posed`` / ``eval_loss_grad`` score a (program, pose) pair
  against the *unwarped* feature map by composing coordinates: each
  fronto-parallel centroid p is sampled at H(pose) @ p in the original
  map. Differentiation passes through the projection, so pose gradients
  are exact for the evaluated function and no per-step re-warping of the
  map is needed. With an identity pose both forms agree to float
  round-off.

Pairs with any off-canvas sample are skipped; a candidate with fewer
than MIN_PAIRS scored pairs raises NotScoreableError. A candidate whose
sampled support carries (almost) no texture — variance of the feature
vectors at centroids and pair midpoints below a floor — is flagged
``degenerate``: a blank region matches itself perfectly and must not win
model selection. The floor adapts to the map's overall contrast so a
noise-level "texture" does not slip through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, CameraPose, project_with_jacobians
from .dsl import (
    CentroidSet,
    PlaneProgram,
    centroid_positions,
    generate_centroids,
    neighbor_pairs,
    validate_program,
)
from .tensor import FeatureMap, bilinear_sample_grad_many, bilinear_sample_many

MIN_PAIRS = 4
TEXTURE_FLOOR_ABS = 1e-6
TEXTURE_FLOOR_REL = 0.01
# Guard probes sit at this fraction of the program's smallest
# displacement (clamped), so they land on the repeated object's slope
# at any feature resolution.
GUARD_PROBE_FRAC = 0.15
GUARD_PROBE_MIN_PX = 1.25
GUARD_PROBE_MAX_PX = 6.0


class NotScoreableError(ValueError):
    """Candidate has too few valid pairs to be scored at all."""


@dataclass(frozen=True)
class LossReport:
    raw: float
    normalized: float
    pair_count: int
    valid_fraction: float
    texture_energy: float
    degenerate: bool


def map_texture_variance(fmap: FeatureMap) -> float:
    """Total per-pixel variance of the map (channels summed); the
    reference scale for the degeneracy floor."""
    data = fmap.data.astype(np.float64)
    return float(data.var(axis=(1, 2)).sum())


def param_vector(prog: PlaneProgram) -> np.ndarray:
    """Continuous program parameters in their documented order."""
    p = prog.params
    if prog.structure == "lattice":
        return np.array([p.x0, p.y0, p.dx1, p.dy1, p.dx2, p.dy2], dtype=np.float64)
    if prog.structure == "circular":
        return np.array([p.cx, p.cy, p.r, p.theta0, p.dtheta], dtype=np.float64)
    return np.array([p.cx, p.cy, p.r0, p.dr, p.theta0, p.dtheta], dtype=np.float64)


def program_from_vector(structure: str, vec) -> PlaneProgram:
    v = [float(t) for t in vec]
    if structure == "lattice":
        return PlaneProgram.lattice(*v)
    if structure == "circular":
        return PlaneProgram.circular(*v)
    return PlaneProgram.hybrid(*v)


def _min_displacement(prog: PlaneProgram) -> float:
    p = prog.params
    if prog.structure == "lattice":
        return min(math.hypot(p.dx1, p.dy1), math.hypot(p.dx2, p.dy2))
    if prog.structure == "circular":
        return 2.0 * p.r * math.sin(math.radians(min(p.dtheta, 180.0)) / 2.0)
    chord = 2.0 * (p.r0 + p.dr) * math.sin(math.radians(min(p.dtheta, 180.0)) / 2.0)
    return min(chord, p.dr)


def _pair_indices(cs: CentroidSet, prog: PlaneProgram) -> np.ndarray:
    lookup = cs.index_of()
    pairs = neighbor_pairs(cs, prog)
    if not pairs:
        return np.zeros((0, 2), dtype=np.intp)
    return np.array([(lookup[a], lookup[b]) for a, b in pairs], dtype=np.intp)


def _centroid_position_grads(prog: PlaneProgram, indices: np.ndarray) -> np.ndarray:
    """d(centroid position)/d(program params): (N, 2, P)."""
    ii = indices[:, 0].astype(np.float64)
    jj = indices[:, 1].astype(np.float64)
    n = len(indices)
    p = prog.params
    deg = math.pi / 180.0
    if prog.structure == "lattice":
        g = np.zeros((n, 2, 6))
        g[:, 0, 0] = 1.0  # x0
        g[:, 1, 1] = 1.0  # y0
        g[:, 0, 2] = ii   # dx1
        g[:, 1, 3] = ii   # dy1
        g[:, 0, 4] = jj   # dx2
        g[:, 1, 5] = jj   # dy2
        return g
    ang = deg * (p.theta0 + ii * p.dtheta)
    ca, sa = np.cos(ang), np.sin(ang)
    if prog.structure == "circular":
        g = np.zeros((n, 2, 5))
        rad = p.r
        g[:, 0, 2] = ca   # r
        g[:, 1, 2] = sa
        tang = 3
    else:
        g = np.zeros((n, 2, 6))
        rad = p.r0 + jj * p.dr
        g[:, 0, 2] = ca        # r0
        g[:, 1, 2] = sa
        g[:, 0, 3] = jj * ca   # dr
        g[:, 1, 3] = jj * sa
        tang = 4
    g[:, 0, 0] = 1.0  # cx
    g[:, 1, 1] = 1.0  # cy
    g[:, 0, tang] = -rad * sa * deg      # theta0
    g[:, 1, tang] = rad * ca * deg
    g[:, 0, tang + 1] = -rad * sa * deg * ii  # dtheta
    g[:, 1, tang + 1] = rad * ca * deg * ii
    return g


def _evaluate(
    fmap: FeatureMap,
    prog: PlaneProgram,
    pose: CameraPose | None,
    intr: CameraIntrinsics | None,
    want_grad: bool,
    texture_ref: float | None,
    frozen=None,
    want_support: bool = False,
    want_guard: bool = True,
):
    if frozen is None:
        cs = generate_centroids(prog, fmap.width, fmap.height)
        pairs = _pair_indices(cs, prog)
        indices = np.array([(c.i, c.j) for c in cs.points], dtype=np.intp).reshape(-1, 2)
        pos = cs.xy()
    else:
        # Frozen support: positions recomputed for a fixed index set and
        # pair family, with no canvas filtering. Every frozen pair must
        # stay sampleable or the evaluation is rejected, so local descent
        # cannot profit by pushing pairs off-canvas.
        validate_program(prog, fmap.width, fmap.height)
        indices, pairs = frozen
        pos = centroid_positions(prog, indices[:, 0], indices[:, 1])
        cs = None
    total_pairs = len(pairs)
    if total_pairs < MIN_PAIRS:
        raise NotScoreableError(f"only {total_pairs} neighbor pairs on this canvas")

    if pose is not None:
        s, j_pose, j_spatial, depth = project_with_jacobians(pose, intr, pos)
        usable = depth > 1e-9
        s = np.where(usable[:, None], s, -1.0)
    else:
        s = pos
        j_pose = j_spatial = None
        usable = np.ones(len(pos), dtype=bool)

    if want_grad:
        vals, gx, gy, inside = bilinear_sample_grad_many(fmap, s)
    else:
        vals, inside = bilinear_sample_many(fmap, s)
        gx = gy = None
    ok = inside & usable

    a, b = pairs[:, 0], pairs[:, 1]
    pair_ok = ok[a] & ok[b]
    pair_count = int(pair_ok.sum())
    if pair_count < MIN_PAIRS:
        raise NotScoreableError(f"only {pair_count} of {total_pairs} pairs are scoreable")
    if frozen is not None and pair_count < total_pairs:
        raise NotScoreableError("a frozen pair left the sampleable region")
    a, b = a[pair_ok], b[pair_ok]

    diff = vals[a] - vals[b]  # (P, C)
    raw = float((diff**2).sum())
    channels = fmap.channels
    normalized = raw / (pair_count * channels)
    valid_fraction = pair_count / total_pairs

    # Texture-energy guard. A blank region matches itself perfectly, so
    # low loss only means something when the compared samples sit *on*
    # repeated structure. For every centroid feeding a scored pair,
    # measure the local contrast (variance of the sample and four probes
    # offset by +-GUARD_PROBE_PX); a pair counts as textured only if both
    # endpoints do, and the candidate's texture energy is the median over
    # its pairs, so a majority of blank pairs is fatal.
    if want_guard:
        used = np.unique(np.concatenate([a, b]))
        delta = min(max(GUARD_PROBE_FRAC * _min_displacement(prog), GUARD_PROBE_MIN_PX), GUARD_PROBE_MAX_PX)
        offsets = np.array([(0.0, 0.0), (delta, 0.0), (-delta, 0.0), (0.0, delta), (0.0, -delta)])
        probes = (pos[used][:, None, :] + offsets[None, :, :]).reshape(-1, 2)
        if pose is not None:
            probe_s, _, _, probe_depth = project_with_jacobians(pose, intr, probes)
            probe_s = np.where((probe_depth > 1e-9)[:, None], probe_s, -1.0)
        else:
            probe_s = probes
        probe_vals, probe_ok = bilinear_sample_many(fmap, probe_s)
        probe_vals = probe_vals.reshape(len(used), len(offsets), channels)
        probe_ok = probe_ok.reshape(len(used), len(offsets))
        cnt = probe_ok.sum(axis=1).astype(np.float64)
        mean = (probe_vals * probe_ok[:, :, None]).sum(axis=1) / np.maximum(cnt, 1.0)[:, None]
        dev = ((probe_vals - mean[:, None, :]) ** 2).sum(axis=2) * probe_ok
        local_var = np.where(cnt >= 2, dev.sum(axis=1) / np.maximum(cnt, 1.0), 0.0)
        local_of = np.zeros(len(pos))
        local_of[used] = local_var
        per_pair = np.minimum(local_of[a], local_of[b])
        texture_energy = float(np.median(per_pair))
        ref = map_texture_variance(fmap) if texture_ref is None else texture_ref
        degenerate = texture_energy < max(TEXTURE_FLOOR_ABS, TEXTURE_FLOOR_REL * ref)
    else:
        texture_energy = math.inf
        degenerate = False

    report = LossReport(raw, normalized, pair_count, valid_fraction, texture_energy, degenerate)
    support = (indices, pairs[pair_ok]) if want_support else None
    if not want_grad:
        return report, None, support

    # d(raw)/d(sample position), accumulated per centroid.
    d_pos = np.zeros((len(pos), 2))
    gxa = (2.0 * diff * gx[a]).sum(axis=1)
    gya = (2.0 * diff * gy[a]).sum(axis=1)
    gxb = (-2.0 * diff * gx[b]).sum(axis=1)
    gyb = (-2.0 * diff * gy[b]).sum(axis=1)
    np.add.at(d_pos[:, 0], a, gxa)
    np.add.at(d_pos[:, 1], a, gya)
    np.add.at(d_pos[:, 0], b, gxb)
    np.add.at(d_pos[:, 1], b, gyb)

    par_g = _centroid_position_grads(prog, indices)
    if pose is not None:
        pose_grad = np.einsum("nk,nkq->q", d_pos, j_pose)
        d_fp = np.einsum("nk,nkq->nq", d_pos, j_spatial)
    else:
        pose_grad = np.zeros(2)
        d_fp = d_pos
    param_grad = np.einsum("nq,nqp->p", d_fp, par_g)

    grad = np.concatenate([pose_grad, param_grad]) / (pair_count * channels)
    return report, grad, support


def eval_loss(
    f_fp: FeatureMap, prog: PlaneProgram, texture_ref: float | None = None
) -> LossReport:
    """Score a program against a fronto-parallel feature map."""
    report, _, _ = _evaluate(f_fp, prog, None, None, False, texture_ref)
    return report


def eval_loss_posed(
    fmap: FeatureMap,
    prog: PlaneProgram,
    pose: CameraPose,
    intr: CameraIntrinsics,
    texture_ref: float | None = None,
) -> LossReport:
    """Score a (program, pose) pair against the unwarped feature map."""
    report, _, _ = _evaluate(fmap, prog, pose, intr, False, texture_ref)
    return report


def eval_loss_grad(
    fmap: FeatureMap,
    prog: PlaneProgram,
    pose: CameraPose,
    intr: CameraIntrinsics,
    texture_ref: float | None = None,
) -> tuple[LossReport, np.ndarray]:
    """Loss plus its gradient over [rx, ry, *program params].

    Parameter order matches :func:`param_vector`; angle entries are in
    degrees and pixel entries in feature pixels. The centroid index set
    and the valid-pair set are held fixed (the loss is piecewise smooth
    across changes in either).
    """
    report, grad, _ = _evaluate(fmap, prog, pose, intr, True, texture_ref)
    return report, grad


def scoreable_support(
    fmap: FeatureMap,
    prog: PlaneProgram,
    pose: CameraPose,
    intr: CameraIntrinsics,
    texture_ref: float | None = None,
):
    """Report plus the (indices, pairs) support actually scored; the
    support can be frozen and passed to the ``*_frozen`` evaluators."""
    report, _, support = _evaluate(fmap, prog, pose, intr, False, texture_ref, want_support=True)
    return report, support


def eval_frozen(fmap, prog, pose, intr, frozen, texture_ref=None) -> LossReport:
    """Loss on a frozen support; skips the texture guard (descent keeps
    its support fixed, so the start's guard verdict stands throughout)."""
    report, _, _ = _evaluate(fmap, prog, pose, intr, False, texture_ref, frozen=frozen, want_guard=False)
    return report


def eval_frozen_grad(fmap, prog, pose, intr, frozen, texture_ref=None):
    report, grad, _ = _evaluate(
        fmap, prog, pose, intr, True, texture_ref, frozen=frozen, want_guard=False
    )
    return report, grad

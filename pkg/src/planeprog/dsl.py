"""Plane-layout programs: lattice, circular and hybrid repetition.

A program places object centroids on a fronto-parallel canvas:

* lattice:  c(i, j) = (x0, y0) + i * (dx1, dy1) + j * (dx2, dy2)
* circular: c(i)    = (cx, cy) + r * (cos a_i, sin a_i),
            a_i = theta0 + i * dtheta, enumerated while i * dtheta < 360
* hybrid:   c(i, j) = (cx, cy) + (r0 + j * dr) * (cos a_i, sin a_i)

Angles are degrees; with the package's y-down convention positive angles
sweep clockwise on screen. Loop bounds are never searched: they are
derived from the canvas size so the pattern covers the whole plane, and
centroids falling outside [0, W) x [0, H) are dropped.

Degeneracy guard: displacements shorter than D_MIN_FRACTION of the small
canvas side are rejected (shrinking displacements to zero makes any
match score perfect); circular steps are held to the same bound through
the chord length 2 r sin(dtheta / 2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Iterable, NamedTuple

import numpy as np

D_MIN_FRACTION = 0.05
ANGLE_CLOSURE_TOL = 1e-6  # degrees: dtheta "divides 360" within this


class DegenerateProgramError(ValueError):
    """Program parameters violate a degeneracy guard for this canvas."""


class ProgramJSONError(ValueError):
    """Base class for program-JSON parse failures."""


class UnknownStructureError(ProgramJSONError):
    pass


class MissingFieldError(ProgramJSONError):
    pass


class InvalidValueError(ProgramJSONError):
    pass


@dataclass(frozen=True)
class LatticeParams:
    x0: float
    y0: float
    dx1: float
    dy1: float
    dx2: float
    dy2: float


@dataclass(frozen=True)
class CircularParams:
    cx: float
    cy: float
    r: float
    theta0: float
    dtheta: float


@dataclass(frozen=True)
class HybridParams:
    cx: float
    cy: float
    r0: float
    dr: float
    theta0: float
    dtheta: float


_PARAM_TYPES = {"lattice": LatticeParams, "circular": CircularParams, "hybrid": HybridParams}
STRUCTURES = tuple(_PARAM_TYPES)


@dataclass(frozen=True)
class PlaneProgram:
    """Tagged union of the three repetition structures."""

    structure: str
    params: LatticeParams | CircularParams | HybridParams

    def __post_init__(self):
        expected = _PARAM_TYPES.get(self.structure)
        if expected is None:
            raise ValueError(f"unknown structure {self.structure!r}")
        if not isinstance(self.params, expected):
            raise TypeError(f"{self.structure} program needs {expected.__name__}")

    @classmethod
    def lattice(cls, x0, y0, dx1, dy1, dx2, dy2) -> "PlaneProgram":
        return cls("lattice", LatticeParams(x0, y0, dx1, dy1, dx2, dy2))

    @classmethod
    def circular(cls, cx, cy, r, theta0, dtheta) -> "PlaneProgram":
        return cls("circular", CircularParams(cx, cy, r, theta0, dtheta))

    @classmethod
    def hybrid(cls, cx, cy, r0, dr, theta0, dtheta) -> "PlaneProgram":
        return cls("hybrid", HybridParams(cx, cy, r0, dr, theta0, dtheta))


class Centroid(NamedTuple):
    i: int
    j: int
    x: float
    y: float


@dataclass(frozen=True)
class CentroidSet:
    """Centroids with their loop indices; indices are unique."""

    points: tuple[Centroid, ...]

    def __post_init__(self):
        idx = [(c.i, c.j) for c in self.points]
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate loop indices in centroid set")

    def __len__(self) -> int:
        return len(self.points)

    def xy(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 2))
        return np.array([(c.x, c.y) for c in self.points], dtype=np.float64)

    def index_of(self) -> dict[tuple[int, int], int]:
        return {(c.i, c.j): k for k, c in enumerate(self.points)}


def d_min_for(width: int, height: int) -> float:
    return D_MIN_FRACTION * min(width, height)


def validate_program(prog: PlaneProgram, width: int, height: int) -> None:
    """Raise DegenerateProgramError unless the invariants hold on this canvas."""
    d_min = d_min_for(width, height)
    p = prog.params
    if prog.structure == "lattice":
        n1 = math.hypot(p.dx1, p.dy1)
        n2 = math.hypot(p.dx2, p.dy2)
        if n1 < d_min or n2 < d_min:
            raise DegenerateProgramError(
                f"displacement below d_min={d_min:.3f} (|v1|={n1:.3f}, |v2|={n2:.3f})"
            )
        cross = p.dx1 * p.dy2 - p.dy1 * p.dx2
        if abs(cross) < 1e-3 * n1 * n2:
            raise DegenerateProgramError("lattice displacement vectors are (near-)parallel")
    elif prog.structure == "circular":
        if p.r < d_min:
            raise DegenerateProgramError(f"radius {p.r:.3f} below d_min={d_min:.3f}")
        if not (0.0 < p.dtheta <= 180.0):
            raise DegenerateProgramError(f"dtheta must lie in (0, 180], got {p.dtheta}")
        chord = 2.0 * p.r * math.sin(math.radians(p.dtheta) / 2.0)
        if chord < d_min:
            raise DegenerateProgramError(
                f"arc chord {chord:.3f} below d_min={d_min:.3f} (r={p.r:.3f}, dtheta={p.dtheta:.3f})"
            )
    else:
        if p.r0 < 0.0:
            raise DegenerateProgramError(f"inner radius must be >= 0, got {p.r0}")
        if p.dr < d_min:
            raise DegenerateProgramError(f"radial step {p.dr:.3f} below d_min={d_min:.3f}")
        if not (0.0 < p.dtheta <= 180.0):
            raise DegenerateProgramError(f"dtheta must lie in (0, 180], got {p.dtheta}")
        outer = p.r0 + p.dr  # the guard must hold on some drawn ring
        chord = 2.0 * outer * math.sin(math.radians(p.dtheta) / 2.0)
        if chord < d_min:
            raise DegenerateProgramError(
                f"arc chord {chord:.3f} below d_min={d_min:.3f} at radius {outer:.3f}"
            )


def _angular_steps(dtheta: float) -> int:
    """Number of angular indices: all i >= 0 with i * dtheta < 360."""
    n = int(math.ceil(360.0 / dtheta)) if dtheta > 0 else 0
    while n * dtheta >= 360.0 - ANGLE_CLOSURE_TOL:
        n -= 1
    return n + 1


def closes_full_circle(dtheta: float) -> bool:
    turns = 360.0 / dtheta
    return abs(turns - round(turns)) * dtheta <= ANGLE_CLOSURE_TOL


def _inside(x: float, y: float, width: int, height: int) -> bool:
    return 0.0 <= x < width and 0.0 <= y < height


def generate_centroids(prog: PlaneProgram, width: int, height: int) -> CentroidSet:
    """Enumerate all loop indices whose centroid lies on the canvas.

    Lattice index ranges come from mapping the four canvas corners
    through the inverse of the displacement basis and taking the integer
    bounding box (with a one-step margin), then filtering.
    """
    validate_program(prog, width, height)
    p = prog.params
    pts: list[Centroid] = []

    if prog.structure == "lattice":
        basis = np.array([[p.dx1, p.dx2], [p.dy1, p.dy2]], dtype=np.float64)
        inv = np.linalg.inv(basis)
        corners = np.array(
            [[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]], dtype=np.float64
        )
        ij = (corners - np.array([p.x0, p.y0])) @ inv.T
        i_lo, j_lo = np.floor(ij.min(axis=0)).astype(int) - 1
        i_hi, j_hi = np.ceil(ij.max(axis=0)).astype(int) + 1
        for i in range(i_lo, i_hi + 1):
            for j in range(j_lo, j_hi + 1):
                x = p.x0 + i * p.dx1 + j * p.dx2
                y = p.y0 + i * p.dy1 + j * p.dy2
                if _inside(x, y, width, height):
                    pts.append(Centroid(i, j, x, y))
    elif prog.structure == "circular":
        for i in range(_angular_steps(p.dtheta)):
            a = math.radians(p.theta0 + i * p.dtheta)
            x = p.cx + p.r * math.cos(a)
            y = p.cy + p.r * math.sin(a)
            if _inside(x, y, width, height):
                pts.append(Centroid(i, 0, x, y))
    else:
        reach = math.hypot(max(p.cx, width - p.cx), max(p.cy, height - p.cy))
        j_hi = int(math.floor((reach - p.r0) / p.dr)) if reach >= p.r0 else -1
        for j in range(j_hi + 1):
            rad = p.r0 + j * p.dr
            for i in range(_angular_steps(p.dtheta)):
                a = math.radians(p.theta0 + i * p.dtheta)
                x = p.cx + rad * math.cos(a)
                y = p.cy + rad * math.sin(a)
                if _inside(x, y, width, height):
                    pts.append(Centroid(i, j, x, y))

    return CentroidSet(tuple(pts))


def centroid_positions(prog: PlaneProgram, ii, jj) -> np.ndarray:
    """Positions for explicit index arrays, without any canvas filtering."""
    ii = np.asarray(ii, dtype=np.float64)
    jj = np.asarray(jj, dtype=np.float64)
    p = prog.params
    if prog.structure == "lattice":
        x = p.x0 + ii * p.dx1 + jj * p.dx2
        y = p.y0 + ii * p.dy1 + jj * p.dy2
    else:
        rad = p.r if prog.structure == "circular" else p.r0 + jj * p.dr
        ang = np.radians(p.theta0 + ii * p.dtheta)
        x = p.cx + rad * np.cos(ang)
        y = p.cy + rad * np.sin(ang)
    return np.stack([x, y], axis=1)


IndexPair = tuple[tuple[int, int], tuple[int, int]]


def neighbor_pairs(cs: CentroidSet, prog: PlaneProgram) -> list[IndexPair]:
    """Adjacent-index pairs the fitness sum runs over.

    For every centroid (i, j) the pairs ((i, j), (i+1, j)) and
    ((i, j), (i, j+1)) are emitted when both endpoints exist. Circular
    and hybrid programs wrap the angular index (last back to first) when
    dtheta divides 360 exactly; circular programs have no second loop,
    so their (i, j+1) list is empty.
    """
    present = {(c.i, c.j) for c in cs.points}
    pairs: list[IndexPair] = []
    angular_wrap = 0
    if prog.structure in ("circular", "hybrid") and closes_full_circle(prog.params.dtheta):
        angular_wrap = _angular_steps(prog.params.dtheta)

    for i, j in sorted(present):
        ni = (i + 1, j)
        if ni in present:
            pairs.append(((i, j), ni))
        elif angular_wrap and i + 1 == angular_wrap and (0, j) in present and angular_wrap > 2:
            pairs.append(((i, j), (0, j)))
        if prog.structure != "circular":
            nj = (i, j + 1)
            if nj in present:
                pairs.append(((i, j), nj))
    return pairs


_SCHEMA_FIELDS = {s: tuple(f.name for f in fields(t)) for s, t in _PARAM_TYPES.items()}


def _require_number(obj: dict, key: str, where: str) -> float:
    if key not in obj:
        raise MissingFieldError(f"missing field {key!r} in {where}")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InvalidValueError(f"field {key!r} in {where} must be a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise InvalidValueError(f"field {key!r} in {where} is not finite")
    return v


def program_to_dict(prog: PlaneProgram, pose, loss: float | None = None) -> dict:
    doc = {
        "structure": prog.structure,
        "params": {name: getattr(prog.params, name) for name in _SCHEMA_FIELDS[prog.structure]},
        "pose": {"rx": pose.rx, "ry": pose.ry},
    }
    if loss is not None:
        doc["loss"] = float(loss)
    return doc


def serialize(prog: PlaneProgram, pose, loss: float | None = None) -> str:
    """JSON text for a (program, pose) pair; round-trips at full precision."""
    return json.dumps(program_to_dict(prog, pose, loss), indent=2) + "\n"


def program_from_dict(doc: dict):
    """Parse the dict form; returns (program, pose, loss-or-None)."""
    from .camera import CameraPose  # local import to avoid a cycle

    if not isinstance(doc, dict):
        raise ProgramJSONError("top level must be a JSON object")
    structure = doc.get("structure")
    if structure is None:
        raise MissingFieldError("missing field 'structure'")
    if structure not in _SCHEMA_FIELDS:
        raise UnknownStructureError(f"unknown structure {structure!r}")
    raw_params = doc.get("params")
    if raw_params is None:
        raise MissingFieldError("missing field 'params'")
    values = {name: _require_number(raw_params, name, "params") for name in _SCHEMA_FIELDS[structure]}
    prog = PlaneProgram(structure, _PARAM_TYPES[structure](**values))

    raw_pose = doc.get("pose")
    if raw_pose is None:
        raise MissingFieldError("missing field 'pose'")
    pose = CameraPose(
        _require_number(raw_pose, "rx", "pose"), _require_number(raw_pose, "ry", "pose")
    )
    loss = _require_number(doc, "loss", "program") if "loss" in doc else None
    return prog, pose, loss


def deserialize(text: str):
    """Inverse of :func:`serialize`; returns (program, pose)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProgramJSONError(f"invalid JSON: {e}") from e
    prog, pose, _ = program_from_dict(doc)
    return prog, pose


def centroids_to_list(cs: CentroidSet) -> list[dict]:
    return [{"i": c.i, "j": c.j, "x": c.x, "y": c.y} for c in cs.points]


def centroids_from_list(items: Iterable[dict]) -> CentroidSet:
    pts = []
    for n, item in enumerate(items):
        where = f"centroids[{n}]"
        i = int(_require_number(item, "i", where))
        j = int(_require_number(item, "j", where))
        pts.append(Centroid(i, j, _require_number(item, "x", where), _require_number(item, "y", where)))
    return CentroidSet(tuple(pts))

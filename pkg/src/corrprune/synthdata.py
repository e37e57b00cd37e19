"""Synthetic two-view scenes and the line-based match file format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correspondence import CorrespondenceSet
from .exceptions import ContractError, FrustumError, MatchFileError
from .geometry import essential_from_pose

MAX_RESAMPLE = 100


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene.

    Ranges are ``(low, high)``.  ``image_extent`` is the half-width of the
    square image footprint in normalized coordinates.
    """

    n_points: int = 512
    outlier_ratio: float = 0.5
    rotation_deg: tuple = (5.0, 30.0)
    baseline: tuple = (0.5, 1.5)
    depth: tuple = (2.0, 8.0)
    noise_sigma: float = 0.0
    image_extent: float = 2.0
    seed: int = 0

    def validate(self):
        if self.n_points < 16:
            raise ContractError("n_points must be >= 16")
        if not 0.0 <= self.outlier_ratio < 1.0:
            raise ContractError("outlier_ratio must lie in [0, 1)")
        for name in ("rotation_deg", "baseline", "depth"):
            lo, hi = getattr(self, name)
            if not (lo > 0 and hi >= lo):
                raise ContractError(f"{name} must be a positive range, got {(lo, hi)}")
        if self.noise_sigma < 0 or self.image_extent <= 0:
            raise ContractError("noise_sigma must be >= 0 and image_extent > 0")


@dataclass
class Scene:
    corr: CorrespondenceSet
    rotation: np.ndarray
    translation: np.ndarray


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def rotation_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * K @ K


def generate_scene(spec: SceneSpec) -> Scene:
    """Sample a pose, project 3-D points into both views, inject outliers."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    angle = math.radians(rng.uniform(*spec.rotation_deg))
    R = rotation_from_axis_angle(_unit(rng), angle)
    t = _unit(rng) * rng.uniform(*spec.baseline)
    w = spec.image_extent
    n = spec.n_points

    p1 = np.empty((n, 2))
    p2 = np.empty((n, 2))
    pending = np.arange(n)
    for _ in range(MAX_RESAMPLE):
        m = len(pending)
        uv = rng.uniform(-w, w, size=(m, 2))
        z = rng.uniform(*spec.depth, size=m)
        X1 = np.column_stack([uv * z[:, None], z])
        X2 = X1 @ R.T + t
        front = X2[:, 2] > 0
        proj = X2[:, :2] / np.where(front, X2[:, 2], 1.0)[:, None]
        ok = front & np.all(np.abs(proj) <= w, axis=1)
        p1[pending[ok]] = uv[ok]
        p2[pending[ok]] = proj[ok]
        pending = pending[~ok]
        if pending.size == 0:
            break
    else:
        raise FrustumError(f"{pending.size} points could not be placed in both frusta "
                           f"after {MAX_RESAMPLE} attempts")

    if spec.noise_sigma > 0:
        p1 = p1 + rng.normal(scale=spec.noise_sigma, size=p1.shape)
        p2 = p2 + rng.normal(scale=spec.noise_sigma, size=p2.shape)
    labels = np.ones(n, dtype=np.int8)
    n_out = math.ceil(spec.outlier_ratio * n - 1e-9)
    if n_out:
        rows = rng.choice(n, size=n_out, replace=False)
        p2[rows] = rng.uniform(-w, w, size=(n_out, 2))
        labels[rows] = 0
    corr = CorrespondenceSet(np.column_stack([p1, p2]), labels, essential_from_pose(R, t))
    return Scene(corr, R, t / np.linalg.norm(t))


def scene_seeds(seed, count):
    """Independent per-scene integer seeds derived from one base seed."""
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for s in ss.spawn(count)]


def generate_dataset(spec: SceneSpec, count, seed=None):
    base = spec.seed if seed is None else seed
    from dataclasses import replace
    return [generate_scene(replace(spec, seed=s)) for s in scene_seeds(base, count)]


# ------------------------------------------------------------------ file I/O

HEADER = "CORR v1"


def write_matches(path, corr: CorrespondenceSet):
    """Write a match file; floats use ``repr`` so reading back is bit-exact."""
    path = Path(path)
    head = f"{HEADER} N={len(corr)}"
    if corr.essential is not None:
        head += " E=" + ",".join(repr(float(v)) for v in corr.essential.ravel())
    lines = [head]
    for i, row in enumerate(corr.coords):
        cols = [repr(float(v)) for v in row]
        if corr.labels is not None:
            cols.append(str(int(corr.labels[i])))
        lines.append(" ".join(cols))
    path.write_text("\n".join(lines) + "\n")


def _parse_header(text, lineno):
    parts = text.split()
    if len(parts) < 3 or " ".join(parts[:2]) != HEADER or not parts[2].startswith("N="):
        raise MatchFileError(f"expected header '{HEADER} N=<n> [E=...]', got {text!r}", lineno)
    try:
        n = int(parts[2][2:])
    except ValueError:
        raise MatchFileError(f"bad row count {parts[2]!r}", lineno) from None
    E = None
    for extra in parts[3:]:
        if not extra.startswith("E="):
            raise MatchFileError(f"unexpected header field {extra!r}", lineno)
        vals = extra[2:].split(",")
        if len(vals) != 9:
            raise MatchFileError("E block needs 9 comma-separated values", lineno)
        try:
            E = np.array([float(v) for v in vals]).reshape(3, 3)
        except ValueError:
            raise MatchFileError("E block holds a non-numeric value", lineno) from None
    return n, E


def read_matches(path) -> CorrespondenceSet:
    """Parse a match file; ``#`` lines and blank lines are ignored."""
    header = None
    rows, labels = [], []
    label_mode = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            if header is None:
                header = _parse_header(text, lineno)
                continue
            cols = text.split()
            if len(cols) not in (4, 5):
                raise MatchFileError(f"row {len(rows) + 1} has {len(cols)} columns, expected 4 or 5",
                                     lineno)
            has_label = len(cols) == 5
            if label_mode is None:
                label_mode = has_label
            elif label_mode != has_label:
                raise MatchFileError(f"row {len(rows) + 1} mixes labelled and unlabelled rows", lineno)
            try:
                rows.append([float(c) for c in cols[:4]])
                if has_label:
                    labels.append(int(cols[4]))
            except ValueError:
                raise MatchFileError(f"row {len(rows) + 1} holds a non-numeric value", lineno) from None
    if header is None:
        raise MatchFileError("missing header", 1)
    n, E = header
    if len(rows) != n:
        raise MatchFileError(f"header declares {n} rows but file holds {len(rows)}")
    try:
        return CorrespondenceSet(np.array(rows, dtype=np.float64).reshape(n, 4),
                                 np.array(labels) if label_mode else None, E)
    except ValueError as err:
        raise MatchFileError(str(err)) from None


PREDICTION_COLUMNS = "# columns: x y x' y' {}p"


def write_predictions(path, corr: CorrespondenceSet, probabilities):
    """Match file of kept rows with the inlier probability as last column.

    A comment line names the columns so the extra column cannot be mistaken
    for a label.
    """
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if p.shape != (len(corr),):
        raise ContractError("one probability per row is required")
    head = f"{HEADER} N={len(corr)}"
    if corr.essential is not None:
        head += " E=" + ",".join(repr(float(v)) for v in corr.essential.ravel())
    lines = [head, PREDICTION_COLUMNS.format("label " if corr.labels is not None else "")]
    for i, row in enumerate(corr.coords):
        cols = [repr(float(v)) for v in row]
        if corr.labels is not None:
            cols.append(str(int(corr.labels[i])))
        cols.append(repr(float(p[i])))
        lines.append(" ".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


def read_predictions(path):
    """``(CorrespondenceSet, probabilities)`` from :func:`write_predictions` output."""
    with open(path) as fh:
        text = fh.read().splitlines()
    body = [t for t in text if t.strip() and not t.lstrip().startswith("#")]
    marker = [t.strip() for t in text if t.strip().startswith("# columns:")]
    if not body or not marker:
        raise MatchFileError("not a prediction file (missing header or column line)", 1)
    labelled = "label" in marker[0]
    n, E = _parse_header(body[0], 1)
    rows, labels, probs = [], [], []
    width = 6 if labelled else 5
    for j, line in enumerate(body[1:], 1):
        cols = line.split()
        if len(cols) != width:
            raise MatchFileError(f"row {j} has {len(cols)} columns, expected {width}")
        try:
            rows.append([float(c) for c in cols[:4]])
            if labelled:
                labels.append(int(cols[4]))
            probs.append(float(cols[-1]))
        except ValueError:
            raise MatchFileError(f"row {j} holds a non-numeric value") from None
    if len(rows) != n:
        raise MatchFileError(f"header declares {n} rows but file holds {len(rows)}")
    corr = CorrespondenceSet(np.array(rows, dtype=np.float64).reshape(n, 4),
                             np.array(labels) if labelled else None, E)
    return corr, np.array(probs)

"""4-D navigation actions: bounds normalization and frame transforms.

An action is ``(dx, dy, sin_dphi, cos_dphi)``. Chunks emitted by the policy
are expressed in the frame of the robot at the start of the chunk ("global");
the world model consumes per-step body-frame ("local") actions.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterable, Union

import numpy as np

ACTION_DIM = 4
DX, DY, SIN, COS = range(ACTION_DIM)
DIM_NAMES = ("dx", "dy", "sin_dphi", "cos_dphi")


class Frame(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


class FrameError(ValueError):
    """Chunk has the wrong frame or normalization flag for the operation."""


class DegenerateBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class ActionChunk:
    values: np.ndarray  # (H, 4)
    frame: Frame
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != ACTION_DIM or v.shape[0] < 1:
            raise ValueError(f"action chunk must have shape (H>=1, 4), got {v.shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "frame", Frame(self.frame))

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.values.shape[0]


def _require(chunk: ActionChunk, frame: Frame | None = None, normalized: bool | None = None):
    if frame is not None and chunk.frame != frame:
        raise FrameError(f"expected a {frame.value}-frame chunk, got {chunk.frame.value}")
    if normalized is not None and chunk.normalized != normalized:
        state = "normalized" if normalized else "physical"
        raise FrameError(f"expected a {state} chunk")


@dataclass(frozen=True)
class ActionBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(ACTION_DIM)
        hi = np.asarray(self.upper, dtype=float).reshape(ACTION_DIM)
        bad = np.flatnonzero(~(lo < hi))
        if bad.size:
            raise DegenerateBoundsError(
                f"degenerate dimension {DIM_NAMES[bad[0]]}: lower={lo[bad[0]]} upper={hi[bad[0]]}"
            )
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionBounds":
        return cls(np.array(d["lower"], dtype=float), np.array(d["upper"], dtype=float))


ChunkData = Union[np.ndarray, Iterable[ActionChunk]]


def _stack_actions(dataset: ChunkData) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return dataset.reshape(-1, ACTION_DIM)
    rows = []
    for chunk in dataset:
        if isinstance(chunk, ActionChunk):
            _require(chunk, normalized=False)
            rows.append(chunk.values)
        else:
            rows.append(np.asarray(chunk, dtype=float).reshape(-1, ACTION_DIM))
    if not rows:
        raise ValueError("empty action dataset")
    return np.concatenate(rows, axis=0)


def compute_bounds(dataset: ChunkData, low_pct: float = 1.0, high_pct: float = 99.0) -> ActionBounds:
    """Per-dimension 1st/99th percentile bounds (linear interpolation)."""
    data = _stack_actions(dataset)
    for i in range(ACTION_DIM):
        if np.all(data[:, i] == data[0, i]):
            raise DegenerateBoundsError(f"degenerate dimension {DIM_NAMES[i]}: all values equal")
    lower = np.percentile(data, low_pct, axis=0, method="linear")
    upper = np.percentile(data, high_pct, axis=0, method="linear")
    return ActionBounds(lower, upper)


def normalize_array(values: np.ndarray, bounds: ActionBounds) -> np.ndarray:
    scaled = 2.0 * (values - bounds.lower) / (bounds.upper - bounds.lower) - 1.0
    return np.clip(scaled, -1.0, 1.0)


def denormalize_array(values: np.ndarray, bounds: ActionBounds) -> np.ndarray:
    return bounds.lower + (values + 1.0) * 0.5 * (bounds.upper - bounds.lower)


def normalize(chunk: ActionChunk, bounds: ActionBounds) -> ActionChunk:
    _require(chunk, normalized=False)
    return replace(chunk, values=normalize_array(chunk.values, bounds), normalized=True)


def denormalize(chunk: ActionChunk, bounds: ActionBounds) -> ActionChunk:
    _require(chunk, normalized=True)
    return replace(chunk, values=denormalize_array(chunk.values, bounds), normalized=False)


def step_rotations(values: np.ndarray) -> np.ndarray:
    """Per-step heading change recovered with atan2 (tolerates non-unit pairs)."""
    return np.arctan2(values[..., SIN], values[..., COS])


def accumulate_headings(chunk: ActionChunk) -> np.ndarray:
    """Heading of each step relative to the chunk start; the first is always 0."""
    _require(chunk, frame=Frame.GLOBAL, normalized=False)
    return _cumulative_headings(chunk.values)


def _cumulative_headings(values: np.ndarray) -> np.ndarray:
    dphi = step_rotations(values)
    phi = np.zeros_like(dphi)
    phi[1:] = np.cumsum(dphi[:-1])
    return phi


def _rotate(values: np.ndarray, phi: np.ndarray, inverse: bool) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    dx, dy = values[:, DX], values[:, DY]
    out = values.copy()
    if inverse:
        out[:, DX] = c * dx - s * dy
        out[:, DY] = s * dx + c * dy
    else:
        out[:, DX] = c * dx + s * dy
        out[:, DY] = -s * dx + c * dy
    return out


def global_to_local(chunk: ActionChunk) -> ActionChunk:
    _require(chunk, frame=Frame.GLOBAL, normalized=False)
    phi = _cumulative_headings(chunk.values)
    return replace(chunk, values=_rotate(chunk.values, phi, inverse=False), frame=Frame.LOCAL)


def local_to_global(chunk: ActionChunk) -> ActionChunk:
    _require(chunk, frame=Frame.LOCAL, normalized=False)
    # headings only depend on the rotation columns, which the transform leaves untouched
    phi = _cumulative_headings(chunk.values)
    return replace(chunk, values=_rotate(chunk.values, phi, inverse=True), frame=Frame.GLOBAL)


def to_planner_space(chunk: ActionChunk, bounds: ActionBounds) -> ActionChunk:
    """The policy-to-world-model map: local frame, then bounds normalization."""
    return normalize(global_to_local(chunk), bounds)

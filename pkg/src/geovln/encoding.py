"""Angle embeddings and per-modality feature assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import MODALITIES, N_VIEWS, Observation, grid_angles


def angle_embedding(heading: float, elevation: float, repeat: int = 8) -> np.ndarray:
    """``(sin h, cos h, sin e, cos e)`` tiled ``repeat`` times (degrees in)."""
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    h = math.radians(heading % 360.0)
    e = math.radians(elevation % 360.0)
    return np.tile(np.array([math.sin(h), math.cos(h), math.sin(e), math.cos(e)]), repeat)


def stop_angle_embedding(repeat: int = 8) -> np.ndarray:
    return np.zeros(4 * repeat)


@dataclass(frozen=True)
class ModalFeatures:
    """Inputs to the fusion module for one viewpoint.

    ``candidate[m]`` is ``[C^m ; angle]`` (K x (d + 4r)); ``visual[m]`` is
    ``C^m`` alone; ``panorama[m]`` is ``[O^m ; cell angle]`` (36 x (d + 4r));
    ``panorama_visual[m]`` is ``O^m``.
    """

    candidate: dict[str, np.ndarray]
    visual: dict[str, np.ndarray]
    candidate_angles: np.ndarray  # K x 4r
    panorama: dict[str, np.ndarray]
    panorama_visual: dict[str, np.ndarray]
    grid_indices: tuple[int, ...]
    repeat: int

    @property
    def num_candidates(self) -> int:
        return len(self.grid_indices)


def panorama_angle_block(repeat: int) -> np.ndarray:
    return np.stack([angle_embedding(*grid_angles(j), repeat) for j in range(N_VIEWS)])


def assemble(observation: Observation, repeat: int = 8) -> ModalFeatures:
    cands = observation.candidates
    d = observation.panorama["rgb"].shape[1]
    angles = (
        np.stack([angle_embedding(c.heading, c.elevation, repeat) for c in cands])
        if cands
        else np.zeros((0, 4 * repeat))
    )
    pano_angles = panorama_angle_block(repeat)
    visual = {
        m: np.stack([c.features[m] for c in cands]) if cands else np.zeros((0, d)) for m in MODALITIES
    }
    return ModalFeatures(
        candidate={m: np.concatenate([visual[m], angles], axis=1) for m in MODALITIES},
        visual=visual,
        candidate_angles=angles,
        panorama={m: np.concatenate([observation.panorama[m], pano_angles], axis=1) for m in MODALITIES},
        panorama_visual={m: np.asarray(observation.panorama[m]) for m in MODALITIES},
        grid_indices=tuple(c.grid_index for c in cands),
        repeat=repeat,
    )

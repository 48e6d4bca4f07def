"""Analytic toy scenes: a textured floor meeting a back wall, lit by point lamps.

Rows above ``horizon`` see the wall, rows from ``horizon`` down see the
floor. Shading is Lambert with inverse-square-style falloff plus a white
Phong lobe, so every render has an exact ground truth.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from luminet.errors import ShapeError
from luminet.models.dataset import LightingParams

CELL_SIZE = 1.0 / 16.0


@dataclass(frozen=True)
class Luminaire:
    col: float
    row: float
    height: float
    max_intensity: float = 1.0

    def position(self, cell_size: float = CELL_SIZE) -> np.ndarray:
        return np.array([self.col * cell_size, self.row * cell_size, self.height])


@dataclass
class ToyScene:
    albedo: np.ndarray  # H x W x 3 in [0, 1]
    normals: np.ndarray  # H x W x 3 unit vectors
    points: np.ndarray  # H x W x 3 world positions
    luminaires: list[Luminaire] = field(default_factory=list)
    ambient_range: tuple[float, float] = (0.05, 0.3)
    falloff: float = 1.0
    camera: np.ndarray | None = None

    @property
    def size(self) -> tuple[int, int]:
        return self.albedo.shape[0], self.albedo.shape[1]


def room_geometry(height: int, width: int, horizon: int, cell_size: float = CELL_SIZE):
    """World points, normals and camera position for the floor/wall room"""
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    floor = rows >= horizon
    points = np.stack(
        [
            cols * cell_size,
            np.where(floor, rows, horizon) * cell_size,
            np.where(floor, 0.0, (horizon - rows) * cell_size),
        ],
        axis=-1,
    )
    normals = np.zeros((height, width, 3))
    normals[floor] = (0.0, 0.0, 1.0)
    normals[~floor] = (0.0, 1.0, 0.0)
    camera = np.array([width * cell_size / 2, 3 * height * cell_size, height * cell_size])
    return points, normals, camera


def render_toy(scene: ToyScene, params: LightingParams) -> torch.Tensor:
    if len(params.lamp_states) != len(scene.luminaires):
        raise ShapeError(f"{len(params.lamp_states)} lamp states for {len(scene.luminaires)} luminaires")
    diffuse = np.full(scene.size, params.ambient, dtype=np.float64)
    spec = np.zeros(scene.size, dtype=np.float64)
    view = None
    if scene.camera is not None:
        view = scene.camera - scene.points
        view /= np.linalg.norm(view, axis=-1, keepdims=True)

    for lamp, state in zip(scene.luminaires, params.lamp_states):
        s = state * lamp.max_intensity
        if s == 0.0:
            continue
        to_lamp = lamp.position() - scene.points
        dist2 = np.sum(to_lamp * to_lamp, axis=-1)
        light_dir = to_lamp / np.sqrt(dist2)[..., None]
        n_dot_l = np.sum(scene.normals * light_dir, axis=-1)
        lit = np.maximum(n_dot_l, 0.0)
        attenuation = s / (1.0 + scene.falloff * dist2)
        diffuse += attenuation * lit
        if params.specular_strength > 0.0 and view is not None:
            reflected = 2.0 * n_dot_l[..., None] * scene.normals - light_dir
            r_dot_v = np.maximum(np.sum(reflected * view, axis=-1), 0.0)
            spec += np.where(n_dot_l > 0.0, attenuation * r_dot_v**params.shininess, 0.0)

    image = scene.albedo * diffuse[..., None] + params.specular_strength * spec[..., None]
    return torch.from_numpy(np.clip(image, 0.0, 1.0).astype(np.float32))


def random_toy_scene(
    rng: np.random.Generator, size: int = 64, falloff: float = 1.0, max_rects: int = 6, max_lamps: int = 3
) -> ToyScene:
    horizon = size // 3
    points, normals, camera = room_geometry(size, size, horizon)

    albedo = np.empty((size, size, 3))
    albedo[:horizon] = rng.uniform(0.3, 0.9, 3)
    albedo[horizon:] = rng.uniform(0.3, 0.9, 3)
    for _ in range(rng.integers(2, max_rects + 1)):
        top, left = rng.integers(0, size - 4, 2)
        h, w = rng.integers(4, size // 2, 2)
        albedo[top : top + h, left : left + w] = rng.uniform(0.1, 0.95, 3)

    lamps = [
        Luminaire(
            col=float(rng.uniform(0, size)),
            row=float(rng.uniform(horizon + 2, size)),
            height=float(rng.uniform(0.3, 1.0)),
            max_intensity=float(rng.uniform(0.5, 1.5)),
        )
        for _ in range(rng.integers(1, max_lamps + 1))
    ]
    return ToyScene(albedo=albedo, normals=normals, points=points, luminaires=lamps, falloff=falloff, camera=camera)


def toy_scene(seed: int, index: int, size: int = 64, falloff: float = 1.0) -> ToyScene:
    """Scene ``index`` of the family drawn from ``seed``; independent of how many scenes are drawn"""
    return random_toy_scene(np.random.Generator(np.random.PCG64([seed, index])), size=size, falloff=falloff)


def random_lighting(scene: ToyScene, rng: np.random.Generator, shininess: float = 16.0) -> LightingParams:
    lo, hi = scene.ambient_range
    states = [0.0 if rng.random() < 0.3 else float(rng.uniform(0.2, 1.0)) for _ in scene.luminaires]
    return LightingParams(
        ambient=float(rng.uniform(lo, hi)),
        lamp_states=states,
        specular_strength=float(rng.uniform(0.0, 0.3)),
        shininess=shininess,
    )


class ToySceneNormals:
    """Normal estimator that returns a toy scene's analytic normals whatever the image"""

    def __init__(self, scene: ToyScene):
        self.scene = scene

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(self.scene.normals.astype(np.float32))

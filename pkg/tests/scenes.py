"""Small scene fixtures shared by the renderer and acceptance tests."""

from dataclasses import replace

import numpy as np

from gsdyn.engine import Tensor
from gsdyn.field import DeformationField, FieldConfig
from gsdyn.hashgrid import GridConfig
from gsdyn.render import ALPHA_MIN, Camera, project
from gsdyn.scene import Scene, covariance_t, logit

TINY_FIELD = FieldConfig(
    grid=GridConfig(levels=2, features=2, log2_table_size=8, n_min=4, n_max=8, n_min_t=2, n_max_t=4),
    k=4, d_l=6, dyn_dim=4, gate_hidden=8, trunk_width=8, trunk_depth=2,
)


def camera(width=32, height=32, distance=4.0):
    return Camera.look_at([0.0, 0.0, -distance], [0, 0, 0], [0, 1, 0], 1.2 * width, width, height)


def gaussians(n=5, seed=0, opacity=(0.3, 0.8), dyn_dim=4):
    """Random Gaussians near the origin; opacity stays below 0.8 so no pixel terminates early."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    return {
        "mu": rng.uniform(-0.5, 0.5, size=(n, 3)),
        "quat": q / np.linalg.norm(q, axis=1, keepdims=True),
        "log_scale": np.log(rng.uniform(0.1, 0.3, size=(n, 3))),
        "opacity_logit": logit(rng.uniform(*opacity, size=(n, 1))),
        "color": rng.uniform(0.1, 0.9, size=(n, 3)),
        "dyn_attr": rng.normal(0, 1e-4, size=(n, dyn_dim)),
    }


def scene_of(arrays, extent=1.0):
    return Scene.from_arrays(arrays, extent, dtype=np.float64)


def tensors_scene(mu, quat, log_scale, opacity_logit, color, dyn_attr, extent=1.0):
    """A Scene whose attributes are the given tensors (no copies)."""
    return Scene(mu=mu, quat=quat, log_scale=log_scale, opacity_logit=opacity_logit, color=color, dyn_attr=dyn_attr, extent=extent)


def zero_field(seed=0, dyn_dim=4):
    return DeformationField(replace(TINY_FIELD, dyn_dim=dyn_dim), -np.ones(3), np.ones(3), np.random.default_rng(seed))


def alpha_margin(arrays, cam):
    """Smallest relative gap between any pixel's alpha and the 1/255 skip threshold."""
    a = {k: Tensor(v) for k, v in arrays.items()}
    sp = project(a["mu"], covariance_t(a["log_scale"], a["quat"]), Tensor(1 / (1 + np.exp(-arrays["opacity_logit"]))), a["color"], cam)
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    worst = np.inf
    for m, (ca, cb, cc), o in zip(sp.mean2d.data, sp.conic.data, sp.opacity.data[:, 0]):
        dx, dy = xs - m[0], ys - m[1]
        alpha = o * np.exp(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy)
        worst = min(worst, float(np.min(np.abs(alpha / ALPHA_MIN - 1))))
    return worst

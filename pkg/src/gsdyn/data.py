"""Datasets on disk and the synthetic moving-blob generator.

Layout of a dataset directory::

    manifest.tsv    path, camera, time, split   (one frame per line)
    cameras.tsv     id, fx, fy, cx, cy, R (9, row-major), t (3), width, height, near, far
    points.tsv      x, y, z, r, g, b             (optional initial point cloud)
    images/         c{camera}_f{frame}.pfm / .ppm

The synthetic generator additionally writes ``gt_gaussians.tsv`` and
``trajectories.tsv`` with the ground-truth scene.
"""

from __future__ import annotations

import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import Tensor, precision
from .imageio import read_image, write_image
from .render import Camera, render_gaussians
from .scene import logit, quat_to_rotmat

CAMERA_FIELDS = ["id", "fx", "fy", "cx", "cy"] + [f"R{i}{j}" for i in range(3) for j in range(3)] + [
    "tx", "ty", "tz", "width", "height", "near", "far",
]


class DatasetError(ValueError):
    pass


@dataclass
class Frame:
    path: str
    camera: int
    time: float
    split: str


@dataclass
class Dataset:
    root: Path
    frames: list[Frame]
    cameras: dict[int, Camera]
    points: np.ndarray | None = None
    colors: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for f in self.frames:
            if not 0.0 <= f.time <= 1.0:
                raise DatasetError(f"frame {f.path}: time {f.time} outside [0, 1]")
            if f.camera not in self.cameras:
                raise DatasetError(f"frame {f.path}: unknown camera {f.camera}")
            if f.split not in ("train", "test"):
                raise DatasetError(f"frame {f.path}: unknown split {f.split!r}")
        if not self.split("train") or not self.split("test"):
            raise DatasetError("dataset needs at least one train and one test frame")

    def split(self, name: str) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.split == name]

    def image(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = read_image(self.root / self.frames[i].path)
        return self._cache[i]

    def camera(self, i: int) -> Camera:
        return self.cameras[self.frames[i].camera]

    def times(self, split: str = "train") -> np.ndarray:
        return np.array([self.frames[i].time for i in self.split(split)])


def _read_tsv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = [ln.rstrip("\n") for ln in open(path) if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DatasetError(f"{path}: empty file")
    return lines[0].split("\t"), [ln.split("\t") for ln in lines[1:]]


def write_cameras(path, cameras: dict[int, Camera]) -> None:
    with open(path, "w") as f:
        f.write("\t".join(CAMERA_FIELDS) + "\n")
        for cid, c in sorted(cameras.items()):
            vals = [cid, c.fx, c.fy, c.cx, c.cy, *c.R.reshape(-1), *c.t, c.width, c.height, c.near, c.far]
            f.write("\t".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in vals) + "\n")


def read_cameras(path) -> dict[int, Camera]:
    header, rows = _read_tsv(Path(path))
    if header != CAMERA_FIELDS:
        raise DatasetError(f"{path}: unexpected camera columns")
    cams = {}
    for row in rows:
        v = [float(x) for x in row]
        cams[int(v[0])] = Camera(
            v[1], v[2], v[3], v[4], np.array(v[5:14]).reshape(3, 3), np.array(v[14:17]),
            int(v[17]), int(v[18]), v[19], v[20],
        )
    return cams


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "manifest.tsv").exists():
        raise DatasetError(f"{root}: no manifest.tsv")
    header, rows = _read_tsv(root / "manifest.tsv")
    if header[:3] != ["path", "camera", "time"]:
        raise DatasetError(f"{root}/manifest.tsv: expected columns path, camera, time[, split]")
    frames = [Frame(r[0], int(r[1]), float(r[2]), r[3] if len(r) > 3 else "train") for r in rows]
    points = colors = None
    if (root / "points.tsv").exists():
        _, prow = _read_tsv(root / "points.tsv")
        arr = np.array(prow, dtype=np.float64).reshape(-1, 6)
        points, colors = arr[:, :3], arr[:, 3:]
    return Dataset(root, frames, read_cameras(root / "cameras.tsv"), points, colors)


# ---------------------------------------------------------------------------
# synthetic scene


@dataclass
class SynthScene:
    mu0: np.ndarray
    quat0: np.ndarray
    log_scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    direction: np.ndarray
    freq: np.ndarray
    amplitude: float
    rotation: bool

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth means and quaternions at normalized time ``t``."""
        phase = np.sin(2 * math.pi * self.freq * t)
        mu = self.mu0 + self.amplitude * phase[:, None] * self.direction
        if not self.rotation:
            return mu, self.quat0.copy()
        half = 0.25 * phase  # rotation angle 0.5 * sin about z
        rz = np.stack([np.cos(half), np.zeros_like(half), np.zeros_like(half), np.sin(half)], axis=1)
        return mu, _quat_mul(rz, self.quat0)


def _quat_mul(a, b):
    w1, x1, y1, z1 = a.T
    w2, x2, y2, z2 = b.T
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=1)


def make_synth_scene(cfg, rng: np.random.Generator) -> SynthScene:
    m = cfg.synth_gaussians
    freqs = [float(f) for f in str(cfg.synth_freqs).split(",") if f.strip()]
    if not freqs:
        raise DatasetError("synth_freqs is empty")
    q = rng.standard_normal((m, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    if m == 1:
        mu0, q = np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0, 0.0]])
    else:
        mu0 = rng.uniform(-0.7, 0.7, (m, 3))
    log_scale = np.log(rng.uniform(cfg.synth_scale_min, cfg.synth_scale_max, (m, 3)))
    if m > 1 and cfg.synth_layout == "two_cluster":
        # a tight cluster of identical isotropic blobs beside a loose anisotropic one
        tight = np.arange(m) < m // 2
        centre = np.where(tight[:, None], [-0.45, 0.0, 0.0], [0.45, 0.0, 0.0])
        mu0 = centre + np.where(tight[:, None], 0.12, 0.3) * rng.uniform(-1, 1, (m, 3))
        q[tight] = [1.0, 0.0, 0.0, 0.0]
        log_scale[tight] = math.log(cfg.synth_scale_min)
        wide = np.log(rng.uniform(cfg.synth_scale_min / 2, cfg.synth_scale_max * 2, (m, 3)))
        log_scale[~tight] = wide[~tight]
    static = cfg.synth_static
    return SynthScene(
        mu0=mu0,
        quat0=q,
        log_scale=log_scale,
        opacity=np.full(m, 0.9),
        color=rng.uniform(0.2, 1.0, (m, 3)),
        direction=np.eye(3)[np.arange(m) % 3],
        freq=np.array([freqs[i % len(freqs)] for i in range(m)]),
        amplitude=0.0 if static else cfg.synth_amplitude,
        rotation=bool(cfg.synth_rotation) and not static,
    )


def ring_cameras(n: int, width: int, height: int, radius: float = 4.0) -> dict[int, Camera]:
    cams = {}
    for c in range(n):
        a = 2 * math.pi * c / n
        eye = [radius * math.sin(a), 0.8 * math.cos(3 * a), -radius * math.cos(a)]
        cams[c] = Camera.look_at(eye, [0, 0, 0], [0, 1, 0], 1.4 * width, width, height)
    return cams


def synth(cfg, out, force: bool = False) -> Dataset:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DatasetError(f"{out}: directory not empty (use --force)")
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    gt = make_synth_scene(cfg, rng)
    cams = ring_cameras(cfg.synth_cameras, cfg.synth_width, cfg.synth_height)
    n_frames = cfg.synth_frames
    if n_frames < 2:
        raise DatasetError("synth_frames must be at least 2")
    times = np.arange(n_frames) / (n_frames - 1)
    held = cfg.synth_test_every // 2

    manifest = ["path\tcamera\ttime\tsplit"]
    traj = ["frame\ttime\tgaussian\tx\ty\tz\tqw\tqx\tqy\tqz"]
    with precision(64):
        for k, t in enumerate(times):
            mu, quat = gt.at(t)
            for i in range(len(mu)):
                traj.append("\t".join([str(k), repr(float(t)), str(i)] + [repr(float(v)) for v in (*mu[i], *quat[i])]))
            split = "test" if cfg.synth_test_every > 0 and k % cfg.synth_test_every == held else "train"
            for cid, cam in cams.items():
                img = render_gaussians(
                    Tensor(mu), Tensor(quat), Tensor(gt.log_scale), Tensor(logit(gt.opacity)[:, None]),
                    Tensor(gt.color), cam,
                ).image.data
                rel = f"images/c{cid}_f{k:03d}"
                write_image(out / rel, img)
                manifest.append(f"{rel}.pfm\t{cid}\t{float(t)!r}\t{split}")
    (out / "manifest.tsv").write_text("\n".join(manifest) + "\n")
    (out / "trajectories.tsv").write_text("\n".join(traj) + "\n")
    write_cameras(out / "cameras.tsv", cams)

    gt_rows = ["x\ty\tz\tqw\tqx\tqy\tqz\tsx\tsy\tsz\topacity\tr\tg\tb\tdx\tdy\tdz\tfreq\tamplitude"]
    for i in range(len(gt.mu0)):
        vals = (*gt.mu0[i], *gt.quat0[i], *np.exp(gt.log_scale[i]), gt.opacity[i], *gt.color[i], *gt.direction[i], gt.freq[i], gt.amplitude)
        gt_rows.append("\t".join(repr(float(v)) for v in vals))
    (out / "gt_gaussians.tsv").write_text("\n".join(gt_rows) + "\n")

    # sparse "structure from motion" points: jittered samples of the t=0 blobs
    pts_rows = ["x\ty\tz\tr\tg\tb"]
    mu_0, quat_0 = gt.at(0.0)
    R = quat_to_rotmat(quat_0)
    for i in range(len(mu_0)):
        z = rng.standard_normal((cfg.synth_points_per_gaussian, 3))
        pts = mu_0[i] + (z * np.exp(gt.log_scale[i])) @ R[i].T
        for p in pts:
            pts_rows.append("\t".join(repr(float(v)) for v in (*p, *gt.color[i])))
    (out / "points.tsv").write_text("\n".join(pts_rows) + "\n")
    return load_dataset(out)

"""Training, evaluation and rendering loops."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Dataset
from .dynamics import dynamics_reg_loss, outlier_mask
from .engine import AdamState, NonFiniteError, Tape, Tensor, adam_step, backward, precision
from .engine import tensor as T
from .field import DeformationField
from .imageio import write_image
from .laplacian import batch_time_variance, frequency_grad_scale
from .losses import psnr, ssim_value, total_loss
from .render import Camera, render_at_time
from .scene import Scene, init_from_points
from .split import LOG_HEADER, densify_and_prune

CHECKPOINT_NAME = "checkpoint.gsdyn"
METRIC_COLUMNS = ["step", "orig", "ncc", "lap", "dy", "total", "n_gaussians", "probe_psnr"]


class TrainingAborted(RuntimeError):
    pass


@dataclass
class Model:
    scene: Scene
    field: DeformationField
    cfg: TrainConfig

    def parameters(self) -> dict[str, Tensor]:
        return {**self.scene.parameters(), **self.field.parameters()}

    def counts(self) -> dict[str, int]:
        g = self.cfg.grid_config()
        return {"N": len(self.scene), "D_d": self.scene.dyn_dim, "L": g.levels, "F": g.features,
                "log2T": g.log2_table_size, "K": self.cfg.lap_k}

    def field_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.field.parameters().items()}
        out["field.bbox_lo"] = self.field.bbox_lo
        out["field.bbox_hi"] = self.field.bbox_hi
        return out

    def render(self, t: float, cam: Camera):
        return render_at_time(self.scene, self.field, t, cam)


def build_model(cfg: TrainConfig, dataset: Dataset | None, rng: np.random.Generator) -> Model:
    """Initial scene from the dataset's point cloud (or random points) and a fresh field."""
    if cfg.init_points == "dataset" and dataset is not None and dataset.points is not None:
        pts, cols = dataset.points, dataset.colors
    else:
        pts = rng.uniform(-1.0, 1.0, (cfg.init_random_count, 3))
        cols = np.full_like(pts, 0.5)
    dt = np.float32 if cfg.precision == 32 else np.float64
    scene = init_from_points(pts, cols, cfg.dyn_dim, rng, dtype=dt)
    margin = cfg.bbox_margin * scene.extent
    lo, hi = pts.min(axis=0) - margin, pts.max(axis=0) + margin
    with precision(cfg.precision):
        field = DeformationField(cfg.field_config(), lo, hi, rng)
    return Model(scene, field, cfg)


def model_from_checkpoint(ck: Checkpoint, cfg: TrainConfig | None = None) -> Model:
    cfg = cfg or TrainConfig.from_text(ck.meta)
    scene = ck.scene()
    arrays = ck.field_arrays()
    with precision(cfg.precision):
        field = DeformationField(cfg.field_config(), arrays["field.bbox_lo"], arrays["field.bbox_hi"], np.random.default_rng(0))
    for name, p in field.parameters().items():
        if name not in arrays:
            raise ValueError(f"checkpoint lacks field parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"field parameter {name!r}: shape {arrays[name].shape} != {p.data.shape}")
        p.data = arrays[name].copy()
    return Model(scene, field, cfg)


def load_model(path, cfg: TrainConfig | None = None) -> Model:
    expect = None
    if cfg is not None:
        g = cfg.grid_config()
        expect = {"D_d": cfg.dyn_dim, "L": g.levels, "F": g.features, "log2T": g.log2_table_size, "K": cfg.lap_k}
    return model_from_checkpoint(load_checkpoint(path, expect), cfg)


def save_model(path, model: Model) -> None:
    save_checkpoint(path, model.scene, model.field_arrays(), model.counts(), model.cfg.to_text())


# ---------------------------------------------------------------------------
# learning rates


def _decay(lr0: float, lr1: float, frac: float) -> float:
    frac = min(max(frac, 0.0), 1.0)
    return math.exp((1 - frac) * math.log(lr0) + frac * math.log(lr1))


def learning_rates(cfg: TrainConfig, names, extent: float, step: int) -> dict[str, float]:
    frac = step / max(1, cfg.iterations)
    fixed = {
        "scene.mu": _decay(cfg.lr_position, cfg.lr_position_final, frac) * extent,
        "scene.quat": cfg.lr_rotation,
        "scene.log_scale": cfg.lr_scale,
        "scene.opacity_logit": cfg.lr_opacity,
        "scene.color": cfg.lr_color,
        "scene.dyn_attr": cfg.lr_dyn,
    }
    net = _decay(cfg.lr_network, cfg.lr_network_final, frac)
    out = {}
    for n in names:
        if n in fixed:
            out[n] = fixed[n]
        elif n.startswith("hash."):
            out[n] = cfg.lr_hash
        elif n.startswith(("laplacian.", "time_mlp.")):
            out[n] = cfg.lr_time
        else:
            out[n] = net
    return out


def remap_moments(state: AdamState, origin: np.ndarray, fresh: np.ndarray) -> None:
    """Carry Adam moments of scene rows through a densification event."""
    for store in (state.m, state.v):
        for name in list(store):
            if name.startswith("scene."):
                arr = store[name][origin]
                arr[fresh] = 0
                store[name] = arr


# ---------------------------------------------------------------------------
# training


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(v)
    return f"{v:.9g}"


def train(cfg: TrainConfig, dataset: Dataset, out, log=print, resume: Model | None = None) -> Model:
    """Optimise a model on ``dataset``; writes metrics, densification log and checkpoints to ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with precision(cfg.precision):
        return _train(cfg, dataset, out, log, resume)


def _train(cfg: TrainConfig, dataset: Dataset, out: Path, log, resume: Model | None) -> Model:
    rng = np.random.default_rng(cfg.seed)
    model = resume or build_model(cfg, dataset, rng)
    sample_rng = np.random.default_rng([cfg.seed, 1])
    split_rng = np.random.default_rng([cfg.seed, 2])
    dt = model.scene.mu.data.dtype
    weights = cfg.loss_weights()
    split_cfg = cfg.split_config()
    train_ids = dataset.split("train")
    probe = dataset.split("test")[0]
    sigma_data = batch_time_variance(dataset.times("train"))
    state = AdamState(lr=1e-3, eps=cfg.adam_eps)
    ck_path = out / CHECKPOINT_NAME
    save_model(ck_path, model)

    metrics = open(out / "metrics.tsv", "w")
    metrics.write("\t".join(METRIC_COLUMNS) + "\n")
    dlog = open(out / "densify.tsv", "w")
    dlog.write(LOG_HEADER + "\n")
    t_start = time.perf_counter()
    try:
        for step in range(1, cfg.iterations + 1):
            scene, field = model.scene, model.field
            params = model.parameters()
            batch = [train_ids[j] for j in sample_rng.integers(0, len(train_ids), cfg.batch_size)]
            with Tape() as tape:
                loss, parts, renders = None, {}, []
                for i in batch:
                    r = model.render(dataset.frames[i].time, dataset.camera(i))
                    renders.append(r)
                    dyn = None
                    if weights.lambda_dy:
                        stats, mask = outlier_mask(scene.dyn_attr)
                        dyn = dynamics_reg_loss(scene.dyn_attr, stats, mask)
                    li, pi = total_loss(r.image, dataset.image(i).astype(dt), dyn, weights)
                    loss = li if loss is None else T.add(loss, li)
                    for k, v in pi.items():
                        parts[k] = parts.get(k, 0.0) + v / len(batch)
                if len(batch) > 1:
                    loss = T.div(loss, float(len(batch)))
            if not math.isfinite(loss.item()):
                raise NonFiniteError("total loss is not finite")
            grads = backward(tape, loss, list(params.values()))
            grads = {name: grads[p] for name, p in params.items()}

            if cfg.freq_grad_scale and "laplacian.freq" in grads:
                times = [dataset.frames[i].time for i in batch]
                src = cfg.sigma_sq_source
                if src == "batch" or (src == "auto" and len(batch) > 1):
                    sigma_sq = batch_time_variance(times)
                else:
                    sigma_sq = sigma_data
                grads["laplacian.freq"] = frequency_grad_scale(grads["laplacian.freq"], sigma_sq)

            for r in renders:
                g = r.splats.mean2d.grad
                if g is not None and len(r.splats):
                    cam = r.splats
                    w, h = dataset.camera(batch[0]).width, dataset.camera(batch[0]).height
                    norm = np.hypot(g[:, 0] * w / 2.0, g[:, 1] * h / 2.0)
                    np.add.at(scene.grad_accum, cam.index, norm)
                    np.add.at(scene.grad_count, cam.index, 1.0)
                    np.maximum.at(scene.max_radii, cam.index, cam.radius)

            adam_step(params, grads, state, learning_rates(cfg, params, scene.extent, step))
            scene.post_step()

            if (
                cfg.densify
                and cfg.densify_from <= step < cfg.densify_until
                and step % cfg.densify_interval == 0
            ):
                _, mask = outlier_mask(scene.dyn_attr)
                size = max(dataset.camera(train_ids[0]).width, dataset.camera(train_ids[0]).height)
                new_scene, report = densify_and_prune(scene, mask, split_cfg, split_rng, step, size)
                remap_moments(state, report.origin, report.fresh)
                model.scene = new_scene
                dlog.write(report.log_line() + "\n")

            probe_psnr = None
            if step % cfg.probe_interval == 0 or step == cfg.iterations:
                probe_psnr = evaluate_frame(model, dataset, probe)[0]
            if step % cfg.log_interval == 0 or probe_psnr is not None or step == cfg.iterations:
                row = [step] + [parts.get(k, 0.0) for k in ("orig", "ncc", "lap", "dy", "total")]
                row += [len(model.scene), probe_psnr]
                metrics.write("\t".join(_fmt(v) for v in row) + "\n")
                metrics.flush()
            if probe_psnr is not None and log:
                log(f"step {step:6d}  loss {parts['total']:.5f}  N {len(model.scene):5d}  "
                    f"probe PSNR {probe_psnr:6.2f} dB  ({time.perf_counter() - t_start:.1f}s)")
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_model(ck_path, model)
    except NonFiniteError as exc:
        raise TrainingAborted(f"non-finite value at step {step}: {exc}; last good checkpoint kept at {ck_path}") from exc
    finally:
        metrics.close()
        dlog.close()
    save_model(ck_path, model)
    return model


# ---------------------------------------------------------------------------
# evaluation and rendering


def evaluate_frame(model: Model, dataset: Dataset, i: int) -> tuple[float, float]:
    frame = dataset.frames[i]
    gt = dataset.image(i)
    img = model.render(frame.time, dataset.camera(i)).image.data
    if img.shape != gt.shape:
        raise ValueError(f"resolution mismatch: render {img.shape} vs image {gt.shape}")
    return psnr(img, gt), ssim_value(img, gt)


def evaluate(model: Model, dataset: Dataset, split: str = "test", out=None) -> dict:
    with precision(model.cfg.precision):
        rows = []
        for i in dataset.split(split):
            p, s = evaluate_frame(model, dataset, i)
            f = dataset.frames[i]
            rows.append((f.path, f.camera, f.time, p, s))
    mean_psnr = float(np.mean([r[3] for r in rows]))
    mean_ssim = float(np.mean([r[4] for r in rows]))
    if out is not None:
        with open(out, "w") as fh:
            fh.write("path\tcamera\ttime\tpsnr\tssim\n")
            for r in rows:
                fh.write(f"{r[0]}\t{r[1]}\t{r[2]!r}\t{r[3]:.6f}\t{r[4]:.6f}\n")
            fh.write(f"mean\t\t\t{mean_psnr:.6f}\t{mean_ssim:.6f}\n")
    return {"rows": rows, "psnr": mean_psnr, "ssim": mean_ssim}


def render_sequence(model: Model, cameras: dict[int, Camera], times, out) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with precision(model.cfg.precision):
        for cid, cam in cameras.items():
            for t in times:
                img = model.render(float(t), cam).image.data
                stem = out / f"c{cid}_t{float(t):.6f}"
                write_image(stem, img)
                written.append(stem)
    return written

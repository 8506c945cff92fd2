"""Training loop, learning-rate and temperature schedules, evaluation metrics,
noise-injection robustness protocol, and voting inference.
"""

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from occlume import autograd as ag
from occlume import pointmls
from occlume.geomesh import ClassCatalog, PointCloud, parse_pcb
from occlume.occlusion import DatasetManifest
from occlume.rng import derive_seed, generator

TAU_START = 1.0
TAU_END = 0.01
SCHEDULE_KINDS = ("cos", "lin", "exp")


class TrainDivergence(RuntimeError):
    """Loss went non-finite; carries the offending batch's sample ids."""


@dataclass
class TrainConfig:
    epochs: int = 65
    batch_size: int = 32
    base_lr: float = 0.1
    momentum: float = 0.9
    tau_kind: str = "cos"
    seed: int = 0
    holdout_fraction: float = 0.1

    def validate(self):
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.base_lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.tau_kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.tau_kind!r}")


def tau_schedule(epoch: int, total: int, kind: str = "cos") -> float:
    """Temperature from 1.0 down to 0.01 over `total` epochs."""
    if not 0 <= epoch <= total:
        raise ValueError("epoch outside [0, total]")
    frac = epoch / total
    if kind == "cos":
        return TAU_END + 0.5 * (TAU_START - TAU_END) * (1.0 + math.cos(math.pi * frac))
    if kind == "lin":
        return TAU_START + (TAU_END - TAU_START) * frac
    if kind == "exp":
        return TAU_START * (TAU_END / TAU_START) ** frac
    raise ValueError(f"unknown schedule {kind!r}")


def lr_schedule(epoch: int, total: int, base: float) -> float:
    """Cosine decay from `base` to `base/100`."""
    if not 0 <= epoch <= total:
        raise ValueError("epoch outside [0, total]")
    end = base / 100.0
    return end + 0.5 * (base - end) * (1.0 + math.cos(math.pi * epoch / total))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    confusion: np.ndarray  # (C, C) int64, rows = true class

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def oa(self) -> float:
        return float(np.trace(self.confusion) / max(1, self.total))

    @property
    def macc(self) -> float:
        rows = self.confusion.sum(axis=1)
        present = rows > 0
        if not present.any():
            return 0.0
        recall = np.diag(self.confusion)[present] / rows[present]
        return float(recall.mean())

    def csv_lines(self, class_names=None) -> list[str]:
        lines = [f"oa,{self.oa!r}", f"macc,{self.macc!r}", "confusion"]
        names = class_names or [str(i) for i in range(self.confusion.shape[0])]
        lines.append("true\\pred," + ",".join(names))
        for i, row in enumerate(self.confusion):
            lines.append(names[i] + "," + ",".join(str(int(x)) for x in row))
        return lines


# ---------------------------------------------------------------------------
# Noise injection
# ---------------------------------------------------------------------------

@dataclass
class NoiseSpec:
    mode: str = "replace"      # replace | add
    eta: float = 0.0           # fraction replaced (replace mode)
    count: int = 0             # points appended (add mode)
    dist: str = "normal"       # normal | uniform
    sigma: float = 0.5
    half_width: float = 1.0
    seed: int = 0

    def validate(self):
        if self.mode not in ("replace", "add"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if self.dist not in ("normal", "uniform"):
            raise ValueError(f"unknown distribution {self.dist!r}")


def _draw_noise(rng, count: int, spec: NoiseSpec) -> np.ndarray:
    if spec.dist == "normal":
        pts = rng.normal(0.0, spec.sigma, size=(count, 3))
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        over = norms[:, 0] > 1.0
        if over.any():
            pts[over] = pts[over] / norms[over]
        return pts
    return rng.uniform(-spec.half_width, spec.half_width, size=(count, 3))


def inject_noise(pc: PointCloud, spec: NoiseSpec) -> PointCloud:
    """Replace a fraction of points (or append extras) with noise draws."""
    spec.validate()
    pts = pc.points.copy()
    rng = generator(spec.seed, "noise")
    if spec.mode == "replace":
        k = int(spec.eta * len(pts))
        if k > 0:
            idx = rng.choice(len(pts), size=k, replace=False)
            pts[idx] = _draw_noise(rng, k, spec)
    else:
        if spec.count > 0:
            pts = np.concatenate([pts, _draw_noise(rng, spec.count, spec)])
    return PointCloud(pts, label=pc.label)


# ---------------------------------------------------------------------------
# Dataset access
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    sample_id: str
    class_id: int
    view: int
    split: str
    points: np.ndarray


def load_samples(manifest: DatasetManifest, root, split: Optional[str] = None,
                 catalog: Optional[ClassCatalog] = None) -> list[Sample]:
    root = Path(root)
    catalog = catalog or manifest.catalog()
    out = []
    for row in manifest.rows:
        if split is not None and row.split != split:
            continue
        pc = parse_pcb((root / row.path).read_bytes())
        out.append(Sample(row.sample_id, catalog.ids[row.class_name],
                          row.view, row.split, pc.points))
    return out


def is_holdout(sample_id: str, fraction: float = 0.1) -> bool:
    """Stable membership by sample-id hash; never trained on."""
    bucket = int(hashlib.sha256(sample_id.encode()).hexdigest(), 16) % 1000
    return bucket < int(round(fraction * 1000))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max()
    e = np.exp(z)
    return e / e.sum()


def _predict(sample: Sample, params, cfg, voting, scale_range, seed,
             noise: Optional[NoiseSpec]) -> int:
    pts = sample.points
    if noise is not None:
        spec = NoiseSpec(**{**noise.__dict__,
                            "seed": derive_seed(noise.seed, "noise", sample.sample_id)})
        pts = inject_noise(PointCloud(pts), spec).points
    probs = np.zeros(cfg.class_count)
    rng = generator(seed, "vote", sample.sample_id)
    for v in range(voting):
        scale = 1.0 if voting == 1 else rng.uniform(scale_range[0], scale_range[1])
        fused, _, _ = pointmls.multilevel_forward(
            pts * scale, params, cfg, "eval", derive_seed(seed, "fwd", sample.sample_id, v))
        probs += _softmax(fused.data[0])
    return int(np.argmax(probs))


def evaluate(params, cfg: pointmls.MultiLevelConfig, samples,
             voting: int = 1, scale_range=(0.8, 1.25), seed: int = 0,
             noise: Optional[NoiseSpec] = None, threads: int = 1) -> Metrics:
    """Eval-mode predictions with optional vote-averaged random scaling.

    A pure function of (params, samples, seed); samples may be sharded across
    threads because predictions merge in sample order.
    """
    if voting < 1:
        raise ValueError("voting must be >= 1")
    if not samples:
        raise ValueError("empty evaluation split")
    confusion = np.zeros((cfg.class_count, cfg.class_count), dtype=np.int64)

    def work(sample):
        return _predict(sample, params, cfg, voting, scale_range, seed, noise)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(work, samples))
    else:
        preds = [work(s) for s in samples]
    for sample, pred in zip(samples, preds):
        confusion[sample.class_id, pred] += 1
    return Metrics(confusion)


def robustness_sweep(params, cfg, samples, etas, voting: int = 1, seed: int = 0,
                     dist: str = "normal", sigma: float = 0.5,
                     half_width: float = 1.0,
                     threads: int = 1) -> list[tuple[float, Metrics]]:
    """Clean-style evaluation repeated under increasing replace-ratio noise."""
    out = []
    for eta in etas:
        noise = None
        if eta > 0:
            noise = NoiseSpec(mode="replace", eta=eta, dist=dist, sigma=sigma,
                              half_width=half_width,
                              seed=derive_seed(seed, "sweep", repr(float(eta))))
        out.append((float(eta), evaluate(params, cfg, samples, voting=voting,
                                         seed=seed, noise=noise, threads=threads)))
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    tau: float
    holdout_oa: float

    def csv(self) -> str:
        return f"{self.epoch},{self.loss!r},{self.lr!r},{self.tau!r},{self.holdout_oa!r}"


def train(tcfg: TrainConfig, cfg: pointmls.MultiLevelConfig, samples,
          params: Optional[pointmls.ModelParams] = None,
          progress=None) -> tuple[pointmls.ModelParams, list[EpochLog]]:
    """SGD with momentum over scheduled lr and temperature.

    `samples` is the training split; a stable tenth of it (by sample-id hash)
    is held out for per-epoch monitoring and never trained on. Deterministic
    for a given (seed, data): identical logs and final parameters.
    """
    tcfg.validate()
    if not samples:
        raise ValueError("no training samples")
    holdout = [s for s in samples if is_holdout(s.sample_id, tcfg.holdout_fraction)]
    pool = [s for s in samples if not is_holdout(s.sample_id, tcfg.holdout_fraction)]
    if not pool:
        raise ValueError("holdout fraction consumed every sample")
    if params is None:
        params = pointmls.init_params(cfg, derive_seed(tcfg.seed, "init"))
    state = ag.SgdState(momentum=tcfg.momentum)
    trainable = params.trainable()
    logs: list[EpochLog] = []

    for epoch in range(tcfg.epochs):
        lr = lr_schedule(epoch, tcfg.epochs, tcfg.base_lr)
        tau = tau_schedule(epoch, tcfg.epochs, tcfg.tau_kind)
        cfg.set_tau(tau)
        order = generator(tcfg.seed, "order", epoch).permutation(len(pool))
        epoch_loss = 0.0
        for lo in range(0, len(order), tcfg.batch_size):
            batch = [pool[i] for i in order[lo:lo + tcfg.batch_size]]
            ag.zero_grads(trainable)
            total = None
            for sample in batch:
                fwd_seed = derive_seed(tcfg.seed, "fwd", epoch, sample.sample_id)
                fused, _, clouds = pointmls.multilevel_forward(
                    sample.points, params, cfg, "train", fwd_seed)
                loss = pointmls.total_loss(fused, sample.class_id, sample.points,
                                           clouds, cfg)
                total = loss if total is None else ag.add(total, loss)
            batch_loss = ag.smul(total, 1.0 / len(batch))
            value = batch_loss.item()
            if not math.isfinite(value):
                raise TrainDivergence(
                    f"non-finite loss at epoch {epoch}, batch "
                    f"{[s.sample_id for s in batch]}")
            batch_loss.backward()
            ag.sgd_step(trainable, state, lr)
            epoch_loss += value * len(batch)
        epoch_loss /= len(pool)
        holdout_oa = float("nan")
        if holdout:
            # Monitor at the current temperature: the schedule has not
            # annealed yet, so the final tau would misrepresent the model.
            holdout_oa = evaluate(params, cfg, holdout, voting=1,
                                  seed=derive_seed(tcfg.seed, "holdout")).oa
        logs.append(EpochLog(epoch, epoch_loss, lr, tau, holdout_oa))
        if progress:
            progress(logs[-1])
    cfg.set_tau(tau_schedule(tcfg.epochs, tcfg.epochs, tcfg.tau_kind))
    return params, logs


def write_train_log(path, logs, header: str) -> None:
    lines = [f"# {header}", "epoch,loss,lr,tau,holdout_oa"]
    lines += [log.csv() for log in logs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

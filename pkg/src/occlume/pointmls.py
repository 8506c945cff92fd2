"""The classifier: learnable critical-point sampling, residual-MLP feature
aggregation over shrinking point sets, multi-level score fusion, and the
combined classification + sampling loss.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from occlume import _kernels, autograd as ag
from occlume.rng import derive_seed, generator
from occlume.sampling import fps_canonical_start, random_sample

SAMPLERS = ("cps", "fps", "rs")
MODES = ("train", "eval", "hard")


@dataclass
class CpsConfig:
    n_in: int
    m_out: int
    feature_widths: tuple    # point-feature MLP, last entry is D
    weight_hidden: int = 256  # hidden width of the scoring MLP
    use_norm: bool = True
    tau: float = 1.0

    @property
    def feature_dim(self) -> int:
        return self.feature_widths[-1]

    def validate(self):
        if self.m_out > self.n_in:
            raise ValueError(f"cannot sample {self.m_out} from {self.n_in} points")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class FaConfig:
    stages: int = 4
    k: int = 24
    embed_width: int = 64
    use_norm: bool = True
    head_hidden: Optional[int] = None

    def final_width(self) -> int:
        return self.embed_width * (2 ** self.stages)

    def head_width(self) -> int:
        return self.head_hidden if self.head_hidden else max(32, self.final_width() // 2)


@dataclass
class MultiLevelConfig:
    levels: tuple
    class_count: int
    cps: tuple               # per-level CpsConfig
    fa: tuple                # per-level FaConfig
    alphas: tuple
    sampler: str = "cps"
    spl_enabled: bool = True
    spl_weight: float = 1.0
    spl_level0_only: bool = False

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if any(a < 0 for a in self.alphas):
            raise ValueError("level weights must be non-negative")
        total = sum(self.alphas)
        if total <= 0:
            raise ValueError("level weights must not all vanish")
        self.alphas = tuple(a / total for a in self.alphas)
        if list(self.levels) != sorted(self.levels, reverse=True) or \
                len(set(self.levels)) != len(self.levels):
            raise ValueError("level sizes must be strictly decreasing")

    def set_tau(self, tau: float) -> None:
        for c in self.cps:
            c.tau = tau


def build_config(n_points: int, class_count: int, levels=(1024, 512, 256, 128),
                 k: int = 24, stages: int = 4, sampler: str = "cps",
                 use_norm: bool = True, embed_top: int = 64, embed_sub: int = 32,
                 alphas=None, spl_enabled: bool = True, spl_weight: float = 1.0,
                 spl_level0_only: bool = False) -> MultiLevelConfig:
    """Default multi-level layout.

    The top level keeps the full-width point-feature MLP; lower levels get
    lightweight ones whose feature dim follows the half-of-output rule.
    """
    levels = tuple(int(m) for m in levels)
    cps_cfgs = []
    fa_cfgs = []
    for s, m in enumerate(levels):
        if s == 0 and m == 1024:
            widths = (64, 128, 256, 512, 512)
        elif s == 0:
            widths = (32, 64, max(4, m // 2))
        else:
            widths = (16, 32, max(4, m // 2))
        hidden = 256 if s == 0 else max(64, widths[-1])
        cps_cfgs.append(CpsConfig(n_in=n_points, m_out=m, feature_widths=widths,
                                  weight_hidden=hidden, use_norm=use_norm))
        fa_cfgs.append(FaConfig(stages=stages, k=k,
                                embed_width=embed_top if s == 0 else embed_sub,
                                use_norm=use_norm))
    if alphas is None:
        alphas = tuple(1.0 / len(levels) for _ in levels)
    return MultiLevelConfig(levels=levels, class_count=class_count,
                            cps=tuple(cps_cfgs), fa=tuple(fa_cfgs),
                            alphas=tuple(alphas), sampler=sampler,
                            spl_enabled=spl_enabled, spl_weight=spl_weight,
                            spl_level0_only=spl_level0_only)


class ModelParams:
    """Named tensors for all levels; BN running stats ride along as buffers."""

    def __init__(self, tensors: dict):
        if len(tensors) != len(set(tensors)):
            raise ValueError("duplicate tensor names")
        self.tensors = tensors

    def trainable(self):
        return [t for t in self.tensors.values() if t.requires_grad]

    def validate(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"non-finite parameter {name}")

    def save(self, path) -> None:
        ag.save_checkpoint(path, self.tensors)

    def load(self, path) -> None:
        loaded = ag.load_checkpoint(path)
        missing = set(self.tensors) - set(loaded)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:4]}...")
        for name, t in self.tensors.items():
            arr = loaded[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()


def init_params(cfg: MultiLevelConfig, seed: int) -> ModelParams:
    """Kaiming-style uniform fan-in init, deterministic per (seed, tensor name)."""
    tensors: dict = {}

    def linear(name, fan_in, fan_out, bias=True):
        # Layers feeding a batch norm skip the bias: the batch mean would
        # absorb it exactly, leaving a permanently zero-gradient parameter.
        rng = generator(seed, "init", name)
        bound = np.sqrt(6.0 / fan_in)
        tensors[f"{name}.w"] = ag.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)))
        if bias:
            tensors[f"{name}.b"] = ag.parameter(np.zeros((1, fan_out)))

    def norm(name, dim):
        tensors[f"{name}.gamma"] = ag.parameter(np.ones((1, dim)))
        tensors[f"{name}.beta"] = ag.parameter(np.zeros((1, dim)))
        tensors[f"{name}.mean"] = ag.constant(np.zeros(dim))
        tensors[f"{name}.var"] = ag.constant(np.ones(dim))

    for s, m in enumerate(cfg.levels):
        fa = cfg.fa[s]
        if cfg.sampler == "cps":
            c = cfg.cps[s]
            fan = 3
            for i, width in enumerate(c.feature_widths):
                linear(f"level{s}.cps.feat{i}", fan, width, bias=not c.use_norm)
                if c.use_norm:
                    norm(f"level{s}.cps.feat{i}.bn", width)
                fan = width
            # The scoring MLP stays norm-free: its input interleaves the
            # broadcast global feature, whose row-constant columns a
            # per-point norm would cancel outright. The head also gets no
            # bias: a per-slot bias shifts a whole softmax row uniformly.
            linear(f"level{s}.cps.score_hidden", 2 * c.feature_dim, c.weight_hidden)
            linear(f"level{s}.cps.score_out", c.weight_hidden, m, bias=False)
        linear(f"level{s}.fa.embed", 3, fa.embed_width, bias=not fa.use_norm)
        if fa.use_norm:
            norm(f"level{s}.fa.embed.bn", fa.embed_width)
        width = fa.embed_width
        for t in range(fa.stages):
            linear(f"level{s}.fa.stage{t}.res.lin1", width, width, bias=not fa.use_norm)
            linear(f"level{s}.fa.stage{t}.res.lin2", width, width)
            linear(f"level{s}.fa.stage{t}.lift", width, 2 * width, bias=not fa.use_norm)
            if fa.use_norm:
                norm(f"level{s}.fa.stage{t}.res.bn1", width)
                norm(f"level{s}.fa.stage{t}.lift.bn", 2 * width)
            width *= 2
        linear(f"level{s}.fa.head.lin1", width, fa.head_width())
        linear(f"level{s}.fa.head.lin2", fa.head_width(), cfg.class_count)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _affine(params, name, x):
    out = ag.matmul(x, params.tensors[f"{name}.w"])
    bias = params.tensors.get(f"{name}.b")
    return ag.add(out, bias) if bias is not None else out


def _norm(params, name, x, training):
    return ag.batch_norm(x,
                         params.tensors[f"{name}.gamma"],
                         params.tensors[f"{name}.beta"],
                         params.tensors[f"{name}.mean"].data,
                         params.tensors[f"{name}.var"].data,
                         training)


def _mlp_block(params, name, x, training, use_norm):
    x = _affine(params, name, x)
    if use_norm:
        x = _norm(params, f"{name}.bn", x, training)
    return ag.relu(x)


def cps_forward(points, params: ModelParams, cfg: CpsConfig, mode: str,
                seed: int, prefix: str = "level0.cps"):
    """Learned soft sampling: returns (sampled cloud, selection matrix).

    Train mode perturbs the per-point logits with Gumbel noise, eval mode is
    noiseless, hard mode snaps each selection row to its argmax one-hot with
    a straight-through gradient.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cloud = points if isinstance(points, ag.Tensor) else ag.constant(
        np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3)))
    n = cloud.shape[0]
    if cfg.m_out > n:
        raise ValueError(f"cannot sample {cfg.m_out} from {n} points")
    cfg.validate()
    training = mode == "train"

    h = cloud
    for i in range(len(cfg.feature_widths)):
        h = _mlp_block(params, f"{prefix}.feat{i}", h, training, cfg.use_norm)
    global_feat = ag.max_rows(h)
    combined = ag.concat([h, ag.broadcast_rows(global_feat, n)], axis=1)
    hidden = ag.relu(_affine(params, f"{prefix}.score_hidden", combined))
    logits = _affine(params, f"{prefix}.score_out", hidden)      # (N, M)

    per_slot = ag.transpose(logits)                              # (M, N)
    if training:
        per_slot = ag.add(per_slot, ag.gumbel_noise((cfg.m_out, n), seed))
    weights = ag.softmax_rows(per_slot, cfg.tau)
    if mode == "hard":
        arg = weights.data.argmax(axis=1)
        hard = np.zeros_like(weights.data)
        hard[np.arange(cfg.m_out), arg] = 1.0
        weights = ag.straight_through(weights, hard)
    sampled = ag.matmul(weights, cloud)
    return sampled, weights


def fa_forward(sampled, params: ModelParams, cfg: FaConfig, prefix: str = "level0.fa",
               training: bool = False):
    """Staged aggregation: halve the points with FPS, pool residual-MLP
    features over each center's nearest neighbors, double the channels."""
    feats = _mlp_block(params, f"{prefix}.embed", sampled, training, cfg.use_norm)
    coords = np.ascontiguousarray(
        sampled.data if isinstance(sampled, ag.Tensor) else np.asarray(sampled, dtype=np.float64))
    count = coords.shape[0]
    for t in range(cfg.stages):
        nxt = count // 2
        if nxt < 1:
            raise ValueError(f"point count underflow at stage {t} (have {count})")
        sel = _kernels.farthest_point_sample(coords, nxt, fps_canonical_start(coords))
        k_eff = min(cfg.k, count)
        neighbors = _kernels.knn(coords, coords[sel], k_eff)
        gathered = ag.gather_rows(feats, neighbors.reshape(-1))
        h = _affine(params, f"{prefix}.stage{t}.res.lin1", gathered)
        if cfg.use_norm:
            h = _norm(params, f"{prefix}.stage{t}.res.bn1", h, training)
        h = _affine(params, f"{prefix}.stage{t}.res.lin2", ag.relu(h))
        residual = ag.relu(ag.add(h, gathered))
        pooled = ag.max_rows_grouped(residual, k_eff)
        lifted = _affine(params, f"{prefix}.stage{t}.lift", pooled)
        if cfg.use_norm:
            lifted = _norm(params, f"{prefix}.stage{t}.lift.bn", lifted, training)
        feats = ag.relu(lifted)
        coords = np.ascontiguousarray(coords[sel])
        count = nxt
    pooled = ag.max_rows(feats)
    # The head sees a single row, so it stays norm-free.
    hidden = ag.relu(_affine(params, f"{prefix}.head.lin1", pooled))
    return _affine(params, f"{prefix}.head.lin2", hidden)        # (1, C)


def level_forward(points, params: ModelParams, cfg: MultiLevelConfig, s: int,
                  mode: str, seed: int):
    """One level end to end; returns (logits, sampled cloud, selection or None)."""
    if isinstance(points, ag.Tensor):
        cloud, pts = points, np.ascontiguousarray(points.data)
    else:
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        cloud = pts
    level_seed = derive_seed(seed, f"level{s}")
    m = cfg.levels[s]
    if m > pts.shape[0]:
        raise ValueError(f"level {s} needs {m} points, input has {pts.shape[0]}")
    if cfg.sampler == "cps":
        sampled, weights = cps_forward(cloud, params, cfg.cps[s], mode, level_seed,
                                       prefix=f"level{s}.cps")
    elif cfg.sampler == "fps":
        sel = _kernels.farthest_point_sample(pts, m, fps_canonical_start(pts))
        sampled, weights = (ag.gather_rows(cloud, sel) if isinstance(cloud, ag.Tensor)
                            else ag.constant(pts[sel])), None
    else:
        sel = random_sample(pts, m, derive_seed(level_seed, "rs")).indices
        sampled, weights = (ag.gather_rows(cloud, sel) if isinstance(cloud, ag.Tensor)
                            else ag.constant(pts[sel])), None
    logits = fa_forward(sampled, params, cfg.fa[s], prefix=f"level{s}.fa",
                        training=mode == "train")
    return logits, sampled, weights


def multilevel_forward(points, params: ModelParams, cfg: MultiLevelConfig,
                       mode: str, seed: int):
    """All levels from the same input cloud; fused score is the weighted sum."""
    per_level = []
    clouds = []
    for s in range(len(cfg.levels)):
        logits, sampled, _ = level_forward(points, params, cfg, s, mode, seed)
        per_level.append(logits)
        clouds.append(sampled)
    fused = ag.smul(per_level[0], cfg.alphas[0])
    for s in range(1, len(per_level)):
        fused = ag.add(fused, ag.smul(per_level[s], cfg.alphas[s]))
    return fused, per_level, clouds


def total_loss(fused, label: int, points, level_clouds, cfg: MultiLevelConfig):
    """Cross entropy plus the Chamfer constraint tying sampled clouds to the input."""
    loss = ag.cross_entropy(fused, [label])
    if not (cfg.spl_enabled and cfg.sampler == "cps"):
        return loss
    pts = points.data if isinstance(points, ag.Tensor) else \
        np.asarray(points, dtype=np.float64).reshape(-1, 3)
    clouds = level_clouds[:1] if cfg.spl_level0_only else level_clouds
    spl = ag.chamfer_loss(clouds[0], pts)
    for cloud in clouds[1:]:
        spl = ag.add(spl, ag.chamfer_loss(cloud, pts))
    return ag.add(loss, ag.smul(spl, cfg.spl_weight))


def selection_diversity(weights: np.ndarray) -> tuple[float, float]:
    """Mean diagonal and mean absolute off-diagonal of W W^T.

    A near-identity product means the selection rows pick distinct points.
    """
    w = np.asarray(weights, dtype=np.float64)
    gram = w @ w.T
    m = gram.shape[0]
    diag = float(np.trace(gram) / m)
    off = gram - np.diag(np.diag(gram))
    mean_off = float(np.abs(off).sum() / (m * (m - 1))) if m > 1 else 0.0
    return diag, mean_off


# ---------------------------------------------------------------------------
# CLI-facing model description
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Serializable constructor arguments for a model, written next to
    checkpoints so evaluation can rebuild the exact configuration."""

    n_points: int
    class_names: tuple
    levels: tuple
    k: int = 24
    stages: int = 4
    sampler: str = "cps"
    use_norm: bool = True
    embed_top: int = 64
    embed_sub: int = 32
    spl_enabled: bool = True
    spl_weight: float = 1.0
    alphas: tuple = ()

    def build(self) -> MultiLevelConfig:
        return build_config(self.n_points, len(self.class_names), levels=self.levels,
                            k=self.k, stages=self.stages, sampler=self.sampler,
                            use_norm=self.use_norm, embed_top=self.embed_top,
                            embed_sub=self.embed_sub,
                            alphas=self.alphas or None,
                            spl_enabled=self.spl_enabled, spl_weight=self.spl_weight)

    def to_kv(self) -> str:
        lines = [
            f"n_points={self.n_points}",
            "class_names=" + ",".join(self.class_names),
            "levels=" + ",".join(str(m) for m in self.levels),
            f"k={self.k}",
            f"stages={self.stages}",
            f"sampler={self.sampler}",
            f"use_norm={int(self.use_norm)}",
            f"embed_top={self.embed_top}",
            f"embed_sub={self.embed_sub}",
            f"spl_enabled={int(self.spl_enabled)}",
            f"spl_weight={self.spl_weight!r}",
            "alphas=" + ",".join(repr(a) for a in self.alphas),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "ModelSpec":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                kv[key] = value
        return cls(
            n_points=int(kv["n_points"]),
            class_names=tuple(kv["class_names"].split(",")),
            levels=tuple(int(x) for x in kv["levels"].split(",")),
            k=int(kv["k"]),
            stages=int(kv["stages"]),
            sampler=kv["sampler"],
            use_norm=bool(int(kv["use_norm"])),
            embed_top=int(kv["embed_top"]),
            embed_sub=int(kv["embed_sub"]),
            spl_enabled=bool(int(kv["spl_enabled"])),
            spl_weight=float(kv["spl_weight"]),
            alphas=tuple(float(x) for x in kv["alphas"].split(",")) if kv["alphas"] else (),
        )

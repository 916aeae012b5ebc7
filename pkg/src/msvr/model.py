"""Multi-scale representation model: branches, fusion, losses, training.

The model holds m scale-specific backbones with linear classifiers plus one
fusion classifier over the concatenated embeddings. Training jointly
minimizes each branch's ID cross-entropy, the fusion cross-entropy, and a
consensus alignment term in which the fusion branch's softened prediction
teaches every scale branch. The teacher signal is gradient-detached by
default; set ``detach_teacher=False`` to let alignment gradients reach the
fusion classifier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import checkpoint, ndgrad as ng
from .backbone import BackboneConfig, BackboneParams, embed, init_backbone
from .ndgrad import ShapeError, Tensor
from .pyramid import Image, build_pyramid

STUDENT_CLAMP = 1e-7


class NumericalError(RuntimeError):
    """Training produced a non-finite loss term."""


@dataclass
class MsvrConfig:
    """Model and optimizer settings.

    The defaults reproduce the reference recipe (two scales 224/160, ADAM at
    lr 2e-4 with weight decay 2e-4 and beta1 0.5, batch 8, 100k iterations,
    unit temperature and alignment weight). ``desk_scale`` swaps in a
    configuration that trains in minutes on a laptop CPU.
    """

    n_id: int
    scales: tuple[int, ...] = (224, 160)
    alignment_weight: float = 1.0  # the loss-mixing weight usually written as lambda
    temperature: float = 1.0
    learning_rate: float = 0.0002
    weight_decay: float = 0.0002
    beta1: float = 0.5
    batch_size: int = 8
    max_iterations: int = 100_000
    detach_teacher: bool = True
    trace_every: int = 100
    crop_area_range: tuple[float, float] = (0.875, 1.0)
    flip_prob: float = 0.5

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales:
            raise ValueError("need at least one scale")
        if self.n_id < 2:
            raise ValueError(f"n_id must be at least 2, got {self.n_id}")
        if self.alignment_weight < 0:
            raise ValueError(f"alignment_weight must be non-negative, got {self.alignment_weight}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @classmethod
    def desk_scale(cls, n_id: int, **overrides) -> "MsvrConfig":
        base = dict(
            scales=(64, 48),
            max_iterations=2000,
            learning_rate=0.001,
            trace_every=50,
        )
        base.update(overrides)
        return cls(n_id=n_id, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["crop_area_range"] = list(self.crop_area_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MsvrConfig":
        d = dict(d)
        d["scales"] = tuple(d["scales"])
        d["crop_area_range"] = tuple(d["crop_area_range"])
        return cls(**d)


@dataclass
class MsvrModel:
    config: MsvrConfig
    arch: BackboneConfig  # input_side is overridden per branch
    branch_params: list[BackboneParams]
    branch_classifiers: list[Tensor]  # each (n_id, d)
    fusion_classifier: Tensor  # (n_id, d * m)

    @property
    def embed_dim(self) -> int:
        return self.arch.embed_dim

    @property
    def num_scales(self) -> int:
        return len(self.branch_params)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for bp in self.branch_params:
            out.extend(bp.tensors())
        out.extend(self.branch_classifiers)
        out.append(self.fusion_classifier)
        return out


@dataclass
class LossBreakdown:
    per_branch_ce: list[float]
    per_branch_align: list[float]
    fusion_ce: float
    total: float
    root: Tensor = field(repr=False, compare=False, default=None)


@dataclass
class TraceRow:
    iteration: int
    per_branch_ce: list[float]
    per_branch_align: list[float]
    fusion_ce: float
    total: float


def init_model(config: MsvrConfig, arch: BackboneConfig, seed: int) -> MsvrModel:
    """Independent per-branch backbones sharing one architecture."""
    streams = np.random.SeedSequence(seed).spawn(config.num_scales + 1)
    branch_params = []
    branch_classifiers = []
    d = arch.embed_dim
    for b, side in enumerate(config.scales):
        cfg = arch.with_input_side(side)
        branch_params.append(init_backbone(cfg, streams[b]))
        rng = np.random.default_rng(streams[b].spawn(1)[0])
        branch_classifiers.append(
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (config.n_id, d)), requires_grad=True)
        )
    rng = np.random.default_rng(streams[-1])
    fusion = Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(d * config.num_scales), (config.n_id, d * config.num_scales)),
        requires_grad=True,
    )
    return MsvrModel(
        config=config,
        arch=arch,
        branch_params=branch_params,
        branch_classifiers=branch_classifiers,
        fusion_classifier=fusion,
    )


# ---------------------------------------------------------------------------
# loss construction

def logits(classifier: Tensor, x: Tensor) -> Tensor:
    """Classifier scores w_k^T x for a 1-D feature vector."""
    if classifier.ndim != 2 or x.ndim != 1 or classifier.shape[1] != x.shape[0]:
        raise ShapeError(
            f"logits: classifier {classifier.shape} incompatible with feature {x.shape}"
        )
    return ng.reshape(ng.matmul(classifier, ng.reshape(x, (x.shape[0], 1))), (classifier.shape[0],))


def class_posterior(classifier: Tensor, x: Tensor) -> Tensor:
    """Softmax class probabilities exp(w_y^T x) / sum_k exp(w_k^T x)."""
    return ng.softmax_logits(logits(classifier, x), 1.0)


def ce_loss(posterior: Tensor, label: int) -> Tensor:
    """Negative log-probability of the true class."""
    label = int(label)
    if not 0 <= label < posterior.shape[0]:
        raise IndexError(f"label {label} out of range for {posterior.shape[0]} classes")
    return ng.scale(ng.log(ng.select(posterior, label)), -1.0)


def ce_from_logits(z: Tensor, label: int) -> Tensor:
    """Same loss computed in log space: logsumexp(z) - z_y."""
    label = int(label)
    if not 0 <= label < z.shape[0]:
        raise IndexError(f"label {label} out of range for {z.shape[0]} classes")
    return ng.sub(ng.log_sum_exp(z), ng.select(z, label))


def consensus_soft_prediction(fusion_logits: Tensor, temperature: float, detach: bool = True) -> Tensor:
    """Softened class distribution from the fusion logits.

    Detached by default so the teacher acts as a constant signal and no
    gradient reaches the fusion branch through alignment.
    """
    z = fusion_logits.detach() if detach else fusion_logits
    return ng.softmax_logits(z, temperature)


def alignment_loss(teacher: Tensor, student: Tensor, clamp: float = STUDENT_CLAMP) -> Tensor:
    """Per-class binary cross-entropy between teacher and student, averaged.

    H = -(1/n) * sum_i [ t_i ln(s_i) + (1 - t_i) ln(1 - s_i) ], with the
    student clamped to [clamp, 1-clamp] before the logs.
    """
    if teacher.shape != student.shape or teacher.ndim != 1:
        raise ShapeError(f"alignment_loss: shapes {teacher.shape} and {student.shape} differ")
    n = teacher.shape[0]
    s = ng.clip(student, clamp, 1.0 - clamp)
    hit = ng.mul(teacher, ng.log(s))
    miss = ng.mul(1.0 - teacher, ng.log(1.0 - s))
    return ng.scale(ng.tensor_sum(ng.add(hit, miss)), -1.0 / n)


def branch_loss(ce: Tensor, align: Tensor, alignment_weight: float) -> Tensor:
    """Scale-branch objective: cross-entropy plus weighted alignment."""
    if alignment_weight < 0:
        raise ValueError(f"alignment weight must be non-negative, got {alignment_weight}")
    if alignment_weight == 0.0:
        return ce
    return ng.add(ce, ng.scale(align, alignment_weight))


def _batch_mean(scalars: Sequence[Tensor]) -> Tensor:
    if len(scalars) == 1:
        return ng.reshape(scalars[0], ())
    return ng.tensor_mean(ng.concat([ng.reshape(s, (1,)) for s in scalars]))


def forward_batch(
    model: MsvrModel,
    pyramids: Sequence[Sequence],
    labels: Sequence[int],
    config: MsvrConfig | None = None,
) -> LossBreakdown:
    """Run one batch through every branch and assemble the joint loss.

    ``pyramids[i]`` holds sample i's per-scale images (Image objects or raw
    (3, s, s) arrays/Tensors) in branch order. Returns the batch-mean loss
    terms; ``root`` is the scalar actually differentiated. ``config``
    defaults to the model's own.
    """
    cfg = config or model.config
    m = model.num_scales
    if len(pyramids) != len(labels) or not pyramids:
        raise ValueError("pyramids and labels must be equal-length and non-empty")
    for y in labels:
        if not 0 <= int(y) < cfg.n_id:
            raise IndexError(f"label {y} out of range for {cfg.n_id} identities")

    ce_terms: list[list[Tensor]] = [[] for _ in range(m)]
    align_terms: list[list[Tensor]] = [[] for _ in range(m)]
    fusion_terms: list[Tensor] = []

    for sample, label in zip(pyramids, labels):
        if len(sample) != m:
            raise ShapeError(f"sample has {len(sample)} scales, model expects {m}")
        views = [_as_image_tensor(v) for v in sample]
        embeddings = [embed(model.branch_params[b], views[b]) for b in range(m)]
        branch_logits = [logits(model.branch_classifiers[b], embeddings[b]) for b in range(m)]
        fused = ng.concat(embeddings)
        fusion_logits = logits(model.fusion_classifier, fused)
        fusion_terms.append(ce_from_logits(fusion_logits, label))
        teacher = consensus_soft_prediction(
            fusion_logits, cfg.temperature, detach=cfg.detach_teacher
        )
        for b in range(m):
            ce_terms[b].append(ce_from_logits(branch_logits[b], label))
            student = ng.softmax_logits(branch_logits[b], 1.0)
            align_terms[b].append(alignment_loss(teacher, student))

    fusion_ce = _batch_mean(fusion_terms)
    per_ce = [_batch_mean(ts) for ts in ce_terms]
    per_align = [_batch_mean(ts) for ts in align_terms]

    total = fusion_ce
    for b in range(m):
        total = ng.add(total, branch_loss(per_ce[b], per_align[b], cfg.alignment_weight))

    return LossBreakdown(
        per_branch_ce=[t.item() for t in per_ce],
        per_branch_align=[t.item() for t in per_align],
        fusion_ce=fusion_ce.item(),
        total=total.item(),
        root=total,
    )


def _as_image_tensor(view) -> Tensor:
    if isinstance(view, Tensor):
        return view
    if isinstance(view, Image):
        return Tensor(view.pixels)
    return Tensor(view)


# ---------------------------------------------------------------------------
# optimizer and training loop

class Adam:
    """ADAM with decoupled weight decay applied as per-step shrinkage."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update

    def zero_grad(self):
        ng.zero_grads(self.params)


def train(
    model: MsvrModel,
    dataset: Sequence[tuple[Image, int]],
    config: MsvrConfig | None = None,
    seed: int = 0,
) -> tuple[MsvrModel, list[TraceRow]]:
    """Optimize the model in place; returns it with the loss trace.

    Deterministic given ``seed``: batch shuffling and augmentation draws all
    derive from it. The trace records the loss of the batch seen at every
    ``trace_every``-th iteration (before that iteration's update) and one
    final entry at ``max_iterations``.
    """
    cfg = config or model.config
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    labels_seen = {int(label) for _, label in dataset}
    if max(labels_seen) >= cfg.n_id or min(labels_seen) < 0:
        raise ValueError(f"dataset labels exceed configured n_id={cfg.n_id}")

    shuffle_rng, augment_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)
    )
    optimizer = Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        beta1=cfg.beta1,
        weight_decay=cfg.weight_decay,
    )
    trace: list[TraceRow] = []
    order: list[int] = []

    def next_batch():
        nonlocal order
        picked = []
        while len(picked) < cfg.batch_size:
            if not order:
                order = list(shuffle_rng.permutation(len(dataset)))
            picked.append(order.pop())
        samples, labels = [], []
        for idx in picked:
            image, label = dataset[idx]
            sample = build_pyramid(
                image,
                cfg.scales,
                augment_enabled=True,
                rng=augment_rng,
                crop_area_range=cfg.crop_area_range,
                flip_prob=cfg.flip_prob,
            )
            samples.append(sample.images)
            labels.append(int(label))
        return samples, labels

    def checked(breakdown: LossBreakdown, iteration: int) -> LossBreakdown:
        for name, value in _loss_fields(breakdown):
            if not np.isfinite(value):
                raise NumericalError(f"non-finite {name} at iteration {iteration}")
        return breakdown

    for iteration in range(cfg.max_iterations):
        samples, labels = next_batch()
        breakdown = checked(forward_batch(model, samples, labels, cfg), iteration)
        if iteration % cfg.trace_every == 0:
            trace.append(_trace_row(iteration, breakdown))
        optimizer.zero_grad()
        breakdown.root.backward()
        optimizer.step()

    samples, labels = next_batch()
    final = checked(forward_batch(model, samples, labels, cfg), cfg.max_iterations)
    trace.append(_trace_row(cfg.max_iterations, final))
    return model, trace


def _loss_fields(breakdown: LossBreakdown):
    for b, v in enumerate(breakdown.per_branch_ce):
        yield f"branch_{b}_ce", v
    for b, v in enumerate(breakdown.per_branch_align):
        yield f"branch_{b}_align", v
    yield "fusion_ce", breakdown.fusion_ce
    yield "total", breakdown.total


def _trace_row(iteration: int, b: LossBreakdown) -> TraceRow:
    return TraceRow(
        iteration=iteration,
        per_branch_ce=list(b.per_branch_ce),
        per_branch_align=list(b.per_branch_align),
        fusion_ce=b.fusion_ce,
        total=b.total,
    )


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    if not trace:
        raise ValueError("empty trace")
    m = len(trace[0].per_branch_ce)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["iteration"]
            + [f"ce_{b}" for b in range(m)]
            + [f"align_{b}" for b in range(m)]
            + ["fusion_ce", "total"]
        )
        for row in trace:
            writer.writerow(
                [row.iteration]
                + [repr(v) for v in row.per_branch_ce]
                + [repr(v) for v in row.per_branch_align]
                + [repr(row.fusion_ce), repr(row.total)]
            )


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    m = sum(1 for name in header if name.startswith("ce_"))
    out = []
    for row in rows[1:]:
        out.append(
            TraceRow(
                iteration=int(row[0]),
                per_branch_ce=[float(v) for v in row[1 : 1 + m]],
                per_branch_align=[float(v) for v in row[1 + m : 1 + 2 * m]],
                fusion_ce=float(row[1 + 2 * m]),
                total=float(row[2 + 2 * m]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# deployment

def extract_features(model: MsvrModel, pyramid: Sequence) -> Tensor:
    """Concatenated per-branch embeddings; the deployment descriptor."""
    if len(pyramid) != model.num_scales:
        raise ShapeError(f"pyramid has {len(pyramid)} scales, model expects {model.num_scales}")
    views = [_as_image_tensor(v) for v in pyramid]
    embeddings = [embed(model.branch_params[b], views[b]) for b in range(model.num_scales)]
    return ng.concat(embeddings).detach()


def branch_features(model: MsvrModel, pyramid: Sequence, branch: int) -> Tensor:
    """Single-branch embedding, for scale-ablation comparisons."""
    if not 0 <= branch < model.num_scales:
        raise IndexError(f"branch {branch} out of range for {model.num_scales} scales")
    view = _as_image_tensor(pyramid[branch])
    return embed(model.branch_params[branch], view).detach()


# ---------------------------------------------------------------------------
# checkpointing

def save_model(path, model: MsvrModel) -> None:
    tensors = []
    for bp in model.branch_params:
        tensors.extend(t.data for t in bp.tensors())
    tensors.extend(c.data for c in model.branch_classifiers)
    tensors.append(model.fusion_classifier.data)
    config = {"model": model.config.to_dict(), "arch": model.arch.to_dict()}
    checkpoint.write_checkpoint(path, "msvr-model", config, tensors)


def load_model(path) -> MsvrModel:
    kind, config, arrays = checkpoint.read_checkpoint(path)
    if kind != "msvr-model":
        raise checkpoint.CheckpointError(f"{path}: expected a model checkpoint, got {kind!r}")
    cfg = MsvrConfig.from_dict(config["model"])
    arch = BackboneConfig.from_dict(config["arch"])
    n_stage = len(arch.channels_per_stage)
    m = cfg.num_scales
    branch_params = []
    cursor = 0
    for b in range(m):
        params = BackboneParams(config=arch.with_input_side(cfg.scales[b]))
        for _ in range(n_stage):
            params.kernels.append(Tensor(arrays[cursor], requires_grad=True))
            params.biases.append(Tensor(arrays[cursor + 1], requires_grad=True))
            cursor += 2
        branch_params.append(params)
    branch_classifiers = [
        Tensor(arrays[cursor + b], requires_grad=True) for b in range(m)
    ]
    cursor += m
    fusion = Tensor(arrays[cursor], requires_grad=True)
    return MsvrModel(
        config=cfg,
        arch=arch,
        branch_params=branch_params,
        branch_classifiers=branch_classifiers,
        fusion_classifier=fusion,
    )

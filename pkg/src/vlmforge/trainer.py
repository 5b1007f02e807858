"""Three-stage training orchestration with per-group freeze policies.

Stage 0 warms up the projector on caption pairs with everything else frozen;
stage 1 pre-trains on a blended document stream; stage 2 is instruction
tuning (optionally joint with text-only demos). Freezing is bitwise: frozen
groups receive no parameter updates and no optimizer-moment updates.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import corpus as corpus_mod
from .errors import NumericError, VlmforgeError
from .model import Model, ModelConfig, Linear, TransformerBlockProjector
from .packing import ByteTokenizer, PackedSample, bind_pixels, pack_document, pack_sft
from .seeding import child_seed, substream

logger = logging.getLogger(__name__)

STAGE_NAMES = ("init-projector", "pretrain", "sft")


@dataclass(frozen=True)
class FreezePolicy:
    trainable: frozenset[str]

    def __post_init__(self):
        unknown = self.trainable - {"vision", "projector", "embed", "llm", "head"}
        if unknown:
            raise VlmforgeError(f"unknown parameter groups in policy: {sorted(unknown)}")

    @staticmethod
    def of(*groups: str) -> "FreezePolicy":
        return FreezePolicy(frozenset(groups))


@dataclass
class StageSpec:
    name: str
    policy: FreezePolicy
    steps: int
    lr: float
    warmup: int | None = None  # default: 3% of steps
    batch_size: int = 8
    text_only_fraction: float = 0.0  # sft only: joint text-only share

    def warmup_steps(self) -> int:
        if self.warmup is not None:
            return self.warmup
        return max(1, round(0.03 * self.steps))


@dataclass
class StagePlan:
    stages: list[StageSpec]

    def __post_init__(self):
        for stage in self.stages:
            if stage.name not in STAGE_NAMES:
                raise VlmforgeError(f"unknown stage name {stage.name!r}")


@dataclass
class LogRecord:
    step: int
    stage: str
    loss: float
    lr: float
    tokens: int
    images: int


class RunLog:
    """Per-step training records, serialized as a fixed-column CSV."""

    COLUMNS = ("step", "stage", "loss", "lr", "tokens", "images")

    def __init__(self, records: list[LogRecord] | None = None):
        self.records: list[LogRecord] = records or []

    def append(self, record: LogRecord) -> None:
        self.records.append(record)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.records:
            writer.writerow([r.step, r.stage, repr(r.loss), repr(r.lr), r.tokens, r.images])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "RunLog":
        reader = csv.DictReader(io.StringIO(text))
        records = [
            LogRecord(
                int(row["step"]),
                row["stage"],
                float(row["loss"]),
                float(row["lr"]),
                int(row["tokens"]),
                int(row["images"]),
            )
            for row in reader
        ]
        return RunLog(records)

    def losses(self, stage: str | None = None) -> list[float]:
        return [r.loss for r in self.records if stage is None or r.stage == stage]


class AdamW:
    """Decoupled-weight-decay Adam over the trainable groups only."""

    def __init__(self, model: Model, policy: FreezePolicy, lr: float,
                 betas=(0.9, 0.95), eps=1e-8, weight_decay=0.05, clip_norm=1.0):
        self.model = model
        self.policy = policy
        self.base_lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name, arr in model.params.items():
            if Model.group_of(name) in policy.trainable:
                self.m[name] = np.zeros_like(arr)
                self.v[name] = np.zeros_like(arr)

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        if self.clip_norm:
            sq = 0.0
            for name in self.m:
                g = grads[name]
                sq += float((g * g).sum())
            norm = math.sqrt(sq)
            scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        else:
            scale = 1.0
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name in self.m:
            g = grads[name] * scale
            p = self.model.params[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)


def lr_at(stage: StageSpec, step: int) -> float:
    """Linear warmup then cosine decay to zero; step is 0-based."""
    warmup = stage.warmup_steps()
    if step < warmup:
        return stage.lr * (step + 1) / warmup
    remaining = max(1, stage.steps - warmup)
    progress = (step - warmup) / remaining
    return stage.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def run_stage(
    stage: StageSpec,
    model: Model,
    batches: Iterator[list[PackedSample]],
    log: RunLog | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    optimizer: AdamW | None = None,
) -> tuple[RunLog, AdamW]:
    """Run one stage's optimizer steps over a deterministic batch stream.

    Frozen groups stay bit-identical throughout, including their (absent)
    optimizer moments. NaN loss aborts with the step number. start_step /
    stop_step support interrupt-and-resume without changing the lr schedule,
    which always spans the full stage.
    """
    log = log if log is not None else RunLog()
    opt = optimizer if optimizer is not None else AdamW(model, stage.policy, stage.lr)
    tokens_seen = sum(r.tokens for r in log.records if r.stage == stage.name)
    images_seen = sum(r.images for r in log.records if r.stage == stage.name)
    for step in range(start_step, stop_step if stop_step is not None else stage.steps):
        batch = next(batches)
        pixels = bind_pixels(batch, model.cfg.resolution)
        loss, grads = model.loss_and_grads(batch, pixels)
        if not math.isfinite(loss):
            raise NumericError(
                f"non-finite loss at stage {stage.name!r} step {step} "
                f"(batch of {len(batch)} samples)"
            )
        lr = lr_at(stage, step)
        opt.step(grads, lr)
        tokens_seen += sum(len(s) for s in batch)
        images_seen += sum(len(s.image_slots) for s in batch)
        log.append(LogRecord(step, stage.name, float(loss), lr, tokens_seen, images_seen))
    return log, opt


# ---------------------------------------------------------------------------
# data streams


def batched(samples: Iterator[PackedSample], batch_size: int) -> Iterator[list[PackedSample]]:
    batch: list[PackedSample] = []
    for sample in samples:
        batch.append(sample)
        if len(batch) == batch_size:
            yield batch
            batch = []


def document_sample_stream(
    docs: Iterator[corpus_mod.InterleavedDocument],
    tok: ByteTokenizer,
    cfg: ModelConfig,
    max_len: int,
) -> Iterator[PackedSample]:
    for doc in docs:
        yield from pack_document(doc, tok, cfg.slot_length, max_len)


def sft_sample_stream(
    visual_demos: list[tuple[str, str, str]],
    text_demos: list[tuple[None, str, str]],
    text_only_fraction: float,
    tok: ByteTokenizer,
    cfg: ModelConfig,
    seed: int,
) -> Iterator[PackedSample]:
    """Joint-SFT mix: text-only demos at the requested fraction, seeded."""
    if not visual_demos and not text_demos:
        raise VlmforgeError("no SFT demos provided")
    rng = substream(seed, "trainer/sft-mix")
    cursors = [0, 0]
    while True:
        use_text = bool(text_demos) and (
            not visual_demos or rng.random() < text_only_fraction
        )
        pool = text_demos if use_text else visual_demos
        idx = cursors[int(use_text)] % len(pool)
        cursors[int(use_text)] += 1
        yield pack_sft(pool[idx], tok, cfg.slot_length)


# ---------------------------------------------------------------------------
# named recipe presets (train-vs-freeze LLM x projector variant)

ALL_TRAINABLE = FreezePolicy.of("projector", "embed", "llm", "head")
PROJECTOR_ONLY = FreezePolicy.of("projector")

PRESETS = {
    # (pretrain policy, sft policy, projector variant)
    "a": (PROJECTOR_ONLY, PROJECTOR_ONLY, TransformerBlockProjector()),
    "b": (PROJECTOR_ONLY, ALL_TRAINABLE, TransformerBlockProjector()),
    "c": (ALL_TRAINABLE, ALL_TRAINABLE, TransformerBlockProjector()),
    "d": (ALL_TRAINABLE, ALL_TRAINABLE, Linear()),
}


def preset_plan(
    name: str,
    steps: tuple[int, int, int] = (50, 200, 50),
    lrs: tuple[float, float, float] = (1e-2, 3e-3, 1e-3),
    batch_size: int = 8,
    text_only_fraction: float = 0.25,
) -> tuple[StagePlan, object]:
    """Build the stage plan for one of the four named configurations.

    Step counts and learning rates are desk-scale defaults, not published
    values. Returns (plan, projector variant).
    """
    if name not in PRESETS:
        raise VlmforgeError(f"unknown preset {name!r} (expected one of a, b, c, d)")
    pretrain_policy, sft_policy, projector = PRESETS[name]
    plan = StagePlan(
        [
            StageSpec("init-projector", PROJECTOR_ONLY, steps[0], lrs[0], batch_size=batch_size),
            StageSpec("pretrain", pretrain_policy, steps[1], lrs[1], batch_size=batch_size),
            StageSpec(
                "sft",
                sft_policy,
                steps[2],
                lrs[2],
                batch_size=batch_size,
                text_only_fraction=text_only_fraction,
            ),
        ]
    )
    return plan, projector


@dataclass
class RecipeCorpora:
    """Materialized inputs for a full recipe run."""

    interleaved: list[corpus_mod.InterleavedDocument]
    pairs: list[corpus_mod.PairSample]
    sft_visual: list[tuple[str, str, str]] = field(default_factory=list)
    sft_text: list[tuple[None, str, str]] = field(default_factory=list)

    def default_sft_demos(self) -> None:
        """Derive instruction demos from captions when none were supplied."""
        if not self.sft_visual:
            self.sft_visual = [
                (p.image_id, "Describe the image: ", p.caption) for p in self.pairs
            ]
        if not self.sft_text:
            self.sft_text = [
                (None, "Repeat after me: " + p.caption + " -> ", p.caption)
                for p in self.pairs
            ]


def stage_batches(
    stage: StageSpec,
    corpora: RecipeCorpora,
    tok: ByteTokenizer,
    cfg: ModelConfig,
    max_len: int,
    seed: int,
) -> Iterator[list[PackedSample]]:
    """Deterministic batch stream for one stage of the recipe."""
    if stage.name == "init-projector":
        docs = [corpus_mod.pair_as_document(p) for p in corpora.pairs]
        sampler = corpus_mod.BlendSampler([(docs, 1.0)], child_seed(seed, "stage0"))
        stream = document_sample_stream(iter(sampler), tok, cfg, max_len)
    elif stage.name == "pretrain":
        sources: list[tuple[list, float]] = []
        if corpora.interleaved and corpora.pairs:
            pair_docs = [corpus_mod.pair_as_document(p) for p in corpora.pairs]
            sources = [(corpora.interleaved, 0.5), (pair_docs, 0.5)]
        elif corpora.interleaved:
            sources = [(corpora.interleaved, 1.0)]
        else:
            sources = [([corpus_mod.pair_as_document(p) for p in corpora.pairs], 1.0)]
        sampler = corpus_mod.BlendSampler(sources, child_seed(seed, "pretrain"))
        stream = document_sample_stream(iter(sampler), tok, cfg, max_len)
    else:
        corpora.default_sft_demos()
        stream = sft_sample_stream(
            corpora.sft_visual,
            corpora.sft_text,
            stage.text_only_fraction,
            tok,
            cfg,
            seed,
        )
    return batched(stream, stage.batch_size)


def run_recipe(
    plan: StagePlan,
    model: Model,
    corpora: RecipeCorpora,
    seed: int,
    max_len: int | None = None,
    on_stage_end: Callable[[str, Model], None] | None = None,
) -> RunLog:
    """Execute the staged recipe sequentially; each stage resumes the last."""
    tok = ByteTokenizer()
    max_len = max_len if max_len is not None else model.cfg.max_positions
    log = RunLog()
    for stage in plan.stages:
        batches = stage_batches(stage, corpora, tok, model.cfg, max_len, seed)
        run_stage(stage, model, batches, log=log)
        if on_stage_end is not None:
            on_stage_end(stage.name, model)
    return log


def compare_loss_curves(log_a: RunLog, log_b: RunLog, final_window: int = 100) -> dict:
    """Mean and final-window loss gap (a - b) over aligned steps."""
    a = {(r.stage, r.step): r.loss for r in log_a.records}
    b = {(r.stage, r.step): r.loss for r in log_b.records}
    shared = sorted(set(a) & set(b))
    if not shared:
        raise VlmforgeError("loss curves share no (stage, step) points")
    gaps = [a[key] - b[key] for key in shared]
    window = gaps[-final_window:]
    return {
        "aligned_steps": len(shared),
        "mean_gap": float(np.mean(gaps)),
        "final_window_gap": float(np.mean(window)),
        "final_window": len(window),
    }

"""Toy auto-regressive visual-language model with exact analytic gradients.

Three pieces: a patch-embedding vision encoder (bidirectional pre-norm
blocks), a projector bridging vision width to decoder width (linear, one
transformer block, or 2x2 spatial downsample), and a causal pre-norm decoder
with learned absolute positions. Everything is plain numpy in float64 so
gradients can be checked against finite differences to tight tolerance; a
float32 mode exists for speed. No dropout anywhere, for determinism.

Parameters live in a flat name -> array store; the name's first component
(vision / projector / embed / llm / head) is the freezing unit.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import erf

from .errors import ConfigMismatchError, VlmforgeError
from .packing import TEXT, PackedSample, tokens_per_image

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"VLMCKPT\x00"
CKPT_VERSION = 1

PARAM_GROUPS = ("vision", "projector", "embed", "llm", "head")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Linear:
    kind: str = "linear"


@dataclass(frozen=True)
class TransformerBlockProjector:
    heads: int = 2
    kind: str = "transformer"


@dataclass(frozen=True)
class Downsample:
    factor: int = 2
    kind: str = "downsample"


ProjectorVariant = Linear | TransformerBlockProjector | Downsample


def projector_from_json(obj: dict) -> ProjectorVariant:
    kind = obj["kind"]
    if kind == "linear":
        return Linear()
    if kind == "transformer":
        return TransformerBlockProjector(heads=int(obj.get("heads", 2)))
    if kind == "downsample":
        return Downsample(factor=int(obj.get("factor", 2)))
    raise ValueError(f"unknown projector kind {kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 16
    patch: int = 8
    vision_dim: int = 16
    model_dim: int = 16
    ffn_dim: int = 32
    vision_layers: int = 2
    llm_layers: int = 2
    heads: int = 2
    vocab_size: int = 260
    projector: ProjectorVariant = field(default_factory=Linear)
    max_positions: int = 128
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigMismatchError("model_dim must be divisible by heads")
        if isinstance(self.projector, TransformerBlockProjector):
            if self.vision_dim % self.projector.heads:
                raise ConfigMismatchError("vision_dim must be divisible by projector heads")
        if self.slot_length > self.max_positions:
            raise ConfigMismatchError("an image does not fit in max_positions")

    @property
    def downsample(self) -> int:
        return self.projector.factor if isinstance(self.projector, Downsample) else 1

    @property
    def encoder_grid(self) -> int:
        return self.resolution // self.patch

    @property
    def encoder_tokens(self) -> int:
        return tokens_per_image(self.resolution, self.patch, 1)

    @property
    def slot_length(self) -> int:
        return tokens_per_image(self.resolution, self.patch, self.downsample)

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_json(self) -> dict:
        out = asdict(self)
        out["projector"] = asdict(self.projector)
        return out

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["projector"] = projector_from_json(obj["projector"])
        return ModelConfig(**obj)


@dataclass
class ForwardTrace:
    logits: np.ndarray  # (L, vocab)
    hidden: list[np.ndarray]  # llm_layers + 1 entries of (L, model_dim)
    modality_mask: np.ndarray


# ---------------------------------------------------------------------------
# primitive layers (each returns output + cache; backward mirrors it)


def _ln_fwd(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dout, cache):
    xhat, inv, g = cache
    D = xhat.shape[-1]
    dg = (dout * xhat).sum(axis=tuple(range(dout.ndim - 1)))
    db = dout.sum(axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu_fwd(x):
    phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return x * phi, (x, phi)


def _gelu_bwd(dout, cache):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return dout * (phi + x * pdf)


def _attn_fwd(x, p, prefix, heads, causal):
    L, D = x.shape
    dh = D // heads
    q = x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = x @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = x @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    qh = q.reshape(L, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(L, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(L, heads, dh).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
    if causal:
        mask = np.triu(np.ones((L, L), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    expo = np.exp(scores)
    attn = expo / expo.sum(axis=-1, keepdims=True)
    oh = attn @ vh
    o = oh.transpose(1, 0, 2).reshape(L, D)
    out = o @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    return out, (x, qh, kh, vh, attn, o)


def _attn_bwd(dout, cache, p, g, prefix, heads):
    x, qh, kh, vh, attn, o = cache
    L, D = x.shape
    dh = D // heads
    g[f"{prefix}.wo"] += o.T @ dout
    g[f"{prefix}.bo"] += dout.sum(axis=0)
    do = dout @ p[f"{prefix}.wo"].T
    doh = do.reshape(L, heads, dh).transpose(1, 0, 2)
    dattn = doh @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ doh
    # softmax backward; masked entries have attn == 0 hence dscores == 0
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dh)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    dq = dqh.transpose(1, 0, 2).reshape(L, D)
    dk = dkh.transpose(1, 0, 2).reshape(L, D)
    dv = dvh.transpose(1, 0, 2).reshape(L, D)
    dx = np.zeros_like(x)
    for name, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
        g[f"{prefix}.{name}"] += x.T @ dproj
        g[f"{prefix}.b{name[1]}"] += dproj.sum(axis=0)
        dx += dproj @ p[f"{prefix}.{name}"].T
    return dx


def _block_fwd(x, p, prefix, heads, causal):
    h1, ln1_cache = _ln_fwd(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    a, attn_cache = _attn_fwd(h1, p, f"{prefix}.attn", heads, causal)
    x2 = x + a
    h2, ln2_cache = _ln_fwd(x2, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    pre = h2 @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"]
    act, gelu_cache = _gelu_fwd(pre)
    m = act @ p[f"{prefix}.mlp.w2"] + p[f"{prefix}.mlp.b2"]
    out = x2 + m
    return out, (ln1_cache, attn_cache, ln2_cache, gelu_cache, h2, act)


def _block_bwd(dout, cache, p, g, prefix, heads):
    ln1_cache, attn_cache, ln2_cache, gelu_cache, h2, act = cache
    dm = dout
    g[f"{prefix}.mlp.w2"] += act.T @ dm
    g[f"{prefix}.mlp.b2"] += dm.sum(axis=0)
    dact = dm @ p[f"{prefix}.mlp.w2"].T
    dpre = _gelu_bwd(dact, gelu_cache)
    g[f"{prefix}.mlp.w1"] += h2.T @ dpre
    g[f"{prefix}.mlp.b1"] += dpre.sum(axis=0)
    dh2 = dpre @ p[f"{prefix}.mlp.w1"].T
    dx2_from_mlp, dg2, db2 = _ln_bwd(dh2, ln2_cache)
    g[f"{prefix}.ln2.g"] += dg2
    g[f"{prefix}.ln2.b"] += db2
    dx2 = dout + dx2_from_mlp
    dh1 = _attn_bwd(dx2, attn_cache, p, g, f"{prefix}.attn", heads)
    dx_from_ln1, dg1, db1 = _ln_bwd(dh1, ln1_cache)
    g[f"{prefix}.ln1.g"] += dg1
    g[f"{prefix}.ln1.b"] += db1
    return dx2 + dx_from_ln1


# ---------------------------------------------------------------------------
# the model


class Model:
    """Parameter store plus forward/backward over packed samples."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params()

    # -- parameter construction

    def _param_shapes(self) -> dict[str, tuple]:
        cfg = self.cfg
        shapes: dict[str, tuple] = {}
        patch_in = cfg.patch * cfg.patch * 3
        shapes["vision.patch.w"] = (patch_in, cfg.vision_dim)
        shapes["vision.patch.b"] = (cfg.vision_dim,)
        shapes["vision.pos"] = (cfg.encoder_tokens, cfg.vision_dim)
        for i in range(cfg.vision_layers):
            shapes.update(self._block_shapes(f"vision.block{i}", cfg.vision_dim, cfg.ffn_dim))
        proj = cfg.projector
        if isinstance(proj, Linear):
            shapes["projector.w"] = (cfg.vision_dim, cfg.model_dim)
            shapes["projector.b"] = (cfg.model_dim,)
        elif isinstance(proj, Downsample):
            f2 = proj.factor * proj.factor
            shapes["projector.w"] = (f2 * cfg.vision_dim, cfg.model_dim)
            shapes["projector.b"] = (cfg.model_dim,)
        else:
            shapes.update(self._block_shapes("projector.block", cfg.vision_dim, cfg.ffn_dim))
            shapes["projector.out.w"] = (cfg.vision_dim, cfg.model_dim)
            shapes["projector.out.b"] = (cfg.model_dim,)
        shapes["embed.tok"] = (cfg.vocab_size, cfg.model_dim)
        shapes["embed.pos"] = (cfg.max_positions, cfg.model_dim)
        for i in range(cfg.llm_layers):
            shapes.update(self._block_shapes(f"llm.block{i}", cfg.model_dim, cfg.ffn_dim))
        shapes["llm.final_ln.g"] = (cfg.model_dim,)
        shapes["llm.final_ln.b"] = (cfg.model_dim,)
        shapes["head.w"] = (cfg.model_dim, cfg.vocab_size)
        shapes["head.b"] = (cfg.vocab_size,)
        return shapes

    @staticmethod
    def _block_shapes(prefix, dim, ffn):
        shapes = {
            f"{prefix}.ln1.g": (dim,),
            f"{prefix}.ln1.b": (dim,),
            f"{prefix}.ln2.g": (dim,),
            f"{prefix}.ln2.b": (dim,),
            f"{prefix}.mlp.w1": (dim, ffn),
            f"{prefix}.mlp.b1": (ffn,),
            f"{prefix}.mlp.w2": (ffn, dim),
            f"{prefix}.mlp.b2": (dim,),
        }
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{proj}"] = (dim, dim)
        for bias in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.attn.{bias}"] = (dim,)
        return shapes

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6D6F64656C]))
        depth = max(1, cfg.vision_layers + cfg.llm_layers)
        scale = 0.02 / np.sqrt(depth)
        params: dict[str, np.ndarray] = {}
        for name, shape in sorted(self._param_shapes().items()):
            if name.endswith(("ln1.g", "ln2.g", "final_ln.g")):
                arr = np.ones(shape)
            elif name.endswith(".b") or name.endswith(
                ("bq", "bk", "bv", "bo", "b1", "b2")
            ):
                arr = np.zeros(shape)
            elif name in ("embed.tok", "embed.pos", "vision.pos"):
                arr = rng.normal(0.0, 0.02, size=shape)
            else:
                arr = rng.normal(0.0, scale, size=shape)
            params[name] = arr.astype(cfg.np_dtype)
        return params

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.params.items()}

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def group_names(self) -> list[str]:
        return sorted({self.group_of(n) for n in self.params})

    def param_count(self, group: str | None = None) -> int:
        return sum(
            arr.size
            for name, arr in self.params.items()
            if group is None or self.group_of(name) == group
        )

    # -- vision path

    def _patchify(self, pixels: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if pixels.shape != (cfg.resolution, cfg.resolution, 3):
            raise ConfigMismatchError(
                f"pixel grid {pixels.shape} does not match resolution {cfg.resolution}"
            )
        g, ps = cfg.encoder_grid, cfg.patch
        patches = pixels.reshape(g, ps, g, ps, 3).transpose(0, 2, 1, 3, 4)
        return patches.reshape(g * g, ps * ps * 3).astype(cfg.np_dtype)

    def encode_image(self, pixels: np.ndarray, with_cache: bool = False):
        """Patchify, embed, add 2-D positions, run bidirectional blocks."""
        p = self.params
        flat = self._patchify(pixels)
        x = flat @ p["vision.patch.w"] + p["vision.patch.b"] + p["vision.pos"]
        caches = []
        for i in range(self.cfg.vision_layers):
            x, cache = _block_fwd(x, p, f"vision.block{i}", self.cfg.heads, causal=False)
            caches.append(cache)
        if with_cache:
            return x, (flat, caches)
        return x

    def _encode_image_bwd(self, dout, cache, g):
        flat, caches = cache
        dx = dout
        for i in reversed(range(self.cfg.vision_layers)):
            dx = _block_bwd(dx, caches[i], self.params, g, f"vision.block{i}", self.cfg.heads)
        g["vision.patch.w"] += flat.T @ dx
        g["vision.patch.b"] += dx.sum(axis=0)
        g["vision.pos"] += dx

    # -- projector

    def project(self, visual: np.ndarray, with_cache: bool = False):
        """Map encoder tokens into decoder space per the configured variant."""
        cfg, p = self.cfg, self.params
        if visual.shape[0] != cfg.encoder_tokens:
            raise ConfigMismatchError(
                f"projector expects {cfg.encoder_tokens} tokens, got {visual.shape[0]}"
            )
        proj = cfg.projector
        if isinstance(proj, Linear):
            out = visual @ p["projector.w"] + p["projector.b"]
            cache = ("linear", visual)
        elif isinstance(proj, Downsample):
            grid = cfg.encoder_grid
            f = proj.factor
            if grid % f:
                raise ConfigMismatchError("downsample factor does not divide token grid")
            # concat each f x f spatial neighborhood in row-major order
            v = visual.reshape(grid, grid, cfg.vision_dim)
            v = v.reshape(grid // f, f, grid // f, f, cfg.vision_dim)
            v = v.transpose(0, 2, 1, 3, 4).reshape((grid // f) ** 2, f * f * cfg.vision_dim)
            out = v @ p["projector.w"] + p["projector.b"]
            cache = ("downsample", v)
        else:
            h, block_cache = _block_fwd(visual, p, "projector.block", proj.heads, causal=False)
            out = h @ p["projector.out.w"] + p["projector.out.b"]
            cache = ("transformer", h, block_cache, proj.heads)
        if with_cache:
            return out, cache
        return out

    def _project_bwd(self, dout, cache, g):
        cfg, p = self.cfg, self.params
        kind = cache[0]
        if kind == "linear":
            _, visual = cache
            g["projector.w"] += visual.T @ dout
            g["projector.b"] += dout.sum(axis=0)
            return dout @ p["projector.w"].T
        if kind == "downsample":
            _, v = cache
            g["projector.w"] += v.T @ dout
            g["projector.b"] += dout.sum(axis=0)
            dv = dout @ p["projector.w"].T
            grid = cfg.encoder_grid
            f = cfg.projector.factor
            dv = dv.reshape(grid // f, grid // f, f, f, cfg.vision_dim)
            dv = dv.transpose(0, 2, 1, 3, 4).reshape(grid * grid, cfg.vision_dim)
            return dv
        _, h, block_cache, heads = cache
        g["projector.out.w"] += h.T @ dout
        g["projector.out.b"] += dout.sum(axis=0)
        dh = dout @ p["projector.out.w"].T
        return _block_bwd(dh, block_cache, p, g, "projector.block", heads)

    # -- full forward

    def _check_sample(self, sample: PackedSample, pixels: dict[str, np.ndarray]):
        cfg = self.cfg
        if len(sample) > cfg.max_positions:
            raise ConfigMismatchError(
                f"sample length {len(sample)} exceeds max_positions {cfg.max_positions}"
            )
        if sample.tokens.max(initial=0) >= cfg.vocab_size:
            raise ConfigMismatchError("token id out of vocabulary range")
        for slot in sample.image_slots:
            if slot.image_id not in pixels:
                raise VlmforgeError(f"image slot {slot.image_id!r} is not bound to pixels")
            if slot.length != cfg.slot_length:
                raise ConfigMismatchError(
                    f"slot length {slot.length} != model slot length {cfg.slot_length}"
                )

    def forward(
        self,
        sample: PackedSample,
        pixels: dict[str, np.ndarray] | None = None,
        with_cache: bool = False,
    ):
        """Run the merged sequence through the decoder, capturing hidden states."""
        pixels = pixels or {}
        self._check_sample(sample, pixels)
        cfg, p = self.cfg, self.params
        L = len(sample)
        x = p["embed.tok"][sample.tokens.astype(np.int64)].copy()
        slot_caches = []
        for slot in sample.image_slots:
            enc, enc_cache = self.encode_image(pixels[slot.image_id], with_cache=True)
            proj, proj_cache = self.project(enc, with_cache=True)
            x[slot.start : slot.start + slot.length] = proj
            slot_caches.append((slot, enc_cache, proj_cache))
        x = x + p["embed.pos"][:L]
        hidden = [x]
        block_caches = []
        for i in range(cfg.llm_layers):
            x, cache = _block_fwd(x, p, f"llm.block{i}", cfg.heads, causal=True)
            hidden.append(x)
            block_caches.append(cache)
        normed, final_cache = _ln_fwd(x, p["llm.final_ln.g"], p["llm.final_ln.b"])
        logits = normed @ p["head.w"] + p["head.b"]
        trace = ForwardTrace(logits, hidden, sample.modality_mask.copy())
        if with_cache:
            return trace, (sample, slot_caches, block_caches, final_cache, normed)
        return trace

    # -- loss and gradients

    @staticmethod
    def shifted_targets(sample: PackedSample):
        """Next-token targets aligned with logits positions.

        targets[i] = tokens[i+1]; mask[i] selects positions whose *target*
        carries loss (loss_mask of the target position). The final position
        has no target and is masked.
        """
        L = len(sample)
        targets = np.zeros(L, dtype=np.int64)
        mask = np.zeros(L, dtype=np.float64)
        if L > 1:
            targets[: L - 1] = sample.tokens[1:].astype(np.int64)
            mask[: L - 1] = sample.loss_mask[1:].astype(np.float64)
        return targets, mask

    def _loss_sums(self, trace, targets, mask):
        """Summed masked cross-entropy and per-logit gradient (unnormalized)."""
        logits = trace.logits
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        logp = shifted[np.arange(len(targets)), targets] - logz
        ce_sum = float(-(logp * mask).sum())
        probs = np.exp(shifted - logz[:, None])
        dlogits = probs
        dlogits[np.arange(len(targets)), targets] -= 1.0
        dlogits *= mask[:, None]
        return ce_sum, dlogits

    def _backward(self, dlogits, cache, grads):
        p = self.params
        sample, slot_caches, block_caches, final_cache, normed = cache
        grads["head.w"] += normed.T @ dlogits
        grads["head.b"] += dlogits.sum(axis=0)
        dnormed = dlogits @ p["head.w"].T
        dx, dg, db = _ln_bwd(dnormed, final_cache)
        grads["llm.final_ln.g"] += dg
        grads["llm.final_ln.b"] += db
        for i in reversed(range(self.cfg.llm_layers)):
            dx = _block_bwd(dx, block_caches[i], p, grads, f"llm.block{i}", self.cfg.heads)
        L = len(sample)
        grads["embed.pos"][:L] += dx
        text_positions = sample.modality_mask == TEXT
        ids = sample.tokens.astype(np.int64)[text_positions]
        np.add.at(grads["embed.tok"], ids, dx[text_positions])
        for slot, enc_cache, proj_cache in slot_caches:
            dproj = dx[slot.start : slot.start + slot.length]
            denc = self._project_bwd(dproj, proj_cache, grads)
            self._encode_image_bwd(denc, enc_cache, grads)

    def loss_and_grads(
        self,
        samples: PackedSample | list[PackedSample],
        pixels: dict[str, np.ndarray] | None = None,
        grads: dict[str, np.ndarray] | None = None,
    ):
        """Mean masked next-token cross-entropy over a (micro)batch.

        The mean is over all masked target positions across the batch.
        Gradients cover every parameter group, frozen or not; the trainer
        decides which to apply. An all-masked batch is flagged and yields
        exactly zero loss and gradients.
        """
        if isinstance(samples, PackedSample):
            samples = [samples]
        grads = grads if grads is not None else self.zero_grads()
        per_sample = []
        total_mask = 0.0
        for sample in samples:
            trace, cache = self.forward(sample, pixels, with_cache=True)
            targets, mask = self.shifted_targets(sample)
            ce_sum, dlogits = self._loss_sums(trace, targets, mask)
            per_sample.append((ce_sum, dlogits, cache))
            total_mask += float(mask.sum())
        if total_mask == 0.0:
            logger.warning("loss_and_grads: batch has no loss-masked positions")
            return 0.0, grads
        loss = 0.0
        for ce_sum, dlogits, cache in per_sample:
            loss += ce_sum / total_mask
            self._backward(dlogits / total_mask, cache, grads)
        return loss, grads

    def loss_from_trace(self, trace: ForwardTrace, targets, mask) -> float:
        """Mean masked cross-entropy of an existing trace against explicit targets."""
        targets = np.asarray(targets, dtype=np.int64)
        mask = np.asarray(mask, dtype=np.float64)
        n = float(mask.sum())
        if n == 0.0:
            return 0.0
        ce_sum, _ = self._loss_sums(trace, targets, mask)
        return ce_sum / n

    def sequence_loss(self, sample: PackedSample, pixels=None) -> float:
        """Loss only (no gradients) for scoring."""
        trace = self.forward(sample, pixels)
        targets, mask = self.shifted_targets(sample)
        n = float(mask.sum())
        if n == 0.0:
            return 0.0
        ce_sum, _ = self._loss_sums(trace, targets, mask)
        return ce_sum / n

    # -- generation

    def generate(self, prefix: PackedSample, pixels=None, max_new: int = 32) -> list[int]:
        """Greedy continuation; stops at EOS (id vocab-specific: 257)."""
        from .packing import ByteTokenizer, ImageSlot as _Slot  # avoid cycle at import

        eos = ByteTokenizer().eos
        if len(prefix) + max_new > self.cfg.max_positions:
            raise ConfigMismatchError("prefix + max_new exceeds max_positions")
        tokens = list(prefix.tokens.astype(int))
        modality = list(prefix.modality_mask.astype(int))
        out: list[int] = []
        for _ in range(max_new):
            sample = PackedSample(
                np.asarray(tokens, dtype=np.uint32),
                np.asarray(modality, dtype=np.uint8),
                np.zeros(len(tokens), dtype=np.uint8),
                list(prefix.image_slots),
                prefix.stage_tag,
            )
            trace = self.forward(sample, pixels)
            nxt = int(np.argmax(trace.logits[-1]))
            if nxt == eos:
                break
            out.append(nxt)
            tokens.append(nxt)
            modality.append(TEXT)
        return out

    # -- checkpoints

    def group_checksum(self, group: str) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            if self.group_of(name) == group:
                h.update(self.params[name].tobytes())
        return h.hexdigest()

    def save_checkpoint(self, path) -> None:
        """Little-endian float32 checkpoint with the config embedded."""
        cfg_json = json.dumps(self.cfg.to_json(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(cfg_json)))
            fh.write(cfg_json)
            fh.write(struct.pack("<I", len(self.params)))
            for name in sorted(self.params):
                arr = self.params[name]
                raw = name.encode()
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype("<f4").tobytes())

    @staticmethod
    def load_checkpoint(path, expect_cfg: ModelConfig | None = None) -> "Model":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != CKPT_MAGIC:
                raise VlmforgeError(f"{path}: not a VLMCKPT file")
            version, cfg_len = struct.unpack("<II", fh.read(8))
            if version != CKPT_VERSION:
                raise VlmforgeError(f"{path}: unsupported checkpoint version {version}")
            cfg = ModelConfig.from_json(json.loads(fh.read(cfg_len)))
            if expect_cfg is not None and cfg != expect_cfg:
                raise ConfigMismatchError(f"{path}: checkpoint config mismatch")
            (n_params,) = struct.unpack("<I", fh.read(4))
            params: dict[str, np.ndarray] = {}
            for _ in range(n_params):
                (name_len,) = struct.unpack("<H", fh.read(2))
                name = fh.read(name_len).decode()
                (ndim,) = struct.unpack("<I", fh.read(4))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
                params[name] = arr.astype(cfg.np_dtype)
        return Model(cfg, params)

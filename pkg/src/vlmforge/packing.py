"""Token packing: documents and demos -> fixed-vocab sequences with masks.

The tokenizer is byte-level (256 byte ids + BOS/EOS/IMG/PAD), so encode/decode
round-trips any UTF-8 string exactly. Images enter packed sequences as runs of
the IMG placeholder; the image_slots table records where each image sits so
pixels can be bound at batch time without repacking shards.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import ImageSegment, InterleavedDocument, TextSegment
from .errors import ConfigMismatchError, ShardFormatError

TEXT = 0
IMAGE = 1

SHARD_MAGIC = b"VLMSHARD"
SHARD_VERSION = 1


class ByteTokenizer:
    """Byte-level tokenizer with dense special ids appended after the bytes."""

    def __init__(self):
        self.n_bytes = 256
        self.bos = 256
        self.eos = 257
        self.img = 258
        self.pad = 259
        self.vocab_size = 260

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        data = bytes(int(i) for i in ids if int(i) < self.n_bytes)
        return data.decode("utf-8", errors="replace")

    def vocab_hash(self) -> bytes:
        desc = f"byte-fallback:{self.n_bytes}:bos={self.bos},eos={self.eos},img={self.img},pad={self.pad}"
        return hashlib.sha256(desc.encode()).digest()


@dataclass
class ImageSlot:
    start: int
    length: int
    image_id: str


@dataclass
class PackedSample:
    tokens: np.ndarray  # uint32 (L,)
    modality_mask: np.ndarray  # uint8 (L,), TEXT or IMAGE
    loss_mask: np.ndarray  # uint8 (L,), 1 where the token is a target
    image_slots: list[ImageSlot] = field(default_factory=list)
    stage_tag: str = "pretrain"

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def validate(self, slot_length: int | None = None) -> None:
        L = len(self)
        if not (len(self.modality_mask) == len(self.loss_mask) == L):
            raise ValueError("mask lengths disagree with tokens")
        covered = np.zeros(L, dtype=bool)
        for slot in self.image_slots:
            if slot.start < 0 or slot.start + slot.length > L:
                raise ValueError(f"slot {slot} out of bounds")
            if covered[slot.start : slot.start + slot.length].any():
                raise ValueError(f"slot {slot} overlaps another slot")
            covered[slot.start : slot.start + slot.length] = True
            if slot_length is not None and slot.length != slot_length:
                raise ValueError(
                    f"slot length {slot.length} != configured {slot_length}"
                )
        image_positions = self.modality_mask == IMAGE
        if not np.array_equal(image_positions, covered):
            raise ValueError("IMAGE positions are not exactly the slot positions")
        if self.loss_mask[image_positions].any():
            raise ValueError("loss_mask must be 0 at IMAGE positions")
        if L and self.loss_mask[0]:
            raise ValueError("loss_mask must be 0 at position 0")


def tokens_per_image(resolution: int, patch: int, downsample: int = 1) -> int:
    """Number of LLM positions one image occupies."""
    if resolution % patch != 0:
        raise ConfigMismatchError(f"patch {patch} does not divide resolution {resolution}")
    grid = resolution // patch
    if grid % downsample != 0:
        raise ConfigMismatchError(f"downsample {downsample} does not divide grid {grid}")
    return (grid // downsample) ** 2


def _segment_blocks(doc, tok, slot_length):
    """Per-segment (token ids, image_id or None) blocks in document order."""
    blocks = []
    for seg in doc.segments:
        if isinstance(seg, ImageSegment):
            blocks.append(([tok.img] * slot_length, seg.image_id))
        elif isinstance(seg, TextSegment):
            blocks.append((tok.encode(seg.text), None))
        else:
            raise TypeError(f"unknown segment type {type(seg)!r}")
    return blocks


def _finish_sample(ids, image_ids_at, tok, stage_tag):
    tokens = np.asarray(ids, dtype=np.uint32)
    modality = np.zeros(len(ids), dtype=np.uint8)
    slots = []
    for start, length, image_id in image_ids_at:
        modality[start : start + length] = IMAGE
        slots.append(ImageSlot(start, length, image_id))
    loss = ((modality == TEXT) & (np.arange(len(ids)) > 0)).astype(np.uint8)
    return PackedSample(tokens, modality, loss, slots, stage_tag)


def pack_document(
    doc: InterleavedDocument,
    tok: ByteTokenizer,
    slot_length: int,
    max_len: int,
) -> list[PackedSample]:
    """Pack one document into <= max_len samples, splitting between segments.

    Every sample starts with BOS; EOS closes the document (last sample only).
    Image slots are never split; an over-long text segment is chunked as a
    last resort. Loss targets are every TEXT position after position 0.
    """
    if max_len <= slot_length + 2:
        raise ConfigMismatchError(
            f"max_len {max_len} too small for slot length {slot_length}"
        )
    blocks = _segment_blocks(doc, tok, slot_length)
    samples: list[PackedSample] = []
    ids: list[int] = [tok.bos]
    slots: list[tuple[int, int, str]] = []

    def flush():
        nonlocal ids, slots
        if len(ids) > 1:
            samples.append(_finish_sample(ids, slots, tok, "pretrain"))
        ids = [tok.bos]
        slots = []

    for i, (block_ids, image_id) in enumerate(blocks):
        if i == len(blocks) - 1:
            block_ids = block_ids + [tok.eos]
        if image_id is not None and len(block_ids) > max_len - 1:
            raise ConfigMismatchError(
                f"image slot of length {slot_length} cannot fit max_len {max_len}"
            )
        if image_id is None:
            # chunk text that cannot fit any sample on its own
            while len(block_ids) > max_len - 1:
                room = max_len - len(ids)
                if room <= 0:
                    flush()
                    room = max_len - 1
                ids.extend(block_ids[:room])
                block_ids = block_ids[room:]
                flush()
        if len(ids) + len(block_ids) > max_len:
            flush()
        if image_id is not None:
            slots.append((len(ids), slot_length, image_id))
        ids.extend(block_ids)
    flush()
    return samples


def pack_sft(
    demo: tuple[str | None, str, str],
    tok: ByteTokenizer,
    slot_length: int,
) -> PackedSample:
    """Pack one instruction demo: [BOS, image slot?, prompt, answer, EOS].

    Only answer and EOS positions carry loss; the prompt is context.
    """
    image_id, prompt, answer = demo
    if not prompt or not answer:
        raise ValueError("prompt and answer must be non-empty")
    ids: list[int] = [tok.bos]
    slots: list[tuple[int, int, str]] = []
    if image_id is not None:
        slots.append((len(ids), slot_length, image_id))
        ids.extend([tok.img] * slot_length)
    ids.extend(tok.encode(prompt))
    answer_start = len(ids)
    ids.extend(tok.encode(answer))
    ids.append(tok.eos)
    sample = _finish_sample(ids, slots, tok, "sft")
    loss = np.zeros(len(ids), dtype=np.uint8)
    loss[answer_start:] = 1
    sample.loss_mask = loss
    return sample


# ---------------------------------------------------------------------------
# binary shard format


def config_hash(resolution: int, patch: int, downsample: int) -> bytes:
    payload = json.dumps(
        {"resolution": resolution, "patch": patch, "downsample": downsample},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).digest()


_STAGE_TAGS = {"pretrain": 0, "sft": 1}
_STAGE_NAMES = {v: k for k, v in _STAGE_TAGS.items()}


def _encode_record(sample: PackedSample) -> bytes:
    buf = io.BytesIO()
    L = len(sample)
    buf.write(struct.pack("<IB", L, _STAGE_TAGS[sample.stage_tag]))
    buf.write(sample.tokens.astype("<u4").tobytes())
    buf.write(sample.modality_mask.astype("u1").tobytes())
    buf.write(sample.loss_mask.astype("u1").tobytes())
    buf.write(struct.pack("<I", len(sample.image_slots)))
    for slot in sample.image_slots:
        raw = slot.image_id.encode("utf-8")
        buf.write(struct.pack("<IIH", slot.start, slot.length, len(raw)))
        buf.write(raw)
    return buf.getvalue()


def _decode_record(payload: bytes) -> PackedSample:
    view = memoryview(payload)
    L, tag = struct.unpack_from("<IB", view, 0)
    off = 5
    tokens = np.frombuffer(view, dtype="<u4", count=L, offset=off).copy()
    off += 4 * L
    modality = np.frombuffer(view, dtype="u1", count=L, offset=off).copy()
    off += L
    loss = np.frombuffer(view, dtype="u1", count=L, offset=off).copy()
    off += L
    (n_slots,) = struct.unpack_from("<I", view, off)
    off += 4
    slots = []
    for _ in range(n_slots):
        start, length, id_len = struct.unpack_from("<IIH", view, off)
        off += 10
        image_id = bytes(view[off : off + id_len]).decode("utf-8")
        off += id_len
        slots.append(ImageSlot(start, length, image_id))
    return PackedSample(tokens, modality, loss, slots, _STAGE_NAMES[tag])


def write_shard(samples, path, vocab_hash: bytes, cfg_hash: bytes) -> int:
    """Write samples as a length-prefixed binary shard; returns record count."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<I", SHARD_VERSION))
        fh.write(vocab_hash)
        fh.write(cfg_hash)
        for sample in samples:
            record = _encode_record(sample)
            fh.write(struct.pack("<I", len(record)))
            fh.write(record)
            count += 1
    return count


def read_shard(path, vocab_hash: bytes | None = None, cfg_hash: bytes | None = None):
    """Stream samples back from a shard, refusing mismatched vocab/config."""
    with open(path, "rb") as fh:
        header = fh.read(8 + 4 + 32 + 32)
        if len(header) < 76 or header[:8] != SHARD_MAGIC:
            raise ShardFormatError(f"{path}: not a VLMSHARD file")
        (version,) = struct.unpack_from("<I", header, 8)
        if version != SHARD_VERSION:
            raise ShardFormatError(f"{path}: unsupported shard version {version}")
        file_vocab = header[12:44]
        file_cfg = header[44:76]
        if vocab_hash is not None and file_vocab != vocab_hash:
            raise ShardFormatError(f"{path}: vocab hash mismatch, refusing to load")
        if cfg_hash is not None and file_cfg != cfg_hash:
            raise ShardFormatError(f"{path}: config hash mismatch, refusing to load")
        while True:
            offset = fh.tell()
            prefix = fh.read(4)
            if not prefix:
                return
            if len(prefix) < 4:
                raise ShardFormatError(f"{path}: truncated at byte {offset}")
            (length,) = struct.unpack("<I", prefix)
            payload = fh.read(length)
            if len(payload) < length:
                raise ShardFormatError(f"{path}: truncated record at byte {offset}")
            yield _decode_record(payload)


# ---------------------------------------------------------------------------
# synthetic pixel binding


def pixels_for(image_id: str, resolution: int) -> np.ndarray:
    """Deterministic procedural pixels in [0,1], keyed by image_id only."""
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.random((resolution, resolution, 3))


def bind_pixels(samples, resolution: int) -> dict[str, np.ndarray]:
    """Synthesize the pixel tensors every image slot in `samples` refers to."""
    out: dict[str, np.ndarray] = {}
    for sample in samples:
        for slot in sample.image_slots:
            if slot.image_id not in out:
                out[slot.image_id] = pixels_for(slot.image_id, resolution)
    return out

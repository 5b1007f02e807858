import numpy as np
import pytest

from vlmforge.corpus import ImageSegment, InterleavedDocument, TextSegment
from vlmforge.model import Model, ModelConfig, TransformerBlockProjector
from vlmforge.packing import ByteTokenizer


@pytest.fixture
def tok():
    return ByteTokenizer()


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        resolution=16, patch=8, vision_dim=16, model_dim=16, ffn_dim=32,
        vision_layers=2, llm_layers=2, heads=2, vocab_size=260,
        projector=TransformerBlockProjector(heads=2), max_positions=64, seed=7,
    )


@pytest.fixture
def tiny_model(tiny_cfg):
    return Model(tiny_cfg)


def random_document(rng: np.random.Generator, doc_id: str,
                    n_segments: int | None = None,
                    with_sims: bool = True) -> InterleavedDocument:
    """Random mix of text and image segments, at least one segment."""
    n = n_segments if n_segments is not None else int(rng.integers(1, 9))
    kinds = rng.random(n) < 0.5
    segments = []
    for i, is_image in enumerate(kinds):
        if is_image:
            segments.append(ImageSegment(f"{doc_id}-img{i}"))
        else:
            length = int(rng.integers(1, 12))
            text = "".join(chr(97 + int(c)) for c in rng.integers(0, 26, size=length))
            segments.append(TextSegment(text))
    doc = InterleavedDocument(doc_id, segments)
    if with_sims:
        text_idx = [i for i, s in enumerate(segments) if isinstance(s, TextSegment)]
        if text_idx:
            fixed = []
            for i, seg in enumerate(segments):
                if isinstance(seg, ImageSegment):
                    sims = {j: float(np.round(rng.uniform(-1, 1), 6)) for j in text_idx}
                    fixed.append(ImageSegment(seg.image_id, sims))
                else:
                    fixed.append(seg)
            doc = InterleavedDocument(doc_id, fixed)
    return doc

import numpy as np
import pytest
import torch

from groundgen.backbone import Backbone, BackboneConfig
from groundgen.scorer import Scorer, ScorerConfig


@pytest.fixture(autouse=True)
def _limit_threads():
    torch.set_num_threads(2)


TINY_BACKBONE = BackboneConfig(
    d_vision=16,
    d_text=16,
    d_shared=16,
    n_layers=1,
    n_fusion_layers=1,
    n_heads=2,
    patch_size=8,
    max_seq_len=48,
)


@pytest.fixture
def tiny_backbone() -> Backbone:
    torch.manual_seed(0)
    model = Backbone(TINY_BACKBONE)
    model.eval()
    return model


@pytest.fixture
def default_backbone() -> Backbone:
    torch.manual_seed(0)
    model = Backbone(BackboneConfig())
    model.eval()
    return model


@pytest.fixture
def raw_scorer() -> Scorer:
    torch.manual_seed(0)
    scorer = Scorer(ScorerConfig())
    scorer.freeze()
    return scorer


class StubScorer:
    """Scorer stand-in returning preset unit vectors for loss identity tests."""

    def __init__(self, text_map=None, image_vec=None, patch_map=None):
        self.text_map = text_map or {}
        self.image_vec = image_vec
        self.patch_map = patch_map or {}

    def embed_text(self, words):
        return torch.as_tensor(self.text_map[tuple(words)], dtype=torch.float32)

    def embed_image(self, image):
        return torch.as_tensor(self.image_vec, dtype=torch.float32)

    def embed_patch(self, image, box):
        return torch.as_tensor(self.patch_map[tuple(box)], dtype=torch.float32)


@pytest.fixture
def stub_scorer_cls():
    return StubScorer


def rand_unit(rng: np.random.Generator, dim: int = 8) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)

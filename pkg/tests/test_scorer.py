import math

import numpy as np
import pytest
import torch

from groundgen.scorer import (
    Scorer,
    ScorerConfig,
    build_pairs,
    contrastive_loss,
    pretrain_scorer,
    similarity,
)


def test_embed_image_unit_norm(raw_scorer):
    rng = np.random.default_rng(0)
    for _ in range(100):
        img = rng.random((64, 64, 3), dtype=np.float32)
        e = raw_scorer.embed_image(img)
        assert abs(float(e.norm()) - 1.0) < 1e-5


def test_embed_text_unit_norm_and_deterministic(raw_scorer):
    a = raw_scorer.embed_text(["red", "circle"])
    b = raw_scorer.embed_text(["red", "circle"])
    assert abs(float(a.norm()) - 1.0) < 1e-5
    assert torch.equal(a, b)


def test_full_canvas_patch_equals_image(raw_scorer):
    img = torch.rand(64, 64, 3)
    e1 = raw_scorer.embed_image(img)
    e2 = raw_scorer.embed_patch(img, (0, 0, 64, 64))
    assert float((e1 - e2).abs().max()) < 1e-5


def test_degenerate_box_raises(raw_scorer):
    img = torch.rand(64, 64, 3)
    with pytest.raises(ValueError, match="degenerate box"):
        raw_scorer.embed_patch(img, (10, 10, 10, 14))
    with pytest.raises(ValueError, match="degenerate box"):
        raw_scorer.embed_patch(img, (-8, 0, 0, 14))  # clamps to zero width


def test_similarity_identities():
    v = torch.tensor([0.6, 0.8])
    assert similarity(v, v) == pytest.approx(1.0)
    assert similarity(v, -v) == pytest.approx(-1.0)
    e1 = torch.tensor([1.0, 0.0])
    e2 = torch.tensor([0.0, 1.0])
    assert similarity(e1, e2) == 0.0


def test_similarity_symmetric_exactly():
    rng = np.random.default_rng(1)
    for _ in range(50):
        u = torch.tensor(rng.normal(size=8))
        u = u / u.norm()
        v = torch.tensor(rng.normal(size=8))
        v = v / v.norm()
        assert similarity(u, v) == similarity(v, u)


def test_similarity_rejects_non_finite():
    v = torch.tensor([1.0, 0.0])
    bad = torch.tensor([float("nan"), 0.0])
    with pytest.raises(ValueError):
        similarity(v, bad)


def test_contrastive_loss_identical_embeddings_log_batch():
    b = 16
    same = torch.nn.functional.normalize(torch.ones(b, 8), dim=-1)
    loss = contrastive_loss(same, same, 1.0)
    assert float(loss) == pytest.approx(math.log(b), abs=1e-5)


def test_contrastive_loss_orthogonal_near_zero():
    eye = torch.eye(32)
    loss = contrastive_loss(eye, eye, 0.07)
    assert float(loss) < 1e-3


def test_pretrain_requires_2000_pairs():
    from groundgen import dataset, world

    class FakeRecord:
        def __init__(self, seed):
            self.spec = world.sample_scene(seed, 2)

        def load_image(self):
            return world.render(self.spec)

    records = [FakeRecord(s) for s in range(20)]
    assert len(build_pairs(records)) < 2000
    with pytest.raises(ValueError, match="dataset too small"):
        pretrain_scorer(records, ScorerConfig(steps=1))


def test_frozen_hash_stable_under_inference(raw_scorer):
    h0 = raw_scorer.params_hash()
    raw_scorer.embed_image(torch.rand(64, 64, 3))
    raw_scorer.embed_text(["red"])
    assert raw_scorer.params_hash() == h0
    assert all(not p.requires_grad for p in raw_scorer.parameters())


def test_scorer_init_deterministic():
    torch.manual_seed(7)
    a = Scorer(ScorerConfig())
    torch.manual_seed(7)
    b = Scorer(ScorerConfig())
    assert a.params_hash() == b.params_hash()

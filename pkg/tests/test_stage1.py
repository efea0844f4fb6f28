import numpy as np
import pytest
import torch

from groundgen import captions as C
from groundgen import world
from groundgen.backbone import DecodeSpec
from groundgen.stage1 import (
    Stage1Config,
    caption_reward,
    loss_global,
    loss_local,
    self_caption,
    stage1_loss,
    stage1_step,
    warmup_step,
)


def test_config_rejects_bad_weights():
    with pytest.raises(ValueError):
        Stage1Config(weight_global=-1.0)
    with pytest.raises(ValueError):
        Stage1Config(weight_global=0.0, weight_local=0.0)


def test_loss_global_identities(stub_scorer_cls):
    v = np.array([1.0, 0.0, 0.0], dtype=np.float32)
    scorer = stub_scorer_cls(text_map={("red",): v}, image_vec=v)
    assert loss_global(scorer, ("red",), None) == pytest.approx(-1.0)
    orth = stub_scorer_cls(
        text_map={("red",): np.array([0.0, 1.0, 0.0], dtype=np.float32)}, image_vec=v
    )
    assert loss_global(orth, ("red",), None) == pytest.approx(0.0)


def test_loss_global_rejects_empty(stub_scorer_cls):
    with pytest.raises(ValueError, match="empty"):
        loss_global(stub_scorer_cls(), (), None)


def test_loss_local_mean_and_flags(stub_scorer_cls):
    v1 = np.array([1.0, 0.0], dtype=np.float32)
    v2 = np.array([0.0, 1.0], dtype=np.float32)
    box_a = (0, 0, 3, 3)
    box_b = (4, 4, 7, 7)
    scorer = stub_scorer_cls(
        text_map={("a",): v1, ("b",): v1},
        patch_map={C.dequantize_box(box_a): v1, C.dequantize_box(box_b): v2},
    )
    objs = [C.CaptionObject(box_a, ("a",)), C.CaptionObject(box_b, ("b",))]
    value, info = loss_local(scorer, objs, None)
    # similarities 1 and 0 -> mean 0.5 -> loss -0.5
    assert value == pytest.approx(-0.5)
    assert info == {"skipped": 0, "no_objects": False}


def test_loss_local_single_match(stub_scorer_cls):
    v = np.array([0.6, 0.8], dtype=np.float32)
    box = (1, 1, 4, 4)
    scorer = stub_scorer_cls(text_map={("x",): v}, patch_map={C.dequantize_box(box): v})
    value, info = loss_local(scorer, [C.CaptionObject(box, ("x",))], None)
    assert value == pytest.approx(-1.0)


def test_loss_local_no_objects_flag(stub_scorer_cls):
    value, info = loss_local(stub_scorer_cls(), [], None)
    assert value == 0.0
    assert info["no_objects"]


def test_loss_local_skips_degenerate(raw_scorer):
    img = torch.rand(64, 64, 3)
    objs = [
        C.CaptionObject((3, 3, 3, 5), ("red",)),  # zero-width after dequantize
        C.CaptionObject((0, 0, 8, 8), ("red", "circle")),
    ]
    value, info = loss_local(raw_scorer, objs, img)
    assert info["skipped"] == 1
    assert not info["no_objects"]


def test_stage1_loss_linearity_exact():
    cfg = Stage1Config(weight_global=1.0, weight_local=1.0)
    assert stage1_loss(-1.0, -1.0, cfg) == -2.0
    cfg2 = Stage1Config(weight_global=1.0, weight_local=0.0)
    assert stage1_loss(-0.3, 5.0, cfg2) == pytest.approx(-0.3, abs=1e-12)
    cfg3 = Stage1Config(weight_global=1.0, weight_local=0.5)
    assert stage1_loss(-0.8, -0.6, cfg3) == pytest.approx(-1.1, abs=1e-12)


def test_reward_bounds(raw_scorer):
    cfg = Stage1Config()
    img = torch.rand(64, 64, 3)
    lo = -(cfg.weight_global + cfg.weight_local) - cfg.malformed_penalty
    hi = cfg.weight_global + cfg.weight_local
    for words in [(), ("red",), ("red", "circle", "gray")]:
        for wf in (True, False):
            cap = C.HierarchicalCaption(words, (), well_formed=wf)
            r, _ = caption_reward(raw_scorer, cap, img, cfg)
            assert lo - 1e-9 <= r <= hi + 1e-9


def test_self_caption_untrained_does_not_crash(default_backbone):
    imgs = torch.rand(2, 64, 64, 3)
    out = self_caption(default_backbone, imgs, DecodeSpec("greedy"), max_len=32)
    assert len(out) == 2
    for cap, ids in out:
        assert isinstance(cap, C.HierarchicalCaption)
        # untrained output is overwhelmingly unlikely to be grammatical
        assert isinstance(cap.well_formed, bool)


def test_self_caption_greedy_deterministic(default_backbone):
    imgs = torch.rand(1, 64, 64, 3)
    a = self_caption(default_backbone, imgs, DecodeSpec("greedy"), max_len=24)
    b = self_caption(default_backbone, imgs, DecodeSpec("greedy"), max_len=24)
    assert a[0][1] == b[0][1]


def test_policy_gradient_zero_when_rewards_constant(default_backbone, raw_scorer, monkeypatch):
    # constant reward -> zero advantage -> zero update
    import groundgen.stage1 as S1

    monkeypatch.setattr(
        S1, "caption_reward", lambda scorer, cap, image, config: (0.25, {
            "loss_global": 0.0, "loss_local": 0.0, "stage1_loss": 0.0,
            "skipped": 0, "no_objects": True,
        })
    )
    imgs = torch.rand(2, 64, 64, 3)
    cfg = Stage1Config(rl_batch=2, samples_per_image=2, max_caption_len=16)
    before = {k: v.clone() for k, v in default_backbone.state_dict().items()}
    opt = torch.optim.SGD(default_backbone.parameters(), lr=1.0)
    S1.stage1_step(default_backbone, opt, raw_scorer, imgs, cfg, step_seed=3)
    delta = max(
        float((v - before[k]).abs().max())
        for k, v in default_backbone.state_dict().items()
    )
    assert delta <= 1e-8


def test_warmup_overfits_small_set(default_backbone):
    torch.manual_seed(0)
    specs = [world.sample_scene(s, 2) for s in range(4)]
    imgs = torch.stack([torch.as_tensor(world.render(s)) for s in specs])
    cfg = Stage1Config()
    opt = torch.optim.Adam(default_backbone.parameters(), lr=3e-4)
    default_backbone.train()
    first = warmup_step(default_backbone, opt, imgs, specs, cfg)
    for _ in range(60):
        last = warmup_step(default_backbone, opt, imgs, specs, cfg)
    assert last < first

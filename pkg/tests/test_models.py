import pytest
import torch

from xens.checkpoint import save_state_archive
from xens.errors import ModelError
from xens.models import (
    assemble_ensemble,
    attach_head,
    build_extractor,
    forward,
    strip_and_freeze,
)


@pytest.fixture(scope="module")
def resnet():
    return build_extractor("resnet18", 0)


def test_resnet18_feature_dim(resnet):
    assert resnet.feature_dim == 512
    out = resnet(torch.zeros(1, 3, 64, 64))
    assert out.shape == (1, 512)


def test_tiny_feature_dim():
    extractor = build_extractor("tiny", 0, feature_dim=64)
    assert extractor.feature_dim == 64
    assert extractor(torch.zeros(2, 3, 32, 32)).shape == (2, 64)


def test_unknown_arch():
    with pytest.raises(ModelError):
        build_extractor("vgg16", 0)


def test_seeded_init_is_deterministic():
    a = build_extractor("tiny", 5, feature_dim=8)
    b = build_extractor("tiny", 5, feature_dim=8)
    for (name, p), q in zip(a.named_parameters(), b.parameters()):
        assert torch.equal(p, q), f"parameter {name} differs"


@pytest.mark.parametrize("k", [2, 3])
def test_head_shapes(resnet, k):
    model = attach_head(resnet, k)
    assert tuple(model.head.weight.shape) == (k, 512)
    assert tuple(model.head.bias.shape) == (k,)


def test_head_needs_two_classes(resnet):
    with pytest.raises(ModelError):
        attach_head(resnet, 1)


def test_ensemble_dimensions(resnet):
    frozen = [strip_and_freeze(attach_head(resnet, 2)) for _ in range(3)]
    pair = assemble_ensemble(frozen[:2], 3)
    assert pair.concat_dim == 1024
    triple = assemble_ensemble(frozen, 3)
    assert triple.concat_dim == 1536
    assert tuple(triple.head.weight.shape) == (3, 1536)


def test_ensemble_rejects_unfrozen():
    frozen = strip_and_freeze(attach_head(build_extractor("tiny", 0, 8), 2))
    live = build_extractor("tiny", 1, 8)
    with pytest.raises(ModelError, match="not frozen"):
        assemble_ensemble([frozen, live], 3)
    with pytest.raises(ModelError):
        assemble_ensemble([frozen], 3)


def test_strip_and_freeze_matches_penultimate():
    model = attach_head(build_extractor("tiny", 2, 8, dtype=torch.float64), 2)
    stripped = strip_and_freeze(model)
    x = torch.randn(4, 3, 16, 16, dtype=torch.float64)
    model.eval()
    assert torch.equal(stripped(x), model.features(x))
    for (name, p), q in zip(stripped.named_parameters(), model.extractor.parameters()):
        assert torch.equal(p, q), f"{name} changed when stripping"
        assert not p.requires_grad


def test_frozen_extractor_unchanged_by_updates():
    members = [strip_and_freeze(attach_head(build_extractor("tiny", s, 8), 2)) for s in (0, 1)]
    before = [{k: v.clone() for k, v in m.state_dict().items()} for m in members]
    ensemble = assemble_ensemble(members, 3, seed=0)
    opt = torch.optim.SGD([p for p in ensemble.parameters() if p.requires_grad], lr=0.5)
    for _ in range(3):
        opt.zero_grad()
        loss = ensemble(torch.randn(4, 3, 16, 16)).sum()
        loss.backward()
        opt.step()
    for m, state in zip(members, before):
        for k, v in m.state_dict().items():
            assert torch.equal(v, state[k]), f"frozen member tensor {k} moved"


def test_forward_probabilities(tiny_model64):
    logits, probs = forward(tiny_model64, torch.randn(5, 3, 16, 16, dtype=torch.float64))
    assert logits.shape == (5, 3)
    assert torch.allclose(probs.sum(dim=1), torch.ones(5, dtype=torch.float64), atol=1e-6)


def test_zero_head_gives_uniform(tiny_model64):
    with torch.no_grad():
        tiny_model64.head.weight.zero_()
        tiny_model64.head.bias.zero_()
    _, probs = forward(tiny_model64, torch.randn(2, 3, 16, 16))
    assert torch.allclose(probs, torch.full((2, 3), 1 / 3, dtype=probs.dtype))


def test_forward_is_per_image(tiny_model64):
    members = [strip_and_freeze(attach_head(build_extractor("tiny", s, 8, torch.float64), 2)) for s in (0, 1)]
    ensemble = assemble_ensemble(members, 3, seed=2).eval()
    x = torch.randn(6, 3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    perm = torch.tensor([4, 0, 5, 2, 1, 3])
    for model in (tiny_model64.eval(), ensemble):
        logits, probs = forward(model, x)
        p_logits, p_probs = forward(model, x[perm])
        assert torch.allclose(p_logits, logits[perm], atol=1e-12)
        assert torch.allclose(p_probs, probs[perm], atol=1e-12)
        single, _ = forward(model, x[2:3])
        assert torch.allclose(single[0], logits[2], atol=1e-12)


def test_forward_rejects_bad_shape(tiny_model64):
    with pytest.raises(ModelError):
        forward(tiny_model64, torch.zeros(2, 1, 16, 16))


def test_ensemble_is_head_over_concatenated_features():
    members = [strip_and_freeze(attach_head(build_extractor("tiny", s, 8, torch.float64), 2)) for s in (0, 1, 2)]
    ensemble = assemble_ensemble(members, 3, seed=4).eval()
    x = torch.randn(3, 3, 16, 16, dtype=torch.float64)
    feats = torch.cat([m(x) for m in members], dim=1)
    expected = torch.softmax(feats @ ensemble.head.weight.T + ensemble.head.bias, dim=1)
    _, probs = forward(ensemble, x)
    assert torch.allclose(probs, expected, atol=1e-12)


def test_pretrained_archive(tmp_path):
    source = build_extractor("tiny", 9, 8)
    archive = tmp_path / "tiny.xck"
    save_state_archive(archive, source.body.state_dict(), {"source": "test"})
    loaded = build_extractor("tiny", archive, 8)
    assert loaded.init_provenance == "pretrained-archive"
    for (name, p), q in zip(loaded.named_parameters(), source.parameters()):
        assert torch.equal(p, q), f"{name} not loaded"

    state = source.body.state_dict()
    state.pop("0.weight")
    save_state_archive(archive, state)
    with pytest.raises(ModelError, match="missing 0.weight"):
        build_extractor("tiny", archive, 8)

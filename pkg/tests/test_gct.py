import pytest
import torch

from promptgad.gct import EmptySceneError, GroupContextTransformer, gct_forward
from promptgad.losses import LossConfig, clip_loss_parts, total_loss
from promptgad.heads import PredictionHeads, temporal_pool
from promptgad.tensor_core import DTYPE, AttentionConfig, grad_check, layer_norm

D = 32
CFG = AttentionConfig(model_dim=D, heads=4)


def _model(k=7, t=5):
    return GroupContextTransformer(CFG, num_groups=k, frames=t)


def _inputs(m=5, t=5, n=64):
    return torch.randn(m, t, D, dtype=DTYPE), torch.randn(n, t, D, dtype=DTYPE)


def test_shapes():
    model = _model()
    actors, image = _inputs()
    out = model(actors, image)
    assert out.groups_grp.shape == (7, 5, D)
    assert out.actors_ctx.shape == (5, 5, D)
    assert out.groups_ctx.shape == (7, 5, D)
    assert out.attn_records["grouping"].shape == (5, 4, 7, 5)
    assert out.attn_records["contextual"].shape == (5, 4, 12, 64)


def test_single_actor_attends_to_its_value():
    model = _model()
    actors, _ = _inputs(m=1)
    layer = model.grouping
    q = model.g_init.transpose(0, 1)
    kv = actors.transpose(0, 1)
    heads_out, weights = layer.attn.attend(q, kv, kv)
    vh = layer.attn._split(layer.attn.v_proj(kv))
    assert torch.equal(weights, torch.ones_like(weights))
    assert float((heads_out - vh.expand_as(heads_out)).abs().max().detach()) <= 1e-15


def test_single_patch_grid():
    model = _model()
    actors, image = _inputs(n=1)
    layer = model.contextual
    z = torch.cat([actors, model.g_init], 0).transpose(0, 1)
    kv = image.transpose(0, 1)
    heads_out, _ = layer.attn.attend(z, kv, kv)
    vh = layer.attn._split(layer.attn.v_proj(kv))
    assert float((heads_out - vh.expand_as(heads_out)).abs().max().detach()) <= 1e-15


def test_actor_permutation():
    model = _model()
    actors, image = _inputs()
    perm = torch.tensor([3, 1, 4, 0, 2])
    with torch.no_grad():
        a, b = model(actors, image), model(actors[perm], image)
    assert float((a.groups_grp - b.groups_grp).abs().max()) <= 1e-12
    assert float((a.groups_ctx - b.groups_ctx).abs().max()) <= 1e-12
    assert float((a.actors_ctx[perm] - b.actors_ctx).abs().max()) <= 1e-12


def test_group_token_permutation():
    model = _model()
    actors, image = _inputs()
    perm = torch.randperm(7)
    with torch.no_grad():
        a = gct_forward(actors, model.g_init, image, model)
        b = gct_forward(actors, model.g_init[perm], image, model)
    assert float((a.groups_grp[perm] - b.groups_grp).abs().max()) <= 1e-12
    assert float((a.groups_ctx[perm] - b.groups_ctx).abs().max()) <= 1e-12
    assert float((a.actors_ctx - b.actors_ctx).abs().max()) <= 1e-12


def test_deleting_an_actor_leaves_other_rows():
    model = _model()
    actors, image = _inputs()
    keep = torch.tensor([0, 1, 3, 4])
    with torch.no_grad():
        full = model.contextual(actors, model.g_init, image)
        part = model.contextual(actors[keep], model.g_init, image)
    assert float((full[0][keep] - part[0]).abs().max()) <= 1e-12
    assert float((full[1] - part[1]).abs().max()) <= 1e-12


def test_forward_is_composition():
    model = _model()
    actors, image = _inputs()
    with torch.no_grad():
        out = model(actors, image)
        g_grp, _ = model.grouping(model.g_init, actors)
        a_ctx, g_ctx, _ = model.contextual(actors, g_grp, image)
    assert float((out.groups_grp - g_grp).abs().max()) <= 1e-12
    assert float((out.actors_ctx - a_ctx).abs().max()) <= 1e-12
    assert float((out.groups_ctx - g_ctx).abs().max()) <= 1e-12


def test_zero_ffn_output_gives_layer_norm_of_input():
    model = _model()
    actors, _ = _inputs()
    layer = model.grouping
    with torch.no_grad():
        layer.ffn.fc2.weight.zero_()
        layer.ffn.fc2.bias.zero_()
        out, _ = layer(model.g_init, actors)
        want = layer_norm(model.g_init, layer.norm.gamma, layer.norm.beta)
    assert torch.equal(out, want)


def test_frames_are_isolated():
    model = _model()
    actors, image = _inputs()
    actors2, image2 = actors.clone(), image.clone()
    actors2[:, 2] += 1.0
    image2[:, 2] -= 0.5
    with torch.no_grad():
        a, b = model(actors, image), model(actors2, image2)
    others = [0, 1, 3, 4]
    for field in ("actors_ctx", "groups_grp", "groups_ctx"):
        x, y = getattr(a, field), getattr(b, field)
        assert torch.equal(x[:, others], y[:, others])
        assert float((x[:, 2] - y[:, 2]).abs().max()) > 1e-6


def test_attention_rows_sum_to_one():
    model = _model()
    out = model(*_inputs())
    for w in out.attn_records.values():
        assert float((w.detach().sum(-1) - 1).abs().max()) <= 1e-12


def test_errors():
    model = _model()
    actors, image = _inputs()
    with pytest.raises(EmptySceneError):
        model(actors[:0], image)
    with pytest.raises(ValueError):
        model(actors[:, :3], image)
    with pytest.raises(ValueError):
        model.contextual(actors, model.g_init, image[:, :4])


def test_total_loss_gradient_wrt_group_tokens():
    torch.manual_seed(3)
    cfg = AttentionConfig(model_dim=8, heads=2)
    model = GroupContextTransformer(cfg, num_groups=3, frames=2)
    heads = PredictionHeads(8, num_activities=3, num_actions=2)
    actors = torch.randn(4, 2, 8, dtype=DTYPE)
    image = torch.randn(6, 2, 8, dtype=DTYPE)
    targets = {"groups": [[0, 2]], "activities": [1], "singletons": [1, 3], "actions": [0, 1, 1, 0]}
    loss_cfg = LossConfig()

    def fn():
        out = model(actors, image)
        layers = [heads(temporal_pool(a), temporal_pool(g)) for a, g in
                  ((actors, out.groups_grp), (out.actors_ctx, out.groups_ctx))]
        parts, _ = clip_loss_parts(layers, layers[-1], targets, loss_cfg)
        return total_loss(parts, loss_cfg)

    assert grad_check(fn, [model.g_init]) <= 1e-4

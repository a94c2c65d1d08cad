import dataclasses
import math

import numpy as np
import pytest
import torch
from oracles import module_gradient_check, relative_error

from mvitime.contrastive import nt_xent
from mvitime.errors import CheckpointVersionError, IndivisibleLength, ShapeMismatch
from mvitime.model import (
    CHECKPOINT_VERSION,
    BlockSpec,
    Checkpoint,
    ModelConfig,
    MobileViTBlock,
    MV2Block,
    MViTime,
    PositionalEncoding,
    TransformerBlock,
    block_shapes,
    build_model,
    conv1d_forward,
    fold_1d,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    silu,
    tiny_config,
    unfold_1d,
    xs_config,
)

def _rand(rng, *shape):
    return torch.tensor(rng.standard_normal(shape), dtype=torch.float64)


# ---- silu and conv ------------------------------------------------------------------

def test_silu_values():
    assert silu(torch.tensor(0.0)).item() == 0.0
    assert abs(silu(torch.tensor(20.0, dtype=torch.float64)).item() - 20) < 1e-6
    h = 1e-5
    x = torch.tensor([-h, h], dtype=torch.float64)
    y = silu(x)
    assert abs((y[1] - y[0]).item() / (2 * h) - 0.5) < 1e-9


def test_conv_identity_kernel():
    x = _rand(np.random.default_rng(0), 2, 1, 9)
    w = torch.tensor([[[0.0, 1.0, 0.0]]], dtype=torch.float64)
    assert torch.equal(conv1d_forward(x, w, padding=1), x)


def test_conv_hand_example():
    x = torch.tensor([[[1.0, 2.0, 3.0, 4.0]]])
    assert conv1d_forward(x, torch.ones(1, 1, 3)).tolist() == [[[6.0, 9.0]]]


@pytest.mark.parametrize("n, k, s, p", [(10, 3, 1, 1), (10, 3, 2, 1), (11, 5, 3, 0), (7, 1, 2, 0)])
def test_conv_output_length(n, k, s, p):
    out = conv1d_forward(torch.zeros(1, 2, n), torch.zeros(3, 2, k), stride=s, padding=p)
    assert out.shape[2] == math.floor((n + 2 * p - k) / s) + 1


def test_conv_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        conv1d_forward(torch.zeros(1, 2, 5), torch.zeros(1, 3, 3))
    with pytest.raises(ShapeMismatch):
        conv1d_forward(torch.zeros(2, 5), torch.zeros(1, 2, 3))


# ---- unfold / fold ------------------------------------------------------------------

def test_unfold_hand_example():
    x = torch.tensor([[[1.0, 2.0, 3.0, 4.0]]])
    tokens = unfold_1d(x, 2)
    assert tokens.shape == (2, 2, 1)
    assert tokens[0, :, 0].tolist() == [1.0, 3.0]
    assert tokens[1, :, 0].tolist() == [2.0, 4.0]


def test_unfold_p1_is_transpose():
    x = _rand(np.random.default_rng(0), 2, 3, 5)
    assert torch.equal(unfold_1d(x, 1), x.transpose(1, 2))


def test_single_patch_gives_one_token_per_stream():
    x = _rand(np.random.default_rng(0), 1, 2, 6)
    tokens = unfold_1d(x, 6)
    assert tokens.shape == (6, 1, 2)
    assert torch.equal(fold_1d(tokens, 6), x)


@pytest.mark.parametrize("b, c, n, p", [(1, 1, 4, 2), (2, 3, 3000, 2), (3, 2, 7, 2), (2, 4, 10, 3), (1, 1, 5, 8)])
def test_fold_inverts_unfold(b, c, n, p):
    x = _rand(np.random.default_rng(n), b, c, n)
    assert torch.equal(fold_1d(unfold_1d(x, p), p, n), x)


def test_unfold_without_padding_rejects():
    with pytest.raises(IndivisibleLength):
        unfold_1d(torch.zeros(1, 1, 5), 2, pad=False)


def test_fold_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        fold_1d(torch.zeros(3, 2, 1), 2)


# ---- blocks -----------------------------------------------------------------------------

def test_mv2_zero_weights_is_skip():
    block = MV2Block(4, 4).double().eval()
    torch.nn.init.zeros_(block.project[0].weight)
    x = _rand(np.random.default_rng(0), 2, 4, 9)
    assert torch.equal(block(x), x)


@pytest.mark.parametrize("n", [8, 9, 3000])
def test_mv2_stride_two_uses_ceil(n):
    block = MV2Block(2, 3, stride=2, expansion=2)
    assert block(torch.zeros(1, 2, n)).shape == (1, 3, math.ceil(n / 2))


def test_single_token_attention_reduces_to_ffn():
    block = TransformerBlock(8, 2).double()
    x = _rand(np.random.default_rng(1), 3, 1, 8)
    weights, _ = block.attn.attention(block.norm1(x))
    assert torch.all(weights == 1)
    attn = block.attn.out(block.attn.qkv(block.norm1(x))[..., 16:])
    y = x + attn
    assert torch.allclose(block(x), y + block.ffn(block.norm2(y)), atol=1e-12)


def test_attention_rows_sum_to_one():
    block = TransformerBlock(8, 4).double()
    weights, _ = block.attn.attention(_rand(np.random.default_rng(2), 2, 5, 8))
    assert torch.allclose(weights.sum(-1), torch.ones((), dtype=torch.float64), atol=1e-9)


def test_positional_encoding():
    pe = PositionalEncoding(4, 3).double()
    x = _rand(np.random.default_rng(0), 2, 4, 3)
    assert torch.equal(pe(x), x)
    torch.nn.init.normal_(pe.weight)
    assert pe(x).shape == x.shape
    (pe(x) ** 2).sum().backward()
    assert pe.weight.grad.abs().sum() > 0


def test_mobilevit_block_shape():
    block = MobileViTBlock(6, 8, 2, 2, 2, length=11)
    assert block(torch.zeros(2, 6, 11)).shape == (2, 6, 11)
    with pytest.raises(ShapeMismatch):
        block(torch.zeros(2, 6, 12))


def test_mobilevit_block_linearity_probe():
    torch.manual_seed(0)
    block = MobileViTBlock(4, 8, 1, 2, 2, length=10, act="identity").double().eval()
    with torch.no_grad():
        for p in block.transformer.parameters():
            p.zero_()
        block.norm.weight.zero_()
        block.norm.bias.zero_()
    x = _rand(np.random.default_rng(3), 2, 4, 10)
    y = block(x)
    assert torch.equal(block(x), y)
    for a in (2.0, -0.5, 3.7):
        assert torch.allclose(block(a * x), a * y, atol=1e-12)


# ---- gradient checks -------------------------------------------------------------------

def _loss_against(rng, shape):
    target = _rand(rng, *shape)
    return lambda out: (out * target).sum()


def test_gradcheck_silu():
    rng = np.random.default_rng(10)
    for _ in range(20):
        x = _rand(rng, 3, 5).requires_grad_(True)
        w = _loss_against(rng, (3, 5))
        assert module_gradient_check(lambda x: w(silu(x)), [x], [], rng) < 1e-4


def test_gradcheck_conv1d():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = _rand(rng, 2, 3, 9).requires_grad_(True)
        wt = _rand(rng, 4, 3, 3).requires_grad_(True)
        b = _rand(rng, 4).requires_grad_(True)
        stride = int(rng.integers(1, 3))
        out_len = (9 + 2 - 3) // stride + 1
        w = _loss_against(rng, (2, 4, out_len))
        err = module_gradient_check(lambda x, wt, b: w(conv1d_forward(x, wt, b, stride, 1)), [x, wt, b], [], rng)
        assert err < 1e-5


def _block_check(block, x_shape, rng):
    block = block.double()
    x = _rand(rng, *x_shape).requires_grad_(True)
    with torch.no_grad():
        out_shape = block(x).shape
    w = _loss_against(rng, out_shape)
    return module_gradient_check(lambda x: w(block(x)), [x], list(block.parameters()), rng)


def test_gradcheck_mv2():
    rng = np.random.default_rng(12)
    for i in range(20):
        torch.manual_seed(i)
        stride = 1 + i % 2
        assert _block_check(MV2Block(3, 3 if stride == 1 else 4, stride, 2), (3, 3, 8), rng) < 1e-4


def test_gradcheck_transformer_block():
    rng = np.random.default_rng(13)
    for i in range(20):
        torch.manual_seed(i)
        assert _block_check(TransformerBlock(4, 2), (2, 2, 4), rng) < 1e-4


def test_gradcheck_mobilevit_block():
    rng = np.random.default_rng(14)
    for i in range(20):
        torch.manual_seed(i)
        block = MobileViTBlock(3, 4, 1, 2, 2, length=7)
        with torch.no_grad():
            torch.nn.init.normal_(block.pos.weight, std=0.1)
        assert _block_check(block, (3, 3, 7), rng) < 1e-4


def _toy_config(length=32):
    blocks = (BlockSpec("mv2", 4, 1, 2), BlockSpec("mv2", 6, 2, 2),
              BlockSpec("mvit", 6, transformer_dim=4, n_heads=2, depth=1))
    return ModelConfig(input_length=length, stem_channels=4, blocks=blocks, head_channels=8, projection_dim=4)


def test_gradcheck_full_forward_project_loss():
    rng = np.random.default_rng(15)
    for i in range(20):
        model = build_model(_toy_config(), seed=i).double()
        x = _rand(rng, 4, 1, 32).requires_grad_(True)
        err = module_gradient_check(lambda x: nt_xent(model.project(model(x)), None, 0.5), [x],
                                    list(model.parameters()), rng, n_coords=6)
        assert err < 1e-4


def test_gradcheck_classifier_cross_entropy():
    rng = np.random.default_rng(16)
    labels = torch.tensor([0, 3, 4])
    for i in range(5):
        model = build_model(_toy_config(), seed=i).double()
        x = _rand(rng, 3, 1, 32).requires_grad_(True)
        err = module_gradient_check(lambda x: torch.nn.functional.cross_entropy(model.logits(x), labels), [x],
                                    list(model.parameters()), rng, n_coords=6)
        assert err < 1e-4


# ---- whole network ------------------------------------------------------------------

@pytest.mark.parametrize("config", [tiny_config(32), xs_config(32), xs_config(3000), _toy_config(37)])
def test_shape_algebra(config):
    model = MViTime(config)
    seen = []
    hooks = [model.stem.register_forward_hook(lambda m, i, o: seen.append(tuple(o.shape[1:])))]
    for block in model.blocks:
        hooks.append(block.register_forward_hook(lambda m, i, o: seen.append(tuple(o.shape[1:]))))
    hooks.append(model.head.register_forward_hook(lambda m, i, o: seen.append(tuple(o.shape[1:]))))
    with torch.no_grad():
        features = model.eval()(torch.zeros(1, 1, config.input_length))
    for h in hooks:
        h.remove()
    assert seen == [(c, n) for _, c, n in block_shapes(config)]
    assert features.shape == (1, config.head_channels)


@pytest.mark.parametrize("config", [tiny_config(256), tiny_config(32), xs_config(3000), _toy_config()])
def test_parameter_count(config):
    model = MViTime(config)
    assert parameter_count(config) == sum(p.numel() for p in model.parameters())


def test_xs_defaults():
    cfg = xs_config()
    assert cfg.input_length == 3000 and cfg.stem_channels == 16 and cfg.projection_dim == 128
    mv2 = [b for b in cfg.blocks if b.kind == "mv2"][:3]
    assert [(b.channels, b.stride, b.expansion) for b in mv2] == [(24, 1, 4), (48, 2, 4), (64, 2, 4)]
    mvit = [b for b in cfg.blocks if b.kind == "mvit"]
    assert [(b.channels, b.transformer_dim, b.depth, b.n_heads, b.patch_size) for b in mvit] == [
        (64, 96, 2, 4, 2), (80, 120, 4, 4, 2), (96, 144, 3, 4, 2)]


def test_heads_contract():
    model = build_model(tiny_config(64), 0).double().eval()
    x = _rand(np.random.default_rng(0), 3, 1, 64)
    f = model(x)
    assert torch.allclose(model.project(f).norm(dim=1), torch.ones(3, dtype=torch.float64), atol=1e-9)
    logits = model.classify(f)
    assert logits.shape == (3, 5)
    assert torch.allclose(torch.softmax(logits, 1).sum(1), torch.ones(3, dtype=torch.float64), atol=1e-9)


def test_batch_independence_and_determinism():
    model = build_model(tiny_config(64), 1).double().eval()
    x = _rand(np.random.default_rng(1), 2, 1, 64)
    with torch.no_grad():
        joint = model(x)
        rows = torch.cat([model(x[:1]), model(x[1:])])
        assert torch.allclose(joint, rows, atol=1e-9)
        assert torch.equal(model(x), joint)


def test_forward_rejects_wrong_length():
    with pytest.raises(ShapeMismatch):
        build_model(tiny_config(64))(torch.zeros(1, 1, 65))


def test_init_is_seeded():
    a, b = build_model(tiny_config(32), 5), build_model(tiny_config(32), 5)
    c = build_model(tiny_config(32), 6)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
    assert all(torch.all(m.pos.weight == 0) for m in a.modules() if isinstance(m, MobileViTBlock))


# ---- checkpoints --------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = build_model(tiny_config(64), 3)
    ckpt = Checkpoint.from_model(model, {"step": 7, "seed": 3})
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.metadata == {"step": 7, "seed": 3}
    assert back.config == model.config
    for name, arr in ckpt.parameters.items():
        assert arr.tobytes() == back.parameters[name].tobytes()
    rebuilt = back.build().eval()
    x = torch.randn(2, 1, 64)
    with torch.no_grad():
        assert torch.equal(rebuilt(x), model.eval()(x))
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_size_matches_config(tmp_path):
    cfg = tiny_config(64)
    ckpt = Checkpoint.from_model(build_model(cfg))
    n_bn = sum(2 * m.num_features for m in build_model(cfg).modules() if isinstance(m, torch.nn.BatchNorm1d))
    assert sum(a.size for a in ckpt.parameters.values()) == parameter_count(cfg) + n_bn


def test_checkpoint_version_refused(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint.from_model(build_model(tiny_config(32))))
    data = bytearray(path.read_bytes())
    data[8:12] = (CHECKPOINT_VERSION + 1).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch():
    ckpt = Checkpoint.from_model(build_model(tiny_config(32)))
    wrong = dataclasses.replace(ckpt, spec=build_model(xs_config(32)).spec())
    with pytest.raises(ShapeMismatch):
        wrong.build()

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from leadalign.encoder import (EmbeddingBatch, EncoderConfig, ResNet1D, adapt_in_leads, calibrate,
                               embed, forward, forward_stopgrad, freeze, init_params, load_embeddings,
                               load_params, param_hash, save_embeddings, save_params)
from leadalign.errors import IncompatibleCheckpoint, ShapeMismatch
from oracles import encoder_grad_check

TINY = EncoderConfig(stage_widths=(8, 16), embed_dim=32)


def test_defaults():
    cfg = EncoderConfig()
    assert (cfg.stem_kernel, cfg.stage_widths, cfg.blocks_per_stage, cfg.embed_dim,
            cfg.normalize_embeddings) == (15, (64, 128, 256, 512), 2, 512, True)
    assert cfg.min_length == 32


@pytest.mark.parametrize("bad", [dict(stem_kernel=14), dict(stage_widths=()), dict(embed_dim=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        EncoderConfig(**bad)


def test_default_forward_shape_and_norm():
    model = init_params(EncoderConfig(), seed=0).eval()
    x = np.random.default_rng(0).normal(size=(4, 1, 5000)).astype(np.float32)
    out = forward(model, x)
    assert tuple(out.vectors.shape) == (4, 512)
    assert torch.allclose(out.vectors.norm(dim=1), torch.ones(4), atol=1e-5)


def test_duplicate_inputs_give_identical_rows():
    model = init_params(TINY, seed=1).eval()
    row = np.random.default_rng(1).normal(size=(1, 1, 256)).astype(np.float32)
    out = forward(model, np.concatenate([row, row, row])).vectors
    assert torch.equal(out[0], out[1]) and torch.equal(out[0], out[2])


def test_shape_mismatch():
    model = init_params(TINY.with_leads(12), seed=0)
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((2, 1, 256), np.float32))
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((2, 12, TINY.min_length - 1), np.float32))
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((12, 256), np.float32))
    forward(model.eval(), np.zeros((2, 12, TINY.min_length), np.float32))


def test_unnormalized_mode():
    cfg = EncoderConfig(stage_widths=(8,), embed_dim=4, normalize_embeddings=False)
    model = init_params(cfg, 0).eval()
    x = torch.randn(3, 1, 64)
    assert torch.equal(model(x), model.project(x))


def test_stopgrad_values_and_zero_gradient():
    model = init_params(TINY.with_leads(12), seed=3)
    x = np.random.default_rng(3).normal(size=(4, 12, 128)).astype(np.float32)
    model.eval()
    a = forward(model, x).vectors
    b = forward_stopgrad(model, x).vectors
    assert torch.equal(a.detach(), b)
    assert not b.requires_grad
    s = torch.randn(4, 32, requires_grad=True)
    (s * b).sum().backward()
    assert all(p.grad is None or not p.grad.any() for p in model.parameters())


def test_init_determinism_and_hash():
    a, b = init_params(TINY, 7), init_params(TINY, 7)
    assert param_hash(a) == param_hash(b)
    assert param_hash(a) != param_hash(init_params(TINY, 8))
    # init does not disturb the global torch stream
    torch.manual_seed(0)
    r1 = torch.rand(1)
    torch.manual_seed(0)
    init_params(TINY, 9)
    assert torch.equal(torch.rand(1), r1)


def test_architecture_sharing():
    s = init_params(TINY, 0).state_dict()
    m = init_params(TINY.with_leads(12), 0).state_dict()
    assert set(s) == set(m)
    differing = [k for k in s if s[k].shape != m[k].shape]
    assert differing == ["stem.weight"]
    assert s["stem.weight"].shape[1] == 1 and m["stem.weight"].shape[1] == 12


def test_save_load_roundtrip(tmp_path):
    model = init_params(TINY, 5)
    freeze(model)
    path = save_params(model, tmp_path / "f.npz", seed=5)
    back = load_params(path)
    assert back.config == TINY
    assert param_hash(back) == param_hash(model)
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    assert not any(p.requires_grad for p in back.parameters())


def test_float64_roundtrip(tmp_path):
    model = init_params(TINY, 5, dtype=torch.float64)
    back = load_params(save_params(model, tmp_path / "d.npz"))
    assert next(back.parameters()).dtype == torch.float64
    assert param_hash(back) == param_hash(model)


def test_incompatible_checkpoint(tmp_path):
    path = save_params(init_params(EncoderConfig(stage_widths=(8,), embed_dim=256), 0), tmp_path / "a.npz")
    with pytest.raises(IncompatibleCheckpoint):
        load_params(path, EncoderConfig(stage_widths=(8,), embed_dim=512))
    with pytest.raises(IncompatibleCheckpoint):
        load_params(path, EncoderConfig(stage_widths=(8, 16), embed_dim=256))
    np.savez(tmp_path / "bare.npz", x=np.zeros(2))
    with pytest.raises(IncompatibleCheckpoint):
        load_params(tmp_path / "bare.npz")


def test_freeze_hash_stable_under_training_of_other_branch():
    f_m = freeze(init_params(TINY.with_leads(12), 0))
    f_s = init_params(TINY, 1)
    before = param_hash(f_m)
    opt = torch.optim.AdamW(f_s.parameters(), lr=1e-2)
    x = torch.randn(4, 12, 128)
    for _ in range(3):
        target = forward_stopgrad(f_m, x).vectors
        loss = -(f_s(x[:, :1]) * target).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert param_hash(f_m) == before


def test_adapt_in_leads_keeps_selected_kernels():
    m = init_params(TINY.with_leads(12), 2).eval()
    s = adapt_in_leads(m, [0]).eval()
    assert s.config.in_leads == 1
    assert torch.equal(s.stem.weight[:, 0], m.stem.weight[:, 0])
    x = torch.zeros(2, 12, 128)
    x[:, 0] = torch.randn(2, 128)
    assert torch.allclose(s(x[:, :1]), m(x), atol=1e-6)


def test_embed_chunking_matches_single_pass():
    model = init_params(TINY, 0)
    x = np.random.default_rng(0).normal(size=(10, 1, 128)).astype(np.float32)
    a = embed(model, x, batch_size=3).vectors
    b = embed(model, x, batch_size=10).vectors
    assert torch.allclose(a, b, atol=1e-6)
    assert model.training  # mode restored


def test_calibrate_decorrelates_random_encoder():
    cfg = EncoderConfig(stage_widths=(8, 16, 32), embed_dim=32)
    model = init_params(cfg, 0)
    x = np.random.default_rng(0).normal(size=(64, 1, 512)).astype(np.float32)

    def mean_cos(mod):
        v = embed(mod, x).vectors
        c = v @ v.T
        return float((c.sum() - c.trace()) / (64 * 63))

    raw = mean_cos(model)
    calibrate(model, x)
    assert abs(mean_cos(model)) < 0.1 < raw
    with torch.no_grad():
        z = model.eval().project(torch.as_tensor(x))
    # the centre of the unit-normalised embeddings sits at the origin
    assert float(F.normalize(z, dim=-1).mean(0).norm()) < 1e-5


def test_embeddings_roundtrip(tmp_path):
    batch = EmbeddingBatch(np.random.default_rng(0).normal(size=(3, 4)), ["a", "b", "c"])
    back = load_embeddings(save_embeddings(batch, tmp_path / "e.npz"))
    assert back.record_ids == ["a", "b", "c"]
    assert np.array_equal(back.numpy(), batch.numpy())


def test_gradient_check_tiny_encoder():
    assert encoder_grad_check(seed=0) < 1e-4

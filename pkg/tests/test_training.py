import json
import struct

import numpy as np
import pytest
import torch

from tape.frame_analysis import CleanSet
from tape.net import NetConfig, build_model
from tape.training import (CHECKPOINT_MAGIC, CheckpointError, IdentityPerceptualProvider, LossConfig,
                           ToyPerceptualProvider, TrainConfig, TrainingClip, charbonnier_loss, load_checkpoint,
                           make_optimizer, perceptual_loss, read_checkpoint, sample_batch, sample_training_window,
                           save_checkpoint, step_rng, total_loss, train, train_step, window_references)

from oracles import F64, charbonnier_oracle, gradient_check, perceptual_oracle



def _clip(n=8, hw=8, seed=0, name="c"):
    rng = np.random.default_rng(seed)
    deg = rng.random((n, hw, hw, 3)).astype(np.float32)
    gt = rng.random((n, hw, hw, 3)).astype(np.float32)
    emb = rng.standard_normal((n, 4))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    cs = CleanSet(np.zeros(n), None, np.arange(0, n, 2), emb)
    return TrainingClip(deg, gt, cs, name)


# --- losses


def test_charbonnier_examples():
    x = torch.rand(2, 3, 4, 4, 3, dtype=F64)
    assert abs(charbonnier_loss(x, x).item() - 1e-12) < 1e-9
    assert charbonnier_loss(x, x).item() == pytest.approx(1e-12, rel=1e-12)
    assert abs(charbonnier_loss(x + 3, x).item() - 3.0) < 1e-9
    y = torch.rand_like(x)
    assert abs(charbonnier_loss(x, y).item() - charbonnier_oracle(x, y, 1e-12)) < 1e-9
    assert charbonnier_loss(x, y).item() >= 1e-12
    with pytest.raises(ValueError):
        charbonnier_loss(x, y[:1])


def test_perceptual_identity_provider_is_mse():
    a, b = torch.rand(2, 2, 5, 6, 3, dtype=F64), torch.rand(2, 2, 5, 6, 3, dtype=F64)
    p = IdentityPerceptualProvider()
    assert abs(perceptual_loss(p, a, b).item() - ((a - b) ** 2).mean().item()) < 1e-12
    assert perceptual_loss(p, a, a).item() == 0.0


def test_perceptual_toy_matches_loop_oracle():
    prov = ToyPerceptualProvider(seed=1).double()
    a, b = torch.rand(1, 3, 16, 16, 3, dtype=F64), torch.rand(1, 3, 16, 16, 3, dtype=F64)
    assert abs(perceptual_loss(prov, a, b).item() - perceptual_oracle(prov, a, b)) < 1e-9
    assert perceptual_loss(prov, a, a).item() == 0.0


def test_total_loss_composition():
    prov = ToyPerceptualProvider(seed=2).double()
    cfg = LossConfig()
    a, b = torch.rand(1, 2, 8, 8, 3, dtype=F64), torch.rand(1, 2, 8, 8, 3, dtype=F64)
    loss, parts = total_loss(cfg, prov, a, b)
    expected = 200 * charbonnier_oracle(a, b, 1e-12) + perceptual_oracle(prov, a, b)
    assert abs(loss.item() - expected) < 1e-9
    assert parts["loss_total"] == loss.item()
    same, _ = total_loss(cfg, prov, a, a)
    assert abs(same.item() - 2e-10) < 1e-15
    no_perc, _ = total_loss(LossConfig(lambda_perc=0.0), prov, a, b)
    assert abs(no_perc.item() - 200 * charbonnier_loss(a, b).item()) < 1e-12


def test_total_loss_layer_mismatch():
    with pytest.raises(ValueError):
        total_loss(LossConfig(), IdentityPerceptualProvider(), torch.rand(1, 1, 4, 4, 3), torch.rand(1, 1, 4, 4, 3))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(epsilon=0)
    with pytest.raises(ValueError):
        LossConfig(lambda_char=-1)
    with pytest.raises(ValueError):
        TrainConfig(crop=0)


def test_frozen_provider_gets_no_gradient():
    prov = ToyPerceptualProvider()
    a = torch.rand(1, 1, 8, 8, 3, requires_grad=True)
    perceptual_loss(prov, a, torch.rand(1, 1, 8, 8, 3)).backward()
    assert a.grad is not None
    assert all(p.grad is None for p in prov.parameters())


def test_total_loss_gradient_wrt_input_matches_fd():
    torch.manual_seed(0)
    prov = ToyPerceptualProvider(seed=0).double()
    cfg = LossConfig()
    target = torch.rand(1, 2, 8, 8, 3, dtype=F64)
    x = torch.rand(1, 2, 8, 8, 3, dtype=F64, requires_grad=True)
    total_loss(cfg, prov, x, target)[0].backward()
    g = x.grad.clone()
    h = 1e-6
    for _ in range(10):
        v = torch.randn_like(x)
        with torch.no_grad():
            fd = (total_loss(cfg, prov, x + h * v, target)[0] - total_loss(cfg, prov, x - h * v, target)[0]) / (2 * h)
        an = (g * v).sum()
        assert abs(fd.item() - an.item()) <= 1e-3 * abs(an.item()) + 1e-9


def test_gradient_check_tiny_config(tiny_cfg):
    rows = gradient_check(tiny_cfg)
    bad = [r for r in rows if abs(r[1] - r[2]) > r[3]]
    assert not bad, bad
    # most tensors carry gradients far above the round-off floor
    assert sum(abs(an) > 1e3 * (tol - 1e-3 * abs(an)) for _, an, _, tol in rows) > len(rows) // 2


def test_fusion_pair_gradcheck():
    from tape.net.attention import MRSFFPair

    torch.manual_seed(0)
    pair = MRSFFPair(4, 2, 2).double()
    for m in pair.modules():
        if isinstance(m, torch.nn.Linear):
            torch.nn.init.normal_(m.weight, std=0.5)
    fp = torch.randn(1, 2, 4, 4, 4, dtype=F64, requires_grad=True)
    fr = torch.randn(1, 2, 4, 4, 4, dtype=F64, requires_grad=True)
    assert torch.autograd.gradcheck(pair, (fp, fr), eps=1e-6, atol=1e-7, rtol=1e-3)


# --- AdamW


def test_adamw_single_step_matches_closed_form():
    cfg = NetConfig(T=1, D=1, M=2, C=8, stages=1, depth=1, bottleneck_depth=1, extractor_depth=1)
    model = build_model(cfg, dtype=F64)
    tc = TrainConfig(lr=1e-3, weight_decay=0.01, betas=(0.9, 0.99))
    opt = make_optimizer(model, tc)
    p = model.out_conv.bias
    p0 = p.detach().clone()
    batch = (torch.rand(1, 1, 4, 4, 3, dtype=F64), torch.rand(1, 1, 4, 4, 3, dtype=F64),
             torch.rand(1, 1, 4, 4, 3, dtype=F64))
    frozen = {n: t.clone() for n, t in model.extractor.state_dict().items()}
    train_step(model, batch, opt, LossConfig(lambda_perc=0.0), None)
    g = p.grad.detach()
    b1, b2 = tc.betas
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = p0 * (1 - tc.lr * tc.weight_decay) - tc.lr * m_hat / (v_hat.sqrt() + 1e-8)
    assert (p.detach() - expected).abs().max().item() < 1e-10
    for n, t in model.extractor.state_dict().items():
        assert torch.equal(t, frozen[n])


def test_zero_lr_leaves_parameters(tiny_cfg):
    model = build_model(tiny_cfg)
    opt = make_optimizer(model, TrainConfig(lr=0.0))
    before = {n: t.clone() for n, t in model.state_dict().items()}
    batch = sample_batch([_clip()], step_rng(0, 0), 2, 2, 8, 1)
    parts = train_step(model, batch, opt, LossConfig(), ToyPerceptualProvider())
    assert np.isfinite(parts["loss_total"])
    for n, t in model.state_dict().items():
        assert torch.equal(t, before[n])


def test_overfit_single_sample():
    cfg = NetConfig(T=2, D=2, M=4, C=16, stages=1, depth=2, bottleneck_depth=1, extractor_depth=1)
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    gt = rng.random((1, 2, 16, 16, 3)).astype(np.float32)
    x = np.clip(gt + 0.1 * rng.standard_normal(gt.shape), 0, 1).astype(np.float32)
    batch = (torch.as_tensor(x), torch.as_tensor(gt), torch.as_tensor(x))
    opt = make_optimizer(model, TrainConfig(lr=1e-3))
    prov = ToyPerceptualProvider()
    losses = [train_step(model, batch, opt, LossConfig(), prov)["loss_total"] for _ in range(200)]
    assert losses[-1] <= 0.5 * losses[0]


def test_nonfinite_loss_aborts(tiny_cfg):
    from tape.training import TrainingDivergedError

    model = build_model(tiny_cfg)
    opt = make_optimizer(model, TrainConfig())
    x = torch.full((1, 2, 4, 4, 3), float("nan"))
    with pytest.raises(TrainingDivergedError):
        train_step(model, (x, torch.rand(1, 2, 4, 4, 3), torch.rand(1, 2, 4, 4, 3)), opt, LossConfig(), None)


# --- sampling


def test_sampler_shared_crop_and_references():
    clip = _clip(n=10, hw=12)
    x, gt, refs = sample_training_window([clip], np.random.default_rng(3), 3, 2, 5)
    assert x.shape == (3, 5, 5, 3) and gt.shape == x.shape and refs.shape == (2, 5, 5, 3)
    # locate the crop and window from the input and check GT/refs use the same ones
    found = None
    for s in range(8):
        for y in range(8):
            for xx in range(8):
                if np.array_equal(clip.degraded[s:s + 3, y:y + 5, xx:xx + 5], x):
                    found = (s, y, xx)
    s, y, xx = found
    assert np.array_equal(clip.gt[s:s + 3, y:y + 5, xx:xx + 5], gt)
    ref_idx = window_references(clip.clean, s + 1, 2, range(s, s + 3))
    assert np.array_equal(clip.degraded[ref_idx][:, y:y + 5, xx:xx + 5], refs)


def test_sampler_full_crop_and_determinism():
    clip = _clip(n=6, hw=8)
    a = sample_training_window([clip], np.random.default_rng(1), 2, 2, 8)
    b = sample_training_window([clip], np.random.default_rng(1), 2, 2, 8)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
    assert a[0].shape == (2, 8, 8, 3)
    with pytest.raises(ValueError):
        sample_training_window([_clip(n=2)], np.random.default_rng(0), 3, 2, 8)


def test_sampler_clip_frequency_uniform():
    clips = [_clip(n=6, hw=4, seed=0, name="a"), _clip(n=6, hw=4, seed=1, name="b")]
    rng = np.random.default_rng(7)
    n = 10000
    hits = 0
    for _ in range(n):
        x, _, _ = sample_training_window(clips, rng, 2, 1, 4)
        hits += any(np.array_equal(x, clips[0].degraded[s:s + 2]) for s in range(5))
    sigma = np.sqrt(n * 0.25)
    assert abs(hits - n / 2) <= 3 * sigma


def test_window_references_skip_window_frames():
    clip = _clip(n=10)
    refs = window_references(clip.clean, 3, 2, range(2, 5))
    assert all(r not in range(2, 5) for r in refs)
    assert all(r in clip.clean.clean_indices for r in refs)
    # only in-window clean frames -> they are used anyway
    cs = CleanSet(np.zeros(10), None, np.array([3]), clip.clean.image_embeddings)
    assert window_references(cs, 3, 2, range(2, 5)) == [3, 3]


# --- loop and checkpoints


def _fit(cfg, steps, **kw):
    model = build_model(cfg, seed=0, dtype=F64)
    tc = TrainConfig(lr=1e-3, crop=8, seed=4)
    opt = make_optimizer(model, tc)
    clips = [_clip(n=6, hw=8, seed=s) for s in range(2)]
    recs = train(model, clips, tc, LossConfig(), ToyPerceptualProvider().double(), optimizer=opt, steps=steps, **kw)
    return model, opt, clips, tc, recs


def test_train_log_and_reproducibility(tiny_cfg, tmp_path):
    log = tmp_path / "log.jsonl"
    _, _, _, _, recs = _fit(tiny_cfg, 3, log_path=log)
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in lines] == [0, 1, 2]
    assert set(lines[0]) == {"step", "loss_char", "loss_perc", "loss_total", "wallclock"}
    _, _, _, _, again = _fit(tiny_cfg, 3)
    assert [r["loss_total"] for r in recs] == [r["loss_total"] for r in again]


def test_checkpoint_roundtrip_bit_exact(tiny_cfg, tmp_path):
    model, opt, _, _, _ = _fit(tiny_cfg, 2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, opt, path, step=2, extra={"note": "x"})
    m2, o2, header = load_checkpoint(path)
    assert header["step"] == 2 and header["extra"] == {"note": "x"}
    assert NetConfig.from_dict(header["net_config"]) == tiny_cfg
    for (n, a), (_, b) in zip(model.state_dict().items(), m2.state_dict().items()):
        assert a.dtype == b.dtype and torch.equal(a, b), n
    names = dict(model.named_parameters())
    names2 = dict(m2.named_parameters())
    for n, p in names.items():
        if p in opt.state:
            for k in ("exp_avg", "exp_avg_sq", "step"):
                assert torch.equal(opt.state[p][k], o2.state[names2[n]][k])


def test_checkpoint_layout(tiny_cfg, tmp_path):
    model = build_model(tiny_cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, None, path)
    raw = path.read_bytes()
    assert raw[:8] == CHECKPOINT_MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header["format_version"] == 1 and header["optimizer"] is None
    assert len(raw) == 16 + hlen + sum(e["nbytes"] for e in header["tensors"])


def test_checkpoint_errors(tiny_cfg, tmp_path):
    model = build_model(tiny_cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, None, path)
    wider = NetConfig(**{**tiny_cfg.to_dict(), "C": 16})
    with pytest.raises(CheckpointError, match="shallow.weight"):
        load_checkpoint(path, net_config=wider)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    header["format_version"] = 2
    h2 = json.dumps(header).encode()
    (tmp_path / "v2.ckpt").write_bytes(raw[:8] + struct.pack("<Q", len(h2)) + h2 + raw[16 + hlen:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "v2.ckpt")


def test_resume_matches_uninterrupted(tiny_cfg, tmp_path):
    _, _, _, _, full = _fit(tiny_cfg, 4)
    model, opt, clips, tc, first = _fit(tiny_cfg, 2)
    path = tmp_path / "r.ckpt"
    save_checkpoint(model, opt, path, step=2)
    m2, o2, header = load_checkpoint(path, train_cfg=tc)
    rest = train(m2, clips, tc, LossConfig(), ToyPerceptualProvider().double(), optimizer=o2,
                 start_step=header["step"], steps=2)
    assert [r["step"] for r in rest] == [2, 3]
    for a, b in zip(full[2:], rest):
        assert abs(a["loss_total"] - b["loss_total"]) <= 1e-7

from dataclasses import replace

import numpy as np
import pytest
import torch

from kdctc.backbone import build_model, load_checkpoint
from kdctc.data_manifest import SplitManifest, scan_dataset, stratified_split
from kdctc.image_pipeline import ImageLoader, make_batch
from kdctc.objectives import FOCAL, cross_entropy
from kdctc.trainer import (
    NonFiniteLossError,
    TrainConfig,
    compute_losses,
    init_state,
    iterate_batches,
    sgd_momentum_update,
    train,
    train_step,
)
from oracles import sgd_two_steps

TINY = dict(arch="tiny_cnn", global_size=64, local_size=32)


def _model(seed=0, n_classes=4, **kw):
    return build_model("tiny_cnn", n_classes, seed=seed, class_names=[f"class_{i:02d}" for i in range(n_classes)], **kw)


def _batch(seed=0, n=6, n_classes=4, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    from kdctc.image_pipeline import Batch

    return Batch(
        global_views=torch.randn(n, 3, 64, 64, generator=g, dtype=dtype),
        local_views=torch.randn(n, 3, 32, 32, generator=g, dtype=dtype),
        labels=torch.arange(n) % n_classes,
        paths=[f"img{i}" for i in range(n)],
        patches=[],
        train_mode=True,
    )


def test_sgd_plain_step():
    p, v = torch.zeros(1), torch.zeros(1)
    sgd_momentum_update([p], [torch.ones(1)], [v], lr=1.0, momentum=0.0)
    assert p.item() == -1.0


def test_sgd_two_momentum_steps():
    p, v = torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64)
    expected = sgd_two_steps(1.0, 0.1, 0.9)
    for v_ref, p_ref in expected:
        sgd_momentum_update([p], [torch.ones(1, dtype=torch.float64)], [v], lr=0.1, momentum=0.9)
        assert v.item() == pytest.approx(v_ref, abs=1e-15)
        assert p.item() == pytest.approx(p_ref, abs=1e-15)
    assert expected == [(1.0, pytest.approx(-0.1)), (1.9, pytest.approx(-0.29))]


def test_sgd_fixed_point_and_shape_error():
    p, v = torch.randn(3), torch.zeros(3)
    before = p.clone()
    sgd_momentum_update([p], [torch.zeros(3)], [v], 0.01, 0.9)
    assert torch.equal(p, before)
    with pytest.raises(RuntimeError):
        sgd_momentum_update([p], [torch.zeros(2)], [v], 0.01, 0.9)


def test_sgd_matches_torch_optimizer():
    p1 = torch.randn(5, requires_grad=True)
    p2 = p1.detach().clone().requires_grad_(True)
    opt = torch.optim.SGD([p2], lr=0.01, momentum=0.9)
    v = torch.zeros(5)
    for k in range(4):
        g = torch.full((5,), float(k + 1))
        sgd_momentum_update([p1], [g], [v], 0.01, 0.9)
        p2.grad = g.clone()
        opt.step()
    assert torch.allclose(p1, p2, atol=1e-7)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(method="sam")
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)


def test_reference_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.momentum, cfg.batch_size) == (0.01, 0.9, 32)
    assert (cfg.alpha, cfg.n_min) == (0.1, 20)
    assert (cfg.global_size, cfg.local_size) == (192, 96)


def test_alpha_zero_equals_half_ce_step():
    cfg = TrainConfig(alpha=0.0, **TINY)
    batch = _batch(1)
    model = _model(3)
    ref = _model(3)
    state = init_state(model, 15, 0)
    train_step(state, batch, cfg)

    ref.train()
    params = list(ref.parameters())
    loss = 0.5 * cross_entropy(ref(batch.global_views), batch.labels)
    grads = torch.autograd.grad(loss, params)
    with torch.no_grad():
        for p, g in zip(params, grads):
            p -= cfg.lr * g
    for a, b in zip(model.parameters(), ref.parameters()):
        assert (a - b).abs().max().item() <= 1e-6


def test_one_step_deterministic():
    cfg = TrainConfig(**TINY)
    states = []
    for _ in range(2):
        state = init_state(_model(0), 3, 0)
        train_step(state, _batch(2), cfg)
        states.append(state)
    a, b = states
    for p, q in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(p, q)
    for p, q in zip(a.moments, b.moments):
        assert torch.equal(p, q)
    assert a.history == b.history


def test_one_percent_split_uses_focal():
    state = init_state(_model(0), 3, 0)
    _, rep = train_step(state, _batch(0), TrainConfig(**TINY))
    assert rep.dist_variant == FOCAL and rep.n_im_per_class == 3
    assert rep.total == pytest.approx(0.5 * rep.l_main + 0.1 * 0.5 * rep.l_dist, abs=1e-6)
    assert state.step == 1 and len(state.history) == 1


def test_both_branches_read_same_parameters():
    model = _model(0)
    seen = []
    model.head.register_forward_hook(lambda mod, inp, out: seen.append(mod.weight.data_ptr()))
    state = init_state(model, 3, 0)
    for _ in range(2):
        train_step(state, _batch(0), TrainConfig(**TINY))
    assert len(seen) == 4 and len(set(seen)) == 1


def test_teacher_label_carries_no_gradient():
    """Gradient equals the one obtained with teacher labels frozen up front."""
    cfg = TrainConfig(**TINY).resolved()
    batch = _batch(4, dtype=torch.float64)
    model = _model(1).double()
    model.train()
    params = list(model.parameters())
    total, *_ = compute_losses(model, batch.global_views, batch.local_views, batch.labels, 3, cfg)
    g_impl = torch.autograd.grad(total, params)

    with torch.no_grad():
        frozen = model(batch.global_views).argmax(1)
    from kdctc.objectives import focal_loss

    z_t = model(batch.global_views)
    manual = 0.5 * cross_entropy(z_t, batch.labels) + 0.05 * focal_loss(model(batch.local_views), frozen, 2.0)
    g_ref = torch.autograd.grad(manual, params)
    for a, b in zip(g_impl, g_ref):
        assert torch.allclose(a, b, rtol=0, atol=1e-12)


def test_vanilla_plus_sampling_scores_local_against_truth():
    cfg = TrainConfig(method="vanilla_plus_sampling", **TINY).resolved()
    batch = _batch(5)
    model = _model(0)
    model.train()
    total, l_main, l_local, variant = compute_losses(model, batch.global_views, batch.local_views, batch.labels, 3, cfg)
    assert variant == "cross_entropy"
    assert l_local.item() == pytest.approx(cross_entropy(model(batch.local_views), batch.labels).item(), rel=1e-6)
    assert total.item() == pytest.approx(0.5 * (l_main.item() + l_local.item()), rel=1e-6)


def test_vanilla_equals_kd_without_local_branch():
    runs = []
    for cfg in (
        TrainConfig(method="vanilla", total_steps=20, **TINY),
        TrainConfig(method="kd_ctcnet", alpha=0.0, local_branch=False, total_steps=20, **TINY),
    ):
        state = init_state(_model(0), 15, 0)
        for step in range(20):
            train_step(state, _batch(step), cfg)
        runs.append(state)
    for a, b in zip(runs[0].model.state_dict().values(), runs[1].model.state_dict().values()):
        assert torch.equal(a, b)


def test_iterate_batches_keeps_partial():
    entries = [(f"p{i}", i % 8) for i in range(24)]
    it = iterate_batches(entries, 32, np.random.default_rng(0))
    first, second = next(it), next(it)
    assert len(first) == 24 and sorted(first) == sorted(entries)
    assert len(second) == 24
    it = iterate_batches(entries[:20], 8, np.random.default_rng(0))
    assert [len(next(it)) for _ in range(4)] == [8, 8, 4, 8]


def test_non_finite_loss_aborts():
    batch = _batch(0)
    batch.global_views[0, 0, 0, 0] = float("nan")
    state = init_state(_model(0), 3, 0)
    with pytest.raises(NonFiniteLossError, match="img0"):
        train_step(state, batch, TrainConfig(**TINY))


@pytest.fixture(scope="module")
def synth_split(synth_root):
    return stratified_split(scan_dataset(synth_root), 0)


def test_train_writes_logs_and_checkpoint(synth_split, tmp_path):
    train_m, _ = synth_split
    cfg = TrainConfig(total_steps=3, batch_size=8, dump_patches=True, checkpoint_every=2, **TINY)
    model, history = train(train_m, cfg, _model(0), out_dir=tmp_path)
    assert len(history) == 3
    lines = (tmp_path / "steps.tsv").read_text().splitlines()
    assert lines[0] == "step\tl_main\tl_dist\tvariant\ttotal\tlr" and len(lines) == 4
    assert lines[1].split("\t")[3] == FOCAL
    assert len((tmp_path / "patches.tsv").read_text().splitlines()) == 1 + 3 * 8
    assert (tmp_path / "step_2.ckpt").exists()
    restored = load_checkpoint(tmp_path / "final.ckpt")
    for a, b in zip(restored.state_dict().values(), model.state_dict().values()):
        assert torch.equal(a, b)


def test_train_is_reproducible(synth_split, tmp_path):
    train_m, _ = synth_split
    cfg = TrainConfig(total_steps=4, batch_size=16, **TINY)
    for name in ("a", "b"):
        train(train_m, cfg, _model(0), out_dir=tmp_path / name)
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / "steps.tsv").read_bytes() == (tmp_path / "b" / "steps.tsv").read_bytes()


def test_train_checkpoint_on_abort(synth_split, tmp_path):
    train_m, _ = synth_split

    def bad_loader(path):
        raise OSError("disk gone")

    with pytest.raises(Exception, match="disk gone"):
        train(train_m, TrainConfig(total_steps=2, **TINY), _model(0), loader=bad_loader, out_dir=tmp_path)
    assert (tmp_path / "abort.ckpt").exists()


def test_train_rejects_class_mismatch(synth_split):
    train_m, _ = synth_split
    model = build_model("tiny_cnn", 4, class_names=["w", "x", "y", "z"])
    with pytest.raises(ValueError, match="differ"):
        train(train_m, TrainConfig(total_steps=1, **TINY), model)


def test_train_with_periodic_eval(synth_split, caplog):
    train_m, test_m = synth_split
    cfg = TrainConfig(total_steps=2, batch_size=8, eval_every=1, **TINY)
    with caplog.at_level("INFO", logger="kdctc.trainer"):
        train(train_m, cfg, _model(0), val_manifest=test_m)
    assert sum("val accuracy" in r.message for r in caplog.records) == 2


def test_mixed_precision_step_runs():
    state = init_state(_model(0), 30, 0)
    _, rep = train_step(state, _batch(0), TrainConfig(mixed_precision=True, **TINY))
    assert np.isfinite(rep.total) and rep.dist_variant == "cross_entropy"

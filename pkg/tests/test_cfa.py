import numpy as np
import pytest
import torch

from clpad.cfa import (
    CFA,
    HypersphereBank,
    PatchDescriptor,
    cfa_loss,
    cfa_patch_scores,
    incremental_bank_update,
    init_bank,
)
from clpad.taskstream import make_synthetic_stream


def test_init_bank_examples():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [3.0, 3.0]])
    bank = init_bank(pts, 4)
    assert {tuple(r) for r in bank.memory.tolist()} == {tuple(r) for r in pts.tolist()}
    np.testing.assert_allclose(init_bank(pts, 1).memory[0], pts.mean(0), atol=1e-6)
    with pytest.raises(ValueError):
        init_bank(pts, 5)


def test_centroid_objective_beats_random_patches():
    rng = np.random.default_rng(0)
    pts = np.concatenate([rng.normal(c, 0.3, (100, 2)) for c in ([0, 0], [4, 0], [0, 4], [4, 4])])

    def objective(centres):
        return ((pts[:, None] - centres[None]) ** 2).sum(-1).min(1).sum()

    bank = init_bank(pts, 4, seed=1)
    for seed in range(20):
        random = pts[np.random.default_rng(seed).choice(len(pts), 4, replace=False)]
        assert objective(bank.memory.astype(float)) <= objective(random)


def test_incremental_update_examples():
    bank = HypersphereBank(np.array([[0.0, 0.0], [5.0, 5.0]]))
    same = incremental_bank_update(bank, bank.memory.copy())
    np.testing.assert_array_equal(same.memory, [[0, 0], [5, 5]])

    one = HypersphereBank(np.zeros((1, 1)))
    incremental_bank_update(one, np.array([[1.0], [3.0]]))
    assert one.memory[0, 0] == 2.0 and one.batch_updates_seen == 1
    incremental_bank_update(one, np.array([[5.0]]))
    assert one.memory[0, 0] == pytest.approx(3.5)

    fixed = HypersphereBank(np.array([[0.0], [100.0]]))
    incremental_bank_update(fixed, np.array([[1.0]]))
    assert fixed.memory[1, 0] == 100.0  # unassigned entries stay put
    before = fixed.memory.copy()
    incremental_bank_update(fixed, np.zeros((0, 1)))
    np.testing.assert_array_equal(fixed.memory, before)
    assert fixed.K == 2 and fixed.dim == 1


def test_incremental_update_converges_on_two_clusters():
    rng = np.random.default_rng(2)
    centres = np.array([[0.0, 0.0], [6.0, 6.0]])
    data = np.concatenate([rng.normal(c, 0.5, (200, 2)) for c in centres])
    targets = np.stack([data[:200].mean(0), data[200:].mean(0)])
    bank = HypersphereBank(np.array([[1.5, -1.0], [4.0, 7.5]]))
    start = np.linalg.norm(bank.memory - targets, axis=1).max()
    errors = []
    for epoch in range(6):
        for k in rng.permutation(len(data)).reshape(-1, 40):
            incremental_bank_update(bank, data[k])
        errors.append(np.linalg.norm(bank.memory - targets, axis=1).max())
    # batch-mean noise makes single epochs jitter; the trend must still go down
    assert max(errors) < start
    assert errors[-1] < errors[0] and np.mean(errors[3:]) < np.mean(errors[:3])
    assert errors[-1] < 0.01
    assert bank.memory.shape == (2, 2)


def test_loss_zero_when_patches_sit_on_entries():
    memory = torch.tensor([[0.0, 0.0], [10.0, 10.0], [20.0, 0.0], [0.0, 20.0]])
    phi = memory[:2].clone()
    _, att, rep = cfa_loss(phi, memory, radius=0.5, nearest_k=1, hard_negative_j=1)
    assert float(att) == 0.0 and float(rep) == 0.0


def test_descriptor_gradient_matches_central_differences():
    torch.manual_seed(0)
    net = PatchDescriptor(3, 2).double()
    feats = torch.randn(1, 3, 2, 3, dtype=torch.float64)
    memory = torch.tensor([[0.2, -0.1], [1.5, 0.8]], dtype=torch.float64)

    def loss_fn():
        phi = net(feats).permute(0, 2, 3, 1).reshape(-1, 2)
        return cfa_loss(phi, memory, radius=1.2, nearest_k=1, hard_negative_j=1, alpha=0.1, nu=1.0)[0]

    loss = loss_fn()
    net.zero_grad()
    loss.backward()
    analytic = torch.cat([p.grad.flatten() for p in net.parameters()])
    numeric = []
    h = 1e-6
    with torch.no_grad():
        for p in net.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    assert analytic.abs().max() > 0
    rel = (analytic - numeric).abs() / analytic.abs().clamp_min(1e-8)
    assert rel[analytic.abs() > 1e-8].max() < 1e-4


def test_patch_scores_match_linear_scan():
    rng = np.random.default_rng(3)
    memory = torch.from_numpy(rng.normal(size=(500, 4)))
    phi = torch.from_numpy(rng.normal(size=(64, 4)))
    scores = cfa_patch_scores(phi, memory, nearest_k=3).numpy()
    for q, s in zip(phi.numpy(), scores):
        d = np.sort(((memory.numpy() - q) ** 2).sum(1))[:3]
        w = np.exp(-d[0]) / np.exp(-d).sum()
        assert s == pytest.approx(w * d[0], rel=1e-9)
    assert cfa_patch_scores(memory[:5], memory, 3).abs().max() < 1e-9
    assert (scores >= 0).all()


def _small_cfa(**kw):
    return CFA(layers=("layer2",), epochs=kw.pop("epochs", 3), batch_size=4, **kw)


def test_zero_epochs_leave_descriptor_unchanged():
    stream = make_synthetic_stream(1, 4, 2, (32, 32), 0)
    est = _small_cfa(epochs=0).fit(stream[0].train)
    fresh = _small_cfa(epochs=0)
    fresh._reset()
    for a, b in zip(est.descriptor_.parameters(), fresh.descriptor_.parameters()):
        assert torch.equal(a, b)


def test_training_reduces_objective_and_keeps_bank_size(tmp_path):
    stream = make_synthetic_stream(3, 8, 4, (32, 32), 0)
    est = _small_cfa(epochs=6).fit(stream[0].train)
    history = est.loss_history_[0]
    assert history[-1] < history[0]
    size = len(est.bank_.to_bytes())
    for t in (1, 2):
        est.partial_fit(stream[t].train, bank="incremental")
        assert len(est.bank_.to_bytes()) == size
    maps, scores = est.predict_maps(stream[2].test)
    assert (maps >= 0).all() and np.isfinite(scores).all()

    path = est.save_checkpoint(tmp_path / "cfa.pt")
    back = _small_cfa(epochs=6).load_checkpoint(path)
    np.testing.assert_array_equal(back.bank_.memory, est.bank_.memory)
    np.testing.assert_allclose(back.predict_maps(stream[2].test)[0], maps)

import pytest

from raterbayes import synth


def finite_diff_check(loss_fn, tensors, rng, n_coords=10, step=1e-5,
                      rtol=1e-4, atol=1e-8):
    """Central finite differences vs autodiff grads on random coordinates.

    loss_fn() must rebuild the graph from the current tensor data and
    return the scalar loss Tensor. Returns the worst relative error.

    Coordinates within a step of a ReLU/max-pool kink (where the forward
    and backward one-sided differences disagree) are skipped, but at
    most half of the sampled coordinates may be skipped this way.
    """
    loss = loss_fn()
    base = float(loss.data)
    for t in tensors:
        t.zero_grad()
    loss.backward()

    worst, checked, skipped = 0.0, 0, 0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        for _ in range(max(1, n_coords // len(tensors))):
            idx = tuple(rng.integers(0, s) for s in t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + step
            lp = float(loss_fn().data)
            t.data[idx] = orig - step
            lm = float(loss_fn().data)
            t.data[idx] = orig
            fwd = (lp - base) / step
            bwd = (base - lm) / step
            scale = max(abs(fwd), abs(bwd), atol / rtol)
            if abs(fwd - bwd) / scale > 100 * rtol:
                skipped += 1  # non-smooth point; finite differences unreliable
                continue
            checked += 1
            fd = (lp - lm) / (2 * step)
            err = abs(fd - t.grad[idx]) / max(abs(fd), abs(t.grad[idx]), atol / rtol)
            worst = max(worst, err)
            assert err < rtol, f"finite-diff mismatch: fd={fd}, ad={t.grad[idx]}, rel={err}"
    assert checked >= skipped, f"too many kink coordinates skipped ({skipped} of {checked + skipped})"
    return worst


@pytest.fixture(scope="session")
def tiny_vessel_dataset(tmp_path_factory):
    """Small vessel dataset shared by trainer/CLI tests."""
    root = tmp_path_factory.mktemp("tiny_vessel")
    cfg = synth.PhantomConfig(n_train=8, n_val=2, n_test=3, seed=11)
    synth.generate(cfg, root)
    return root, cfg, synth.load(root / "manifest.json")


@pytest.fixture(scope="session")
def noiseless_vessel_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("noiseless_vessel")
    cfg = synth.PhantomConfig(n_train=2, n_val=1, n_test=2, seed=5,
                              rater_bias=(0.0,) * 4, rater_jitter=0.0)
    synth.generate(cfg, root)
    return root, cfg, synth.load(root / "manifest.json")

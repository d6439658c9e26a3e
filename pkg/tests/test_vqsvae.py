import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vqspike import autodiff as ad
from vqspike.autodiff import Tensor
from vqspike.optim import SGD
from vqspike.snn import LifParams, SpikingConv
from vqspike.vqsvae import (
    VQSVAE,
    PspParams,
    VQSVAEConfig,
    index,
    mix_features,
    perplexity,
    psp,
    psp_trace,
    quantize,
    sfr,
    vqsvae_loss,
)

F32 = np.float32
SMALL = VQSVAEConfig(hidden=4, latent=3, codebook_size=8, steps=3)


def train(*seq):
    """Spike train for a single neuron: (T,) -> (T, 1, 1, 1)."""
    return np.array(seq, dtype=F32).reshape(-1, 1, 1, 1)


def test_sfr_examples():
    assert sfr(train(1, 0, 1, 0)).item() == 0.5
    assert sfr(train(0, 0, 0)).item() == 0.0
    assert sfr(train(*[1] * 7)).item() == 1.0


def test_psp_examples():
    np.testing.assert_array_equal(psp_trace(train(1, 0, 0)).data.ravel(), [0.5, 0.25, 0.125])
    assert psp(train(1, 0, 0)).item() == 0.125
    assert psp(train(0, 0, 0, 0)).item() == 0.0
    ones = psp_trace(train(*[1] * 10)).data.ravel()
    assert np.all(np.diff(ones) > 0) and ones[-1] < 1.0
    assert ones[-1] == pytest.approx(1 - 0.5**10)


@given(hnp.arrays(F32, (6, 2, 3), elements=st.sampled_from([0.0, 1.0])), st.floats(1.1, 10))
@settings(max_examples=50, deadline=None)
def test_readouts_in_unit_interval(z, tau_syn):
    p = PspParams(tau_syn)
    for r in (sfr(z).data, psp_trace(z, p).data):
        assert r.min() >= 0 and r.max() <= 1


def test_psp_trace_gradient_matches_loop(rng):
    z = (rng.random((5, 4)) < 0.5).astype(F32)
    g = rng.standard_normal(z.shape).astype(F32)
    t = Tensor(z, requires_grad=True)
    (psp_trace(t) * g).sum().backward()
    # d PSP_s / d z_t = gain * keep^(s - t) for s >= t
    expected = np.array([[sum(0.5 * 0.5 ** (s - t) * g[s, j] for s in range(t, 5)) for j in range(4)] for t in range(5)])
    np.testing.assert_allclose(t.grad, expected, rtol=1e-6)


def test_psp_params_validation():
    with pytest.raises(ValueError):
        PspParams(1.0)


def test_mix_features_example_and_limits():
    z = train(1, 0, 1, 0)  # SFR 0.5
    z3 = train(1, 0, 0)  # SFR 1/3, PSP 0.125
    k = Tensor([0.0], requires_grad=True)
    out = mix_features(z3, k)
    assert out.item() == pytest.approx(0.5 * (1 / 3) + 0.5 * 0.125)
    assert mix_features(z, Tensor([40.0])).item() == pytest.approx(0.5)  # pure SFR
    assert mix_features(z, Tensor([-40.0])).item() == pytest.approx(psp(z).item())  # pure PSP
    out.backward()
    # d/dk = sigma'(0) * (SFR - PSP)
    assert k.grad[0] == pytest.approx(0.25 * (1 / 3 - 0.125))


def test_mix_formula_on_stated_numbers():
    # sigma(k)=0.5, SFR=0.5, PSP=0.125: evaluate the mixing arithmetic directly
    s, p = Tensor([0.5]), Tensor([0.125])
    k = ad.sigmoid(Tensor([0.0]))
    assert (k * s + (F32(1) - k) * p).item() == 0.3125


# ------------------------------------------------------------------ quantizer


def as_grid(*vec):
    return np.array(vec, dtype=F32).reshape(len(vec), 1, 1)


CB = np.array([[0.0, 0.0], [1.0, 1.0]], dtype=F32)


def test_quantize_examples():
    assert quantize(as_grid(0.1, 0.2), CB).item() == 0
    assert quantize(as_grid(1.0, 1.0), CB).item() == 1
    assert quantize(as_grid(0.5, 0.5), CB).item() == 0  # tie goes to the lower index


def test_tie_break_deterministic_and_order_dependent_only_through_ties(rng):
    cb = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=F32)
    z = as_grid(0.5, 0.5)
    assert all(quantize(z, cb).item() == 0 for _ in range(5))
    cb_perm = cb[[1, 0, 2]]
    assert quantize(z, cb_perm).item() == 0  # still the lowest index among the tied entries
    # without ties, permuting the codebook permutes the answer
    cb2 = rng.standard_normal((16, 4)).astype(F32)
    zs = rng.standard_normal((2, 4, 5, 5)).astype(F32)
    perm = rng.permutation(16)
    np.testing.assert_array_equal(perm[quantize(zs, cb2[perm])], quantize(zs, cb2))


def test_quantize_matches_brute_force(rng):
    cb = rng.standard_normal((10, 3)).astype(F32)
    z = rng.standard_normal((2, 3, 4, 4)).astype(F32)
    tok = quantize(z, cb)
    assert tok.shape == (2, 4, 4)
    for n, i, j in np.ndindex(2, 4, 4):
        d = [float(((z[n, :, i, j].astype(np.float64) - c) ** 2).sum()) for c in cb]
        assert tok[n, i, j] == int(np.argmin(d))


def test_quantize_rejects_bad_codebook():
    with pytest.raises(ValueError, match="non-finite"):
        quantize(as_grid(0.0, 0.0), np.array([[np.nan, 0.0]], dtype=F32))
    with pytest.raises(ad.ShapeError):
        quantize(as_grid(0.0, 0.0, 0.0), CB)


def test_index_lookup_and_errors():
    z = index(CB, np.zeros((2, 3), dtype=np.int64))
    assert z.shape == (2, 2, 3)
    assert np.all(z.data == 0)
    z = index(CB, np.array([[1, 0]]))
    np.testing.assert_array_equal(z.data[:, 0, 0], CB[1])
    with pytest.raises(IndexError, match="out of range"):
        index(CB, np.array([[2]]))
    with pytest.raises(IndexError):
        index(CB, np.array([[-1]]))
    with pytest.raises(TypeError):
        index(CB, np.array([[0.5]]))


def test_round_trip_is_nearest(rng):
    cb = rng.standard_normal((6, 2)).astype(F32)
    z = rng.standard_normal((2, 3, 3)).astype(F32)
    zq = index(cb, quantize(z, cb)).data
    d_chosen = ((z - zq) ** 2).sum(axis=0)
    d_all = ((z[None] - cb[:, :, None, None]) ** 2).sum(axis=1)
    np.testing.assert_array_equal(d_chosen, d_all.min(axis=0))


def test_idempotence_on_random_codebooks():
    rng = np.random.default_rng(7)
    for _ in range(100):
        K, C = rng.integers(2, 20), rng.integers(1, 6)
        cb = rng.standard_normal((K, C)).astype(F32)
        h = rng.integers(0, K, size=(3, 4))
        np.testing.assert_array_equal(quantize(index(cb, h).data, cb), h)


def test_perplexity():
    assert perplexity(np.zeros(10, dtype=int), 4) == pytest.approx(1.0)
    assert perplexity(np.arange(8), 8) == pytest.approx(8.0)


# ------------------------------------------------------------------ spike generator


def test_asg_zero_input_zero_weights_is_silent(rng):
    asg = SpikingConv(3, 3, 1, LifParams(), rng, name="asg")
    asg.weight.data[:] = 0
    out = asg(np.zeros((2, 3, 4, 4), dtype=F32), steps=5)
    assert out.shape == (5, 2, 3, 4, 4)
    assert out.data.sum() == 0


def test_asg_output_binary(rng):
    model = VQSVAE(SMALL, rng)
    out = model.spike_generator(Tensor(rng.standard_normal((2, 3, 4, 4)).astype(F32) * 4))
    assert set(np.unique(out.data)) <= {0.0, 1.0}


# ------------------------------------------------------------------ model and loss


@pytest.fixture
def small_model():
    return VQSVAE(SMALL, np.random.default_rng(3))


@pytest.fixture
def batch():
    rng = np.random.default_rng(11)
    return rng.random((2, 1, 12, 12)).astype(F32)


def test_forward_shapes(small_model, batch):
    out = small_model(batch)
    assert out.x_hat.shape == batch.shape
    assert out.tokens.shape == (2, 3, 3)
    assert out.e_train.shape == (3, 2, 3, 3, 3) == out.q_train.shape
    assert out.x_hat.data.min() >= 0 and out.x_hat.data.max() <= 1


def test_default_token_grid_is_quarter_size():
    model = VQSVAE(VQSVAEConfig(), np.random.default_rng(0))
    out = model(np.zeros((1, 1, 28, 28), dtype=F32))
    assert out.tokens.shape == (1, 7, 7)
    assert out.tokens.min() >= 0 and out.tokens.max() < 128


def test_untrained_model_no_better_than_mean(mnist_paths):
    from vqspike.data import load_idx, mse

    x = load_idx(mnist_paths[0]).images[:64]
    model = VQSVAE(VQSVAEConfig(), np.random.default_rng(0))
    with ad.no_grad():
        x_hat = model(x).x_hat.data
    assert mse(x, x_hat) >= mse(x, np.full_like(x, x.mean()))


def test_loss_zero_when_everything_matches(rng):
    x = rng.random((2, 1, 4, 4)).astype(F32)
    tr = (rng.random((3, 2, 2, 2, 2)) < 0.5).astype(F32)
    z = rng.random((2, 2, 2, 2)).astype(F32)
    total, terms = vqsvae_loss(x, x, tr, tr, z, z, 0.25)
    assert total.item() == 0.0
    assert all(v == 0.0 for v in terms.values())


def test_beta_zero_drops_commitment(rng):
    x, xh = rng.random((2, 1, 4, 4)).astype(F32), rng.random((2, 1, 4, 4)).astype(F32)
    e, q = [(rng.random((3, 2, 2, 2, 2)) < 0.5).astype(F32) for _ in range(2)]
    ze, zq = rng.random((2, 2, 2, 2)).astype(F32), rng.random((2, 2, 2, 2)).astype(F32)
    with_b, t1 = vqsvae_loss(x, xh, e, q, ze, zq, 0.25)
    without, t0 = vqsvae_loss(x, xh, e, q, ze, zq, 0.0)
    assert t0["commit"] == 0.0
    assert with_b.item() - without.item() == pytest.approx(t1["commit"], abs=1e-6)


def test_loss_terms_match_scalar_recomputation(small_model, batch):
    out = small_model(batch)
    _, terms = small_model.loss(batch, out)
    x, xh = batch.astype(np.float64).ravel(), out.x_hat.data.astype(np.float64).ravel()
    recon = sum((a - b) ** 2 for a, b in zip(x, xh)) / len(x)
    ze, zq = out.z_e.data.astype(np.float64).ravel(), out.z_q.data.astype(np.float64).ravel()
    vq = sum((a - b) ** 2 for a, b in zip(ze, zq)) / len(ze)

    def psp_seq(tr):
        T = tr.shape[0]
        flat = tr.reshape(T, -1).astype(np.float64)
        out, prev = [], np.zeros(flat.shape[1])
        for t in range(T):
            prev = 0.5 * prev + 0.5 * flat[t]
            out.append(prev.copy())
        return out

    pe, pq = psp_seq(out.e_train.data), psp_seq(out.q_train.data)
    mmd = sum(float(((a - b) ** 2).mean()) for a, b in zip(pe, pq))
    assert terms["recon"] == pytest.approx(recon, abs=1e-5)
    assert terms["vq"] == pytest.approx(vq, abs=1e-5)
    assert terms["asg"] == pytest.approx(mmd, abs=1e-5)
    assert terms["commit"] == pytest.approx(0.25 * mmd, abs=1e-5)
    assert terms["total"] == pytest.approx(recon + vq + 1.25 * mmd, abs=1e-5)


def test_non_finite_loss_aborts(rng):
    x = np.full((1, 1, 2, 2), np.nan, dtype=F32)
    tr = np.zeros((2, 1, 1, 1, 1), dtype=F32)
    with pytest.raises(FloatingPointError, match="non-finite"):
        vqsvae_loss(x, np.zeros_like(x), tr, tr, np.zeros(1), np.zeros(1), 0.25)


def test_straight_through_is_identity_on_trains(small_model, batch):
    """Gradient of f(q) w.r.t. e through the estimator equals df/dq evaluated at q."""
    out = small_model(batch)
    e_leaf = Tensor(out.e_train.data, requires_grad=True)
    q_leaf = Tensor(out.q_train.data, requires_grad=True)
    w = np.random.default_rng(0).standard_normal(q_leaf.shape).astype(F32)

    def f(t):
        return ad.tsum(ad.square(psp_trace(t)) * w)

    f(ad.straight_through(e_leaf, q_leaf.detach())).backward()
    f(q_leaf).backward()
    np.testing.assert_array_equal(e_leaf.grad, q_leaf.grad)


def loss_grads(model, batch, beta=0.25, live_z_e=True):
    """Parameter gradients of vqsvae_loss; ``live_z_e=False`` feeds z_e detached."""
    out = model(batch)
    z_e = out.z_e if live_z_e else out.z_e.detach()
    total, _ = vqsvae_loss(batch, out.x_hat, out.e_train, out.q_train, z_e, out.z_q, beta)
    model.zero_grad()
    total.backward()
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in model.named_parameters()}


ENCODER = ("enc1.weight", "enc1.bias", "enc2.weight", "enc2.bias")


def test_vq_term_gives_no_encoder_gradient(small_model, batch):
    small_model.enc1.bias.data[:] = 1.5  # make the encoder fire so every term is non-trivial
    small_model.asg.bias.data[:] = 1.0
    live = loss_grads(small_model, batch)
    cut = loss_grads(small_model, batch, live_z_e=False)
    # z_e only enters the second term; detaching it leaves the encoder's gradient unchanged
    for name in ENCODER:
        np.testing.assert_array_equal(live[name], cut[name])
    assert np.any(live["codebook.k_mix"]) and not np.any(cut["codebook.k_mix"])


def test_commit_term_gives_no_codebook_gradient(small_model, batch):
    small_model.enc1.bias.data[:] = 1.5
    small_model.asg.bias.data[:] = 1.0
    with_commit = loss_grads(small_model, batch, beta=0.25)
    without = loss_grads(small_model, batch, beta=0.0)
    for name in ("codebook.entries", "asg.weight", "asg.bias"):
        np.testing.assert_array_equal(with_commit[name], without[name])
    assert not np.array_equal(with_commit["enc2.weight"], without["enc2.weight"])


def test_full_loss_reaches_every_parameter(small_model, batch):
    small_model.enc1.bias.data[:] = 1.5
    small_model.asg.bias.data[:] = 1.0
    out = small_model(batch)
    total, _ = small_model.loss(batch, out)
    small_model.zero_grad()
    total.backward()
    for name, p in small_model.named_parameters():
        assert p.grad is not None and np.isfinite(p.grad).all(), name


def test_codebook_step_moves_entries_toward_encoder_outputs(small_model, batch):
    small_model.enc1.bias.data[:] = 1.5
    out = small_model(batch)
    ze = out.z_e.data

    def vq_distance():
        zq = index(small_model.codebook.entries, out.tokens).data
        return float(((ze - zq) ** 2).sum())

    before = vq_distance()
    small_model.zero_grad()
    ad.mean(ad.square(out.z_e - out.z_q)).backward()
    SGD([small_model.codebook.entries], lr=1e-2).step()
    assert vq_distance() < before


def test_one_epoch_on_small_subset_decreases_loss(mnist_paths):
    from vqspike.config import Config
    from vqspike.data import load_idx
    from vqspike.train import build_vqsvae, rng_streams, train_vqsvae

    data = load_idx(*mnist_paths).subset(256)
    cfg = Config(epochs=1, out_dir="unused", vqsvae_ckpt="unused")
    model0 = build_vqsvae(cfg, rng_streams(cfg.seed)["vq_init"])
    x = data.images
    with ad.no_grad():
        before, _ = model0.loss(x, model0(x))
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        res = train_vqsvae(cfg.replace(vqsvae_ckpt=f"{tmp}/v.ckpt"), data, tmp)
    model = res["model"]
    with ad.no_grad():
        after, _ = model.loss(x, model(x))
    assert after.item() < before.item()


def _readout_rows(model, images):
    with ad.no_grad():
        z = model.readout(model.encode_train(images)).data
    return np.moveaxis(z, 1, -1).reshape(-1, z.shape[1])


def test_codebook_init_from_data_uses_distinct_readouts(small_model, batch):
    small_model.enc1.bias.data[:] = 1.5
    rows = _readout_rows(small_model, batch)
    filled = small_model.init_codebook_from(batch, np.random.default_rng(0))
    distinct = np.unique(rows, axis=0)
    assert filled == min(len(distinct), SMALL.codebook_size)
    picked = small_model.codebook.entries.data[:filled]
    assert len(np.unique(picked, axis=0)) == filled
    assert all((distinct == r).all(1).any() for r in picked)


def test_codebook_restart_moves_only_dead_rows_onto_unserved_readouts(small_model, batch):
    small_model.enc1.bias.data[:] = 1.5
    z_e = small_model(batch).z_e.data
    before = small_model.codebook.entries.data.copy()
    dead = np.zeros(SMALL.codebook_size, dtype=bool)
    dead[[0, 2]] = True
    moved = small_model.restart_codes(dead, z_e, np.random.default_rng(5))
    assert moved == 2
    after = small_model.codebook.entries.data
    np.testing.assert_array_equal(after[~dead], before[~dead])
    rows = _readout_rows(small_model, batch)
    for r in after[dead][:moved]:
        assert (rows == r).all(1).any()
        assert not (before[~dead] == r).all(1).any()


def test_codebook_restart_noop_without_dead_rows(small_model, batch):
    before = small_model.codebook.entries.data.copy()
    dead = np.zeros(SMALL.codebook_size, dtype=bool)
    assert small_model.restart_codes(dead, small_model(batch).z_e.data, np.random.default_rng(0)) == 0
    np.testing.assert_array_equal(small_model.codebook.entries.data, before)

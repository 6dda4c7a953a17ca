import numpy as np
import pytest

import dp2vae.training as training
from dp2vae.accountant import PrivacyParams, eps_for_training
from dp2vae.data_io import LabeledDataset, checkpoint_bytes, load_checkpoint, save_checkpoint
from dp2vae.errors import InvalidParameterError, NumericError
from dp2vae.nn import DenseNet
from dp2vae.numerics import RngStream
from dp2vae.training import (TrainConfig, decoder_batch_gradient, fresh_decoder, init_stage2,
                             metrics_csv_lines, pack_stage2, partition_dataset, run_stage2,
                             stage1_pretrain, stage2_step, stage2_train, unpack_stage2)


def toy_dataset(n=40, d=16, seed=0, flip=False):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    protos = np.stack([np.linspace(0.1, 0.9, d), np.linspace(0.9, 0.1, d)])
    if flip:
        protos = protos[::-1]
    images = np.clip(protos[labels] + 0.05 * rng.standard_normal((n, d)), 0, 1)
    return LabeledDataset(images, labels)


def toy_config(**kw):
    base = dict(K=2, batch_size=8, pretrain_steps=200, lr_pretrain=1e-2, lr=1e-3, data_dim=16,
                n_classes=2, latent_dim=2, encoder_hidden=(12,), decoder_hidden=(12,), eps_every=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_pool():
    data = toy_dataset()
    part = partition_dataset(len(data), 2, seed=3)
    return data, part, stage1_pretrain(data, part, toy_config(), seed=3)


def test_partition_paper_scale():
    part = partition_dataset(60000, 2500, seed=0)
    assert part.K == 2500
    assert set(part.sizes()) == {24}


def test_partition_small_covers_and_disjoint():
    part = partition_dataset(100, 10, seed=1)
    assert part.sizes() == [10] * 10
    joined = np.concatenate(part.subsets)
    assert sorted(joined.tolist()) == list(range(100))


def test_partition_remainder_round_robin():
    part = partition_dataset(23, 5, seed=2)
    assert part.sizes() == [5, 5, 5, 4, 4]
    assert sorted(np.concatenate(part.subsets).tolist()) == list(range(23))


def test_partition_determinism():
    a, b = partition_dataset(50, 5, 7), partition_dataset(50, 5, 7)
    assert all(np.array_equal(x, y) for x, y in zip(a.subsets, b.subsets))
    c = partition_dataset(50, 5, 8)
    assert not all(np.array_equal(x, y) for x, y in zip(a.subsets, c.subsets))


def test_partition_rejects_k_above_n():
    with pytest.raises(InvalidParameterError):
        partition_dataset(3, 5, 0)


def test_zero_pretrain_steps_gives_fresh_encoders():
    data = toy_dataset()
    part = partition_dataset(len(data), 2, 0)
    pool = stage1_pretrain(data, part, toy_config(pretrain_steps=0), seed=5)
    for k, enc in enumerate(pool.encoders):
        fresh = toy_config().new_encoder(RngStream(5, training.ENCODER_STREAM_BASE + k))
        assert np.array_equal(enc.params, fresh.params)


def test_stage1_improves_elbo_on_every_subset(toy_pool):
    _, _, pool = toy_pool
    assert len(pool.init_elbo) == 2
    for before, after in zip(pool.init_elbo, pool.final_elbo):
        assert after > before


def test_stage1_sequential_vs_concurrent_bitwise():
    data = toy_dataset()
    part = partition_dataset(len(data), 2, 0)
    cfg = toy_config(pretrain_steps=30)
    seq = stage1_pretrain(data, part, cfg, seed=11, workers=1)
    par = stage1_pretrain(data, part, cfg, seed=11, workers=2)
    for a, b in zip(seq.encoders, par.encoders):
        assert np.array_equal(a.params, b.params)


def test_stage1_encoder_sees_only_its_subset():
    data = toy_dataset()
    part = partition_dataset(len(data), 2, 0)
    cfg = toy_config(pretrain_steps=20)
    pool = stage1_pretrain(data, part, cfg, seed=4)
    # changing records outside subset 0 leaves encoder 0 untouched
    images = data.images.copy()
    images[part.subsets[1]] = 1.0 - images[part.subsets[1]]
    other = stage1_pretrain(LabeledDataset(images, data.labels), part, cfg, seed=4)
    assert np.array_equal(pool.encoders[0].params, other.encoders[0].params)
    assert not np.array_equal(pool.encoders[1].params, other.encoders[1].params)


def test_stage1_batch_reduced_to_subset_size():
    data = toy_dataset(n=12)
    part = partition_dataset(12, 2, 0)
    pool = stage1_pretrain(data, part, toy_config(batch_size=32, pretrain_steps=2), seed=0)
    assert len(pool.notes) == 2 and "reduced" in pool.notes[0]


def test_decoder_init_independent_of_data(toy_pool):
    data, part, pool = toy_pool
    flipped = toy_dataset(flip=True, seed=9)
    other_pool = stage1_pretrain(flipped, part, toy_config(pretrain_steps=5), seed=3)
    s1 = init_stage2(pool, toy_config(), part, PrivacyParams(), seed=21)
    s2 = init_stage2(other_pool, toy_config(), part, PrivacyParams(), seed=21)
    assert np.array_equal(s1.decoder.params, s2.decoder.params)
    assert np.array_equal(s1.decoder.params, fresh_decoder(toy_config(), 21).params)


def test_stage2_zero_steps(toy_pool):
    data, part, pool = toy_pool
    decoder, spend = stage2_train(pool, data, part, toy_config(), PrivacyParams(), 0, seed=2)
    assert np.array_equal(decoder.params, fresh_decoder(toy_config(), 2).params)
    assert spend.epsilon == 0.0


def test_stage2_determinism(toy_pool):
    data, part, pool = toy_pool
    a = stage2_train(pool, data, part, toy_config(), PrivacyParams(), 15, seed=2)
    b = stage2_train(pool, data, part, toy_config(), PrivacyParams(), 15, seed=2)
    assert np.array_equal(a[0].params, b[0].params)
    assert a[1] == b[1]


def test_stage2_spend_matches_accountant_oracle(toy_pool):
    data, part, pool = toy_pool
    _, spend = stage2_train(pool, data, part, toy_config(), PrivacyParams(), 12, seed=2)
    assert spend == eps_for_training(2, 8.0, 12)


def test_accountant_counts_decoder_updates(toy_pool):
    data, part, pool = toy_pool
    state = init_stage2(pool, toy_config(), part, PrivacyParams(), seed=0)
    run_stage2(state, data, part, toy_config(), 7)
    assert state.accountant.steps == state.step == len(state.metrics) == 7
    assert state.decoder_adam.t == 7


def test_stage2_step_ordering_matches_reference(toy_pool):
    """Replay one step by hand in the documented order and compare bitwise."""
    data, part, pool = toy_pool
    cfg = toy_config()
    state = init_stage2(pool, cfg, part, PrivacyParams(clip_bound=0.5, noise_multiplier=2.0), seed=6)
    ref = init_stage2(pool, cfg, part, PrivacyParams(clip_bound=0.5, noise_multiplier=2.0), seed=6)
    stage2_step(state, data, part, cfg)

    from dp2vae.cvae import CvaeParams, elbo_and_grads
    from dp2vae.nn import adam_step, clip_to_norm
    rng = ref.rng
    k = rng.integers(2)
    batch = rng.choice(part.subsets[k], cfg.batch_size)
    eps = rng.normal((cfg.batch_size, cfg.latent_dim))
    enc, enc_adam = ref.pool.encoders[k].copy(), ref.pool.adam[k].copy()
    grads = []
    for i, idx in enumerate(batch):
        params = CvaeParams(enc, ref.decoder, cfg.n_classes)
        _, g_enc, g_dec = elbo_and_grads(params, data.images[idx], data.labels[idx], eps=eps[i])
        grads.append(g_dec)
        new, enc_adam = adam_step(enc.params, g_enc, enc_adam, cfg.lr)
        enc = DenseNet(enc.sizes, enc.activations, new)
    g = clip_to_norm(np.sum(grads, axis=0) / len(grads), 0.5)
    noisy = g + 2.0 * 0.5 * rng.normal(g.shape)
    dec, _ = adam_step(ref.decoder.params, noisy, ref.decoder_adam, cfg.lr)

    assert state.metrics[0]["k"] == k
    assert np.array_equal(state.metrics[0]["batch"], batch)
    assert np.allclose(state.pool.encoders[k].params, enc.params, rtol=1e-12, atol=1e-15)
    assert np.allclose(state.decoder.params, dec, rtol=1e-10, atol=1e-13)
    assert state.metrics[0]["grad_norm_post"] <= 0.5 + 1e-12


def test_single_example_batch(toy_pool):
    data, part, pool = toy_pool
    cfg = toy_config(batch_size=1)
    state = init_stage2(pool, cfg, part, PrivacyParams(), seed=1)
    before = [a.t for a in state.pool.adam]
    stage2_step(state, data, part, cfg)
    k = state.metrics[0]["k"]
    assert state.pool.adam[k].t == before[k] + 1
    assert len(state.metrics[0]["batch"]) == 1


def test_decoder_batch_gradient_single_is_example_grad(toy_pool):
    data, part, pool = toy_pool
    from dp2vae.cvae import CvaeParams, elbo_and_grads
    dec = fresh_decoder(toy_config(), 0)
    eps = np.array([[0.3, -0.2]])
    enc = pool.encoders[0].copy()
    g, _ = decoder_batch_gradient(enc, pool.adam[0].copy(), dec, data.images[:1], data.labels[:1],
                                  eps, 1e-3, 2)
    _, _, ref = elbo_and_grads(CvaeParams(pool.encoders[0], dec, 2), data.images[0], data.labels[0], eps=eps[0])
    assert np.array_equal(g, ref)


def test_freeze_encoders_leaves_pool(toy_pool):
    data, part, pool = toy_pool
    cfg = toy_config(freeze_encoders=True)
    state = init_stage2(pool, cfg, part, PrivacyParams(), seed=1)
    run_stage2(state, data, part, cfg, 3)
    for a, b in zip(state.pool.encoders, pool.encoders):
        assert np.array_equal(a.params, b.params)


def test_encoder_k_updated_only_from_subset_k(toy_pool):
    data, part, pool = toy_pool
    state = init_stage2(pool, toy_config(), part, PrivacyParams(), seed=8)
    run_stage2(state, data, part, toy_config(), 10)
    for rec in state.metrics:
        assert set(rec["batch"].tolist()) <= set(part.subsets[rec["k"]].tolist())


def test_huge_noise_bounded_signal(toy_pool, monkeypatch):
    """With sigma=1e6 the released gradients on two datasets differ by at most 2C per step."""
    data, part, pool = toy_pool
    flipped = toy_dataset(flip=True, seed=9)
    cfg = toy_config()
    privacy = PrivacyParams(clip_bound=1.0, noise_multiplier=1e6)
    released = {}

    def run(dataset, tag):
        seen = []
        real_update = training.adam_update

        def spy(params, grad, state, lr):
            if len(params) == fresh_decoder(cfg, 0).n_params:
                seen.append(grad.copy())
            real_update(params, grad, state, lr)

        monkeypatch.setattr(training, "adam_update", spy)
        state = init_stage2(pool, cfg, part, privacy, seed=13)
        start = state.decoder.params.copy()
        run_stage2(state, dataset, part, cfg, 100)
        monkeypatch.setattr(training, "adam_update", real_update)
        released[tag] = seen
        return state.decoder.params - start

    delta_a = run(data, "a")
    delta_b = run(flipped, "b")
    assert len(released["a"]) == len(released["b"]) == 100
    for ga, gb in zip(released["a"], released["b"]):
        assert np.linalg.norm(ga - gb) <= 2.0 * privacy.clip_bound * (1 + 1e-9)
        # noise norm is ~ sigma * C * sqrt(n), signal is <= C
        assert np.linalg.norm(ga) > 1e5
    rel = np.linalg.norm(delta_a - delta_b) / np.linalg.norm(delta_a)
    assert rel < 1e-3


def test_nan_gradient_aborts_without_spend(toy_pool):
    data, part, pool = toy_pool
    cfg = toy_config()
    state = init_stage2(pool, cfg, part, PrivacyParams(), seed=1)
    run_stage2(state, data, part, cfg, 2)
    snapshot = [e.params.copy() for e in state.pool.encoders]
    adam_t = [a.t for a in state.pool.adam]
    state.decoder.params[0] = np.nan
    state.decoder.mark_updated()
    with pytest.raises(NumericError):
        stage2_step(state, data, part, cfg)
    assert state.accountant.steps == state.step == 2
    assert len(state.metrics) == 2
    for e, s in zip(state.pool.encoders, snapshot):
        assert np.array_equal(e.params, s)
    assert [a.t for a in state.pool.adam] == adam_t


def test_empty_subset_redrawn(toy_pool):
    data, part, pool = toy_pool
    from dp2vae.training import Partition
    holey = Partition(2, [part.subsets[0], np.array([], dtype=np.int64)], part.seed)
    state = init_stage2(pool, toy_config(), holey, PrivacyParams(), seed=0)
    run_stage2(state, data, holey, toy_config(), 12)
    assert all(r["k"] == 0 for r in state.metrics)
    assert any("empty" in e for e in state.events)


def test_resume_matches_uninterrupted(toy_pool, tmp_path):
    data, part, pool = toy_pool
    cfg = toy_config()
    full = init_stage2(pool, cfg, part, PrivacyParams(), seed=4)
    run_stage2(full, data, part, cfg, 10)

    half = init_stage2(pool, cfg, part, PrivacyParams(), seed=4)
    run_stage2(half, data, part, cfg, 4)
    path = tmp_path / "stage2.ckpt"
    save_checkpoint(pack_stage2(half), path)
    resumed = unpack_stage2(load_checkpoint(path))
    run_stage2(resumed, data, part, cfg, 6)
    assert checkpoint_bytes(pack_stage2(resumed)) == checkpoint_bytes(pack_stage2(full))


def test_metrics_csv(toy_pool):
    data, part, pool = toy_pool
    state = init_stage2(pool, toy_config(), part, PrivacyParams(), seed=0)
    run_stage2(state, data, part, toy_config(), 5)
    lines = metrics_csv_lines(state.metrics)
    assert lines[0] == "step,k,elbo,grad_norm_pre,grad_norm_post,epsilon"
    assert len(lines) == 6
    assert lines[1].endswith(",")
    assert float(lines[5].split(",")[-1]) == pytest.approx(eps_for_training(2, 8.0, 5).epsilon)

"""Two-stage training: non-private encoder pool, then a noisy decoder.

Stage 1 pre-trains one encoder per disjoint data subset, each alongside its own
throw-away decoder. Stage 2 starts a fresh decoder (a function of the seed
only) and, per step, picks a subset at random, keeps training that subset's
encoder example by example, and releases a clipped, noised, batch-averaged
decoder gradient. Only the decoder leaves Stage 2.

Random streams, by ``stream_id`` under the run seed:

* ``PARTITION_STREAM``: shuffle for the subset split
* ``DECODER_INIT_STREAM``: the Stage 2 decoder initialization
* ``STAGE2_STREAM``: subset choice, batches, latent noise, gradient noise
* ``ENCODER_STREAM_BASE + k``: everything in Stage 1 for subset ``k``
* ``ELBO_EVAL_STREAM_BASE + k``: frozen noise for Stage 1 ELBO reports
"""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .accountant import PrivacyParams, PrivacySpend, RdpAccountant
from .cvae import CvaeParams, decoder_grad_from_traces, decoder_net, elbo_and_grads, encoder_net
from .data_io import Checkpoint, LabeledDataset
from .errors import InvalidParameterError, NumericError
from .nn import AdamState, DenseNet, adam_update, clip_to_norm
from .numerics import RngStream

log = logging.getLogger(__name__)

PARTITION_STREAM = 1
DECODER_INIT_STREAM = 2
STAGE2_STREAM = 3
ENCODER_STREAM_BASE = 1 << 32
ELBO_EVAL_STREAM_BASE = 2 << 32


@dataclass
class TrainConfig:
    K: int = 20
    batch_size: int = 32
    pretrain_steps: int = 300
    lr_pretrain: float = 1e-3
    lr: float = 1e-3
    clip_bound: float = 1.0
    latent_dim: int = 8
    n_classes: int = 10
    data_dim: int = 784
    encoder_hidden: tuple = (256, 128)
    decoder_hidden: tuple = (128, 256)
    freeze_encoders: bool = False
    # "subset": q = 1/K; "batch": q = B / |D_k|
    amplification: str = "subset"
    # cumulative epsilon is logged every this many Stage 2 steps
    eps_every: int = 50

    def __post_init__(self):
        for name in ("K", "batch_size", "latent_dim", "n_classes", "data_dim", "eps_every"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        if self.pretrain_steps < 0:
            raise InvalidParameterError("pretrain_steps must be >= 0")
        if self.lr_pretrain < 0 or self.lr < 0:
            raise InvalidParameterError("learning rates must be >= 0")
        if not self.clip_bound > 0:
            raise InvalidParameterError("clip_bound must be > 0")
        if self.amplification not in ("subset", "batch"):
            raise InvalidParameterError(f"unknown amplification mode {self.amplification!r}")
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)

    def new_encoder(self, rng: RngStream) -> DenseNet:
        return encoder_net(rng, self.data_dim, self.n_classes, self.latent_dim, self.encoder_hidden)

    def new_decoder(self, rng: RngStream) -> DenseNet:
        return decoder_net(rng, self.data_dim, self.n_classes, self.latent_dim, self.decoder_hidden)


@dataclass
class Partition:
    K: int
    subsets: list
    seed: int

    def sizes(self) -> list:
        return [len(s) for s in self.subsets]


def partition_dataset(n: int, K: int, seed: int) -> Partition:
    """Shuffle ``0..n-1`` and cut it into ``K`` disjoint subsets.

    Subsets get ``n // K`` consecutive shuffled indices each; the remaining
    ``n % K`` indices are dealt round-robin starting at subset 0.
    """
    if K < 1 or n < K:
        raise InvalidParameterError(f"need n >= K >= 1, got n={n}, K={K}")
    perm = RngStream(seed, PARTITION_STREAM).permutation(n)
    size = n // K
    subsets = [perm[k * size:(k + 1) * size] for k in range(K)]
    for j, idx in enumerate(perm[K * size:]):
        subsets[j] = np.append(subsets[j], idx)
    return Partition(K, [np.asarray(s, dtype=np.int64) for s in subsets], seed)


@dataclass
class EncoderPool:
    encoders: list
    adam: list
    stream_ids: list
    init_elbo: list = field(default_factory=list)
    final_elbo: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.encoders)


def mean_elbo(params: CvaeParams, images, labels, eps) -> float:
    terms, _, _ = elbo_and_grads(params, images, labels, eps=eps)
    return terms.elbo


def _clip_in_place(g: np.ndarray, c: float) -> None:
    norm = float(np.linalg.norm(g))
    if norm > c:
        g *= c / norm


def pretrain_encoder(k: int, images, labels, config: TrainConfig, seed: int):
    """Train encoder ``k`` and a throw-away decoder on one subset's records.

    Returns ``(encoder, adam_state, init_elbo, final_elbo, notes)``; the ELBOs
    are full-subset means under one frozen noise draw.
    """
    rng = RngStream(seed, ENCODER_STREAM_BASE + k)
    encoder = config.new_encoder(rng)
    decoder = config.new_decoder(rng)
    enc_adam = AdamState.zeros(encoder.n_params)
    dec_adam = AdamState.zeros(decoder.n_params)
    params = CvaeParams(encoder, decoder, config.n_classes)

    notes = []
    n = len(labels)
    batch = config.batch_size
    if batch > n:
        notes.append(f"subset {k}: batch size {batch} reduced to subset size {n}")
        log.warning(notes[-1])
        batch = n

    eval_eps = RngStream(seed, ELBO_EVAL_STREAM_BASE + k).normal((n, config.latent_dim))
    init_elbo = mean_elbo(params, images, labels, eval_eps)

    buffers = (np.empty(encoder.n_params), np.empty(decoder.n_params))
    for _ in range(config.pretrain_steps):
        idx = rng.choice(n, batch)
        eps = rng.normal((batch, config.latent_dim))
        _, g_enc, g_dec = elbo_and_grads(params, images[idx], labels[idx], eps=eps, out=buffers)
        _clip_in_place(g_dec, config.clip_bound)
        _clip_in_place(g_enc, config.clip_bound)
        adam_update(decoder.params, g_dec, dec_adam, config.lr_pretrain)
        adam_update(encoder.params, g_enc, enc_adam, config.lr_pretrain)
        decoder.mark_updated()
        encoder.mark_updated()

    final_elbo = mean_elbo(params, images, labels, eval_eps)
    return encoder, enc_adam, init_elbo, final_elbo, notes


def stage1_pretrain(dataset: LabeledDataset, partition: Partition, config: TrainConfig,
                    seed: int, workers: int = 1) -> EncoderPool:
    """Pre-train the encoder pool; jobs are independent and may run in threads."""
    if sum(partition.sizes()) > len(dataset):
        raise InvalidParameterError("partition indexes past the end of the dataset")

    def job(k):
        idx = partition.subsets[k]
        return pretrain_encoder(k, dataset.images[idx], dataset.labels[idx], config, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(partition.K)))
    else:
        results = [job(k) for k in range(partition.K)]
    return EncoderPool(
        encoders=[r[0] for r in results],
        adam=[r[1] for r in results],
        stream_ids=[ENCODER_STREAM_BASE + k for k in range(partition.K)],
        init_elbo=[r[2] for r in results],
        final_elbo=[r[3] for r in results],
        notes=[note for r in results for note in r[4]],
    )


def fresh_decoder(config: TrainConfig, seed: int) -> DenseNet:
    """The Stage 2 starting decoder. Reads nothing but the seed."""
    return config.new_decoder(RngStream(seed, DECODER_INIT_STREAM))


@dataclass
class Stage2State:
    decoder: DenseNet
    decoder_adam: AdamState
    pool: EncoderPool
    privacy: PrivacyParams
    accountant: RdpAccountant
    rng: RngStream
    step: int = 0
    metrics: list = field(default_factory=list)
    events: list = field(default_factory=list)


def sampling_rate(config: TrainConfig, partition: Partition) -> float | None:
    if config.amplification == "subset":
        return None
    return min(1.0, config.batch_size / min(partition.sizes()))


def init_stage2(pool: EncoderPool, config: TrainConfig, partition: Partition,
                privacy: PrivacyParams, seed: int) -> Stage2State:
    if pool.K != partition.K:
        raise InvalidParameterError(f"pool has {pool.K} encoders but partition has K={partition.K}")
    decoder = fresh_decoder(config, seed)
    return Stage2State(
        decoder=decoder,
        decoder_adam=AdamState.zeros(decoder.n_params),
        pool=copy.deepcopy(pool),
        privacy=privacy,
        accountant=RdpAccountant(partition.K, privacy.noise_multiplier, privacy.delta,
                                 sampling_rate(config, partition)),
        rng=RngStream(seed, STAGE2_STREAM),
    )


def decoder_batch_gradient(encoder: DenseNet, encoder_adam: AdamState, decoder: DenseNet,
                           images, labels, eps, lr: float, n_classes: int = 10,
                           update_encoder: bool = True):
    """Per-example pass over a batch, in order.

    Example ``i`` is evaluated at the encoder left by examples ``0..i-1``; its
    encoder gradient is applied with Adam right away (unless
    ``update_encoder`` is false). The decoder is held fixed.

    Returns ``(mean_decoder_grad, mean_elbo)``; ``encoder`` and
    ``encoder_adam`` are updated in place.
    """
    params = CvaeParams(encoder, decoder, n_classes)
    enc_buffer = np.empty(encoder.n_params)
    traces = []
    elbo = 0.0
    for i in range(len(labels)):
        # the decoder is fixed for the whole batch, so its per-example
        # gradients are summed in one batched pass afterwards
        terms, g_enc, trace = elbo_and_grads(params, images[i], labels[i], eps=eps[i],
                                             out=(enc_buffer, None), defer_decoder=True)
        traces.append(trace)
        elbo += terms.elbo
        if update_encoder:
            adam_update(encoder.params, g_enc, encoder_adam, lr)
            encoder.mark_updated()
    total = decoder_grad_from_traces(decoder, traces)
    total /= len(labels)
    return total, elbo / len(labels)


def stage2_step(state: Stage2State, dataset: LabeledDataset, partition: Partition,
                config: TrainConfig) -> Stage2State:
    """One noisy decoder update. Mutates and returns ``state``.

    On a numeric failure the encoder touched by this step is restored, the
    accountant is left alone and ``NumericError`` propagates.
    """
    rng = state.rng
    K = partition.K
    k = rng.integers(K)
    for _ in range(100 * K):
        if len(partition.subsets[k]):
            break
        state.events.append(f"step {state.step + 1}: subset {k} empty, redrawing")
        k = rng.integers(K)
    else:
        raise InvalidParameterError("all subsets are empty")

    subset = partition.subsets[k]
    batch = rng.choice(subset, min(config.batch_size, len(subset)))
    eps = rng.normal((len(batch), config.latent_dim))

    encoder, enc_adam = state.pool.encoders[k], state.pool.adam[k]
    saved_params, saved_adam = encoder.flatten(), enc_adam.copy()
    try:
        g_mean, elbo = decoder_batch_gradient(
            encoder, enc_adam, state.decoder, dataset.images[batch], dataset.labels[batch],
            eps, config.lr, config.n_classes, update_encoder=not config.freeze_encoders)
        norm_pre = float(np.linalg.norm(g_mean))
        C, sigma = state.privacy.clip_bound, state.privacy.noise_multiplier
        g_clipped = clip_to_norm(g_mean, C)
        noisy = g_clipped + sigma * C * rng.normal(g_clipped.shape)
        if not np.all(np.isfinite(noisy)):
            raise NumericError("non-finite noisy decoder gradient")
    except NumericError:
        encoder.unflatten(saved_params)
        state.pool.adam[k] = saved_adam
        raise

    adam_update(state.decoder.params, noisy, state.decoder_adam, config.lr)
    state.decoder.mark_updated()
    state.accountant.step()
    state.step += 1

    record = {"step": state.step, "k": k, "elbo": elbo, "grad_norm_pre": norm_pre,
              "grad_norm_post": float(np.linalg.norm(g_clipped)), "epsilon": None,
              "batch": batch}
    if state.step % config.eps_every == 0:
        record["epsilon"] = state.accountant.spend().epsilon
    state.metrics.append(record)
    return state


def run_stage2(state: Stage2State, dataset: LabeledDataset, partition: Partition,
               config: TrainConfig, steps: int) -> Stage2State:
    for _ in range(steps):
        stage2_step(state, dataset, partition, config)
    return state


def stage2_train(pool: EncoderPool, dataset: LabeledDataset, partition: Partition,
                 config: TrainConfig, privacy: PrivacyParams, T: int,
                 seed: int) -> tuple[DenseNet, PrivacySpend]:
    """Train a fresh decoder for ``T`` noisy steps; returns it with its privacy spend."""
    if T < 0:
        raise InvalidParameterError(f"T must be >= 0, got {T}")
    state = init_stage2(pool, config, partition, privacy, seed)
    run_stage2(state, dataset, partition, config, T)
    return state.decoder, state.accountant.spend()


METRIC_COLUMNS = ("step", "k", "elbo", "grad_norm_pre", "grad_norm_post", "epsilon")


def metrics_csv_lines(records) -> list:
    lines = [",".join(METRIC_COLUMNS)]
    for r in records:
        lines.append(",".join("" if r[c] is None else repr(r[c]) for c in METRIC_COLUMNS))
    return lines


# checkpoint packing

def _net_meta(net: DenseNet) -> dict:
    return {"sizes": list(net.sizes), "activations": list(net.activations)}


def _adam_meta(state: AdamState) -> dict:
    return {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}


def pack_pool(pool: EncoderPool, ckpt: Checkpoint | None = None) -> Checkpoint:
    ckpt = ckpt or Checkpoint()
    for k, (enc, adam) in enumerate(zip(pool.encoders, pool.adam)):
        ckpt.tensors[f"encoder/{k}"] = enc.params
        ckpt.tensors[f"encoder_adam_m/{k}"] = adam.m
        ckpt.tensors[f"encoder_adam_v/{k}"] = adam.v
    ckpt.metadata["pool"] = {
        "K": pool.K,
        "net": _net_meta(pool.encoders[0]) if pool.K else None,
        "adam": [_adam_meta(a) for a in pool.adam],
        "stream_ids": list(pool.stream_ids),
        "init_elbo": list(pool.init_elbo),
        "final_elbo": list(pool.final_elbo),
        "notes": list(pool.notes),
    }
    return ckpt


def unpack_pool(ckpt: Checkpoint) -> EncoderPool:
    meta = ckpt.metadata["pool"]
    net = meta["net"]
    encoders, adams = [], []
    for k in range(meta["K"]):
        encoders.append(DenseNet(net["sizes"], net["activations"], ckpt.tensors[f"encoder/{k}"]))
        adams.append(AdamState(ckpt.tensors[f"encoder_adam_m/{k}"].copy(),
                               ckpt.tensors[f"encoder_adam_v/{k}"].copy(), **meta["adam"][k]))
    return EncoderPool(encoders, adams, list(meta["stream_ids"]), list(meta["init_elbo"]),
                       list(meta["final_elbo"]), list(meta["notes"]))


def pack_decoder(decoder: DenseNet, ckpt: Checkpoint | None = None) -> Checkpoint:
    ckpt = ckpt or Checkpoint()
    ckpt.tensors["decoder"] = decoder.params
    ckpt.metadata["decoder"] = _net_meta(decoder)
    return ckpt


def unpack_decoder(ckpt: Checkpoint) -> DenseNet:
    meta = ckpt.metadata["decoder"]
    return DenseNet(meta["sizes"], meta["activations"], ckpt.tensors["decoder"])


def pack_partition(partition: Partition, ckpt: Checkpoint | None = None) -> Checkpoint:
    ckpt = ckpt or Checkpoint()
    for k, s in enumerate(partition.subsets):
        ckpt.tensors[f"partition/{k}"] = s.astype(np.float64)
    ckpt.metadata["partition"] = {"K": partition.K, "seed": partition.seed}
    return ckpt


def unpack_partition(ckpt: Checkpoint) -> Partition:
    meta = ckpt.metadata["partition"]
    subsets = [ckpt.tensors[f"partition/{k}"].astype(np.int64) for k in range(meta["K"])]
    return Partition(meta["K"], subsets, meta["seed"])


def pack_stage2(state: Stage2State, ckpt: Checkpoint | None = None) -> Checkpoint:
    ckpt = pack_pool(state.pool, pack_decoder(state.decoder, ckpt))
    ckpt.tensors["decoder_adam_m"] = state.decoder_adam.m
    ckpt.tensors["decoder_adam_v"] = state.decoder_adam.v
    acct = state.accountant
    spend = acct.spend()
    ckpt.metadata["stage2"] = {
        "step": state.step,
        "decoder_adam": _adam_meta(state.decoder_adam),
        "privacy": {"clip_bound": state.privacy.clip_bound,
                    "noise_multiplier": state.privacy.noise_multiplier,
                    "delta": state.privacy.delta},
        "accountant": {"K": acct.K, "sigma": acct.sigma, "delta": acct.delta, "q": acct.q,
                       "steps": acct.steps},
        "spend": {"steps": spend.steps, "epsilon": spend.epsilon, "delta": spend.delta,
                  "best_order": spend.best_order},
        "rng": state.rng.get_state(),
        "events": list(state.events),
    }
    return ckpt


def unpack_stage2(ckpt: Checkpoint) -> Stage2State:
    meta = ckpt.metadata["stage2"]
    return Stage2State(
        decoder=unpack_decoder(ckpt),
        decoder_adam=AdamState(ckpt.tensors["decoder_adam_m"].copy(),
                               ckpt.tensors["decoder_adam_v"].copy(), **meta["decoder_adam"]),
        pool=unpack_pool(ckpt),
        privacy=PrivacyParams(**meta["privacy"]),
        accountant=RdpAccountant(**meta["accountant"]),
        rng=RngStream.from_state(meta["rng"]),
        step=meta["step"],
        events=list(meta["events"]),
    )

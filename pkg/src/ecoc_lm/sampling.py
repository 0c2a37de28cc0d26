"""Exposure-bias strategies: choosing what the model consumes at step t.

Teacher forcing feeds the gold previous token.  The other strategies mix in
the model's own step t-1 output with a probability that follows a sigmoidal
curriculum over epochs:

* ``scheduled_sampling``: whole-token choice between argmax prediction and gold.
* ``clvms``: per-latent-variable choice (codeword bits, or tree levels).
* ``soft_mixture``: per-bit choice between gold bits and predicted bit
  probabilities, embedded as a softmax-weighted average over flipped candidates.
* ``binary_concrete`` / ``gumbel_softmax``: relaxed samples of the predicted
  bits / tree path, embedded so that gradients reach the step t-1 logits.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .codebook import Codebook, Codeword, PROB_EPS, CodebookError

STRATEGIES = ("teacher_forcing", "scheduled_sampling", "clvms", "soft_mixture",
              "binary_concrete", "gumbel_softmax")
COMPATIBLE = {
    "teacher_forcing": {"ecoc", "softmax", "hierarchical"},
    "scheduled_sampling": {"ecoc", "softmax", "hierarchical"},
    "clvms": {"ecoc", "hierarchical"},
    "soft_mixture": {"ecoc"},
    "binary_concrete": {"ecoc"},
    "gumbel_softmax": {"hierarchical"},
}
TEMP_MIN, TEMP_MAX = 0.01, 2.5
U_EPS = 1e-12


class StrategyError(ValueError):
    pass


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class MixtureSchedule:
    tau_max: float = 0.25
    delta: float = 1.0
    total_epochs: int = 10
    per_bit_profile: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.tau_max <= 1.0:
            raise ValueError("tau_max must lie in [0, 1]")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.per_bit_profile not in ("uniform", "significance_ramp"):
            raise ValueError(f"unknown per-bit profile {self.per_bit_profile!r}")


def schedule_value(schedule: MixtureSchedule, epoch: float) -> float:
    """tau_max / (1 + exp(-(epoch - N/2) / delta)), epoch clamped to [0, N]."""
    n = schedule.total_epochs
    e = min(max(epoch, 0.0), n)
    return schedule.tau_max * _sigmoid((e - n / 2.0) / schedule.delta)


def per_bit_probs(schedule: MixtureSchedule, epoch: float, n_bits: int) -> np.ndarray:
    p = schedule_value(schedule, epoch)
    if schedule.per_bit_profile == "uniform" or n_bits == 1:
        return np.full(n_bits, p)
    # MSB gets half the mixing probability, LSB the full value
    return p * (0.5 + 0.5 * np.arange(n_bits) / (n_bits - 1))


def anneal_temperature(epoch: float, total: int, start: float = TEMP_MIN, end: float = TEMP_MAX,
                       delta: float | None = None) -> float:
    """Sigmoidal rise from ``start`` to ``end`` centred at total/2."""
    if total <= 0:
        return end
    delta = delta if delta is not None else total / 20.0
    e = min(max(epoch, 0.0), total)
    tau = start + (end - start) * _sigmoid((e - total / 2.0) / delta)
    return min(max(tau, TEMP_MIN), TEMP_MAX)


def mix_codeword_bits(predicted: Codeword, target: Codeword, p_vec, rng: np.random.Generator) -> Codeword:
    """Bit c comes from ``predicted`` with probability p_vec[c], else from ``target``."""
    if predicted.n_bits != target.n_bits:
        raise CodebookError(f"width mismatch: {predicted.n_bits} vs {target.n_bits}")
    p_vec = np.broadcast_to(np.asarray(p_vec, dtype=np.float64), (predicted.n_bits,))
    if np.any(p_vec < 0) or np.any(p_vec > 1):
        raise ValueError("mixing probabilities must lie in [0, 1]")
    take = rng.random(predicted.n_bits) < p_vec
    return Codeword.from_bits(np.where(take, predicted.bits, target.bits))


def _uniform(rng, shape):
    return np.clip(rng.random(shape), U_EPS, 1 - U_EPS)


def gumbel_noise(rng, shape, u=None):
    u = _uniform(rng, shape) if u is None else np.clip(np.asarray(u, float), U_EPS, 1 - U_EPS)
    return -np.log(-np.log(u))


def logistic_noise(rng, shape, u=None):
    u = _uniform(rng, shape) if u is None else np.clip(np.asarray(u, float), U_EPS, 1 - U_EPS)
    return np.log(u) - np.log1p(-u)


def gumbel_softmax_relax(log_alpha, noise, tau):
    """softmax((log_alpha + G) / tau) along the last axis, as a graph node."""
    return ag.softmax((ag.as_tensor(log_alpha) + noise) * (1.0 / tau), axis=-1)


def binary_concrete_relax(logit_alpha, noise, tau):
    return ag.sigmoid((ag.as_tensor(logit_alpha) + noise) * (1.0 / tau))


def gumbel_softmax_sample(logits, tau: float, rng: np.random.Generator | None = None, u=None) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return gumbel_softmax_relax(logits, gumbel_noise(rng, logits.shape, u), tau).value


def binary_concrete_sample(logit_alpha, tau: float, rng: np.random.Generator | None = None, u=None):
    logit_alpha = np.asarray(logit_alpha, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = binary_concrete_relax(logit_alpha, logistic_noise(rng, logit_alpha.shape, u), tau).value
    return float(z) if z.ndim == 0 else z


# candidate codewords

def flip_candidates(q: np.ndarray, k: int) -> np.ndarray:
    """(rows, k, n): thresholded ``q`` with each of its k least confident bits flipped."""
    q = np.atleast_2d(q)
    n = q.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    base = (q > 0.5).astype(np.uint8)
    order = np.argsort(np.abs(q - 0.5), axis=1, kind="stable")[:, :k]
    cand = np.repeat(base[:, None, :], k, axis=1)
    rows = np.arange(q.shape[0])[:, None]
    cand[rows, np.arange(k)[None, :], order] ^= 1
    return cand


def kbest_codewords(log1: np.ndarray, log0: np.ndarray, k: int) -> np.ndarray:
    """(rows, k, n): the k most probable codewords of each factorial distribution.

    Best-first enumeration of flip sets over bits sorted by flip cost.
    """
    log1, log0 = np.atleast_2d(log1), np.atleast_2d(log0)
    rows, n = log1.shape
    k = min(k, 2 ** min(n, 30))
    base = (log1 > log0).astype(np.uint8)
    cost = np.abs(log1 - log0)
    order = np.argsort(cost, axis=1, kind="stable")
    out = np.repeat(base[:, None, :], k, axis=1)
    for r in range(rows):
        c = cost[r, order[r]]
        found = [()]
        heap = [(c[0], (0,))] if n else []
        while len(found) < k and heap:
            total, subset = heapq.heappop(heap)
            found.append(subset)
            last = subset[-1]
            if last + 1 < n:
                heapq.heappush(heap, (total + c[last + 1], subset + (last + 1,)))
                heapq.heappush(heap, (total - c[last] + c[last + 1], subset[:-1] + (last + 1,)))
        for j, subset in enumerate(found):
            if subset:
                out[r, j, order[r, list(subset)]] ^= 1
    return out


def weighted_candidate_embedding(q, cand_bits, codebook: Codebook, table, tau: float = 1.0):
    """Softmax(factorial log-score / tau)-weighted average of decoded candidate embeddings.

    ``q`` is a (rows, n) tensor of bit probabilities; gradients flow into it
    and into the embedding table.
    """
    q = ag.as_tensor(q)
    qc = ag.clip(q, PROB_EPS, 1 - PROB_EPS)
    y = cand_bits.astype(np.float64)
    scores = ag.einsum("rkn,rn->rk", y, ag.log(qc)) + ag.einsum("rkn,rn->rk", 1.0 - y, ag.log(1.0 - qc))
    weights = ag.softmax(scores * (1.0 / tau), axis=-1)
    tokens = codebook.decode_bits(cand_bits)
    rows = ag.gather_rows(table, tokens)
    return ag.einsum("rk,rke->re", weights, rows)


def soft_codeword_embedding(bit_probs, codebook: Codebook, embeddings, k: int, tau: float) -> np.ndarray:
    """Soft argmax over the k single-bit flips of the thresholded prediction."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    q = np.atleast_2d(np.asarray(bit_probs, dtype=np.float64))
    if q.shape[1] != codebook.n_bits:
        raise CodebookError(f"width mismatch: {q.shape[1]} vs {codebook.n_bits}")
    cand = flip_candidates(q, k)
    out = weighted_candidate_embedding(q, cand, codebook, ag.as_tensor(embeddings), tau).value
    return out[0] if np.ndim(bit_probs) == 1 else out


# per-step input construction

@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "teacher_forcing"
    tau_max: float = 0.25
    delta: float | None = None
    k: int = 5
    temp_start: float = TEMP_MIN
    temp_end: float = TEMP_MAX
    per_bit_profile: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise StrategyError(f"unknown strategy {self.strategy!r}")
        if self.k < 1:
            raise StrategyError("k must be >= 1")
        for t in (self.temp_start, self.temp_end):
            if not TEMP_MIN <= t <= TEMP_MAX:
                raise StrategyError(f"temperature {t} outside [{TEMP_MIN}, {TEMP_MAX}]")

    def schedule(self, total_epochs: int) -> MixtureSchedule:
        delta = self.delta if self.delta is not None else max(total_epochs / 10.0, 1e-3)
        return MixtureSchedule(self.tau_max, delta, total_epochs, self.per_bit_profile)


class InputMixer:
    """Builds the step-t input from gold tokens and the step t-1 head output.

    One instance per epoch; ``window(inputs, rng)`` yields the ``input_fn``
    that ``LanguageModel.unroll`` calls.  Exposure counters record how often
    the model consumed its own predictions.
    """

    def __init__(self, config: SamplerConfig, model, epoch: int, total_epochs: int):
        if model.head not in COMPATIBLE[config.strategy]:
            raise StrategyError(f"strategy {config.strategy!r} does not apply to a {model.head} head")
        self.config, self.model = config, model
        self.schedule = config.schedule(total_epochs)
        self.epoch = epoch
        self.p = schedule_value(self.schedule, epoch)
        self.temperature = anneal_temperature(epoch, total_epochs, config.temp_start, config.temp_end)
        self.self_inputs = 0
        self.positions = 0

    @property
    def exposure(self) -> float:
        return self.self_inputs / self.positions if self.positions else 0.0

    def window(self, inputs: np.ndarray, rng: np.random.Generator):
        if self.config.strategy == "teacher_forcing":
            self.positions += inputs.size
            return None
        self.positions += inputs.shape[0]  # step 0 always consumes gold

        def input_fn(t, prev):
            self.positions += inputs.shape[0]
            return next_input(self, prev, inputs[:, t], rng)

        return input_fn


def _mix_mask(mixer: InputMixer, rows: int, width: int, rng) -> np.ndarray:
    """Per-row, per-latent Bernoulli draws: True means take the prediction."""
    return rng.random((rows, width)) < per_bit_probs(mixer.schedule, mixer.epoch, width)


def next_input(mixer: InputMixer, prev, gold: np.ndarray, rng: np.random.Generator):
    """Input tensor for one step, or None meaning "embed the gold tokens"."""
    model, cfg = mixer.model, mixer.config
    strategy = cfg.strategy
    rows = len(gold)
    if strategy == "teacher_forcing":
        return None

    if strategy == "scheduled_sampling":
        coins = rng.random(rows) < mixer.p
        if not coins.any():
            return None
        mixer.self_inputs += int(coins.sum())
        tokens = np.where(coins, model.predict_tokens(prev), gold)
        return model.embed(tokens)

    if strategy == "clvms" and model.head == "ecoc":
        cb = model.codebook
        take = _mix_mask(mixer, rows, cb.n_bits, rng)
        if not take.any():
            return None
        mixer.self_inputs += int(take.any(axis=1).sum())
        pred_bits = (prev.logits.value > 0).astype(np.uint8)
        mixed = np.where(take, pred_bits, cb.class_code_bits[gold])
        return model.embed(cb.decode_bits(mixed))

    if strategy == "clvms":
        take = _mix_mask(mixer, rows, 2, rng)
        if not take.any():
            return None
        mixer.self_inputs += int(take.any(axis=1).sum())
        tree = model.tree
        gold_cls, gold_leaf = tree.locate(gold)
        cls_idx = np.where(take[:, 0], prev.logits.value.argmax(axis=1), gold_cls)
        pred_leaf = model.child_logits(prev.hidden.detach(), cls_idx).value.argmax(axis=1)
        leaf = np.where(take[:, 1], pred_leaf, gold_leaf)
        tokens = np.minimum(tree.token(cls_idx, leaf), tree.vocab_size - 1)
        return model.embed(tokens)

    if strategy in ("soft_mixture", "binary_concrete"):
        cb = model.codebook
        take = _mix_mask(mixer, rows, cb.n_bits, rng)
        if not take.any():
            return None
        active = take.any(axis=1)
        mixer.self_inputs += int(active.sum())
        target = cb.class_code_bits[gold].astype(np.float64)
        if strategy == "soft_mixture":
            soft = ag.sigmoid(prev.logits)
        else:
            noise = logistic_noise(rng, prev.logits.shape)
            soft = binary_concrete_relax(prev.logits, noise, mixer.temperature)
        keep = take.astype(np.float64)
        q = soft * keep + target * (1.0 - keep)
        if strategy == "soft_mixture":
            cand = flip_candidates(q.value, min(cfg.k, cb.n_bits))
            x = weighted_candidate_embedding(q, cand, cb, model.params["embedding"], mixer.temperature)
        else:
            qv = np.clip(q.value, PROB_EPS, 1 - PROB_EPS)
            cand = kbest_codewords(np.log(qv), np.log1p(-qv), cfg.k)
            x = weighted_candidate_embedding(q, cand, cb, model.params["embedding"], 1.0)
        return ag.select_rows(active, x, model.embed(gold))

    if strategy == "gumbel_softmax":
        coins = rng.random(rows) < mixer.p
        if not coins.any():
            return None
        mixer.self_inputs += int(coins.sum())
        tree, tau = model.tree, mixer.temperature
        root_lp = ag.log_softmax(prev.logits)
        leaf_lp = ag.log_softmax(model.all_child_logits(prev.hidden), axis=-1)
        g_root = gumbel_softmax_relax(root_lp, gumbel_noise(rng, root_lp.shape), tau)
        g_leaf = gumbel_softmax_relax(leaf_lp, gumbel_noise(rng, leaf_lp.shape), tau)
        path = ag.reshape(ag.einsum("rc,rck->rck", g_root, g_leaf), (rows, -1))
        path = path[:, : tree.vocab_size]
        k = min(cfg.k, tree.vocab_size)
        top = np.argsort(-path.value, axis=1, kind="stable")[:, :k]
        weights = path[np.arange(rows)[:, None], top]
        weights = weights / ag.reshape(ag.total(weights, axis=1), (rows, 1))
        emb = ag.gather_rows(model.params["embedding"], top)
        x = ag.einsum("rk,rke->re", weights, emb)
        return ag.select_rows(coins, x, model.embed(gold))

    raise StrategyError(f"strategy {strategy!r} does not apply to a {model.head} head")

"""Two-layer LSTM language model with ECOC, softmax and two-level tree decoders."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .codebook import PROB_EPS, Codebook, bit_log_probs
from .corpus import batchify

HEADS = ("ecoc", "softmax", "hierarchical")
# logit whose sigmoid is 1 - PROB_EPS; clipping here equals clamping probabilities
LOGIT_MAX = math.log((1.0 - PROB_EPS) / PROB_EPS)


class NumericError(ArithmeticError):
    pass


def logit_log_probs(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ln p(bit=1), ln p(bit=0) from decoder logits, with probability clamping."""
    z = np.clip(z, -LOGIT_MAX, LOGIT_MAX)
    return -np.logaddexp(0.0, -z), -np.logaddexp(0.0, z)


@dataclass
class TreeLayout:
    """Tokens in index order fill classes of ``branching`` leaves each."""

    vocab_size: int
    branching: int

    @classmethod
    def for_vocab(cls, vocab_size: int) -> "TreeLayout":
        return cls(vocab_size, math.ceil(math.sqrt(vocab_size)))

    @property
    def n_classes(self) -> int:
        return math.ceil(self.vocab_size / self.branching)

    def locate(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        return tokens // self.branching, tokens % self.branching

    def token(self, cls_idx, leaf):
        return np.asarray(cls_idx) * self.branching + np.asarray(leaf)

    @property
    def leaf_mask(self) -> np.ndarray:
        """(n_classes, branching) additive mask: 0 for real leaves, -inf for padding."""
        ids = np.arange(self.n_classes * self.branching).reshape(self.n_classes, self.branching)
        return np.where(ids < self.vocab_size, 0.0, -np.inf)


@dataclass
class HeadOutput:
    hidden: Tensor
    logits: Tensor


class LanguageModel:
    """Embedding -> stacked LSTM -> decoder head.

    ``hidden`` is both the embedding width and the LSTM width.
    """

    def __init__(self, vocab_size: int, hidden: int = 400, layers: int = 2, head: str = "softmax",
                 codebook: Codebook | None = None, dropout: float = 0.2, seed: int = 0,
                 init_scale: float = 0.1):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if head == "ecoc":
            if codebook is None:
                raise ValueError("ecoc head needs a codebook")
            if codebook.vocab_size != vocab_size:
                raise ValueError("codebook vocabulary does not match the model")
        self.vocab_size, self.hidden, self.layers = vocab_size, hidden, layers
        self.head, self.codebook, self.dropout = head, codebook, dropout
        self.tree = TreeLayout.for_vocab(vocab_size) if head == "hierarchical" else None
        rng = np.random.default_rng(seed)

        def uni(*shape):
            return rng.uniform(-init_scale, init_scale, size=shape)

        p: dict[str, Tensor] = {"embedding": ag.parameter(uni(vocab_size, hidden), "embedding")}
        for layer in range(layers):
            bias = np.zeros(4 * hidden)
            bias[hidden:2 * hidden] = 1.0
            p[f"lstm{layer}.w_x"] = ag.parameter(uni(hidden, 4 * hidden))
            p[f"lstm{layer}.w_h"] = ag.parameter(uni(hidden, 4 * hidden))
            p[f"lstm{layer}.b"] = ag.parameter(bias)
        if head == "ecoc":
            p["head.w"] = ag.parameter(uni(hidden, codebook.n_bits))
            p["head.b"] = ag.parameter(np.zeros(codebook.n_bits))
        elif head == "softmax":
            p["head.w"] = ag.parameter(uni(hidden, vocab_size))
            p["head.b"] = ag.parameter(np.zeros(vocab_size))
        else:
            c, b = self.tree.n_classes, self.tree.branching
            p["head.root_w"] = ag.parameter(uni(hidden, c))
            p["head.root_b"] = ag.parameter(np.zeros(c))
            p["head.child_w"] = ag.parameter(uni(c, hidden, b))
            p["head.child_b"] = ag.parameter(np.zeros((c, b)))
        for name, t in p.items():
            t.name = name
        self.params = p

    @property
    def output_width(self) -> int:
        if self.head == "ecoc":
            return self.codebook.n_bits
        if self.head == "softmax":
            return self.vocab_size
        return self.tree.n_classes

    def n_parameters(self, decoder_only=False) -> int:
        return sum(t.value.size for n, t in self.params.items()
                   if not decoder_only or n.startswith("head."))

    # recurrent state

    def init_state(self, batch: int) -> list[tuple[Tensor, Tensor]]:
        z = np.zeros((batch, self.hidden))
        return [(Tensor(z), Tensor(z)) for _ in range(self.layers)]

    @staticmethod
    def detach_state(state):
        return [(h.detach(), c.detach()) for h, c in state]

    def sample_masks(self, batch: int, rng: np.random.Generator | None):
        """Variational dropout masks fixed for one BPTT window (None at eval)."""
        if rng is None or self.dropout <= 0:
            return None
        keep = 1.0 - self.dropout

        def mask():
            return (rng.random((batch, self.hidden)) < keep) / keep

        return {"input": mask(), "hidden": [mask() for _ in range(self.layers)],
                "output": [mask() for _ in range(self.layers)]}

    def embed(self, tokens) -> Tensor:
        return ag.gather_rows(self.params["embedding"], tokens)

    def step(self, x: Tensor, state, masks=None):
        if x.shape[-1] != self.hidden:
            raise ValueError(f"input width {x.shape[-1]} != {self.hidden}")
        hd = self.hidden
        inp = x * masks["input"] if masks else x
        new_state = []
        for layer, (h, c) in enumerate(state):
            hh = h * masks["hidden"][layer] if masks else h
            gates = (inp @ self.params[f"lstm{layer}.w_x"] + hh @ self.params[f"lstm{layer}.w_h"]
                     + self.params[f"lstm{layer}.b"])
            i = ag.sigmoid(gates[:, :hd])
            f = ag.sigmoid(gates[:, hd:2 * hd])
            g = ag.tanh(gates[:, 2 * hd:3 * hd])
            o = ag.sigmoid(gates[:, 3 * hd:])
            c = f * c + i * g
            h = o * ag.tanh(c)
            new_state.append((h, c))
            inp = h * masks["output"][layer] if masks else h
        return inp, new_state

    def decode(self, h: Tensor) -> HeadOutput:
        if self.head == "hierarchical":
            return HeadOutput(h, h @ self.params["head.root_w"] + self.params["head.root_b"])
        return HeadOutput(h, h @ self.params["head.w"] + self.params["head.b"])

    def child_logits(self, h: Tensor, classes) -> Tensor:
        """Leaf logits of the given class per row (demand-evaluated tree node)."""
        classes = np.asarray(classes, dtype=np.int64)
        w = ag.gather_rows(self.params["head.child_w"], classes)
        b = ag.gather_rows(self.params["head.child_b"], classes)
        return ag.einsum("nh,nhk->nk", h, w) + b + self.tree.leaf_mask[classes]

    def all_child_logits(self, h: Tensor) -> Tensor:
        out = ag.einsum("nh,chk->nck", h, self.params["head.child_w"])
        return out + self.params["head.child_b"] + self.tree.leaf_mask

    # distributions and losses over stacked positions

    def token_log_probs(self, out: HeadOutput) -> np.ndarray:
        """(positions, vocab) log-distribution for softmax and tree heads."""
        if self.head == "softmax":
            return ag.log_softmax(out.logits.detach()).value
        if self.head == "hierarchical":
            root = ag.log_softmax(out.logits.detach()).value
            leaves = ag.log_softmax(self.all_child_logits(out.hidden.detach()), axis=-1).value
            full = (root[:, :, None] + leaves).reshape(len(root), -1)
            return full[:, : self.vocab_size]
        raise ValueError("ecoc heads score tokens through the codebook")

    def target_log_prob(self, out: HeadOutput, targets, mode: str = "sum") -> np.ndarray:
        """ln p(target) per position, without building a graph."""
        targets = np.asarray(targets, dtype=np.int64)
        if self.head == "softmax":
            lp = ag.log_softmax(out.logits.detach()).value
            return lp[np.arange(len(targets)), targets]
        if self.head == "hierarchical":
            cls_idx, leaf = self.tree.locate(targets)
            root = ag.log_softmax(out.logits.detach()).value
            child = ag.log_softmax(self.child_logits(out.hidden.detach(), cls_idx)).value
            rows = np.arange(len(targets))
            return root[rows, cls_idx] + child[rows, leaf]
        log1, log0 = logit_log_probs(out.logits.value)
        if mode == "sum":
            return self.codebook.span_scores(log1, log0, targets, reduce="sum")
        if mode == "max":
            out_lp = np.empty(len(targets))
            every = np.arange(self.vocab_size)
            for r in range(len(targets)):
                s = self.codebook.span_scores(log1[r:r + 1], log0[r:r + 1], every, reduce="max")
                top = s.max()
                out_lp[r] = s[targets[r]] - (top + math.log(np.exp(s - top).sum()))
            return out_lp
        raise ValueError(f"unknown mode {mode!r}")

    def loss(self, out: HeadOutput, targets) -> Tensor:
        """Mean per-position training loss over stacked positions."""
        targets = np.asarray(targets, dtype=np.int64)
        if self.head == "softmax":
            return -ag.mean(ag.take_along(ag.log_softmax(out.logits), targets))
        if self.head == "hierarchical":
            cls_idx, leaf = self.tree.locate(targets)
            root = ag.take_along(ag.log_softmax(out.logits), cls_idx)
            child = ag.take_along(ag.log_softmax(self.child_logits(out.hidden, cls_idx)), leaf)
            return -ag.mean(root + child)
        y = self.witness_bits(out.logits.value, targets)
        z = ag.clip(out.logits, -LOGIT_MAX, LOGIT_MAX)
        per_bit = y * ag.softplus(-z) + (1.0 - y) * ag.softplus(z)
        return ag.mean(ag.total(per_bit, axis=1))

    def witness_bits(self, logits: np.ndarray, targets) -> np.ndarray:
        log1, log0 = logit_log_probs(logits)
        _, w = self.codebook.span_scores(log1, log0, targets, reduce="max", witness=True)
        return w.astype(np.float64)

    def predict_tokens(self, out: HeadOutput) -> np.ndarray:
        """Greedy prediction: thresholded bits -> span lookup, or argmax."""
        if self.head == "ecoc":
            return self.codebook.decode_bits((out.logits.value > 0).astype(np.uint8))
        if self.head == "softmax":
            return out.logits.value.argmax(axis=1)
        cls_idx = out.logits.value.argmax(axis=1)
        leaf = self.child_logits(out.hidden.detach(), cls_idx).value.argmax(axis=1)
        return self.tree.token(cls_idx, leaf)

    def unroll(self, inputs: np.ndarray, state, masks=None,
               input_fn: Callable | None = None):
        """Run a (batch, T) window; returns stacked head output and final state.

        ``input_fn(t, prev_out)`` may return an input tensor for step t > 0;
        returning None falls back to the gold token embedding.
        """
        outs = []
        prev = None
        for t in range(inputs.shape[1]):
            x = input_fn(t, prev) if (input_fn is not None and prev is not None) else None
            if x is None:
                x = self.embed(inputs[:, t])
            h, state = self.step(x, state, masks)
            prev = self.decode(h)
            outs.append(prev)
        hidden = ag.concat([o.hidden for o in outs], axis=0)
        logits = ag.concat([o.logits for o in outs], axis=0)
        return HeadOutput(hidden, logits), state, outs


def stacked_targets(targets: np.ndarray) -> np.ndarray:
    """(batch, T) -> time-major flat order matching ``unroll``'s concatenation."""
    return np.asarray(targets).T.reshape(-1)


def forward_step(model: LanguageModel, state, input_embedding, masks=None):
    """One timestep; returns head activations and the updated state."""
    x = ag.as_tensor(np.atleast_2d(input_embedding) if not isinstance(input_embedding, Tensor)
                     else input_embedding)
    h, state = model.step(x, state, masks)
    out = model.decode(h)
    if model.head == "ecoc":
        act = 1.0 / (1.0 + np.exp(-out.logits.value))
    elif model.head == "softmax":
        act = np.exp(ag.log_softmax(out.logits.detach()).value)
    else:
        root = np.exp(ag.log_softmax(out.logits.detach()).value)
        leaves = np.exp(ag.log_softmax(model.all_child_logits(h.detach()), axis=-1).value)
        act = {"root": root, "children": leaves}
    return act, state


# scalar losses on explicit distributions

def ecoc_codeword_loss(bit_probs, target_token: int, codebook: Codebook,
                       return_witness: bool = False):
    """Per-bit BCE against the most probable codeword inside the target's span."""
    log1, log0 = bit_log_probs(bit_probs)
    score, w = codebook.span_scores(log1[None], log0[None], [target_token], reduce="max",
                                    witness=True)
    y = w[0].astype(bool)
    loss = -float(np.where(y, log1, log0).sum())
    return (loss, w[0]) if return_witness else loss


def cross_entropy_loss(probs, target: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < len(probs):
        raise IndexError(f"target {target} out of range")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must sum to 1")
    return -math.log(max(probs[target], PROB_EPS))


def hierarchical_loss(root_probs, leaf_probs, target: int, layout: TreeLayout) -> float:
    """``leaf_probs`` is (n_classes, branching); two factors along the target path."""
    if not 0 <= target < layout.vocab_size:
        raise IndexError(f"target {target} out of range")
    c, j = layout.locate(target)
    return -(math.log(max(root_probs[c], PROB_EPS)) + math.log(max(leaf_probs[c][j], PROB_EPS)))


# optimization

class Optimizer:
    def __init__(self, params: dict[str, Tensor], lr: float, clip: float | None = None):
        self.params, self.lr, self.clip = params, lr, clip
        self.steps = 0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((t.grad ** 2).sum()) for t in self.params.values()
                             if t.grad is not None))

    def step(self, loss: Tensor | None = None) -> float:
        """Backpropagate ``loss`` (if given), clip the global norm, update, clear."""
        if loss is not None:
            loss.backward()
        for name, t in self.params.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        norm = self.grad_norm()
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.steps += 1
        self._update(scale)
        for t in self.params.values():
            t.grad = None
        return norm

    def _update(self, scale: float):
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays: dict[str, np.ndarray], steps: int, lr: float):
        self.steps, self.lr = steps, lr


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, scale):
        for t in self.params.values():
            if t.grad is not None:
                t.value -= self.lr * scale * t.grad


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr=1e-3, clip=None, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr, clip)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(t.value) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.value) for n, t in params.items()}

    def _update(self, scale):
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.steps
        corr2 = 1 - b2 ** self.steps
        for n, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad * scale
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            t.value -= self.lr * (self.m[n] / corr1) / (np.sqrt(self.v[n] / corr2) + self.eps)

    def state_arrays(self):
        out = {f"adam.m.{n}": a for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, arrays, steps, lr):
        super().load_state(arrays, steps, lr)
        for n in self.m:
            self.m[n] = arrays[f"adam.m.{n}"].copy()
            self.v[n] = arrays[f"adam.v.{n}"].copy()


def make_optimizer(kind: str, params, lr: float, clip: float | None = 0.25, **kw) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr, clip)
    if kind == "adam":
        return Adam(params, lr, clip, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")


# gradient checking

def finite_difference_check(params: dict[str, Tensor], loss_fn: Callable[[], Tensor],
                            n_coords: int = 60, seed: int = 0, step: float = 3e-5,
                            floor: float = 1e-6) -> float:
    """Max relative error between backprop and five-point central differences.

    Coordinates are spread over every parameter tensor.  Gradients smaller
    than ``floor`` are compared in absolute terms, since round-off in the
    loss swamps their relative error.  ``loss_fn`` must be
    deterministic; two evaluations that disagree raise ``NumericError``.
    """
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.grad = None
    loss = loss_fn()
    if float(loss_fn().value) != float(loss.value):
        raise NumericError("loss closure is not deterministic")
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
                for n, t in params.items()}
    for t in params.values():
        t.grad = None
    names = list(params)
    per = max(1, math.ceil(n_coords / len(names)))
    worst = 0.0
    for name in names:
        t = params[name]
        flat = t.value.reshape(-1)
        for idx in rng.choice(flat.size, size=min(per, flat.size), replace=False):
            orig = flat[idx]
            f = {}
            for k in (-2, -1, 1, 2):
                flat[idx] = orig + k * step
                f[k] = float(loss_fn().value)
            flat[idx] = orig
            # fourth-order central difference
            numeric = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * step)
            a = float(analytic[name].reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# perplexity

def sequence_perplexity(model: LanguageModel, stream, batch_size: int = 10, bptt: int = 35,
                        mode: str = "sum") -> float:
    stream = np.asarray(stream, dtype=np.int64)
    if len(stream) < 2:
        raise ValueError("empty corpus slice")
    batch_size = max(1, min(batch_size, len(stream) // 2))
    total_nll, count = 0.0, 0
    state = model.init_state(batch_size)
    for batch in batchify(stream, batch_size, bptt):
        out, state, _ = model.unroll(batch.inputs, state)
        state = model.detach_state(state)
        lp = model.target_log_prob(out, stacked_targets(batch.targets), mode)
        total_nll -= float(lp.sum())
        count += lp.size
    return math.exp(total_nll / count)


# checkpoints

CKPT_MAGIC = b"ecoc-ckpt v1\n"


def _format_meta(meta: dict) -> bytes:
    lines = []
    for key in sorted(meta):
        val = meta[key]
        if isinstance(val, float):
            val = repr(val)
        lines.append(f"{key}={val}")
    return "\n".join(lines).encode("utf-8")


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned container: meta text, then named little-endian float64 arrays."""
    buf = bytearray(CKPT_MAGIC)
    blob = _format_meta(meta)
    buf += struct.pack("<I", len(blob)) + blob
    buf += struct.pack("<I", len(arrays))
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        buf += a.tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not an ecoc-ckpt v1 file")
    pos = len(CKPT_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    text = data[pos:pos + n].decode("utf-8")
    pos += n
    meta = dict(line.split("=", 1) for line in text.split("\n") if line)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return arrays, meta

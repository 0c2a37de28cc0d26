"""Run-level operations behind the command line: codebooks, training, evaluation, sampling."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .codebook import (Codebook, CodebookError, build_codebook, embedding_codebook, load_codebook,
                       save_codebook, spare_codes, unigram_codebook)
from .config import ConfigError, RunConfig, load_config
from .corpus import EOS, Vocabulary, batchify, bundled, build_vocab, read_corpus, tokenize
from .embeddings import EmbeddingError, cosine_rank, load_embeddings, ppmi_svd_embeddings
from .network import (LanguageModel, NumericError, load_checkpoint, logit_log_probs,
                      make_optimizer, save_checkpoint, stacked_targets)
from .sampling import InputMixer, SamplerConfig

DROPOUT_STREAM, MIX_STREAM, SAMPLE_STREAM = 0, 1, 2


class CompatibilityError(ValueError):
    pass


def rng_for(seed: int, epoch: int, window: int, purpose: int) -> np.random.Generator:
    """Independent generator per (seed, epoch, window, purpose)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, window, purpose]))


# data and codebook preparation

@dataclass
class Prepared:
    config: RunConfig
    vocab: Vocabulary
    streams: dict[str, np.ndarray]
    codebook: Codebook | None
    ranking: object | None


def resolve(config: RunConfig) -> RunConfig:
    """Fill defaults that depend on the environment (bundled corpora, delta)."""
    config.validate()
    paths = {split: getattr(config, split) or str(bundled(f"synth.{split}.txt"))
             for split in ("train", "valid", "test")}
    paths = {k: str(Path(v).resolve()) for k, v in paths.items()}
    delta = config.delta or config.epochs / 10.0
    return config.replace(delta=delta, **paths)


def similarity_ranking(config: RunConfig, vocab: Vocabulary, train_stream, required: bool):
    """Cosine ranking around the query token, or None when no vectors are available."""
    if config.query_token:
        if config.query_token not in vocab:
            raise ConfigError(f"query token {config.query_token!r} not in vocabulary")
        query = vocab.index(config.query_token)
    else:
        query = vocab.most_frequent()
    if config.embeddings:
        emb = load_embeddings(config.embeddings, vocab.tokens, seed=config.seed)
    elif config.embedding_fallback == "ppmi":
        dim = min(config.ppmi_dim, len(vocab))
        emb = ppmi_svd_embeddings(train_stream, vocab.tokens, config.ppmi_window, dim, config.seed)
    elif required:
        raise ConfigError("ordering=embedding needs an embeddings file (or embedding_fallback=ppmi)")
    else:
        return None
    try:
        return cosine_rank(emb, query)
    except EmbeddingError as exc:
        raise ConfigError(str(exc)) from None


def make_codebook(config: RunConfig, vocab: Vocabulary, train_stream):
    v = len(vocab)
    n_bits = config.n_bits or 4 * math.ceil(math.log2(v))
    ranking = similarity_ranking(config, vocab, train_stream, config.ordering == "embedding")
    try:
        if config.ordering == "embedding":
            cb = embedding_codebook(ranking, n_bits, config.mapping_mode,
                                    query_label=vocab.tokens[ranking.query_token])
        elif config.ordering == "unigram":
            cb = unigram_codebook(vocab.counts, n_bits, config.mapping_mode)
        else:
            cb = build_codebook(v, n_bits, config.ordering, None, config.mapping_mode, config.seed)
    except CodebookError as exc:
        raise ConfigError(str(exc)) from None
    return cb, ranking


def prepare(config: RunConfig, need_codebook: bool | None = None) -> Prepared:
    config = resolve(config)
    vocab = build_vocab(read_corpus(config.train), config.min_count, config.max_vocab or None)
    streams = {split: vocab.encode(tokenize(read_corpus(getattr(config, split))))
               for split in ("train", "valid", "test")}
    if need_codebook is None:
        need_codebook = config.head == "ecoc"
    codebook = ranking = None
    if need_codebook:
        codebook, ranking = make_codebook(config, vocab, streams["train"])
        config = config.replace(n_bits=codebook.n_bits)
    if config.ordering == "embedding" and ranking is not None and not config.query_token:
        config = config.replace(query_token=vocab.tokens[ranking.query_token])
    return Prepared(config, vocab, streams, codebook, ranking)


def separation_report(codebook: Codebook, ranking=None, seed: int = 0,
                      pairs: int = 20000) -> dict:
    """Span-width histogram, sampled min class-code distance, width/similarity correlation."""
    widths = codebook.widths()
    buckets = np.floor(np.log2(widths)).astype(int)
    hist = {int(b): int(c) for b, c in zip(*np.unique(buckets, return_counts=True))}
    codes = codebook.class_code_bits
    v = codebook.vocab_size
    if v * (v - 1) // 2 <= pairs:
        a, b = np.triu_indices(v, 1)
    else:
        rng = np.random.default_rng(seed)
        a, b = rng.integers(0, v, pairs), rng.integers(0, v, pairs)
        keep = a != b
        a, b = a[keep], b[keep]
    min_dist = int((codes[a] != codes[b]).sum(axis=1).min())
    report = {
        "vocab_size": v,
        "n_bits": codebook.n_bits,
        "mapping_mode": codebook.mapping_mode,
        "ordering": codebook.ordering,
        "spare_codes": spare_codes(codebook),
        "width_min": int(min(codebook.span_width(t) for t in range(v))),
        "width_max": int(max(codebook.span_width(t) for t in range(v))),
        "width_log2_histogram": ",".join(f"{k}:{c}" for k, c in sorted(hist.items())),
        "min_pairwise_hamming": min_dist,
        "hamming_pairs": len(a),
    }
    if ranking is not None:
        rank = np.empty(v)
        rank[ranking.order] = np.arange(v)
        rho = stats.spearmanr(widths, rank).statistic
        report["spearman_width_vs_similarity_rank"] = float(rho)
    return report


def format_record(record: dict) -> str:
    parts = []
    for key, val in record.items():
        if isinstance(val, float):
            val = repr(val)
        parts.append(f"{key}={val}")
    return " ".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for item in line.split():
        key, val = item.split("=", 1)
        try:
            out[key] = int(val)
        except ValueError:
            try:
                out[key] = float(val)
            except ValueError:
                out[key] = val
    return out


def read_metrics(path) -> list[dict]:
    return [parse_record(line) for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip()]


def run_build_codebook(config: RunConfig, out_dir=None) -> dict:
    prep = prepare(config, need_codebook=True)
    out = Path(out_dir) if out_dir else prep.config.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    save_codebook(prep.codebook, out / "codebook.txt", prep.vocab.tokens)
    prep.vocab.save(out / "vocab.txt")
    report = separation_report(prep.codebook, prep.ranking, prep.config.seed)
    (out / "codebook_report.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in report.items()), encoding="utf-8")
    return report


# evaluation

def evaluate(model: LanguageModel, stream, batch_size: int, bptt: int,
             modes=("sum",)) -> dict:
    """Teacher-forced pass without dropout.

    Returns mean training loss, perplexity per mode and, for ecoc heads, the
    hamming accuracy and mean Hamming distance of thresholded predictions to
    the target span.
    """
    stream = np.asarray(stream, dtype=np.int64)
    batch_size = max(1, min(batch_size, len(stream) // 2))
    nll = {m: 0.0 for m in modes}
    loss_sum, count, correct, dist = 0.0, 0, 0, 0.0
    state = model.init_state(batch_size)
    for batch in batchify(stream, batch_size, bptt):
        out, state, _ = model.unroll(batch.inputs, state)
        state = model.detach_state(state)
        targets = stacked_targets(batch.targets)
        loss_sum += float(model.loss(out, targets).value) * len(targets)
        for m in modes:
            nll[m] -= float(model.target_log_prob(out, targets, m).sum())
        count += len(targets)
        if model.head == "ecoc":
            bits = (out.logits.value > 0).astype(np.float64)
            correct += int((model.codebook.decode_bits(bits.astype(np.uint8)) == targets).sum())
            near = model.codebook.span_scores(bits - 1.0, -bits, targets, reduce="max")
            dist -= float(near.sum())
    result = {"loss": loss_sum / count, "tokens": count}
    for m in modes:
        result[f"perplexity_{m}"] = math.exp(nll[m] / count)
    if model.head == "ecoc":
        result["hamming_acc"] = correct / count
        result["mean_span_distance"] = dist / count
    return result


# checkpoints

def build_model(config: RunConfig, vocab_size: int, codebook) -> LanguageModel:
    return LanguageModel(vocab_size, config.hidden, config.layers, config.head, codebook,
                         config.dropout, config.seed, config.init_scale)


def checkpoint_meta(config: RunConfig, vocab: Vocabulary, epoch: int, optimizer, best: float) -> dict:
    meta = {
        "epoch": epoch, "head": config.head, "hidden": config.hidden, "layers": config.layers,
        "dropout": config.dropout, "vocab_size": len(vocab), "vocab_hash": vocab.hash,
        "optimizer": config.optimizer, "lr": float(optimizer.lr), "steps": optimizer.steps,
        "best_valid_perplexity": float(best), "seed": config.seed,
    }
    if config.head == "ecoc":
        meta["n_bits"] = config.n_bits
        meta["mapping_mode"] = config.mapping_mode
    return meta


def load_model(checkpoint, vocab_path=None, codebook_path=None):
    """Rebuild a model from a checkpoint plus the vocabulary/codebook saved beside it."""
    checkpoint = Path(checkpoint)
    arrays, meta = load_checkpoint(checkpoint)
    run = checkpoint.parent.parent if checkpoint.parent.name == "checkpoints" else checkpoint.parent
    vocab = Vocabulary.load(vocab_path or run / "vocab.txt")
    if vocab.hash != meta["vocab_hash"]:
        raise CompatibilityError(
            f"vocabulary hash {vocab.hash} does not match checkpoint {meta['vocab_hash']}")
    codebook = None
    if meta["head"] == "ecoc":
        try:
            codebook = load_codebook(codebook_path or run / "codebook.txt", vocab.tokens)
        except CodebookError as exc:
            raise CompatibilityError(str(exc)) from None
        if codebook.n_bits != int(meta["n_bits"]) or codebook.mapping_mode != meta["mapping_mode"]:
            raise CompatibilityError("codebook n_bits/mode do not match the checkpoint")
    model = LanguageModel(len(vocab), int(meta["hidden"]), int(meta["layers"]), meta["head"],
                          codebook, float(meta["dropout"]))
    for name, t in model.params.items():
        if name not in arrays or arrays[name].shape != t.value.shape:
            raise CompatibilityError(f"checkpoint parameter {name!r} missing or misshapen")
        t.value[...] = arrays[name]
    return model, vocab, meta


# training

@dataclass
class TrainResult:
    run_dir: Path
    records: list[dict]
    best_valid_perplexity: float
    epochs_run: int


def _model_arrays(model, optimizer) -> dict[str, np.ndarray]:
    arrays = {n: t.value for n, t in model.params.items()}
    arrays.update(optimizer.state_arrays())
    return arrays


def run_train(config: RunConfig, log=print) -> TrainResult:
    prep = prepare(config)
    cfg, vocab = prep.config, prep.vocab
    out = cfg.run_dir()
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    vocab.save(out / "vocab.txt")
    if prep.codebook is not None:
        save_codebook(prep.codebook, out / "codebook.txt", vocab.tokens)

    model = build_model(cfg, len(vocab), prep.codebook)
    opt = make_optimizer(cfg.optimizer, model.params, cfg.lr, cfg.clip or None)
    sampler = SamplerConfig(cfg.strategy, cfg.tau_max, cfg.delta, cfg.k, cfg.temp_start,
                            cfg.temp_end, cfg.per_bit_profile, cfg.seed)
    train_batches = batchify(prep.streams["train"], cfg.batch_size, cfg.bptt)
    metrics_path = out / "metrics.txt"
    metrics_path.write_text("", encoding="utf-8")
    records: list[dict] = []
    best, since_best, epochs_run = math.inf, 0, 0

    def emit(record):
        records.append(record)
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(format_record(record) + "\n")
        log(format_record(record))

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        mixer = InputMixer(sampler, model, epoch, cfg.epochs)
        state = model.init_state(cfg.batch_size)
        loss_sum, nll, count, correct = 0.0, 0.0, 0, 0
        for w, batch in enumerate(train_batches):
            masks = model.sample_masks(cfg.batch_size, rng_for(cfg.seed, epoch, w, DROPOUT_STREAM))
            input_fn = mixer.window(batch.inputs, rng_for(cfg.seed, epoch, w, MIX_STREAM))
            head_out, state, _ = model.unroll(batch.inputs, state, masks, input_fn)
            targets = stacked_targets(batch.targets)
            loss = model.loss(head_out, targets)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, window {w}")
            opt.step(loss)
            state = model.detach_state(state)
            loss_sum += value * len(targets)
            nll -= float(model.target_log_prob(head_out, targets, "sum").sum())
            count += len(targets)
            if model.head == "ecoc":
                correct += int((model.predict_tokens(head_out) == targets).sum())
        train_rec = {"epoch": epoch + 1, "split": "train", "loss": loss_sum / count,
                     "perplexity": math.exp(nll / count), "schedule": mixer.p,
                     "temperature": mixer.temperature, "exposure": mixer.exposure, "lr": opt.lr}
        if model.head == "ecoc":
            train_rec["hamming_acc"] = correct / count
        train_rec["seconds"] = round(time.perf_counter() - started, 3)
        emit(train_rec)

        started = time.perf_counter()
        ev = evaluate(model, prep.streams["valid"], cfg.eval_batch_size, cfg.bptt)
        ppl = ev["perplexity_sum"]
        if not math.isfinite(ppl):
            raise NumericError(f"non-finite validation perplexity at epoch {epoch + 1}")
        valid_rec = {"epoch": epoch + 1, "split": "valid", "loss": ev["loss"], "perplexity": ppl,
                     "schedule": mixer.p, "temperature": mixer.temperature, "exposure": 0.0,
                     "lr": opt.lr}
        if model.head == "ecoc":
            valid_rec["hamming_acc"] = ev["hamming_acc"]
        valid_rec["seconds"] = round(time.perf_counter() - started, 3)
        emit(valid_rec)

        improved = ppl < best
        if improved:
            best, since_best = ppl, 0
        else:
            since_best += 1
            opt.lr /= cfg.lr_decay
        epochs_run = epoch + 1
        arrays = _model_arrays(model, opt)
        meta = checkpoint_meta(cfg, vocab, epoch + 1, opt, best)
        save_checkpoint(out / "checkpoints" / f"epoch-{epoch + 1:03d}.ckpt", arrays, meta)
        if improved:
            save_checkpoint(out / "best.ckpt", arrays, meta)
        if cfg.patience and since_best >= cfg.patience:
            log(f"early stop: no validation improvement for {since_best} epochs")
            break
    return TrainResult(out, records, best, epochs_run)


def run_eval(checkpoint, split: str = "valid", corpus=None, modes=None, vocab_path=None,
             codebook_path=None, batch_size: int | None = None, bptt: int | None = None) -> dict:
    """Evaluate a checkpoint; corpus and batching default to the run's own config."""
    model, vocab, meta = load_model(checkpoint, vocab_path, codebook_path)
    run = Path(checkpoint).resolve().parent
    if run.name == "checkpoints":
        run = run.parent
    cfg = load_config(run / "config.txt") if (run / "config.txt").exists() else RunConfig()
    if corpus is None:
        corpus = getattr(cfg, split) or str(bundled(f"synth.{split}.txt"))
    stream = vocab.encode(tokenize(read_corpus(corpus)))
    if modes is None:
        modes = ("sum", "max") if model.head == "ecoc" else ("sum",)
    result = evaluate(model, stream, batch_size or cfg.eval_batch_size, bptt or cfg.bptt, modes)
    result["split"] = split
    return result


def run_sample(checkpoint, prefix: list[str], length: int, decode: str = "greedy",
               temperature: float = 1.0, seed: int = 0, vocab_path=None,
               codebook_path=None) -> list[str]:
    if length < 1:
        raise ValueError("length must be >= 1")
    if decode not in ("greedy", "temperature"):
        raise ValueError(f"unknown decode {decode!r}")
    if decode == "temperature" and temperature <= 0:
        raise ValueError("temperature must be positive")
    model, vocab, _ = load_model(checkpoint, vocab_path, codebook_path)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0, 0, SAMPLE_STREAM]))
    tokens = [vocab.index(t) for t in prefix] or [vocab.index(EOS)]
    state = model.init_state(1)
    out = None
    for tok in tokens:
        h, state = model.step(model.embed(np.array([tok])), state)
        out = model.decode(h)
    generated = []
    for _ in range(length):
        nxt = _choose(model, out, decode, temperature, rng)
        generated.append(nxt)
        h, state = model.step(model.embed(np.array([nxt])), state)
        out = model.decode(h)
    return vocab.decode(generated)


def _choose(model: LanguageModel, out, decode: str, temperature: float, rng) -> int:
    if decode == "greedy":
        return int(model.predict_tokens(out)[0])
    z = out.logits.value[0] / temperature
    if model.head == "ecoc":
        log1, _ = logit_log_probs(z)
        bits = (rng.random(len(z)) < np.exp(log1)).astype(np.uint8)
        return int(model.codebook.decode_bits(bits[None])[0])
    p = np.exp(z - z.max())
    pick = int(rng.choice(len(p), p=p / p.sum()))
    if model.head == "softmax":
        return pick
    leaf_z = model.child_logits(out.hidden.detach(), [pick]).value[0] / temperature
    q = np.exp(leaf_z - leaf_z.max())
    leaf = int(rng.choice(len(q), p=q / q.sum()))
    return int(model.tree.token(pick, leaf))


def plot_metrics(metrics_path, svg_path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_metrics(metrics_path)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for split in ("train", "valid"):
        rows = [r for r in records if r.get("split") == split]
        if not rows:
            continue
        epochs = [r["epoch"] for r in rows]
        axes[0].plot(epochs, [r["loss"] for r in rows], marker="o", label=split)
        axes[1].plot(epochs, [r["perplexity"] for r in rows], marker="o", label=split)
    axes[0].set_ylabel("loss")
    axes[1].set_ylabel("perplexity")
    axes[1].set_yscale("log")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend()
    fig.tight_layout()
    svg_path = Path(svg_path)
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return svg_path


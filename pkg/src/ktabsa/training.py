"""Losses, optimization, the two-phase schedule, and gradient checking.

Training runs in two phases: the document tasks are pretrained alone for a
few epochs, then sentence-level batches and document batches alternate at a
configurable ratio. Every epoch ends with a dev evaluation; the checkpoint
with the best pair-F1 is kept. All randomness flows from the model seed, so
a rerun with the same config reproduces the loss trace bit for bit.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import (Batch, Document, Sentence, make_batches)
from .metrics import evaluate
from .model import ASPECT_TASKS, AbsaModel, IterationState, ModelConfig
from .tensor import (Tape, Tensor, adam_step, clip_grads, cross_entropy,
                     cross_entropy_rows, record, reshape, scale)


class DivergenceError(ArithmeticError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class LossWeights:
    ate: float = 1.0
    ote: float = 1.0
    asc: float = 1.0
    ddc: float = 1.0
    dsc: float = 1.0

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "LossWeights":
        return cls(cfg.lambda_ate, cfg.lambda_ote, cfg.lambda_asc,
                   cfg.lambda_ddc, cfg.lambda_dsc)


def _aspect_loss_from_arrays(states: Sequence[IterationState],
                             ate_gold: np.ndarray, ote_gold: np.ndarray,
                             asc_gold: np.ndarray, asc_mask: np.ndarray,
                             weights: LossWeights) -> Tensor:
    final = states[-1]
    n = ate_gold.shape[0]
    uniform = np.full(n, 1.0 / n)
    loss = scale(cross_entropy_rows(final.logits["ate"], ate_gold, uniform),
                 weights.ate)
    loss = loss + scale(cross_entropy_rows(final.logits["ote"], ote_gold,
                                           uniform), weights.ote)
    labeled = float(asc_mask.sum())
    if labeled > 0:
        w = asc_mask.astype(np.float64) / labeled
        loss = loss + scale(cross_entropy_rows(final.logits["asc"], asc_gold,
                                               w), weights.asc)
    return loss


def aspect_loss(states: Sequence[IterationState], sentence: Sentence,
                weights: LossWeights) -> Tensor:
    """Token-averaged cross-entropy per task on the final iteration.

    The sentiment term averages over labeled tokens only and contributes 0
    (not NaN) when the sentence has no aspect tokens.
    """
    asc_gold = np.array([0 if lab is None else lab
                         for lab in sentence.asc_gold], dtype=np.int64)
    asc_mask = np.array([lab is not None for lab in sentence.asc_gold])
    return _aspect_loss_from_arrays(states, np.asarray(sentence.ate_gold),
                                    np.asarray(sentence.ote_gold),
                                    asc_gold, asc_mask, weights)


def batch_aspect_loss(model: AbsaModel, batch: Batch, weights: LossWeights,
                      train: bool, rng: np.random.Generator | None) -> Tensor:
    """Mean per-sentence loss over a padded batch; padded slots never enter
    (each sentence is unpadded to its true length before the forward pass)."""
    total: Tensor | None = None
    for r, sent in enumerate(batch.sentences):
        states, _ = model.forward(sent, train=train, rng=rng)
        n = sent.n
        loss = _aspect_loss_from_arrays(
            states, batch.ate_gold[r, :n], batch.ote_gold[r, :n],
            batch.asc_gold[r, :n], batch.asc_mask[r, :n], weights)
        total = loss if total is None else total + loss
    return scale(total, 1.0 / batch.size)


def document_loss(doc_logits: dict[str, Tensor], document: Document,
                  weights: LossWeights) -> Tensor:
    """Cross-entropy per present document label; absent labels contribute 0."""
    if document.domain_gold is None and document.sentiment_gold is None:
        raise ValueError("document carries no label")
    loss: Tensor | None = None
    if document.domain_gold is not None:
        c = doc_logits["ddc"].shape[1]
        term = scale(cross_entropy(reshape(doc_logits["ddc"], (c,)),
                                   document.domain_gold), weights.ddc)
        loss = term
    if document.sentiment_gold is not None:
        c = doc_logits["dsc"].shape[1]
        term = scale(cross_entropy(reshape(doc_logits["dsc"], (c,)),
                                   document.sentiment_gold), weights.dsc)
        loss = term if loss is None else loss + term
    return loss


def batch_document_loss(model: AbsaModel, docs: Sequence[Document],
                        weights: LossWeights, train: bool,
                        rng: np.random.Generator | None) -> Tensor:
    total: Tensor | None = None
    for doc in docs:
        logits = model.forward_document(doc, train=train, rng=rng)
        loss = document_loss(logits, doc, weights)
        total = loss if total is None else total + loss
    return scale(total, 1.0 / len(docs))


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float32)
                  for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float32)
                  for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            adam_step(p, self.m[k], self.v[k], self.t, self.lr,
                      self.beta1, self.beta2, self.eps)


@dataclass
class Schedule:
    epochs: int = 30
    pretrain_epochs: int = 2
    aspect_batches_per_doc: int = 1
    batch_size: int = 32
    lr: float = 1e-4
    clip_norm: float = 5.0
    patience: int = 10
    target_token_acc: float = 0.0  # 0 disables accuracy-based early stop

    def validate(self) -> None:
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        if self.aspect_batches_per_doc < 1:
            raise ValueError("aspect_batches_per_doc must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    best_path: str | None
    best_f1_i: float
    epochs_run: int
    step_losses: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    reached_target_epoch: int | None = None
    final_token_acc: dict[str, float] = field(default_factory=dict)


def token_accuracy(model: AbsaModel,
                   sentences: Sequence[Sentence]) -> dict[str, float]:
    """Argmax tag accuracy per task; sentiment counts labeled tokens only."""
    hit = {t: 0 for t in ASPECT_TASKS}
    total = {t: 0 for t in ASPECT_TASKS}
    for sent in sentences:
        states, _ = model.forward(sent, train=False)
        final = states[-1]
        for task, gold in (("ate", sent.ate_gold), ("ote", sent.ote_gold)):
            pred = final.probs[task].data.argmax(axis=1)
            hit[task] += int((pred == np.asarray(gold)).sum())
            total[task] += sent.n
        pred = final.probs["asc"].data.argmax(axis=1)
        for i, lab in enumerate(sent.asc_gold):
            if lab is not None:
                total["asc"] += 1
                hit["asc"] += int(pred[i] == lab)
    return {t: (hit[t] / total[t] if total[t] else 1.0) for t in ASPECT_TASKS}


def _train_step(model: AbsaModel, opt: Adam, loss_fn: Callable[[], Tensor],
                clip_norm: float, what: str) -> float:
    tape = Tape()
    with record(tape):
        loss = loss_fn()
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss on {what}")
    opt.zero_grad()
    tape.backward(loss)
    for emb, row in model.frozen_embedding_rows():
        if emb.grad is not None:
            emb.grad[row] = 0.0
    if clip_norm > 0:
        clip_grads(opt.params.values(), clip_norm)
    opt.step()
    return value


def fit(model: AbsaModel, train_sentences: Sequence[Sentence],
        dev_sentences: Sequence[Sentence], documents: Sequence[Document],
        schedule: Schedule, out_dir: str | None = None,
        log: Callable[[str], None] | None = None) -> TrainResult:
    """Two-phase training loop; deterministic under the model seed."""
    schedule.validate()
    weights = LossWeights.from_config(model.config)
    opt = Adam(model.named_parameters(), schedule.lr)
    rng = np.random.default_rng(np.random.SeedSequence(
        [model.config.seed, 9261]))
    gpad = model.general_table.pad_index
    dpad = model.domain_table.pad_index

    result = TrainResult(best_path=None, best_f1_i=-1.0, epochs_run=0)
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        open(metrics_path, "w").close()

    def emit(msg: str) -> None:
        if log is not None:
            log(msg)

    def log_epoch(rec: dict) -> None:
        result.history.append(rec)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec) + "\n")

    def doc_chunks(seed: int) -> list[list[Document]]:
        order = np.random.default_rng(seed).permutation(len(documents))
        shuffled = [documents[i] for i in order]
        bs = schedule.batch_size
        return [shuffled[i:i + bs] for i in range(0, len(shuffled), bs)]

    # phase 1: document pretraining
    for epoch in range(schedule.pretrain_epochs):
        if not documents:
            break
        t0 = time.time()
        losses = []
        for bi, chunk in enumerate(doc_chunks(int(rng.integers(2 ** 31)))):
            losses.append(_train_step(
                model, opt,
                lambda: batch_document_loss(model, chunk, weights, True, rng),
                schedule.clip_norm, f"pretrain epoch {epoch} batch {bi}"))
        rec = {"epoch": epoch, "phase": "pretrain",
               "J_d": float(np.mean(losses)) if losses else None,
               "wall_time_s": round(time.time() - t0, 3)}
        result.step_losses.extend(losses)
        log_epoch(rec)
        emit(f"pretrain {epoch}: J_d={rec['J_d']:.4f}")

    # phase 2: alternating aspect/document updates
    best_epoch = -1
    stale = 0
    for epoch in range(schedule.epochs):
        t0 = time.time()
        batches = make_batches(train_sentences, schedule.batch_size,
                               int(rng.integers(2 ** 31)), gpad, dpad)
        chunks = doc_chunks(int(rng.integers(2 ** 31))) if documents else []
        ci = 0
        ja_losses, jd_losses = [], []
        for bi, batch in enumerate(batches):
            ja_losses.append(_train_step(
                model, opt,
                lambda: batch_aspect_loss(model, batch, weights, True, rng),
                schedule.clip_norm, f"epoch {epoch} aspect batch {bi}"))
            if chunks and (bi + 1) % schedule.aspect_batches_per_doc == 0:
                chunk = chunks[ci % len(chunks)]
                ci += 1
                jd_losses.append(_train_step(
                    model, opt,
                    lambda: batch_document_loss(model, chunk, weights, True,
                                                rng),
                    schedule.clip_norm, f"epoch {epoch} doc batch {ci - 1}"))
        result.step_losses.extend(ja_losses)
        result.step_losses.extend(jd_losses)
        result.epochs_run = epoch + 1

        rec = {"epoch": epoch, "phase": "joint",
               "J_a": float(np.mean(ja_losses)) if ja_losses else None,
               "J_d": float(np.mean(jd_losses)) if jd_losses else None}

        if dev_sentences:
            report = evaluate([model.predict(s) for s in dev_sentences],
                              dev_sentences)
            rec["dev"] = report.as_dict()
            if report.f1_i > result.best_f1_i:
                result.best_f1_i = report.f1_i
                best_epoch = epoch
                stale = 0
                if out_dir is not None:
                    result.best_path = os.path.join(out_dir, "best.ckpt")
                    model.save(result.best_path)
            else:
                stale += 1

        if schedule.target_token_acc > 0:
            acc = token_accuracy(model, train_sentences)
            rec["train_token_acc"] = {k: round(v, 4) for k, v in acc.items()}
            result.final_token_acc = acc
            if (result.reached_target_epoch is None
                    and all(v >= schedule.target_token_acc
                            for v in acc.values())):
                result.reached_target_epoch = epoch + 1

        rec["wall_time_s"] = round(time.time() - t0, 3)
        log_epoch(rec)
        ja = rec.get("J_a")
        emit(f"epoch {epoch}: J_a={ja:.4f}" if ja is not None
             else f"epoch {epoch}")

        if result.reached_target_epoch is not None:
            break
        if dev_sentences and schedule.patience > 0 and stale >= schedule.patience:
            emit(f"early stop: no dev F1-I gain for {schedule.patience} epochs")
            break

    if out_dir is not None and result.best_path is None:
        result.best_path = os.path.join(out_dir, "best.ckpt")
        model.save(result.best_path)
    if schedule.target_token_acc > 0 and not result.final_token_acc:
        result.final_token_acc = token_accuracy(model, train_sentences)
    return result


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckEntry:
    name: str
    shape: tuple[int, ...]
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    entries: list[GradcheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def failures(self) -> list[GradcheckEntry]:
        return [e for e in self.entries if not e.passed]

    @property
    def worst(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)


def gradcheck_harness(iterations: int = 2, route_iters: int = 2,
                      seed: int = 5, nonlinearity: str = "sigmoid",
                      coarse: bool = False):
    """Small float64 model plus one labeled sentence and one document.

    The harness defaults to the sigmoid nonlinearity: central differences at
    the mandated 1e-3 step are meaningless across a relu kink, and with a few
    hundred relu sites some preactivation always sits within a step of zero.
    relu's backward rule is finite-difference-checked at the op level instead.
    """
    from .data import (DEFAULT_SCHEMES, Document, Sentence,
                       assign_embedding_ids, random_embeddings)
    from .tensor import use_dtype

    config = ModelConfig(
        d_general=5, d_domain=3, d_enc=8, d_task=8, d_route=6,
        kernel_widths=(3,), task_depth=1, nonlinearity=nonlinearity,
        dropout=0.0, iterations=iterations, route_iters=route_iters,
        max_len=8, seed=seed, coarse=coarse)
    words = ["the", "battery", "is", "great", "awful", "service"]
    rng = np.random.default_rng(seed + 101)
    general = random_embeddings(words, config.d_general, rng)
    domain = random_embeddings(words, config.d_domain, rng)
    adjacency = np.eye(4, dtype=np.float32)
    for i in range(3):
        adjacency[i, i + 1] = adjacency[i + 1, i] = 1.0
    adjacency[1, 3] = adjacency[3, 1] = 1.0
    sentence = Sentence(tokens=("the", "battery", "is", "great"),
                        ate_gold=(2, 0, 2, 2), ote_gold=(2, 2, 2, 0),
                        asc_gold=(None, 0, None, None), adjacency=adjacency)
    document = Document(tokens=("great", "battery", "service"),
                        domain_gold=0, sentiment_gold=0)
    with use_dtype(np.float64):
        model = AbsaModel(config, DEFAULT_SCHEMES, general, domain)
    assign_embedding_ids([sentence], general, domain)
    assign_embedding_ids([document], general, domain)
    return model, sentence, document


def model_gradcheck(model: AbsaModel, sentence: Sentence,
                    document: Document | None = None, step: float = 1e-3,
                    tol: float = 1e-3) -> GradcheckReport:
    """Finite-difference check of the sentence loss (and, when a document is
    given, the document loss) against analytic gradients, per parameter."""
    weights = LossWeights.from_config(model.config)
    params = model.named_parameters()

    def sentence_loss():
        states, _ = model.forward(sentence, train=False)
        return aspect_loss(states, sentence, weights)

    report = gradcheck(sentence_loss, params, step=step, tol=tol)
    if document is None:
        return report

    def doc_loss():
        return document_loss(model.forward_document(document, train=False),
                             document, weights)

    doc_report = gradcheck(doc_loss, params, step=step, tol=tol)
    merged = []
    for a, b in zip(report.entries, doc_report.entries):
        worst = max(a.max_rel_err, b.max_rel_err)
        merged.append(GradcheckEntry(a.name, a.shape, worst, worst < tol))
    return GradcheckReport(merged, tol)


def gradcheck(build_loss: Callable[[], Tensor], params: dict[str, Tensor],
              step: float = 1e-3, tol: float = 1e-3,
              floor: float = 1e-6) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    Parameters must be float64; float32 rounding drowns the comparison.
    ``build_loss`` must be a deterministic pure function of the parameters.
    """
    for p in params.values():
        if p.dtype != np.float64:
            raise ValueError(f"gradcheck requires float64 parameters; "
                             f"{p.name or 'parameter'} is {p.dtype}")
    for p in params.values():
        p.zero_grad()
    tape = Tape()
    with record(tape):
        loss = build_loss()
    tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None
                       else np.zeros_like(p.data))
                for name, p in params.items()}

    entries = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = build_loss().item()
            flat[i] = orig - step
            lo = build_loss().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        entries.append(GradcheckEntry(name, tuple(p.shape), worst,
                                      worst < tol))
    return GradcheckReport(entries, tol)

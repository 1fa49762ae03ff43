"""AdamW, warmup + cosine schedule, global-norm clipping and the training loop."""
import csv
import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .errors import DivergenceError
from .tasks import make_batch


@dataclass
class TrainConfig:
    steps: int = 2000
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    eval_every: int = 100
    eval_batches: int = 4
    patience: int = 5
    prefetch: int = 0
    wall_clock: float = 0.0


@dataclass
class OptimState:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    clip_norm: float = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_train_config(cls, tc):
        return cls(tc.peak_lr, tc.warmup_steps, tc.steps, tc.beta1, tc.beta2, tc.weight_decay, tc.eps, tc.clip_norm)


def lr_at(step, state):
    """Linear warmup 0 -> peak over ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    w, total, peak = state.warmup_steps, state.total_steps, state.peak_lr
    if w > 0 and step < w:
        return peak * step / w
    if total <= w:
        return peak
    progress = min(max((step - w) / (total - w), 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads, max_norm=1.0):
    """Scale a list of arrays so their joint L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        grads = [g * s for g in grads]
    return grads, norm


def adamw_step(params, grads, state, lr=None):
    """One decoupled-weight-decay Adam update in place on ``params`` [(name, DiffArray)]."""
    lr = lr_at(state.step + 1, state) if lr is None else lr
    for (name, _), g in zip(params, grads):
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for (name, p), g in zip(params, grads):
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr


# ---------------------------------------------------------------------------
# losses and evaluation
# ---------------------------------------------------------------------------

def compute_loss(model, batch, training=False, rng=None):
    """Returns (total, task_loss, recon_loss, forward output)."""
    out = model.forward(batch.tokens, training=training, rng=rng)
    task = E.cross_entropy(out.logits, batch.targets, batch.loss_mask)
    lam = model.config.lambda_recon
    if model.config.levels > 1 and lam:
        total = E.add(task, E.scale(out.recon_loss, lam))
    else:
        total = task
    return total, task, out.recon_loss, out


def accuracy(logits, batch):
    pred = logits.argmax(axis=-1)
    hit = (pred == batch.targets) & batch.loss_mask
    return int(hit.sum()), int(batch.loss_mask.sum())


def evaluate(model, spec, split="val", n_batches=4, corpus=None, batch_size=None):
    tot_loss = tot_recon = 0.0
    hits = count = 0
    with E.no_grad():
        for i in range(n_batches):
            batch = make_batch(spec, split, i, corpus, batch_size)
            total, task, recon, out = compute_loss(model, batch)
            h, c = accuracy(out.logits.data, batch)
            hits += h
            count += c
            tot_loss += task.item()
            tot_recon += recon.item()
    loss = tot_loss / n_batches
    metrics = {"loss": loss, "accuracy": hits / max(count, 1), "recon_loss": tot_recon / n_batches}
    if spec.kind == "char_lm":
        metrics["pseudo_perplexity"] = math.exp(min(loss, 700.0))
    return metrics


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    best_step: int = 0
    best_val_loss: float = float("inf")
    initial_val: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)
    stopped_early: bool = False

    CSV_FIELDS = ("step", "task_loss", "recon_loss", "total", "grad_norm", "lr")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_FIELDS)
            for r in self.records:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in self.CSV_FIELDS[1:]])

    def summary(self):
        return {
            "steps": len(self.records),
            "best_step": self.best_step,
            "best_val_loss": self.best_val_loss if self.evals else None,
            "initial_val": self.initial_val,
            "final_metrics": self.final_metrics,
            "stopped_early": self.stopped_early,
            "evals": self.evals,
            "final_total": self.records[-1]["total"] if self.records else None,
        }

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _batches(spec, steps, corpus, prefetch):
    if prefetch <= 0:
        for i in range(steps):
            yield make_batch(spec, "train", i, corpus)
        return
    q = queue.Queue(maxsize=prefetch)
    stop = threading.Event()

    def produce():
        for i in range(steps):
            if stop.is_set():
                return
            q.put(make_batch(spec, "train", i, corpus))

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    try:
        for _ in range(steps):
            yield q.get()
    finally:
        stop.set()
        while not q.empty():
            q.get_nowait()


def train(model, spec, tc: TrainConfig, corpus=None, log=None):
    """Train ``model`` in place; the model ends at its best validation checkpoint."""
    if spec.kind == "char_lm" and corpus is None:
        from .tasks import load_corpus
        corpus = load_corpus(spec.corpus or None)
    report = TrainReport()
    state = OptimState.from_train_config(tc)
    params = list(model.named_parameters())
    best_state = model.state_dict()
    if tc.steps <= 0:
        return report, best_state

    report.initial_val = evaluate(model, spec, "val", tc.eval_batches, corpus)
    report.best_val_loss = report.initial_val["loss"]
    bad_evals = 0
    t0 = time.perf_counter()
    rng = model.dropout_rng
    for step, batch in enumerate(_batches(spec, tc.steps, corpus, tc.prefetch), start=1):
        model.zero_grad()
        total, task, recon, _ = compute_loss(model, batch, training=True, rng=rng)
        tv = total.item()
        if not math.isfinite(tv):
            raise DivergenceError(f"non-finite loss at step {step}")
        total.backward()
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for _, p in params]
        grads, gnorm = clip_gradients(grads, tc.clip_norm)
        lr = adamw_step(params, grads, state)
        model.clamp_slopes()
        report.records.append({"step": step, "task_loss": task.item(), "recon_loss": recon.item(),
                               "total": tv, "grad_norm": gnorm, "lr": lr})
        last = step == tc.steps
        out_of_time = tc.wall_clock > 0 and time.perf_counter() - t0 > tc.wall_clock
        if step % tc.eval_every == 0 or last or out_of_time:
            metrics = evaluate(model, spec, "val", tc.eval_batches, corpus)
            metrics["step"] = step
            report.evals.append(metrics)
            if log:
                log(f"step {step} loss {tv:.4f} val {metrics['loss']:.4f} acc {metrics['accuracy']:.4f}")
            if metrics["loss"] < report.best_val_loss:
                report.best_val_loss = metrics["loss"]
                report.best_step = step
                best_state = model.state_dict()
                bad_evals = 0
            else:
                bad_evals += 1
                if tc.patience and bad_evals >= tc.patience:
                    report.stopped_early = True
                    break
        if out_of_time:
            break
    model.load_state_dict(best_state)
    report.final_metrics = evaluate(model, spec, "val", tc.eval_batches, corpus)
    return report, best_state

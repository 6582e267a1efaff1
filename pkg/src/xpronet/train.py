"""Training loop, evaluation and prototype-matrix preparation."""

from __future__ import annotations

import copy
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .config import RunConfig
from .corpus import Sample
from .decoding import Hypothesis
from .engine import Adam, AdamState, NumericError, Tape
from .model import Batch, XProNet
from .proto_init import (
    PrototypeMatrix,
    ToyExtractor,
    build_class_feature_sets,
    init_prototype_matrix,
    random_prototype_matrix,
)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "L_ce", "L_s_icn", "L_t_icn", "L_fnl", "val_bleu_4", "lr_prototype", "lr_model")
MAX_RETRIES = 3
GEN_CHUNK = 64  # fixed so results never depend on --jobs


class DivergenceError(NumericError):
    """Training stayed non-finite after every learning-rate retry."""


def prepare_pm(cfg: RunConfig, train: Sequence[Sample], vocab_size: int) -> PrototypeMatrix:
    """Clustered prototype matrix, or a seeded random one for the w/o PI variant."""
    if cfg.disable_pi:
        return random_prototype_matrix(cfg.n_labels, cfg.n_prototypes, cfg.proto_dim, cfg.seed)
    if not train:
        raise ValueError("cannot initialise prototypes from an empty training split")
    extractor = ToyExtractor(
        train[0].image.shape[-1], vocab_size, cfg.global_visual_dim, cfg.global_text_dim, seed=cfg.seed
    )
    sets = build_class_feature_sets(train, extractor, cfg.n_labels)
    pm, _ = init_prototype_matrix(sets, cfg.n_prototypes, cfg.seed, cfg.kmeans_max_iter, cfg.kmeans_tol)
    return pm


# -- generation / evaluation -------------------------------------------------


def _generate_chunk(args) -> list[Hypothesis]:
    model, images, labels, mode, beam_size = args
    return model.generate(images, mode=mode, beam_size=beam_size, labels=labels)


def generate_reports(
    model: XProNet, samples: Sequence[Sample], mode: str | None = None, beam_size: int | None = None, jobs: int = 1
) -> list[Hypothesis]:
    """Decode every sample in fixed-size chunks; ``jobs > 1`` spreads chunks over processes."""
    if not samples:
        return []
    oracle = model.cfg.inference_label_mode == "oracle"
    tasks = []
    for start in range(0, len(samples), GEN_CHUNK):
        part = samples[start : start + GEN_CHUNK]
        images = np.stack([s.image for s in part])
        labels = np.stack([s.labels for s in part]) if oracle else None
        tasks.append((model, images, labels, mode, beam_size))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_generate_chunk, tasks))
    else:
        chunks = [_generate_chunk(t) for t in tasks]
    return [h for chunk in chunks for h in chunk]


def evaluate_model(
    model: XProNet, samples: Sequence[Sample], mode: str | None = None, beam_size: int | None = None, jobs: int = 1
) -> dict:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    hyps = generate_reports(model, samples, mode, beam_size, jobs)
    cands = [metrics.strip_special(h.tokens) for h in hyps]
    refs = [metrics.strip_special(s.report) for s in samples]
    return metrics.evaluate(cands, refs)


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: XProNet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_bleu_4: float = float("nan")
    retries: int = 0


def _run_epoch(model: XProNet, opt: Adam, train: Sequence[Sample], rng: np.random.Generator) -> dict:
    cfg = model.cfg
    order = rng.permutation(len(train))
    sums = np.zeros(4)
    n_batches = 0
    params = list(model.params.values())
    for start in range(0, len(order), cfg.batch_size):
        batch = Batch.collate([train[i] for i in order[start : start + cfg.batch_size]])
        with Tape() as tape:
            out = model.forward(batch, rng if cfg.dropout > 0 else None, training=True)
        if not np.isfinite(out.loss.item()):
            raise NumericError("non-finite loss")
        grads = tape.backward(out.loss, params)
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise NumericError("non-finite gradient")
        opt.step(grads)
        if not all(np.isfinite(p.data).all() for p in params):
            raise NumericError("non-finite parameters after update")
        sums += [out.ce.item(), out.visual_contrastive.item(), out.textual_contrastive.item(), out.loss.item()]
        n_batches += 1
    means = sums / max(n_batches, 1)
    return dict(zip(("L_ce", "L_s_icn", "L_t_icn", "L_fnl"), means.tolist()))


def train_model(
    cfg: RunConfig,
    train: Sequence[Sample],
    val: Sequence[Sample],
    vocab_size: int,
    pm: np.ndarray | None = None,
    loss_csv: str | Path | None = None,
) -> TrainResult:
    """Fit a model and keep the parameters with the best validation BLEU-4.

    A non-finite loss or gradient restores the epoch's starting state, halves
    both learning rates and retries the epoch, at most three times in total;
    after that :class:`DivergenceError` is raised.
    """
    if not train:
        raise ValueError("training split is empty")
    if pm is None and not cfg.disable_cmpnet:
        pm = prepare_pm(cfg, train, vocab_size).values
    model = XProNet(cfg, vocab_size, pm)
    opt = Adam(model.param_groups(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 2])
    result = TrainResult(model)
    best_state = model.state()
    best_score = -np.inf
    writer = None
    fh = None
    if loss_csv is not None:
        fh = open(loss_csv, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
    try:
        for epoch in range(1, cfg.epochs + 1):
            snapshot = (model.state(), _opt_snapshot(opt), copy.deepcopy(rng.bit_generator.state))
            while True:
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        losses = _run_epoch(model, opt, train, rng)
                    break
                except NumericError as exc:
                    result.retries += 1
                    if result.retries > MAX_RETRIES:
                        raise DivergenceError(f"epoch {epoch}: training diverged ({exc}) after {MAX_RETRIES} retries") from exc
                    log.warning("epoch %d diverged (%s); halving learning rates and retrying", epoch, exc)
                    current = [g.lr for g in opt.groups]
                    model.load_state(snapshot[0])
                    _opt_restore(opt, snapshot[1])
                    for g, lr in zip(opt.groups, current):
                        g.lr = 0.5 * lr
                    rng.bit_generator.state = snapshot[2]
            lrs = {g.name: g.lr for g in opt.groups}
            val_bleu = float("nan")
            if val:
                val_bleu = evaluate_model(model, val, mode=cfg.val_decode, jobs=cfg.jobs)["bleu_4"]
                if val_bleu > best_score:
                    best_score, best_state, result.best_epoch = val_bleu, model.state(), epoch
            row = {
                "epoch": epoch,
                **losses,
                "val_bleu_4": val_bleu,
                "lr_prototype": lrs.get("prototype", float("nan")),
                "lr_model": lrs.get("encoder-decoder", float("nan")),
            }
            result.history.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            log.info("epoch %d  L_fnl=%.4f  L_ce=%.4f  val BLEU-4=%.4f", epoch, losses["L_fnl"], losses["L_ce"], val_bleu)
            opt.decay(cfg.lr_decay)
    finally:
        if fh is not None:
            fh.close()
    if not val:
        best_state, result.best_epoch = model.state(), cfg.epochs
    model.load_state(best_state)
    result.best_val_bleu_4 = float(best_score) if val else float("nan")
    return result


def _opt_snapshot(opt: Adam):
    moments = {k: AdamState(st.m.copy(), st.v.copy()) for k, st in opt.state.items()}
    return opt.step_count, moments


def _opt_restore(opt: Adam, snapshot) -> None:
    opt.step_count, moments = snapshot
    opt.state = {k: AdamState(st.m.copy(), st.v.copy()) for k, st in moments.items()}

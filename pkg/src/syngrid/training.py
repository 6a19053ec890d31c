"""Training loop, exact-match evaluation and attention analytics."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from syngrid import autodiff as ad
from syngrid.errors import DivergedLoss
from syngrid.gridworld import GRID_SIZE
from syngrid.model import ModelConfig, MultimodalTransformer, make_batch
from syngrid.oracle import oracle, resolve

logger = logging.getLogger(__name__)

SPECIAL_ACTIONS = frozenset({"<sos>", "<eos>", "<pad>"})


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 120
    seed: int = 0
    eval_every: int = 1  # epochs between validation passes
    checkpoint_dir: Optional[str] = None
    float64: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("lr, batch_size, epochs and eval_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: MultimodalTransformer
    history: list
    best_step: int
    best_val_exact_match: Optional[float]


def config_hash(*configs) -> str:
    blob = json.dumps([c if isinstance(c, dict) else c.to_dict() for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def exact_match(pred: Sequence[str], gold: Sequence[str]) -> bool:
    p = [a for a in pred if a not in SPECIAL_ACTIONS]
    g = [a for a in gold if a not in SPECIAL_ACTIONS]
    return p == g


def _batches(n: int, size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def predict_actions(model: MultimodalTransformer, episodes: Sequence, batch_size: int = 256) -> list[list[str]]:
    out: list[list[str]] = []
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start : start + batch_size]
        out.extend(model.greedy_decode(make_batch(chunk, model.config, with_targets=False)))
    return out


def exact_match_rate(predictions: Sequence[Sequence[str]], episodes: Sequence) -> float:
    if not episodes:
        return 0.0
    hits = sum(exact_match(p, ep.actions) for p, ep in zip(predictions, episodes))
    return 100.0 * hits / len(episodes)


def train(
    corpus_train: Sequence,
    corpus_val: Sequence,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    history_path=None,
    callback=None,
) -> TrainResult:
    """Teacher-forced training with Adam; keeps the best validation checkpoint.

    Validation exact match is computed every ``eval_every`` epochs on
    ``corpus_val`` (skipped when empty, in which case the final weights are
    kept). Ties keep the earliest step.
    """
    if not corpus_train:
        raise ValueError("training corpus is empty")
    if train_cfg.float64 and model_cfg.dtype != "float64":
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "dtype": "float64"})
    model = MultimodalTransformer(model_cfg, seed=train_cfg.seed)
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    dropout_rng = np.random.default_rng([train_cfg.seed, 2])
    state = ad.AdamState()
    history: list[dict] = []
    best = (-math.inf, 0)
    best_arrays = None
    step = 0
    hist_fh = open(history_path, "w", encoding="utf-8") if history_path else None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            for idx in _batches(len(corpus_train), train_cfg.batch_size, shuffle_rng):
                batch = make_batch([corpus_train[i] for i in idx], model_cfg)
                loss = model.loss(batch, dropout_rng if model_cfg.dropout > 0 else None)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergedLoss(f"non-finite loss {value} at step {step + 1}")
                loss.backward()
                ad.adam_step(model.params, state, train_cfg.lr)
                ad.zero_grads(model.params)
                step += 1
                record = {"step": step, "epoch": epoch, "loss": value, "val_exact_match": None}
                history.append(record)
            if corpus_val and epoch % train_cfg.eval_every == 0:
                val_em = exact_match_rate(predict_actions(model, corpus_val, train_cfg.eval_batch_size), corpus_val)
                history[-1]["val_exact_match"] = val_em
                if val_em > best[0]:
                    best = (val_em, step)
                    best_arrays = {k: p.data.copy() for k, p in model.params.items()}
                logger.info("epoch %d step %d loss %.4f val_em %.2f", epoch, step, value, val_em)
            else:
                logger.info("epoch %d step %d loss %.4f", epoch, step, value)
            if callback is not None:
                callback(epoch, model, history)
        if hist_fh:
            for rec in history:
                hist_fh.write(json.dumps(rec) + "\n")
    finally:
        if hist_fh:
            hist_fh.close()
    if best_arrays is not None:
        model.load_arrays(best_arrays)
        best_val: Optional[float] = best[0]
        best_step = best[1]
    else:
        best_val, best_step = None, step
    if train_cfg.checkpoint_dir:
        Path(train_cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(train_cfg.checkpoint_dir) / "best.npz", model, {"best_step": best_step})
    return TrainResult(model, history, best_step, best_val)


def save_checkpoint(path, model: MultimodalTransformer, extra: Optional[dict] = None) -> None:
    ad.save_params(path, model.params, {"model_config": model.config.to_dict(), **(extra or {})})


def load_checkpoint(path) -> MultimodalTransformer:
    arrays, meta = ad.load_params(path)
    model = MultimodalTransformer(ModelConfig.from_dict(meta["model_config"]))
    model.load_arrays(arrays)
    return model


# -- predictors used as evaluation harness checks --------------------------


class ModelPredictor:
    def __init__(self, model: MultimodalTransformer, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size

    def predict(self, episodes):
        return predict_actions(self.model, episodes, self.batch_size)


class OraclePredictor:
    """Upper bound: answers with the oracle plan."""

    def predict(self, episodes):
        return [oracle(ep.world, ep.ast) for ep in episodes]


class ConstantEosPredictor:
    """Lower bound: always emits EOS first, i.e. the empty plan."""

    def predict(self, episodes):
        return [[] for _ in episodes]


@dataclass
class EvalReport:
    exact_match: dict
    counts: dict
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    std: dict = field(default_factory=dict)
    n_seeds: int = 1
    predictions: dict = field(default_factory=dict, repr=False)

    def to_dict(self, with_predictions: bool = False) -> dict:
        out = {
            "exact_match": {k: round(v, 2) for k, v in self.exact_match.items()},
            "counts": dict(self.counts),
            "seed": self.seed,
            "config_hash": self.config_hash,
            "n_seeds": self.n_seeds,
        }
        if self.std:
            out["std"] = {k: round(v, 2) for k, v in self.std.items()}
        if with_predictions:
            out["predictions"] = self.predictions
        return out

    def format_row(self, split: str) -> str:
        mean = f"{self.exact_match[split]:.2f}"
        if self.std:
            return f"{mean} ± {self.std[split]:.2f}"
        return mean


def evaluate(predictor, corpus_test_by_split: Mapping[str, Sequence], seed=None, cfg_hash=None) -> EvalReport:
    """Greedy predictions per split, scored by exact match (percent)."""
    em, counts, preds = {}, {}, {}
    for split, episodes in corpus_test_by_split.items():
        episodes = list(episodes)
        predictions = predictor.predict(episodes) if episodes else []
        em[split] = exact_match_rate(predictions, episodes)
        counts[split] = len(episodes)
        preds[split] = [list(p) for p in predictions]
    return EvalReport(em, counts, seed, cfg_hash, predictions=preds)


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    if not reports:
        raise ValueError("need at least one report")
    splits = list(reports[0].exact_match)
    mean = {s: float(np.mean([r.exact_match[s] for r in reports])) for s in splits}
    std = {s: float(np.std([r.exact_match[s] for r in reports])) for s in splits}
    return EvalReport(mean, dict(reports[0].counts), None, reports[0].config_hash, std, len(reports))


def recount(report: dict, episodes_by_split: Mapping[str, Sequence]) -> dict:
    """Recompute per-split percentages from stored predictions (audit)."""
    return {
        split: round(exact_match_rate(report["predictions"][split], episodes), 2)
        for split, episodes in episodes_by_split.items()
    }


# -- attention analytics ----------------------------------------------------


def attention_records(model: MultimodalTransformer, episodes: Sequence) -> list:
    batch = make_batch(list(episodes), model.config)
    record: list = []
    with ad.no_grad():
        model.forward(batch, record=record)
    return record, batch


def export_attention(model: MultimodalTransformer, episode, per_head: bool = True) -> dict:
    """Attention dumps for one episode.

    Returns ``{"dumps": [...], "averaged": {kind: matrix}}`` where each dump is
    ``{"layer", "head", "kind", "matrix"}`` and ``averaged`` holds the mean
    over layers and heads for the encoder kinds.
    """
    record, _ = attention_records(model, [episode])
    kinds = {"text_self", "t2v_cross", "v2t_cross"}
    dumps, stacks = [], {}
    for (kind, layer), probs in record:
        if kind not in kinds:
            continue
        mats = probs[0]
        stacks.setdefault(kind, []).append(mats)
        if per_head:
            for h, mat in enumerate(mats):
                dumps.append({"layer": layer, "head": h, "kind": kind, "matrix": mat.tolist()})
    averaged = {k: np.mean(np.concatenate(v, axis=0), axis=0) for k, v in stacks.items()}
    return {"dumps": dumps, "averaged": {k: m.tolist() for k, m in averaged.items()}, "_arrays": averaged}


def referent_focus(model: MultimodalTransformer, episodes: Sequence, batch_size: int = 128) -> float:
    """Fraction of episodes whose text-to-visual attention peaks on the referent cell.

    Attention is averaged over encoder layers, heads and the command's tokens;
    the cell receiving the largest mean weight is compared with the referent.
    """
    if not episodes:
        return 0.0
    hits = 0
    for start in range(0, len(episodes), batch_size):
        chunk = list(episodes[start : start + batch_size])
        record, batch = attention_records(model, chunk)
        mats = [p for (kind, _), p in record if kind == "t2v_cross"]
        avg = np.mean(np.stack(mats), axis=(0, 2))  # (B, n_text, 36)
        for i, ep in enumerate(chunk):
            n = batch.text_len[i]
            cell = int(avg[i, :n].mean(axis=0).argmax())
            ref = resolve(ep.world, ep.ast)
            hits += cell == ref.row * GRID_SIZE + ref.col
    return hits / len(episodes)

"""Preset-driven training runs and the sharing x mask ablation grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from syngrid import presets
from syngrid.autodiff import count_params
from syngrid.model import ModelConfig, MultimodalTransformer
from syngrid.training import EvalReport, ModelPredictor, TrainConfig, aggregate_reports, config_hash, evaluate, train

logger = logging.getLogger(__name__)

# reference parameter counts reported for the full-scale models
REFERENCE_PARAMS = {"shared_dependency": "1.9M", "unshared_baseline": "4.6M"}

ABLATION_GRID = (
    ("no sharing", "no mask", False, False),
    ("sharing", "no mask", True, False),
    ("no sharing", "dependency", False, True),
    ("sharing", "dependency", True, True),
)


def configs_from_preset(name: str, **overrides) -> tuple[ModelConfig, TrainConfig]:
    data = presets.load(name)
    model_fields = dict(data.get("model", {}))
    train_fields = dict(data.get("train", {}))
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ModelConfig.__dataclass_fields__:
            model_fields[key] = value
        elif key in TrainConfig.__dataclass_fields__:
            train_fields[key] = value
        else:
            raise KeyError(f"unknown override {key!r}")
    return ModelConfig(**model_fields), TrainConfig(**train_fields)


@dataclass
class AblationRow:
    sharing: str
    mask: str
    report: EvalReport
    n_params: int
    per_seed: list

    def to_dict(self) -> dict:
        return {
            "weight_sharing": self.sharing,
            "mask": self.mask,
            "n_params": self.n_params,
            "report": self.report.to_dict(),
            "per_seed": [r.to_dict() for r in self.per_seed],
        }


def run_ablation(
    train_eps: Sequence,
    val_eps: Sequence,
    test_by_split: dict,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    progress=None,
) -> list[AblationRow]:
    """Train every cell of the {sharing} x {mask} grid for each seed."""
    rows = []
    for sharing, mask, share, use_mask in ABLATION_GRID:
        cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "share_encoder_weights": share, "use_text_mask": use_mask})
        reports = []
        for seed in seeds:
            tcfg = TrainConfig(**{**train_cfg.to_dict(), "seed": seed})
            result = train(train_eps, val_eps, cfg, tcfg)
            report = evaluate(ModelPredictor(result.model), test_by_split, seed, config_hash(cfg, tcfg))
            reports.append(report)
            if progress:
                progress(sharing, mask, seed, report)
        n_params = count_params(MultimodalTransformer(cfg).params)
        rows.append(AblationRow(sharing, mask, aggregate_reports(reports), n_params, reports))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    splits = list(rows[0].report.exact_match)
    header = f"{'W/S':<12}{'Mask':<12}{'Params':>9}  " + "  ".join(f"{s:>16}" for s in splits)
    lines = [header, "-" * len(header)]
    for row in rows:
        cells = "  ".join(f"{row.report.format_row(s):>16}" for s in splits)
        lines.append(f"{row.sharing:<12}{row.mask:<12}{row.n_params:>9}  {cells}")
    return "\n".join(lines)


def trend_holds(rows: Sequence[AblationRow], split: Optional[str] = None) -> bool:
    """Mean exact match of sharing+mask is at least that of neither."""
    by_cell = {(r.sharing, r.mask): r.report for r in rows}
    both = by_cell[("sharing", "dependency")]
    neither = by_cell[("no sharing", "no mask")]
    split = split or next(iter(both.exact_match))
    return both.exact_match[split] >= neither.exact_match[split]

"""Ranking evaluation for item and frame recommendation.

Item evaluation follows the sampled-candidates protocol: each held-out
positive is ranked against negatives drawn from the items the user never
rated anywhere, the draw is repeated several times, and metrics are averaged
across repeats.  Frame evaluation is exhaustive: a liked frame is ranked
against all frames of its parent item, so it needs no sampling and no
repeats.

Ranks are pessimistic about ties: a candidate scoring exactly the same as
the positive pushes the positive down.  All randomness derives from spawned
seed sequences keyed by (repeat, pair), so results do not depend on thread
count or evaluation order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import SplitDataset
from .errors import ConfigError, UnsupportedTaskError
from .model import (
    VISUAL_OFF,
    ModelConfig,
    ModelParams,
    item_visual_table,
    score_frames,
    score_pairs,
)

logger = logging.getLogger(__name__)


def rank_of_first(scores: np.ndarray) -> int:
    """1-based rank of scores[0] among all entries, ties ranked worst."""
    s = scores[0]
    return int((scores > s).sum() + (scores == s).sum())


def rank_metrics(rank: int, k_list) -> tuple:
    """(hr, ndcg) dicts for one ranked positive."""
    hr = {k: 1.0 if rank <= k else 0.0 for k in k_list}
    gain = float(1.0 / np.log2(rank + 1.0))
    ndcg = {k: gain if rank <= k else 0.0 for k in k_list}
    return hr, ndcg


@dataclass(frozen=True)
class EvalReport:
    """Averaged ranking metrics with across-repeat standard deviations."""

    task: str
    split_name: str
    k_list: tuple
    hr: dict
    ndcg: dict
    hr_std: dict
    ndcg_std: dict
    n_pairs: int
    repeats: int
    n_negatives: int = None
    warnings: tuple = ()

    def to_tsv(self) -> str:
        lines = ["K\tHR\tNDCG\tHR_std\tNDCG_std"]
        for k in self.k_list:
            lines.append(
                f"{k}\t{self.hr[k]!r}\t{self.ndcg[k]!r}"
                f"\t{self.hr_std[k]!r}\t{self.ndcg_std[k]!r}"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "split": self.split_name,
            "k_list": list(self.k_list),
            "hr": {str(k): self.hr[k] for k in self.k_list},
            "ndcg": {str(k): self.ndcg[k] for k in self.k_list},
            "hr_std": {str(k): self.hr_std[k] for k in self.k_list},
            "ndcg_std": {str(k): self.ndcg_std[k] for k in self.k_list},
            "n_pairs": self.n_pairs,
            "repeats": self.repeats,
            "n_negatives": self.n_negatives,
            "warnings": list(self.warnings),
        }


def _empty_report(task, split_name, k_list, warnings=()) -> EvalReport:
    zeros = {k: 0.0 for k in k_list}
    return EvalReport(
        task=task, split_name=split_name, k_list=tuple(k_list),
        hr=dict(zeros), ndcg=dict(zeros), hr_std=dict(zeros), ndcg_std=dict(zeros),
        n_pairs=0, repeats=0, warnings=tuple(warnings),
    )


def _check_k_list(k_list) -> tuple:
    k_list = tuple(int(k) for k in k_list)
    if not k_list or any(k < 1 for k in k_list):
        raise ConfigError(f"cutoffs must be positive integers, got {k_list}")
    return k_list


def evaluate_item_rec(
    params: ModelParams,
    cfg: ModelConfig,
    split: SplitDataset,
    k_list=(5, 10, 15, 20),
    n_negatives: int = 1000,
    repeats: int = 10,
    seed: int = 0,
    split_name: str = "test",
    threads: int = 1,
) -> EvalReport:
    """Rank each held-out positive against sampled unrated negatives.

    The candidate pool for a user excludes every item the user rated in any
    portion of the split.  Negatives are drawn without replacement; when the
    pool is smaller than ``n_negatives`` the whole pool is used once and a
    warning is recorded.  Per-(repeat, pair) seed streams make the result
    independent of ``threads``.
    """
    k_list = _check_k_list(k_list)
    if split_name == "test":
        pairs = sorted(split.test)
    elif split_name == "validation":
        pairs = sorted(split.validation)
    else:
        raise ConfigError(f"unknown split_name {split_name!r}")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if not pairs:
        return _empty_report("item", split_name, k_list, ("no pairs to evaluate",))

    base = split.base
    pools = []
    short = 0
    all_items = np.arange(base.num_items, dtype=np.int64)
    for u, _ in pairs:
        pool = np.setdiff1d(all_items, base.items_of_user[u], assume_unique=True)
        if len(pool) < n_negatives:
            short += 1
        pools.append(pool)
    warnings = []
    if short:
        warnings.append(
            f"{short} of {len(pairs)} pairs had fewer than {n_negatives} "
            "unrated items; used the full pool"
        )
        logger.warning(warnings[-1])

    table = item_visual_table(params, cfg, dataset=base)
    repeat_seqs = np.random.SeedSequence(seed).spawn(repeats)

    def run_repeat(r: int):
        pair_seqs = repeat_seqs[r].spawn(len(pairs))
        users, items, offsets = [], [], [0]
        for (u, i), pool, seq in zip(pairs, pools, pair_seqs):
            rng = np.random.default_rng(seq)
            take = min(n_negatives, len(pool))
            negs = rng.choice(pool, size=take, replace=False)
            users.append(np.full(take + 1, u, dtype=np.int64))
            items.append(np.concatenate(([i], negs)))
            offsets.append(offsets[-1] + take + 1)
        scores = score_pairs(
            np.concatenate(users), np.concatenate(items), params, cfg, base, table=table
        )
        hr_sum = {k: 0.0 for k in k_list}
        ndcg_sum = {k: 0.0 for k in k_list}
        for p in range(len(pairs)):
            rank = rank_of_first(scores[offsets[p]: offsets[p + 1]])
            hr, ndcg = rank_metrics(rank, k_list)
            for k in k_list:
                hr_sum[k] += hr[k]
                ndcg_sum[k] += ndcg[k]
        n = float(len(pairs))
        return (
            {k: hr_sum[k] / n for k in k_list},
            {k: ndcg_sum[k] / n for k in k_list},
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_repeat, range(repeats)))
    else:
        results = [run_repeat(r) for r in range(repeats)]

    hr_mat = {k: np.array([res[0][k] for res in results]) for k in k_list}
    ndcg_mat = {k: np.array([res[1][k] for res in results]) for k in k_list}
    return EvalReport(
        task="item",
        split_name=split_name,
        k_list=k_list,
        hr={k: float(hr_mat[k].mean()) for k in k_list},
        ndcg={k: float(ndcg_mat[k].mean()) for k in k_list},
        hr_std={k: float(hr_mat[k].std()) for k in k_list},
        ndcg_std={k: float(ndcg_mat[k].std()) for k in k_list},
        n_pairs=len(pairs),
        repeats=repeats,
        n_negatives=n_negatives,
        warnings=tuple(warnings),
    )


def _frame_eval_pairs(split: SplitDataset, exclude_singletons: bool):
    """Sorted (user, frame, item_frames) triples from the frame test set."""
    base = split.base
    out = []
    skipped = 0
    for u, f in sorted(split.frame_test):
        item = int(base.frame_parent[f])
        frames = base.frames_of_item[item]
        if exclude_singletons and len(frames) == 1:
            skipped += 1
            continue
        out.append((u, f, frames))
    return out, skipped


def evaluate_frame_rec(
    params: ModelParams,
    cfg: ModelConfig,
    split: SplitDataset,
    k_list=(1, 2, 3),
    exclude_singletons: bool = False,
) -> EvalReport:
    """Rank each liked frame against all frames of its parent item.

    Exhaustive and deterministic, so repeats and negative sampling do not
    apply.  Raises UnsupportedTaskError when the visual pathway is off,
    because the model then has no frame scores at all.
    """
    if cfg.visual_mode == VISUAL_OFF:
        raise UnsupportedTaskError(
            "frame evaluation needs the visual pathway; visual_mode is off"
        )
    k_list = _check_k_list(k_list)
    pairs, skipped = _frame_eval_pairs(split, exclude_singletons)
    warnings = []
    if skipped:
        warnings.append(f"skipped {skipped} single-frame items")
    if not pairs:
        warnings.append("no pairs to evaluate")
        return _empty_report("frame", "test", k_list, warnings)

    users = np.concatenate([np.full(len(fr), u, dtype=np.int64) for u, _, fr in pairs])
    frames = np.concatenate([np.array(fr, dtype=np.int64) for _, _, fr in pairs])
    scores = score_frames(users, frames, params, cfg, split.base)

    hr_sum = {k: 0.0 for k in k_list}
    ndcg_sum = {k: 0.0 for k in k_list}
    pos = 0
    for u, f, fr in pairs:
        block = scores[pos: pos + len(fr)]
        liked = block[list(fr).index(f)]
        rank = int((block > liked).sum() + (block == liked).sum())
        hr, ndcg = rank_metrics(rank, k_list)
        for k in k_list:
            hr_sum[k] += hr[k]
            ndcg_sum[k] += ndcg[k]
        pos += len(fr)

    n = float(len(pairs))
    zeros = {k: 0.0 for k in k_list}
    return EvalReport(
        task="frame",
        split_name="test",
        k_list=k_list,
        hr={k: float(hr_sum[k] / n) for k in k_list},
        ndcg={k: float(ndcg_sum[k] / n) for k in k_list},
        hr_std=dict(zeros),
        ndcg_std=dict(zeros),
        n_pairs=len(pairs),
        repeats=1,
        warnings=tuple(warnings),
    )


def random_frame_baseline(
    split: SplitDataset,
    k_list=(1, 2, 3),
    seed: int = 0,
    exclude_singletons: bool = False,
) -> EvalReport:
    """Frame evaluation with uniform random scores instead of the model's.

    The reference point for the frame task: with m frames per item its
    expected hit rate at K is K/m.
    """
    k_list = _check_k_list(k_list)
    pairs, skipped = _frame_eval_pairs(split, exclude_singletons)
    warnings = []
    if skipped:
        warnings.append(f"skipped {skipped} single-frame items")
    if not pairs:
        warnings.append("no pairs to evaluate")
        return _empty_report("frame_baseline", "test", k_list, warnings)

    rng = np.random.default_rng(seed)
    hr_sum = {k: 0.0 for k in k_list}
    ndcg_sum = {k: 0.0 for k in k_list}
    for u, f, fr in pairs:
        block = rng.random(len(fr))
        liked = block[list(fr).index(f)]
        rank = int((block > liked).sum() + (block == liked).sum())
        hr, ndcg = rank_metrics(rank, k_list)
        for k in k_list:
            hr_sum[k] += hr[k]
            ndcg_sum[k] += ndcg[k]

    n = float(len(pairs))
    zeros = {k: 0.0 for k in k_list}
    return EvalReport(
        task="frame_baseline",
        split_name="test",
        k_list=k_list,
        hr={k: float(hr_sum[k] / n) for k in k_list},
        ndcg={k: float(ndcg_sum[k] / n) for k in k_list},
        hr_std=dict(zeros),
        ndcg_std=dict(zeros),
        n_pairs=len(pairs),
        repeats=1,
        warnings=tuple(warnings),
    )

#!/usr/bin/env python3
"""
Result Verification Script

Runs directional PASS/FAIL checks over finished experiment outputs.

Modes:
    skew        sweep.csv of an interest_exponent sweep over sur, mur and mur_idw:
                tail HR@5 of MUR drops with skew, IDW recovers tail and overall
                HR@5 at the highest skew, and MS(MUR) >= MS(SUR) at every level.
    trajectory  idw_log.csv files of high-skew runs: MS rises over the
                iterations and ends high.
    movielens   summary.csv from `idwrec report` over sur, mur and mur_idw runs
                on MovieLens-1M: HR/NDCG@20 levels and head/tail behaviour.

Usage:
    python scripts/verify_results.py skew runs/<sweep>/sweep.csv
    python scripts/verify_results.py trajectory runs/*/seed_*/idw_log.csv
    python scripts/verify_results.py movielens runs/<report>/summary.csv
"""

import argparse
import csv
import sys
from collections import defaultdict
from typing import Dict, List, Tuple

import numpy as np


class Colors:
    GREEN = '\033[92m'
    RED = '\033[91m'
    BOLD = '\033[1m'
    ENDC = '\033[0m'


RESULTS: List[bool] = []


def check(name: str, ok: bool, detail: str) -> None:
    RESULTS.append(ok)
    tag = f"{Colors.GREEN}PASS{Colors.ENDC}" if ok else f"{Colors.RED}FAIL{Colors.ENDC}"
    print(f"[{tag}] {name}: {detail}")


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

def load_sweep(path: str) -> Dict[Tuple[float, str, str, str], float]:
    """Mean over seeds keyed by (axis_value, variant, split, metric)."""
    values: Dict[Tuple[float, str, str, str], List[float]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            key = (float(row["axis_value"]), row["variant"], row["split"], row["metric"])
            values[key].append(float(row["value"]))
    return {k: float(np.mean(v)) for k, v in values.items()}


def load_summary(path: str) -> Dict[Tuple[str, str, str], float]:
    with open(path, newline="", encoding="utf-8") as f:
        return {(r["variant"], r["split"], r["metric"]): float(r["mean"]) for r in csv.DictReader(f)}


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def verify_skew(path: str) -> None:
    means = load_sweep(path)
    levels = sorted({k[0] for k in means})
    if len(levels) < 2:
        check("skew levels", False, f"need at least two interest_exponent values, got {levels}")
        return
    low, high = levels[0], levels[-1]

    def get(level, variant, split, metric):
        return means.get((level, variant, split, metric), float("nan"))

    drop = get(low, "mur", "tail", "hr@5") - get(high, "mur", "tail", "hr@5")
    check("MUR tail HR@5 drops with skew", drop >= 0.10,
          f"{_pct(get(low, 'mur', 'tail', 'hr@5'))} -> {_pct(get(high, 'mur', 'tail', 'hr@5'))}")
    for split in ("tail", "overall"):
        idw, mur = get(high, "mur_idw", split, "hr@5"), get(high, "mur", split, "hr@5")
        check(f"IDW {split} HR@5 at exponent {high:g}", idw >= mur, f"MUR-IDW {_pct(idw)} vs MUR {_pct(mur)}")
    for level in levels:
        mur, sur = get(level, "mur", "items", "ms"), get(level, "sur", "items", "ms")
        check(f"MS ordering at exponent {level:g}", mur >= sur, f"MUR {mur:.3f} vs SUR {sur:.3f}")


def verify_trajectory(paths: List[str]) -> None:
    for path in paths:
        with open(path, newline="", encoding="utf-8") as f:
            ms = [float(r["ms_score"]) for r in csv.DictReader(f) if r["ms_score"] not in ("", "None")]
        if len(ms) < 2:
            check(path, False, "fewer than two MS values logged")
            continue
        first, last = ms[0], ms[-1]
        check(f"{path} MS increase", last - first >= 0.3, f"{first:.3f} -> {last:.3f}")
        check(f"{path} MS level", max(ms[:10]) >= 0.65 - 0.15, f"best {max(ms[:10]):.3f}")


def verify_movielens(path: str) -> None:
    means = load_summary(path)

    def get(variant, split, metric):
        return means.get((variant, split, metric), float("nan"))

    hr, ndcg = get("mur_idw", "overall", "hr@20"), get("mur_idw", "overall", "ndcg@20")
    check("MUR-IDW HR@20 level", abs(100 * hr - 82.65) <= 2.5, f"{_pct(hr)} (target 82.65 +/- 2.5)")
    check("MUR-IDW NDCG@20 level", abs(100 * ndcg - 49.67) <= 2.5, f"{_pct(ndcg)} (target 49.67 +/- 2.5)")
    for metric in ("hr@20", "ndcg@20"):
        idw, mur = get("mur_idw", "overall", metric), get("mur", "overall", metric)
        check(f"MUR-IDW > MUR on {metric}", idw > mur, f"{_pct(idw)} vs {_pct(mur)}")
    tail_idw, tail_mur = get("mur_idw", "tail", "ndcg@20"), get("mur", "tail", "ndcg@20")
    check("Tail NDCG@20 improves", tail_idw > tail_mur, f"{_pct(tail_idw)} vs {_pct(tail_mur)}")
    head_idw, head_mur = get("mur_idw", "head", "ndcg@20"), get("mur", "head", "ndcg@20")
    check("Head NDCG@20 within 2 points", head_mur - head_idw <= 0.02, f"{_pct(head_idw)} vs {_pct(head_mur)}")


def main() -> int:
    parser = argparse.ArgumentParser(description="Directional checks over experiment outputs")
    sub = parser.add_subparsers(dest="mode", required=True)
    sub.add_parser("skew").add_argument("sweep_csv")
    sub.add_parser("trajectory").add_argument("idw_logs", nargs="+")
    sub.add_parser("movielens").add_argument("summary_csv")
    args = parser.parse_args()

    print(f"{Colors.BOLD}Verifying '{args.mode}' results{Colors.ENDC}")
    if args.mode == "skew":
        verify_skew(args.sweep_csv)
    elif args.mode == "trajectory":
        verify_trajectory(args.idw_logs)
    else:
        verify_movielens(args.summary_csv)

    passed = sum(RESULTS)
    print(f"\n{passed}/{len(RESULTS)} checks passed")
    return 0 if RESULTS and all(RESULTS) else 1


if __name__ == "__main__":
    sys.exit(main())

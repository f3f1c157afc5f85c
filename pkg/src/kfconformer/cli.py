"""Command-line entry points: train, eval, analyze, bench.

Structured results go to stdout (JSON) or files; logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import nn_blocks as nb
from .data import DatasetFormatError, SyntheticTaskSpec, generate_synthetic, load_dataset, save_dataset, split
from .model import (METRIC_FIELDS, CheckpointError, ConfigError, ModelConfig, TrainingError, evaluate,
                    load_checkpoint, save_checkpoint, train)
from .tensor import NonFiniteError, Tensor

log = logging.getLogger("kfconformer")

ANALYZE_FIELDS = ["utt_id", "T", "U", "P", "w", "mode", "kept", "drop_ratio", "fallback"]
EVAL_KEYS = ["ter", "drop_ratio_mean", "fallback_count", "t_prime_mean"]
BENCH_KEYS = ["T", "T_prime", "dense_mults", "sparse_mults", "ratio", "dense_ms", "sparse_ms", "time_ratio"]


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    train_fraction: float = 2000 / 2200
    data_path: Optional[str] = None
    heldout_path: Optional[str] = None

    def validate(self) -> None:
        if self.model.feat_dim != self.data.feat_dim:
            raise ConfigError(f"model.feat_dim={self.model.feat_dim} != data.feat_dim={self.data.feat_dim}")
        if self.model.vocab != self.data.vocab_size:
            raise ConfigError(f"model.vocab={self.model.vocab} != data.vocab_size={self.data.vocab_size}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["data"]["silence_range"] = list(self.data.silence_range)
        d["data"]["label_len_range"] = list(self.data.label_len_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        data = dict(d.get("data", {}))
        data_known = {f.name for f in dataclasses.fields(SyntheticTaskSpec)}
        bad = set(data) - data_known
        if bad:
            raise ConfigError(f"unknown data config keys: {sorted(bad)}")
        for k in ("silence_range", "label_len_range"):
            if k in data:
                data[k] = tuple(data[k])
        try:
            spec = SyntheticTaskSpec(**data)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid data config: {e}") from None
        try:
            model = ModelConfig.from_dict(d.get("model", {}))
        except TypeError as e:
            raise ConfigError(f"invalid model config: {e}") from None
        rc = cls(model=model, data=spec, **{k: v for k, v in d.items() if k not in ("model", "data")})
        rc.validate()
        return rc


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("KFC_THREADS", "1")))
    except ValueError:
        return 1


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def write_metrics(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
        if args.seed is not None:
            raw.setdefault("model", {})["seed"] = args.seed
        rc = RunConfig.from_dict(raw)
    except (OSError, json.JSONDecodeError, ConfigError) as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if rc.data_path:
            train_set = load_dataset(rc.data_path, rc.data.feat_dim)
            heldout = load_dataset(rc.heldout_path, rc.data.feat_dim) if rc.heldout_path else []
        else:
            train_set, heldout = split(generate_synthetic(rc.data), rc.train_fraction, rc.data.seed)
    except (OSError, DatasetFormatError) as e:
        print(f"error: cannot load data: {e}", file=sys.stderr)
        return 1
    (out / "config.json").write_text(json.dumps(rc.to_dict(), indent=1))
    save_dataset(train_set, out / "train.kfc")
    save_dataset(heldout, out / "heldout.kfc")
    log.info("training %s model: %d train / %d heldout utterances", rc.model.mode, len(train_set), len(heldout))
    t0 = time.perf_counter()

    def progress(ep, row):
        log.info("epoch %d  %.1fs  %s", ep, time.perf_counter() - t0,
                 " ".join(f"{k}={row[k]:.4f}" if isinstance(row[k], float) else f"{k}={row[k]}"
                          for k in METRIC_FIELDS[1:]))

    try:
        state = train(rc.model, train_set, heldout, progress=progress)
    except (TrainingError, NonFiniteError) as e:
        print(f"error: training failed: {e}", file=sys.stderr)
        return 2
    write_metrics(state.metrics, out / "metrics.csv")
    save_checkpoint(state.model, out)
    return 0


def _load_for_eval(args):
    ckpt = Path(args.ckpt)
    model = load_checkpoint(ckpt)
    cfg_path = ckpt / "config.json"
    if cfg_path.exists():
        rc = json.loads(cfg_path.read_text())
        load_checkpoint(ckpt, ModelConfig.from_dict(rc.get("model", rc)))   # raises on mismatch
    utts = load_dataset(args.data, model.config.feat_dim)
    return model, utts


def cmd_eval(args) -> int:
    try:
        model, utts = _load_for_eval(args)
    except (OSError, ConfigError, CheckpointError, DatasetFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    c = model.config
    mode = args.mode or c.mode
    w = c.w if args.w is None else args.w
    if mode != c.mode or w != c.w:
        log.warning("evaluating with mode=%s w=%d; checkpoint was trained with mode=%s w=%d", mode, w, c.mode, c.w)
    try:
        res = evaluate(model, utts, mode=mode, w=w, kfsa_mode=args.kfsa_mode, workers=_threads())
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps({k: _jsonable(res[k]) for k in EVAL_KEYS}))
    return 0


def cmd_analyze(args) -> int:
    try:
        model, utts = _load_for_eval(args)
    except (OSError, ConfigError, CheckpointError, DatasetFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    c = model.config
    w = c.w if args.w is None else args.w
    res = evaluate(model, utts, mode=args.mode, w=w, workers=_threads())
    rows = res["rows"]
    out_rows = []
    for r in rows:
        out_rows.append({"utt_id": r["utt_id"], "T": r["T"], "U": r["U"], "P": r["P"], "w": w,
                         "mode": args.mode, "kept": r["kept"], "drop_ratio": f"{r['drop_ratio']:.6f}",
                         "fallback": int(r["fallback"])})
    n = max(len(rows), 1)
    out_rows.append({"utt_id": "summary", "T": f"{sum(r['T'] for r in rows) / n:.6f}",
                     "U": f"{sum(r['U'] for r in rows) / n:.6f}",
                     "P": f"{sum(r['P'] or 0 for r in rows) / n:.6f}", "w": w, "mode": args.mode,
                     "kept": f"{sum(r['kept'] for r in rows) / n:.6f}",
                     "drop_ratio": f"{sum(r['drop_ratio'] for r in rows) / n:.6f}",
                     "fallback": sum(int(r["fallback"]) for r in rows)})
    fh = open(args.emit, "w", newline="") if args.emit != "-" else sys.stdout
    try:
        wr = csv.DictWriter(fh, fieldnames=ANALYZE_FIELDS, lineterminator="\n")
        wr.writeheader()
        wr.writerows(out_rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def run_bench(T: int, d: int, heads: int, keep_fraction: float, repeat: int = 5, seed: int = 0) -> dict:
    """Time multi-head attention at length T against length ceil(keep_fraction*T)."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    if T < 1 or repeat < 1:
        raise ValueError("T and repeat must be >= 1")
    rng = np.random.default_rng(seed)
    params = nb.AttentionParams.init(rng, d, heads, np.float32)
    for p in (params.w_q, params.w_k, params.w_v, params.w_o):
        p.requires_grad = False
    x = rng.normal(size=(T, d)).astype(np.float32)
    t_prime = math.ceil(keep_fraction * T)

    def run(n):
        xs = Tensor(x[:n])
        nb.multi_head_attention(xs, None, params, tag="bench")    # untimed warm-up
        times = []
        for _ in range(repeat):
            with nb.count_multiplies() as cnt:
                t0 = time.perf_counter()
                nb.multi_head_attention(xs, None, params, tag="bench")
                times.append((time.perf_counter() - t0) * 1e3)
        return cnt.total, float(np.median(times))

    dense_mults, dense_ms = run(T)
    sparse_mults, sparse_ms = run(t_prime)
    return {"T": T, "T_prime": t_prime, "dense_mults": dense_mults, "sparse_mults": sparse_mults,
            "ratio": sparse_mults / dense_mults, "dense_ms": dense_ms, "sparse_ms": sparse_ms,
            "time_ratio": sparse_ms / dense_ms if dense_ms > 0 else float("nan")}


def cmd_bench(args) -> int:
    try:
        res = run_bench(args.T, args.d, args.heads, args.keep_fraction, args.repeat, args.seed)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps({k: res[k] for k in BENCH_KEYS}))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kfc", description="Key-frame Conformer experiments")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "greedy-decode TER and drop statistics"),
                          ("analyze", cmd_analyze, "per-utterance key-frame CSV")):
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--w", type=int)
        if name == "eval":
            e.add_argument("--mode", choices=["dense", "kfsa", "kfds"])
            e.add_argument("--kfsa-mode", choices=["window+k", "k", "window"])
        else:
            e.add_argument("--mode", choices=["kfsa", "kfds"], default="kfds")
            e.add_argument("--emit", required=True, help="CSV path, or - for stdout")
        e.set_defaults(func=fn)

    b = sub.add_parser("bench", help="dense vs reduced-length attention cost")
    b.add_argument("--T", type=int, default=1024)
    b.add_argument("--d", type=int, default=256)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--keep-fraction", type=float, default=0.4)
    b.add_argument("--repeat", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

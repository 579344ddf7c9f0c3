"""Command-line entry point: ``seqalign {train,eval,generate,sweep}``.

Exit codes: 0 success, 1 runtime failure, 2 config or I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import gc
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .embedding_space import (EmbeddingError, EmbeddingSpace, build_candidates, load_embeddings,
                              load_embeddings_binary, load_matrix, save_embeddings)
from .environment import AlignmentEnv, ConfigError, Schedule
from .eval_bench import (AlignmentResult, SyntheticParams, generate_synthetic, rank_eval, rl_eval,
                         seq_eval, split_alignment)
from .kg_store import AlignmentSet, KGFormatError, AlignmentError, KnowledgeGraph, load_alignment, load_kg, write_lines
from .policy_net import Policy, PolicyError, load_checkpoint, save_checkpoint
from .trainer import TrainerConfig, format_metrics_csv, train

log = logging.getLogger("seqalign")

STRATEGIES = ("ranking", "seq", "rl")
TABLE_COLUMNS = {"ranking": "Orig", "seq": "Seq", "rl": "RLEA"}
SWEEP_KNOBS = ("candidate_k", "threshold", "penalty")


class UsageError(Exception):
    """Config or I/O problem; maps to exit code 2."""


# -- configuration -----------------------------------------------------------

@dataclass
class DataPaths:
    kg1_triples: str | None = None
    kg2_triples: str | None = None
    embeddings1: Any = None      # text path, or {"matrix": ..., "ids": ...}
    embeddings2: Any = None
    projection: str | None = None
    train_links: str | None = None
    valid_links: str | None = None
    test_links: str | None = None


@dataclass
class EvalConfig:
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    seq_threshold: float = 0.5
    timing_repeats: int = 25


@dataclass
class RunConfig:
    data: DataPaths = field(default_factory=DataPaths)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthetic: SyntheticParams = field(default_factory=SyntheticParams)
    split: list[float] = field(default_factory=lambda: [0.2, 0.1, 0.7])
    out: str = "runs/default"
    seed: int = 0
    base_dir: str = field(default=".", metadata={"serialize": False})

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                data=DataPaths(**(d.get("data") or {})),
                trainer=TrainerConfig.from_dict(d.get("trainer") or {}),
                eval=EvalConfig(**(d.get("eval") or {})),
                synthetic=SyntheticParams(**(d.get("synthetic") or {})),
                split=list(d.get("split", [0.2, 0.1, 0.7])),
                out=str(d.get("out", "runs/default")),
                seed=int(d.get("seed", 0)),
                base_dir=base_dir,
            )
        except TypeError as exc:
            raise UsageError(f"bad config: {exc}") from None

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def validate(self) -> "RunConfig":
        self.trainer.seed = self.seed
        try:
            self.trainer.validate()
            self.synthetic.validate()
        except (ConfigError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        bad = [s for s in self.eval.strategies if s not in STRATEGIES]
        if bad or not self.eval.strategies:
            raise UsageError(f"strategies must be a non-empty subset of {STRATEGIES}, got {self.eval.strategies}")
        if not -1.0 <= self.eval.seq_threshold <= 1.0:
            raise UsageError("eval.seq_threshold must lie in [-1, 1]")
        if len(self.split) != 3 or any(x < 0 for x in self.split) or sum(self.split) <= 0:
            raise UsageError("split must be three non-negative fractions")
        return self


def _parse_scalar(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """``key.sub=value`` assignments; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot override inside non-mapping key {key!r}")
        node[parts[-1]] = _parse_scalar(value)
    return d


def load_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict = {}
    base = "."
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse {p}: {exc}") from None
        base = str(p.parent)
    return RunConfig.from_dict(apply_overrides(raw, overrides), base)


# -- data loading ------------------------------------------------------------

@dataclass
class Dataset:
    kg1: KnowledgeGraph
    kg2: KnowledgeGraph
    space: EmbeddingSpace
    train: AlignmentSet
    valid: AlignmentSet | None
    test: AlignmentSet


def _require(cfg: RunConfig, name: str) -> Path:
    p = cfg.resolve(getattr(cfg.data, name))
    if p is None:
        raise UsageError(f"data.{name} is required")
    if not p.is_file():
        raise UsageError(f"data.{name}: file not found: {p}")
    return p


def _load_vectors(cfg: RunConfig, name: str, kg: KnowledgeGraph) -> np.ndarray:
    entry = getattr(cfg.data, name)
    if isinstance(entry, dict):
        mat, ids = cfg.resolve(entry.get("matrix")), cfg.resolve(entry.get("ids"))
        for p in (mat, ids):
            if p is None or not p.is_file():
                raise UsageError(f"data.{name}: file not found: {p}")
        return load_embeddings_binary(mat, ids, kg)
    return load_embeddings(_require(cfg, name), kg)


def load_dataset(cfg: RunConfig) -> Dataset:
    try:
        kg1 = load_kg(_require(cfg, "kg1_triples"))
        kg2 = load_kg(_require(cfg, "kg2_triples"))
        e1 = _load_vectors(cfg, "embeddings1", kg1)
        e2 = _load_vectors(cfg, "embeddings2", kg2)
        proj = None
        if cfg.data.projection is not None:
            proj = load_matrix(_require(cfg, "projection"))
        space = EmbeddingSpace.from_matrices(e1, e2, proj)
        train_set = load_alignment(_require(cfg, "train_links"), kg1, kg2, "train")
        valid = None
        if cfg.data.valid_links is not None:
            valid = load_alignment(_require(cfg, "valid_links"), kg1, kg2, "valid")
        test = load_alignment(_require(cfg, "test_links"), kg1, kg2, "test")
    except (KGFormatError, AlignmentError, EmbeddingError, OSError) as exc:
        raise UsageError(str(exc)) from None
    return Dataset(kg1, kg2, space, train_set, valid, test)


# -- experiments -------------------------------------------------------------

def run_strategy(name: str, data: Dataset, cfg: RunConfig, policy: Policy | None = None,
                 k: int | None = None) -> AlignmentResult:
    k = cfg.trainer.k if k is None else k
    table = build_candidates(data.space, data.test.sources, data.test.targets, k)
    if name == "ranking":
        return rank_eval(table, data.test)
    if name == "seq":
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[3])
        return seq_eval(table, data.test, cfg.eval.seq_threshold, rng)
    if policy is None:
        raise UsageError("strategy 'rl' needs a checkpoint")
    env = AlignmentEnv(table, data.test, cfg.trainer.schedule, mode="eval")
    return rl_eval(policy, env, data.test)


def timed_rl_eval(policy: Policy, data: Dataset, cfg: RunConfig, k: int) -> tuple[AlignmentResult, float]:
    """RL evaluation plus the fastest of ``timing_repeats`` wall-clock measurements
    (candidate construction + one eval episode).  GC is paused while timing, as timeit does."""
    best, result = float("inf"), None
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(max(1, cfg.eval.timing_repeats)):
            t0 = time.perf_counter()
            result = run_strategy("rl", data, cfg, policy, k)
            best = min(best, time.perf_counter() - t0)
    finally:
        if was_enabled:
            gc.enable()
    return result, best


def sweep(data: Dataset, cfg: RunConfig, knob: str, values: Sequence[float]) -> list[dict]:
    if knob not in SWEEP_KNOBS:
        raise UsageError(f"knob must be one of {SWEEP_KNOBS}")
    if not values:
        raise UsageError("sweep needs at least one value")
    rows = []
    for v in values:
        c = replace(cfg, trainer=replace(cfg.trainer), eval=replace(cfg.eval))
        row: dict[str, Any] = {"knob": knob, "value": v}
        if knob == "threshold":
            c.eval.seq_threshold = float(v)
            c.validate()
            t0 = time.perf_counter()
            res = run_strategy("seq", data, c)
            row["eval_seconds"] = time.perf_counter() - t0
            row["train_seconds"] = 0.0
        else:
            if knob == "candidate_k":
                c.trainer.k = int(v)
            else:
                c.trainer.penalty = float(v)
            c.validate()
            t0 = time.perf_counter()
            trained = train(c.trainer, data.kg1, data.kg2, data.space, data.train, data.valid)
            row["train_seconds"] = time.perf_counter() - t0
            res, row["eval_seconds"] = timed_rl_eval(trained.policy, data, c, c.trainer.k)
        row.update(asdict(res.metrics))
        rows.append(row)
    return rows


# -- output helpers ----------------------------------------------------------

def _csv(rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def summary_table(results: Sequence[AlignmentResult]) -> str:
    """Metric rows x strategy columns, in the Orig / Seq / RLEA order."""
    ordered = sorted(results, key=lambda r: STRATEGIES.index(r.strategy))
    rows = [["metric"] + [TABLE_COLUMNS[r.strategy] for r in ordered]]
    for m in ("hits_at_1", "precision", "recall", "f1"):
        rows.append([m] + [f"{getattr(r.metrics, m):.3f}" for r in ordered])
    return _csv(rows)


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    return path


def _manifest(cfg: RunConfig, command: str, **extra) -> str:
    doc = {"command": command, "version": __version__, "seed": cfg.seed, "config": cfg.to_dict(), **extra}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- commands ----------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> Path:
    cfg.validate()
    data = load_dataset(cfg)
    out = _prepare_out(cfg.resolve(cfg.out))
    result = train(cfg.trainer, data.kg1, data.kg2, data.space, data.train, data.valid)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(ckpt, result.policy.params, cfg.seed,
                    {"use_mie": result.policy.use_mie, "k": cfg.trainer.k})
    (out / "metrics.csv").write_text(format_metrics_csv(result.log), encoding="utf-8")
    (out / "manifest.json").write_text(
        _manifest(cfg, "train", checkpoint=ckpt.name, episodes=len(result.log),
                  best_valid_hits=result.best_valid_hits, best_episode=result.best_episode),
        encoding="utf-8")
    return ckpt


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> list[AlignmentResult]:
    cfg.validate()
    policy = None
    if "rl" in cfg.eval.strategies:
        if checkpoint is None or not Path(checkpoint).is_file():
            raise UsageError(f"strategy 'rl' requires an existing checkpoint, got {checkpoint!r}")
        params, meta = load_checkpoint(checkpoint)
        policy = Policy(params, use_mie=meta.get("use_mie", True))
    data = load_dataset(cfg)
    if policy is not None:
        try:
            policy.bind(data.kg1, data.space.e1, data.kg2, data.space.e2)
        except PolicyError as exc:
            raise UsageError(str(exc)) from None
    out = _prepare_out(cfg.resolve(cfg.out))
    results = [run_strategy(s, data, cfg, policy) for s in cfg.eval.strategies]
    names1, names2 = data.kg1.entities.names, data.kg2.entities.names
    doc = {"strategies": {r.strategy: r.to_dict(names1, names2) for r in results}, "seed": cfg.seed}
    (out / "results.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "summary.csv").write_text(summary_table(results), encoding="utf-8")
    return results


def cmd_generate(cfg: RunConfig) -> Path:
    cfg.validate()
    out = _prepare_out(cfg.resolve(cfg.out))
    task = generate_synthetic(cfg.synthetic, np.random.default_rng(cfg.seed))
    train_set, valid, test = split_alignment(task.truth, cfg.split, np.random.default_rng([cfg.seed, 1]))
    write_lines(out / "kg1_rel_triples", task.triples1)
    write_lines(out / "kg2_rel_triples", task.triples2)
    write_lines(out / "ent_links", task.truth.to_lines(task.kg1, task.kg2))
    for name, part in (("train_links", train_set), ("valid_links", valid), ("test_links", test)):
        write_lines(out / name, part.to_lines(task.kg1, task.kg2))
    save_embeddings(out / "embeddings1.txt", task.kg1.entities.names, task.space.e1)
    save_embeddings(out / "embeddings2.txt", task.kg2.entities.names, task.space.e2)
    run_cfg = replace(cfg, data=DataPaths(
        kg1_triples="kg1_rel_triples", kg2_triples="kg2_rel_triples",
        embeddings1="embeddings1.txt", embeddings2="embeddings2.txt",
        train_links="train_links", valid_links="valid_links" if len(valid) else None,
        test_links="test_links"), out="run")
    (out / "config.yaml").write_text(run_cfg.dump(), encoding="utf-8")
    return out


def cmd_sweep(cfg: RunConfig, knob: str, values: Sequence[float]) -> list[dict]:
    cfg.validate()
    if knob not in SWEEP_KNOBS:
        raise UsageError(f"knob must be one of {SWEEP_KNOBS}")
    if not values:
        raise UsageError("sweep needs at least one value")
    data = load_dataset(cfg)
    out = _prepare_out(cfg.resolve(cfg.out))
    rows = sweep(data, cfg, knob, values)
    cols = ["knob", "value", "hits_at_1", "precision", "recall", "f1", "train_seconds", "eval_seconds"]
    (out / "sweep.csv").write_text(_csv([cols] + [[r[c] for c in cols] for r in rows]), encoding="utf-8")
    return rows


# -- argument parsing --------------------------------------------------------

def _values(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad value list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqalign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--out", help="output directory (overrides config 'out')")
        sp.add_argument("--seed", type=int, help="root random seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, e.g. trainer.episodes=50")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("train", help="train a policy")
    common(sp)
    sp.add_argument("--ablation", choices=["no-mie", "rand-env"], action="append", default=[])

    sp = sub.add_parser("eval", help="evaluate strategies on the test alignment")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--strategies", help="comma-separated subset of ranking,seq,rl")

    sp = sub.add_parser("generate", help="write a synthetic confusable dataset")
    common(sp)

    sp = sub.add_parser("sweep", help="sweep one knob and record metrics and wall-clock")
    common(sp)
    sp.add_argument("--knob", required=True, choices=SWEEP_KNOBS)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--ablation", choices=["no-mie", "rand-env"], action="append", default=[])
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.out is not None:
            overrides.append(f"out={Path(args.out).resolve()}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        for ab in getattr(args, "ablation", []):
            overrides.append("trainer.disable_mie=true" if ab == "no-mie" else "trainer.random_env=true")
        if getattr(args, "strategies", None):
            overrides.append(f"eval.strategies=[{args.strategies}]")
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            ckpt = cmd_train(cfg)
            print(f"wrote {ckpt}")
        elif args.command == "eval":
            for r in cmd_eval(cfg, args.checkpoint):
                print(f"{r.strategy:8s} hits@1={r.metrics.hits_at_1:.3f} f1={r.metrics.f1:.3f}")
        elif args.command == "generate":
            print(f"wrote {cmd_generate(cfg)}")
        elif args.command == "sweep":
            for row in cmd_sweep(cfg, args.knob, _values(args.values)):
                print(f"{row['knob']}={row['value']:g} hits@1={row['hits_at_1']:.3f} "
                      f"eval={row['eval_seconds'] * 1e3:.1f}ms")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

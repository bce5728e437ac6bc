"""Command-line entry point: ``vitcat <command> [--config F] [--seed N] [--out DIR]``.

Commands chain through files in the output directory::

    gen-trace   -> trace.csv
    preprocess  -> samples/node<i>.bin, stats.csv
    train       -> checkpoints/node<i>.vckp, metrics.csv
    eval        -> accuracy.csv
    simulate    -> sim.csv, sim_summary.csv
    gradcheck   -> gradcheck.csv
    variants    -> variants.csv

Every command also writes ``manifest_<command>.txt`` holding the resolved
config, the seed and a wall-clock timestamp.  Nothing else carries a timestamp,
so the CSVs are byte-identical for identical config and seed.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


from vitcat import cachesim as cs
from vitcat.gradcheck import run_gradcheck
from vitcat.model import REFERENCE_VARIANTS, ViTCAT, ViTConfig, count_params, load_checkpoint
from vitcat.pipeline import (
    LabelParams,
    chronological_split,
    node_samples,
    read_samples,
    write_samples,
)
from vitcat.tensor import NonFiniteError
from vitcat.trace import (
    SyntheticSpec,
    TraceFormatError,
    generate_synthetic,
    parse_trace,
    partition_by_node,
    write_trace,
)
from vitcat.train import TrainConfig, evaluate, train, write_metrics

log = logging.getLogger("vitcat")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _policies(text: str) -> tuple[str, ...]:
    names = tuple(p.strip() for p in text.split(",") if p.strip())
    bad = [p for p in names if p not in cs.POLICIES]
    if bad or not names:
        raise ValueError(f"policies must be a comma list drawn from {cs.POLICIES}")
    return names


# key: (parser, default, help)
SCHEMA: dict[str, tuple[Callable[[str], Any], str, str]] = {
    "seed": (int, "0", "master seed; --seed overrides"),
    "out_dir": (str, "runs/default", "output directory; --out overrides"),
    # trace
    "trace_source": (str, "synthetic", "'synthetic' or a path to a trace file"),
    "trace_format": (str, "generic_csv", "generic_csv or movielens_ratings"),
    "n_contents": (int, "100", "synthetic catalogue size"),
    "n_events": (int, "100000", "synthetic request count"),
    "zipf_alpha": (float, "1.0", "synthetic Zipf exponent"),
    "n_regimes": (int, "2", "synthetic popularity regimes"),
    "horizon": (int, "100000", "synthetic time span in seconds"),
    "n_users": (int, "600", "synthetic user count"),
    "n_zips": (int, "60", "synthetic zip-code count"),
    "n_nodes": (int, "6", "caching nodes"),
    # pipeline
    "resolution": (int, "100", "seconds per request-matrix row"),
    "window_len": (int, "10", "rows per window (W)"),
    "l_history": (int, "8", "history windows per sample (L)"),
    "t_s": (int, "2", "short horizon of the MC path"),
    "k_top": (int, "0", "cache capacity K; 0 means ceil(10% of contents)"),
    "train_frac": (float, "0.8", "chronological train fraction"),
    # model
    "variant": (int, "0", "reference variant 1-6, or 0 for the fields below"),
    "d_model": (int, "16", "token width d"),
    "n_heads": (int, "2", "attention heads"),
    "n_layers": (int, "1", "encoder layers per path"),
    "mlp_size": (int, "32", "encoder MLP hidden width"),
    "mlp_layers": (int, "1", "encoder MLP hidden layers"),
    "fusion": (str, "cross_attention", "cross_attention, fully_connected or self_attention"),
    "activation": (str, "gelu", "encoder MLP activation: gelu or relu"),
    # training
    "learning_rate": (float, "1e-3", "Adam step size"),
    "weight_decay": (float, "0.01", "decoupled weight decay"),
    "epochs": (int, "30", "training epochs"),
    "batch_size": (int, "16", "mini-batch size"),
    # simulation and checks
    "policies": (_policies, "vitcat,lru,lfu,popcaching,clairvoyant", "policies to simulate"),
    "gradcheck_seeds": (int, "20", "seeds for the gradient suite"),
    "variants_train": (_bool, "false", "also train each variant on variants_node"),
    "variants_node": (int, "0", "node whose samples the variant grid trains on"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]
    text: dict[str, str]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def out(self) -> Path:
        return Path(self.values["out_dir"])

    def to_text(self) -> str:
        return "".join(f"{k}={self.text[k]}\n" for k in SCHEMA)


def parse_config(text: str = "", overrides: dict[str, str] | None = None) -> RunConfig:
    raw = {k: default for k, (_, default, _) in SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key=value")
        if key not in SCHEMA:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        raw[key] = value
    raw.update(overrides or {})
    values = {}
    for key, value in raw.items():
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from None
    return RunConfig(values, raw)


def load_run_config(path: str | None, seed: int | None, out: str | None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    overrides = {}
    if seed is not None:
        overrides["seed"] = str(seed)
    if out is not None:
        overrides["out_dir"] = out
    return parse_config(text, overrides)


# -- shared plumbing ------------------------------------------------------

def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def fmt(x: float) -> str:
    return f"{x:.10g}"


def write_manifest(rc: RunConfig, command: str) -> Path:
    path = rc.out / f"manifest_{command}.txt"
    stamp = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    path.write_text(f"command={command}\ntimestamp={stamp}\n{rc.to_text()}", encoding="utf-8")
    return path


def trace_path(rc: RunConfig) -> Path:
    if rc["trace_source"] == "synthetic":
        return rc.out / "trace.csv"
    return Path(rc["trace_source"])


def load_trace(rc: RunConfig):
    path = trace_path(rc)
    if not path.exists():
        hint = " (run gen-trace first)" if rc["trace_source"] == "synthetic" else ""
        raise FileNotFoundError(f"trace {path} not found{hint}")
    fmt_name = "generic_csv" if rc["trace_source"] == "synthetic" else rc["trace_format"]
    return parse_trace(path, fmt_name, rc["n_nodes"])


def capacity(rc: RunConfig, n_contents: int) -> int:
    return rc["k_top"] or cs.default_capacity(n_contents)


def model_config(rc: RunConfig, n_contents: int, variant: int | None = None) -> ViTConfig:
    try:
        return _model_config(rc, n_contents, variant)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"model settings: {exc}") from None


def _model_config(rc: RunConfig, n_contents: int, variant: int | None) -> ViTConfig:
    base = dict(
        l_history=rc["l_history"],
        n_contents=n_contents,
        t_s=rc["t_s"],
        k_top=capacity(rc, n_contents),
        fusion=rc["fusion"],
        activation=rc["activation"],
    )
    variant = rc["variant"] if variant is None else variant
    if variant:
        if variant not in REFERENCE_VARIANTS:
            raise ConfigError(f"variant must be 0 or one of {sorted(REFERENCE_VARIANTS)}")
        return ViTConfig.variant(variant, **base)
    return ViTConfig(
        d_model=rc["d_model"],
        n_heads=rc["n_heads"],
        n_layers=rc["n_layers"],
        mlp_size=rc["mlp_size"],
        mlp_layers=rc["mlp_layers"],
        **base,
    )


def train_config(rc: RunConfig) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=rc["learning_rate"],
            weight_decay=rc["weight_decay"],
            epochs=rc["epochs"],
            batch_size=rc["batch_size"],
            seed=rc["seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"training settings: {exc}") from None


def node_windows(rc: RunConfig):
    """Per-node windowed matrices and samples, on the trace-wide clock."""
    events, meta = load_trace(rc)
    k = capacity(rc, meta.n_contents)
    params = LabelParams(k, rc["l_history"])
    try:
        params.validate(meta.n_contents)
    except ValueError as exc:
        raise ConfigError(f"label settings: {exc}") from None
    out = []
    for node, node_events in enumerate(partition_by_node(events, rc["n_nodes"])):
        if not node_events:
            out.append((node, node_events, None, []))
            continue
        wm, samples = node_samples(
            node_events, params, rc["resolution"], rc["window_len"], meta.n_contents, meta.t_min, meta.t_max
        )
        out.append((node, node_events, wm, samples))
    return meta, k, out


def sample_path(rc: RunConfig, node: int) -> Path:
    return rc.out / "samples" / f"node{node}.bin"


def checkpoint_path(rc: RunConfig, node: int) -> Path:
    return rc.out / "checkpoints" / f"node{node}.vckp"


def node_ids(rc: RunConfig) -> list[int]:
    return [n for n in range(rc["n_nodes"]) if sample_path(rc, n).exists()]


def split(rc: RunConfig, samples):
    return chronological_split(samples, rc["train_frac"])


# -- commands ---------------------------------------------------------------

def cmd_gen_trace(rc: RunConfig) -> None:
    spec = SyntheticSpec(
        n_contents=rc["n_contents"],
        n_events=rc["n_events"],
        zipf_alpha=rc["zipf_alpha"],
        n_regimes=rc["n_regimes"],
        horizon=rc["horizon"],
        seed=rc["seed"],
        n_users=rc["n_users"],
        n_zips=rc["n_zips"],
    )
    write_trace(generate_synthetic(spec), rc.out / "trace.csv")


def cmd_preprocess(rc: RunConfig) -> None:
    meta, k, nodes = node_windows(rc)
    (rc.out / "samples").mkdir(exist_ok=True)
    rows = []
    for node, events, wm, samples in nodes:
        path = sample_path(rc, node)
        if len(samples) < 2:
            log.warning("node %d has %d samples; skipped", node, len(samples))
            path.unlink(missing_ok=True)
            rows.append([node, len(events), wm.n_windows if wm else 0, len(samples), 0, 0])
            continue
        write_samples(samples, k, path)
        tr, te = split(rc, samples)
        rows.append([node, len(events), wm.n_windows, len(samples), len(tr), len(te)])
    write_csv(
        rc.out / "stats.csv",
        ["node_id", "n_events", "n_windows", "n_samples", "n_train", "n_test"],
        rows,
    )
    if not any(r[3] >= 2 for r in rows):
        raise ValueError("no node produced enough windows for a train/test split")


def _read_node(rc: RunConfig, node: int):
    samples, k = read_samples(sample_path(rc, node))
    return samples, k


def _require_nodes(rc: RunConfig) -> list[int]:
    nodes = node_ids(rc)
    if not nodes:
        raise FileNotFoundError(f"no sample files under {rc.out / 'samples'} (run preprocess first)")
    return nodes


def cmd_train(rc: RunConfig) -> None:
    (rc.out / "checkpoints").mkdir(exist_ok=True)
    history = []
    for node in _require_nodes(rc):
        samples, _ = _read_node(rc, node)
        cfg = model_config(rc, samples[0].x.shape[1])
        tr, te = split(rc, samples)
        model, hist = train(ViTCAT.initialize(cfg, rc["seed"]), tr, train_config(rc), te, node)
        model.save(checkpoint_path(rc, node))
        history += hist
        log.info("node %d: final test top-K accuracy %.4f", node, hist[-1].topk_accuracy)
    write_metrics(history, rc.out / "metrics.csv")


def _load_model(rc: RunConfig, node: int) -> ViTCAT:
    path = checkpoint_path(rc, node)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found (run train first)")
    return load_checkpoint(path)


def cmd_eval(rc: RunConfig) -> None:
    rows = []
    total = {"train": [0, 0.0, 0.0], "test": [0, 0.0, 0.0]}
    for node in _require_nodes(rc):
        samples, _ = _read_node(rc, node)
        model = _load_model(rc, node)
        for name, part in zip(("train", "test"), split(rc, samples)):
            loss, acc = evaluate(model, part)
            rows.append([node, name, len(part), fmt(loss), fmt(acc)])
            t = total[name]
            t[0] += len(part)
            t[1] += loss * len(part)
            t[2] += acc * len(part)
    for name, (n, loss, acc) in total.items():
        rows.append(["all", name, n, fmt(loss / n), fmt(acc / n)])
    write_csv(rc.out / "accuracy.csv", ["node_id", "split", "n_samples", "loss", "topk_accuracy"], rows)


def simulate(rc: RunConfig) -> cs.SimReport:
    """Score every configured policy on each node's test windows."""
    _, k, nodes = node_windows(rc)
    report = cs.SimReport()
    policies = rc["policies"]
    L = rc["l_history"]
    for node, events, wm, samples in nodes:
        if len(samples) < 2:
            continue
        start = split(rc, samples)[1][0].u
        for policy in policies:
            if policy == "vitcat":
                model = _load_model(rc, node)
                res = cs.simulate_refresh_policy(
                    wm, lambda h: cs.vitcat_choose(model, h, k), k, L, "vitcat", node, start
                )
            elif policy == "popcaching":
                res = cs.simulate_refresh_policy(
                    wm, lambda h: cs.popcaching_predict(h, k), k, L, "popcaching", node, start
                )
            elif policy == "clairvoyant":
                res = cs.simulate_clairvoyant(wm, k, L, node, start)
            else:
                replay = cs.lru_replay if policy == "lru" else cs.lfu_replay
                res = replay(events, k, wm, node).restrict(start)
            report.add(res)
    return report


def cmd_simulate(rc: RunConfig) -> None:
    report = simulate(rc)
    if not report.results:
        raise ValueError("no node has enough windows to simulate")
    report.write_csv(rc.out / "sim.csv")
    report.write_summary(rc.out / "sim_summary.csv")


def cmd_gradcheck(rc: RunConfig) -> None:
    cfg = ViTConfig(fusion=rc["fusion"], activation=rc["activation"])
    rows, seconds = run_gradcheck(range(rc["gradcheck_seeds"]), cfg)
    log.info("gradient suite: %d checks in %.1f s", len(rows), seconds)
    write_csv(
        rc.out / "gradcheck.csv",
        ["check", "seed", "rel_error", "tolerance", "pass"],
        [[r.check, r.seed, f"{r.rel_error:.3e}", f"{r.tolerance:g}", int(r.passed)] for r in rows],
    )
    failed = [r for r in rows if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.rel_error / r.tolerance)
        raise FloatingPointError(
            f"{len(failed)} gradient checks failed; worst {worst.check} seed {worst.seed} "
            f"rel. error {worst.rel_error:.3e}"
        )


def cmd_variants(rc: RunConfig) -> None:
    samples = None
    if rc["variants_train"]:
        path = sample_path(rc, rc["variants_node"])
        if not path.exists():
            raise FileNotFoundError(f"sample file {path} not found (run preprocess first)")
        samples, _ = read_samples(path)
        n_contents = samples[0].x.shape[1]
    else:
        n_contents = rc["n_contents"]
    rows = []
    for vid in sorted(REFERENCE_VARIANTS):
        cfg = model_config(rc, n_contents, vid)
        acc = ""
        if samples is not None:
            tr, te = split(rc, samples)
            model, hist = train(ViTCAT.initialize(cfg, rc["seed"]), tr, train_config(rc), te)
            acc = fmt(hist[-1].topk_accuracy)
        rows.append([vid, cfg.n_layers, cfg.d_model, cfg.mlp_layers, cfg.mlp_size, cfg.n_heads,
                     count_params(cfg), acc])
    write_csv(
        rc.out / "variants.csv",
        ["model", "n_layers", "d_model", "mlp_layers", "mlp_size", "n_heads", "params", "topk_accuracy"],
        rows,
    )


COMMANDS: dict[str, Callable[[RunConfig], None]] = {
    "gen-trace": cmd_gen_trace,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
    "variants": cmd_variants,
}

# exit codes per failure class
EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4, 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitcat", description=__doc__.split("\n", 1)[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", help="overrides the config out_dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = load_run_config(args.config, args.seed, args.out)
        rc.out.mkdir(parents=True, exist_ok=True)
        write_manifest(rc, args.command)
        COMMANDS[args.command](rc)
    except ConfigError as exc:
        return _fail(f"bad config: {exc}", EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail(f"missing file: {exc}", EXIT_MISSING)
    except (NonFiniteError, FloatingPointError) as exc:
        return _fail(f"numerical failure: {exc}", EXIT_NUMERIC)
    except (TraceFormatError, ValueError) as exc:
        return _fail(f"invalid data: {exc}", EXIT_DATA)
    return 0


def _fail(message: str, code: int) -> int:
    print(f"vitcat: {message}".splitlines()[0], file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

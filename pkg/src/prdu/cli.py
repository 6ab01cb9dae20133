"""Command-line entry point: ``prdu {gen,train,eval,grid,report}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, TrainConfig, parse_config
from .data import CorpusError, SynthSpec, generate_synthetic, load_corpus, make_examples, save_corpus
from .model import MODES, load_checkpoint, save_checkpoint
from .training import evaluate, format_record, train

log = logging.getLogger("prdu")

CONFIG_FIELDS = [f.name for f in dataclasses.fields(TrainConfig)]


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def synth_spec_from(arg: str, overrides: dict) -> SynthSpec:
    values: dict = {}
    if arg != "default":
        text = Path(arg).read_text(encoding="utf-8")
        names = {f.name: f.type for f in dataclasses.fields(SynthSpec)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in names:
                raise ConfigError(f"{key}: unknown synthetic-spec key ({arg}:{lineno})")
            values[key] = float(value) if names[key] == "float" else int(value)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SynthSpec(**values)


def cmd_gen(args) -> int:
    spec = synth_spec_from(
        args.spec,
        {"alpha_past": args.alpha_past, "alpha_future": args.alpha_future, "n_topics": args.topics, "vocab_size": args.vocab},
    )
    sessions = generate_synthetic(spec, args.sessions, args.seed, prefix=args.prefix)
    save_corpus(sessions, args.out)
    log.info("wrote %d sessions to %s", len(sessions), args.out)
    return 0


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def _load(cfg: TrainConfig, path: str):
    vocab = cfg.vocab_size if cfg.input_mode == "tokens" else None
    return load_corpus(path, n_labels=cfg.n_labels, vocab_size=vocab)


def run_training(cfg: TrainConfig) -> dict:
    """Train one configuration, writing the log (config line first) and checkpoints."""
    if not cfg.corpus:
        raise ConfigError("corpus: required")
    sessions = _load(cfg, cfg.corpus)
    test = _load(cfg, cfg.test_corpus) if cfg.test_corpus else None
    out = open(cfg.log, "w", encoding="utf-8", newline="\n") if cfg.log else None
    try:
        write = out.write if out else sys.stdout.write
        write(json.dumps({"config": cfg.to_dict()}, separators=(",", ":")) + "\n")
        result = train(cfg, sessions, test, on_record=lambda rec: write(format_record(rec) + "\n"))
    finally:
        if out:
            out.close()
    if cfg.checkpoint:
        meta = {"mode": cfg.mode, "ws": cfg.ws, "fw": cfg.fw, "best_epoch": result.best_epoch, "seed_init": cfg.seed_init}
        save_checkpoint(result.best, cfg.checkpoint, meta)
        save_checkpoint(result.model, cfg.checkpoint + ".final", meta)
    return {"best_epoch": result.best_epoch, "records": len(result.log)}


def config_from_args(args) -> TrainConfig:
    overrides = {name: getattr(args, name, None) for name in CONFIG_FIELDS}
    return parse_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    run_training(cfg)
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    mode = args.mode or meta.get("mode", "TW-PH")
    ws = args.ws if args.ws is not None else meta.get("ws", 3)
    fw = args.fw if args.fw is not None else meta.get("fw", "all")
    mc = model.config
    sessions = load_corpus(args.corpus, n_labels=mc.n_labels, vocab_size=mc.vocab_size if mc.input_mode == "tokens" else None)
    m = evaluate(model, make_examples(sessions, int(ws), fw), mode)
    print(json.dumps({"mode": mode, "ws": int(ws), "fw": fw, **dataclasses.asdict(m)}))
    return 0


# ---------------------------------------------------------------------------
# grid / report
# ---------------------------------------------------------------------------


def cell_name(mode: str, ws: int, seed: int) -> str:
    return f"{mode}_ws{ws}_seed{seed}"


def grid_configs(base: TrainConfig, modes: Sequence[str], ws_list: Sequence[int], seeds: Sequence[int], out_dir) -> list[TrainConfig]:
    logs = Path(out_dir) / "logs"
    cfgs = []
    for mode in modes:
        for ws in ws_list:
            for seed in seeds:
                cfgs.append(
                    base.replace(
                        mode=mode,
                        ws=ws,
                        seed_init=seed,
                        seed_shuffle=seed,
                        seed_dropout=seed,
                        seed_gumbel=seed,
                        log=str(logs / f"{cell_name(mode, ws, seed)}.jsonl"),
                        checkpoint="",
                    )
                )
    return cfgs


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_grid(args) -> int:
    base = config_from_args(args)
    modes = [m.strip() for m in args.modes.split(",")]
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"modes: unknown mode {m!r}")
    cfgs = grid_configs(base, modes, _int_list(args.ws_list), _int_list(args.seeds), args.out)
    (Path(args.out) / "logs").mkdir(parents=True, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            list(pool.map(run_training, cfgs))
    else:
        for i, cfg in enumerate(cfgs, 1):
            log.info("cell %d/%d: %s ws=%d seed=%d", i, len(cfgs), cfg.mode, cfg.ws, cfg.seed_init)
            run_training(cfg)
    print(write_report(args.out))
    return 0


def read_log(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "config" not in lines[0]:
        raise ValueError(f"{path}: log does not start with a config record")
    return lines[0]["config"], lines[1:]


def selected_test_record(records: list[dict]) -> dict | None:
    """Test record at the epoch with the best validation accuracy (earliest on ties); else the last."""
    tests = {r["epoch"]: r for r in records if r["split"] == "test"}
    if not tests:
        return None
    vals = [r for r in records if r["split"] == "val"]
    if vals:
        best = max(vals, key=lambda r: (r["accuracy"], -r["epoch"]))
        return tests.get(best["epoch"])
    return tests[max(tests)]


def aggregate(out_dir) -> dict[tuple[str, int], dict]:
    """Mean test accuracy / macro-F1 per (mode, ws) over seeds, from logs only."""
    cells: dict[tuple[str, int], list[dict]] = {}
    for path in sorted((Path(out_dir) / "logs").glob("*.jsonl")):
        cfg, records = read_log(path)
        rec = selected_test_record(records)
        if rec is None:
            continue
        cells.setdefault((cfg["mode"], cfg["ws"]), []).append(rec)
    summary = {}
    for key, recs in cells.items():
        acc = [r["accuracy"] for r in recs]
        f1 = [r["macro_f1"] for r in recs]
        summary[key] = {
            "accuracy": float(np.mean(acc)),
            "macro_f1": float(np.mean(f1)),
            "accuracy_std": float(np.std(acc)),
            "n_seeds": len(recs),
        }
    return summary


def render_table(summary: dict) -> tuple[str, str]:
    modes = [m for m in MODES if any(k[0] == m for k in summary)]
    ws_values = sorted({k[1] for k in summary}, reverse=True)
    header = ["method"] + [f"ws={w} acc|f1" for w in ws_values]
    rows = []
    for m in modes:
        row = [m]
        for w in ws_values:
            s = summary.get((m, w))
            row.append("-" if s is None else f"{100 * s['accuracy']:.2f}|{100 * s['macro_f1']:.2f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "ws", "accuracy", "macro_f1", "accuracy_std", "n_seeds"])
    for (m, w), s in sorted(summary.items(), key=lambda kv: (MODES.index(kv[0][0]), -kv[0][1])):
        writer.writerow([m, w, repr(s["accuracy"]), repr(s["macro_f1"]), repr(s["accuracy_std"]), s["n_seeds"]])
    return text, buf.getvalue()


def write_report(out_dir) -> str:
    text, table_csv = render_table(aggregate(out_dir))
    Path(out_dir, "results.txt").write_text(text, encoding="utf-8")
    Path(out_dir, "results.csv").write_text(table_csv, encoding="utf-8")
    return text


def cmd_report(args) -> int:
    print(write_report(args.dir), end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat 'key = value' config file")
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for name in CONFIG_FIELDS:
        g.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prdu", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic corpus")
    p.add_argument("--spec", default="default", help="'default' or a key = value synthetic spec file")
    p.add_argument("--sessions", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix", default="s")
    p.add_argument("--alpha-past", type=float)
    p.add_argument("--alpha-future", type=float)
    p.add_argument("--topics", type=int)
    p.add_argument("--vocab", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--ws", type=int)
    p.add_argument("--fw")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run modes x window sizes x seeds and tabulate")
    _add_config_flags(p)
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--ws-list", default="3,1")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="aggregate grid logs into a results table")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorpusError, ValueError, OSError) as exc:
        print(f"prdu {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()

"""Command-line entry point: ``skipalign <subcommand> [flags]``.

Every subcommand writes into a single run directory (``--out``) that ends up
holding exactly one ``manifest.json``.  Flag values resolve as: built-in
defaults, then a config file (``--config`` or ``$SKIPALIGN_CONFIG``; a
previous run's manifest works too), then flags given on the command line.

Exit codes: 0 success, 1 verification failed, 2 usage error, 3 data error
(details in ``diagnostics.json``), 4 training diverged.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import JsonlWriter, dumps, load_config_file, read_jsonl, write_manifest
from .corpus import DEFAULT_TRUNCATION, DataError, IngestConfig, ingest, sample_to_json, to_record, truncate

logger = logging.getLogger("skipalign")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

CONFIG_ENV = "SKIPALIGN_CONFIG"

# keys never stored in (or restored from) a manifest config
_RUN_KEYS = {"out", "config", "log_level", "command", "action", "workers"}

DEFAULTS = {
    "augment": dict(input=None, strategy="skip-outer", max_length=100_000, ratio=0.5, seed=0,
                    subsample_mode="per-block", skip_first_block=False, truncation=DEFAULT_TRUNCATION,
                    on_error="abort", chunksize=64),
    "pack": dict(input=None, pack_length=16384, truncation=DEFAULT_TRUNCATION, drop_last=False,
                 shuffle_buffer=0, seed=0, on_error="abort"),
    "analyze": dict(input=None, sidecar=None, bucket_width=1024, truncation=DEFAULT_TRUNCATION,
                    tail_lo=None, tail_hi=None, multiset=False, seed=0),
    "needle-generate": dict(lengths="1000:28000:1000", depths="0:100:10", repeats=1, seed=0),
    "needle-score": dict(cases=None, predictions=None, seed=0),
    "needle-kv": dict(n_samples=4000, n_pairs=1, n_queries=1, key_len=2, value_len=2, max_len=512,
                      length_dist="log", seed=0),
    "needle-kv-eval": dict(distances="520:4096:32", n_pairs=1, key_len=2, value_len=2, seed=0),
    "train-toy": dict(input=None, layers=2, heads=4, model_dim=128, head_dim=32, lr=1e-5, epochs=2,
                      batch_size=16, warmup_frac=0.03, weight_decay=0.0, grad_clip=1.0,
                      theta_base=10000.0, rope_scale=1.0, threads=1, seed=0),
    "eval-toy": dict(checkpoint=None, cases=None, buckets="0,512,1408,2304,3200,4096", seed=0),
    "verify": dict(quick=False, skip_toy=False, seed=0),
}


class UsageError(Exception):
    pass


def _int_range(text: str) -> list[int]:
    """'a:b:step' (inclusive) or 'a,b,c'."""
    text = str(text)
    if ":" in text:
        parts = [int(x) for x in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise UsageError(f"bad range {text!r}; expected start:stop:step")
        return list(range(parts[0], parts[1] + 1, parts[2]))
    return [int(x) for x in text.split(",") if x.strip()]


def _float_range(text: str) -> list[float]:
    text = str(text)
    if ":" in text:
        a, b, step = (float(x) for x in text.split(":"))
        n = int(round((b - a) / step))
        return [a + i * step for i in range(n + 1)]
    return [float(x) for x in text.split(",") if x.strip()]


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, needs_out: bool = True) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--out", required=needs_out, help="run directory (created if missing)")
    p.add_argument("--seed", type=int, default=S, help="global seed (default 0)")
    p.add_argument("--config", default=None, help=f"JSON/YAML config or previous manifest (env: {CONFIG_ENV})")
    p.add_argument("--workers", type=int, default=1, help="worker processes where supported")
    p.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="skipalign", description="Skipped-position augmentation toolkit")
    parser.add_argument("--version", action="version", version=f"skipalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("augment", help="assign skipped position ids to a chat corpus")
    _common(p)
    p.add_argument("--input", default=S, help="JSONL corpus (messages, conversations or blocks)")
    p.add_argument("--strategy", default=S, help="skip-all | skip-inner | skip-outer")
    p.add_argument("--max-length", dest="max_length", type=int, default=S, help="position budget L")
    p.add_argument("--ratio", type=float, default=S, help="sub-sampling ratio p")
    p.add_argument("--subsample-mode", dest="subsample_mode", default=S, help="per-block | per-sample")
    p.add_argument("--skip-first-block", dest="skip_first_block", action="store_true", default=S)
    p.add_argument("--truncation", type=int, default=S, help="token limit applied before skipping")
    p.add_argument("--on-error", dest="on_error", choices=["abort", "skip"], default=S)
    p.add_argument("--chunksize", type=int, default=S)

    p = sub.add_parser("pack", help="packed-SFT baseline")
    _common(p)
    p.add_argument("--input", default=S)
    p.add_argument("--pack-length", dest="pack_length", type=int, default=S, help="k")
    p.add_argument("--truncation", type=int, default=S)
    p.add_argument("--drop-last", dest="drop_last", action="store_true", default=S)
    p.add_argument("--shuffle-buffer", dest="shuffle_buffer", type=int, default=S)
    p.add_argument("--on-error", dest="on_error", choices=["abort", "skip"], default=S)

    p = sub.add_parser("analyze", help="relative-distance histogram of a record file")
    _common(p)
    p.add_argument("--input", default=S, help="records.jsonl or packs.jsonl")
    p.add_argument("--sidecar", default=S, help="pack sidecar; distances are then taken within members")
    p.add_argument("--bucket-width", dest="bucket_width", type=int, default=S)
    p.add_argument("--truncation", type=int, default=S)
    p.add_argument("--tail-lo", dest="tail_lo", type=int, default=S)
    p.add_argument("--tail-hi", dest="tail_hi", type=int, default=S)
    p.add_argument("--multiset", action="store_true", default=S, help="count token pairs, not distinct distances")

    p = sub.add_parser("needle", help="retrieval data and scoring")
    nsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = nsub.add_parser("generate", help="needle-in-a-haystack grid")
    _common(q)
    q.add_argument("--lengths", default=S, help="start:stop:step or comma list")
    q.add_argument("--depths", default=S)
    q.add_argument("--repeats", type=int, default=S)
    q = nsub.add_parser("score", help="score predictions against a grid")
    _common(q)
    q.add_argument("--cases", default=S)
    q.add_argument("--predictions", default=S, help='JSONL of {"case_id", "tokens"|"text"}')
    q = nsub.add_parser("kv", help="toy key-value training samples")
    _common(q)
    for name in ("n-samples", "n-pairs", "n-queries", "key-len", "value-len", "max-len"):
        q.add_argument(f"--{name}", dest=name.replace("-", "_"), type=int, default=S)
    q.add_argument("--length-dist", dest="length_dist", choices=["uniform", "log"], default=S)
    q = nsub.add_parser("kv-eval", help="toy key-value probes at fixed distances")
    _common(q)
    q.add_argument("--distances", default=S)
    for name in ("n-pairs", "key-len", "value-len"):
        q.add_argument(f"--{name}", dest=name.replace("-", "_"), type=int, default=S)

    p = sub.add_parser("train-toy", help="train the toy RoPE transformer on records")
    _common(p)
    p.add_argument("--input", default=S)
    for name, typ in (("layers", int), ("heads", int), ("model-dim", int), ("head-dim", int), ("lr", float),
                      ("epochs", int), ("batch-size", int), ("warmup-frac", float), ("weight-decay", float),
                      ("grad-clip", float), ("theta-base", float), ("rope-scale", float), ("threads", int)):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ, default=S)

    p = sub.add_parser("eval-toy", help="retrieval accuracy of a toy checkpoint by distance bucket")
    _common(p)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--cases", default=S, help="cases.jsonl from 'needle kv-eval'")
    p.add_argument("--buckets", default=S, help="comma-separated bucket edges")

    p = sub.add_parser("verify", help="run the property suite and the toy experiment")
    _common(p)
    p.add_argument("--quick", action="store_true", default=S, help="reduced sizes")
    p.add_argument("--skip-toy", dest="skip_toy", action="store_true", default=S)
    return parser


def _key(ns) -> str:
    return f"needle-{ns.action}" if ns.command == "needle" else ns.command


def resolve_config(ns: argparse.Namespace, environ=os.environ) -> dict:
    key = _key(ns)
    cfg = dict(DEFAULTS[key])
    path = ns.config or environ.get(CONFIG_ENV)
    if path:
        loaded = load_config_file(path)
        unknown = set(loaded) - set(cfg) - _RUN_KEYS
        if unknown:
            raise UsageError(f"unknown config keys for {key}: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k in cfg})
    cfg.update({k: v for k, v in vars(ns).items() if k in cfg})
    return cfg


def _require(cfg: dict, *names: str) -> None:
    missing = [n for n in names if cfg.get(n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


# -- subcommands --------------------------------------------------------------

def _write_diagnostics(out: Path, errors: list) -> None:
    if not errors:
        return
    items = [{"reason": e.reason, "line": e.line, "sample_id": e.sample_id} for e in errors]
    (out / "diagnostics.json").write_text(json.dumps({"errors": items}, indent=2) + "\n", encoding="utf-8")


def cmd_augment(cfg: dict, out: Path, workers: int) -> dict:
    from .skip import SkipConfig, augment

    _require(cfg, "input")
    skip_cfg = SkipConfig(L=int(cfg["max_length"]), p=float(cfg["ratio"]), strategy=cfg["strategy"],
                          seed=int(cfg["seed"]), subsample_mode=cfg["subsample_mode"],
                          skip_first_block=bool(cfg["skip_first_block"]))
    skip_cfg.check_truncation(int(cfg["truncation"]))
    errors: list = []
    ingest_cfg = IngestConfig(on_error=cfg["on_error"])
    samples = (truncate(s, int(cfg["truncation"])) for s in ingest(cfg["input"], config=ingest_cfg, errors=errors))
    n_trunc = 0
    with JsonlWriter(out / "records.jsonl") as rec_w, JsonlWriter(out / "plans.jsonl") as plan_w:
        try:
            for sample, pa, plan in augment(samples, skip_cfg, on_error=cfg["on_error"], workers=workers,
                                            chunksize=int(cfg["chunksize"]), errors=errors):
                n_trunc += sample.truncated
                rec_w.write(to_record(sample, pa).to_json())
                meta = plan.metadata(skip_cfg)
                meta["saturated"] = plan.saturated
                plan_w.write(meta)
        finally:
            _write_diagnostics(out, errors)
        count = rec_w.count
    logger.info("augmented %d samples (%d truncated, %d rejected)", count, n_trunc, len(errors))
    return {"counts": {"records": count, "truncated": n_trunc, "rejected": len(errors)}}


def cmd_pack(cfg: dict, out: Path, workers: int) -> dict:
    from .pack import PackConfig, pack

    _require(cfg, "input")
    pcfg = PackConfig(k=int(cfg["pack_length"]), drop_last=bool(cfg["drop_last"]), seed=int(cfg["seed"]),
                      shuffle_buffer=int(cfg["shuffle_buffer"]))
    errors: list = []
    samples = (truncate(s, int(cfg["truncation"]))
               for s in ingest(cfg["input"], config=IngestConfig(on_error=cfg["on_error"]), errors=errors))
    with JsonlWriter(out / "packs.jsonl") as w, JsonlWriter(out / "packs.sidecar.jsonl") as side:
        try:
            for p in pack(samples, pcfg, on_error=cfg["on_error"], errors=errors):
                w.write(p.to_json())
                side.write(p.sidecar())
        finally:
            _write_diagnostics(out, errors)
        count = w.count
    logger.info("wrote %d packs", count)
    return {"counts": {"packs": count, "rejected": len(errors)}}


def cmd_analyze(cfg: dict, out: Path, workers: int) -> dict:
    from .distance import DistanceHistogram, record_segments, report, report_csv, report_json

    _require(cfg, "input")
    h = DistanceHistogram(int(cfg["bucket_width"]), multiset=bool(cfg["multiset"]))
    sidecars = read_jsonl(cfg["sidecar"]) if cfg.get("sidecar") else None
    max_seq = 0
    for obj in read_jsonl(cfg["input"]):
        pos = np.asarray(obj["position_ids"], dtype=np.int64)
        mask = np.asarray(obj["loss_mask"], dtype=bool)
        max_seq = max(max_seq, int(pos.size))
        if sidecars is None:
            h.add_segments(record_segments(pos, mask))
            continue
        side = next(sidecars, None)
        if side is None:
            raise DataError("sidecar has fewer lines than the input", sample_id=obj.get("sample_id"))
        bounds = list(side["boundaries"]) + [pos.size]
        for a, b in zip(bounds[:-1], bounds[1:]):
            h.add_segments(record_segments(pos[a:b] - pos[a], mask[a:b]))
    tail = None
    if cfg.get("tail_lo") is not None and cfg.get("tail_hi") is not None:
        tail = (int(cfg["tail_lo"]), int(cfg["tail_hi"]))
    rep = report(h, int(cfg["truncation"]), tail)
    rep["summary"]["max_sequence_length"] = max_seq
    (out / "histogram.json").write_text(dumps(h.to_json()) + "\n", encoding="utf-8")
    (out / "report.csv").write_text(report_csv(rep), encoding="utf-8")
    (out / "report.json").write_text(report_json(rep) + "\n", encoding="utf-8")
    s = rep["summary"]
    logger.info("%d samples, max distance %d, fraction above %d: %.4g", s["total_samples"], s["max_distance"],
                s["truncation"], s["fraction_above_truncation"])
    return {"summary": s}


def cmd_needle_generate(cfg: dict, out: Path, workers: int) -> dict:
    from .synth import generate_needles

    lengths, depths = _int_range(cfg["lengths"]), _float_range(cfg["depths"])
    with JsonlWriter(out / "cases.jsonl") as w:
        for case in generate_needles(lengths, depths, seed=int(cfg["seed"]), repeats=int(cfg["repeats"])):
            obj = case.to_json()
            obj["prompt"] = case.prompt
            w.write(obj)
        count = w.count
    logger.info("generated %d needle cases", count)
    return {"counts": {"cases": count}}


def cmd_needle_score(cfg: dict, out: Path, workers: int) -> dict:
    from .corpus import ByteTokenizer
    from .synth import NeedleCase, score

    _require(cfg, "cases", "predictions")
    tok = ByteTokenizer()
    preds = {}
    for obj in read_jsonl(cfg["predictions"]):
        preds[str(obj["case_id"])] = obj["tokens"] if "tokens" in obj else tok.encode(obj.get("text", ""))
    cases = (NeedleCase.from_json(o) for o in read_jsonl(cfg["cases"]))
    rep = score(preds, cases)
    (out / "heatmap.csv").write_text(rep.to_csv(), encoding="utf-8")
    (out / "heatmap.json").write_text(json.dumps(rep.to_json(), indent=2) + "\n", encoding="utf-8")
    logger.info("average score %s over %d cells", rep.average, len(rep.cells))
    return {"summary": {"average": rep.average, "missing": len(rep.missing)}}


def cmd_needle_kv(cfg: dict, out: Path, workers: int) -> dict:
    from .synth import KVTaskConfig, generate_kv_retrieval

    kv = KVTaskConfig(**{k: cfg[k] for k in ("n_samples", "n_pairs", "n_queries", "key_len", "value_len",
                                              "max_len", "length_dist", "seed")})
    with JsonlWriter(out / "samples.jsonl") as w:
        for s in generate_kv_retrieval(kv):
            w.write(sample_to_json(s))
        count = w.count
    return {"counts": {"samples": count}}


def cmd_needle_kv_eval(cfg: dict, out: Path, workers: int) -> dict:
    from dataclasses import asdict

    from .synth import kv_eval_cases

    cases = kv_eval_cases(_int_range(cfg["distances"]), seed=int(cfg["seed"]), n_pairs=int(cfg["n_pairs"]),
                          key_len=int(cfg["key_len"]), value_len=int(cfg["value_len"]))
    with JsonlWriter(out / "cases.jsonl") as w:
        for c in cases:
            w.write(asdict(c))
        count = w.count
    return {"counts": {"cases": count}}


def _records_from(path) -> list:
    from .corpus import TrainingRecord

    return [TrainingRecord.from_json(o) for o in read_jsonl(path)]


def cmd_train_toy(cfg: dict, out: Path, workers: int) -> dict:
    from .toyformer import ToyModelConfig, make_batches, save_checkpoint, train, write_trace

    _require(cfg, "input")
    records = [r for r in _records_from(cfg["input"]) if r.useful]
    if not records:
        raise DataError("no records with response tokens to train on")
    mcfg = ToyModelConfig(layers=int(cfg["layers"]), heads=int(cfg["heads"]), model_dim=int(cfg["model_dim"]),
                          head_dim=int(cfg["head_dim"]), lr=float(cfg["lr"]), epochs=int(cfg["epochs"]),
                          seed=int(cfg["seed"]), warmup_frac=float(cfg["warmup_frac"]),
                          weight_decay=float(cfg["weight_decay"]), grad_clip=float(cfg["grad_clip"]),
                          theta_base=float(cfg["theta_base"]), rope_scale=float(cfg["rope_scale"]),
                          num_threads=int(cfg["threads"]))
    batches = make_batches(records, int(cfg["batch_size"]))
    res = train(batches, mcfg)
    save_checkpoint(res.model, out / "model.pt")
    write_trace(res.trace, out / "trace.csv")
    final = res.trace[-1][1] if res.trace else None
    logger.info("trained %d steps, final loss %s", len(res.trace), final)
    return {"summary": {"steps": len(res.trace), "final_loss": final}}


def cmd_eval_toy(cfg: dict, out: Path, workers: int) -> dict:
    from .synth import RetrievalCase
    from .toyformer import evaluate_retrieval, load_checkpoint

    _require(cfg, "checkpoint", "cases")
    model = load_checkpoint(cfg["checkpoint"])
    cases = (RetrievalCase(**o) for o in read_jsonl(cfg["cases"]))
    rows = evaluate_retrieval(model, cases, _int_range(cfg["buckets"]))
    (out / "eval.json").write_text(json.dumps({"buckets": rows}, indent=2) + "\n", encoding="utf-8")
    for r in rows:
        logger.info("(%d, %d]: %d/%d = %.3f", r["lo"], r["hi"], r["correct"], r["n"], r["accuracy"])
    return {"summary": {"buckets": rows}}


def cmd_verify(cfg: dict, out: Path, workers: int) -> dict:
    from .suite import run_verification

    results = run_verification(quick=bool(cfg["quick"]), include_toy=not cfg["skip_toy"], out_dir=out,
                               seed=int(cfg["seed"]), on_result=lambda r: print(r.line(), flush=True))
    lines = [r.line() for r in results]
    (out / "verify.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "verify.json").write_text(json.dumps(
        [{"name": r.name, "passed": r.passed, "seconds": r.seconds, "detail": r.detail} for r in results],
        indent=2, default=str) + "\n", encoding="utf-8")
    passed = all(r.passed for r in results)
    return {"summary": {"passed": passed, "checks": len(results)}, "_exit": EXIT_OK if passed else EXIT_VERIFY_FAILED}


COMMANDS = {
    "augment": cmd_augment,
    "pack": cmd_pack,
    "analyze": cmd_analyze,
    "needle-generate": cmd_needle_generate,
    "needle-score": cmd_needle_score,
    "needle-kv": cmd_needle_kv,
    "needle-kv-eval": cmd_needle_kv_eval,
    "train-toy": cmd_train_toy,
    "eval-toy": cmd_eval_toy,
    "verify": cmd_verify,
}

_INPUT_KEYS = ("input", "sidecar", "cases", "predictions", "checkpoint")


def _setup_logging(out: Path, level: str) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    return handler


def run(argv=None, environ=os.environ) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve_config(ns, environ)
    except (UsageError, ValueError, OSError) as exc:
        print(f"skipalign: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _setup_logging(out, ns.log_level)
    started = _dt.datetime.now(_dt.timezone.utc)
    key = _key(ns)
    code = EXIT_OK
    extra: dict = {}
    try:
        result = COMMANDS[key](cfg, out, max(1, int(ns.workers)))
        code = result.pop("_exit", EXIT_OK)
        extra = result
    except UsageError as exc:
        print(f"skipalign: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except DataError as exc:
        logger.error("data error: %s", exc)
        (out / "diagnostics.json").write_text(json.dumps({"errors": [
            {"reason": exc.reason, "line": exc.line, "sample_id": exc.sample_id}]}, indent=2) + "\n",
            encoding="utf-8")
        print(f"skipalign: data error: {exc} (see {out / 'diagnostics.json'})", file=sys.stderr)
        code = EXIT_DATA
    except FileNotFoundError as exc:
        print(f"skipalign: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except ValueError as exc:
        print(f"skipalign: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except Exception as exc:
        from .toyformer import TrainingDiverged

        if not isinstance(exc, TrainingDiverged):
            raise
        logger.error("%s", exc)
        print(f"skipalign: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    stored = {k: v for k, v in cfg.items() if k not in _RUN_KEYS}
    inputs = [cfg[k] for k in _INPUT_KEYS if cfg.get(k)]
    extra = dict(extra, exit_code=code, workers=int(ns.workers))
    write_manifest(out, key, stored, inputs, started, extra)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

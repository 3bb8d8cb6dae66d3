"""The full acceptance suite as one callable, shared by ``skipalign verify`` and the tests."""

from __future__ import annotations

import json
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from . import checks
from .checks import CheckResult, timed
from .corpus import Sample


def identity_corpus(n: int = 1000, seed: int = 11) -> list[Sample]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = Sample.from_lengths(f"id-{i}", checks.random_lengths(rng, max_turns=4, max_block=300))
        for b in s.blocks:
            b.tokens = rng.integers(0, 256, size=len(b))
        out.append(s)
    return out


def write_chat_corpus(path: Path, n: int = 300, seed: int = 17) -> Path:
    """Small chat-format JSONL corpus for CLI runs."""
    rng = np.random.default_rng(seed)
    words = ["alpha", "beta", "gamma", "delta", "river", "stone", "cloud", "maple", "orbit", "ember"]
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n):
            msgs = []
            for t in range(int(rng.integers(1, 5))):
                for role in ("user", "assistant"):
                    k = int(rng.integers(1, 60))
                    msgs.append({"role": role, "content": " ".join(rng.choice(words, size=k))})
            fh.write(json.dumps({"id": f"chat-{i}", "messages": msgs}) + "\n")
    return path


def _manifest(run_dir: Path) -> dict:
    return json.loads((run_dir / "manifest.json").read_text())


def determinism_check(work_dir: str | Path | None = None, parallel: int = 8) -> tuple[bool, dict]:
    """Each randomized subcommand, run serially, then re-run from its manifest with ``parallel`` workers."""
    from .cli import run

    tmp = None
    if work_dir is None:
        tmp = tempfile.TemporaryDirectory()
        work_dir = tmp.name
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    corpus = write_chat_corpus(work / "corpus.jsonl")
    plans = {
        "augment": ["augment", "--input", str(corpus), "--strategy", "skip-all", "--max-length", "100000",
                    "--ratio", "0.5", "--seed", "42"],
        "pack": ["pack", "--input", str(corpus), "--pack-length", "4096", "--shuffle-buffer", "64", "--seed", "3"],
        "needle-generate": ["needle", "generate", "--lengths", "1000:4000:1000", "--depths", "0:100:25",
                            "--repeats", "2", "--seed", "5"],
        "needle-kv": ["needle", "kv", "--n-samples", "200", "--max-len", "256", "--seed", "6"],
        "needle-kv-eval": ["needle", "kv-eval", "--distances", "600:4000:400", "--seed", "7"],
    }
    detail: dict = {}
    ok = True
    for name, argv in plans.items():
        a, b = work / f"{name}-serial", work / f"{name}-parallel"
        codes = [run(argv + ["--out", str(a), "--workers", "1"])]
        sub = argv[:2] if argv[0] == "needle" else argv[:1]
        codes.append(run(sub + ["--config", str(a / "manifest.json"), "--out", str(b), "--workers", str(parallel)]))
        same = _manifest(a)["outputs"] == _manifest(b)["outputs"] and bool(_manifest(a)["outputs"])
        detail[name] = "identical" if same and codes == [0, 0] else f"differs (exit {codes})"
        ok &= same and codes == [0, 0]

    # training on the augmented records, tiny model, threads pinned to 1
    recs = work / "augment-serial" / "records.jsonl"
    argv = ["train-toy", "--input", str(recs), "--layers", "1", "--heads", "2", "--model-dim", "16",
            "--head-dim", "8", "--epochs", "1", "--lr", "1e-3", "--batch-size", "32", "--seed", "1"]
    a, b = work / "train-serial", work / "train-parallel"
    codes = [run(argv + ["--out", str(a)]),
             run(["train-toy", "--config", str(a / "manifest.json"), "--out", str(b), "--workers", str(parallel)])]
    # torch.save embeds no timestamps, so checkpoints compare byte for byte
    same = _manifest(a)["outputs"] == _manifest(b)["outputs"]
    detail["train-toy"] = "identical" if same and codes == [0, 0] else f"differs (exit {codes})"
    ok &= same and codes == [0, 0]
    if tmp is not None:
        tmp.cleanup()
    return ok, detail


def run_verification(quick: bool = False, include_toy: bool = True, out_dir: str | Path | None = None,
                     seed: int = 0, on_result: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    from .experiment import ToyExperimentConfig, run_toy_experiment

    q = quick
    steps: list[tuple[str, Callable]] = [
        ("validity-fuzz", lambda: checks.validity_fuzz(n_samples=500 if q else 10_000,
                                                        seeds=range(3 if q else 10))),
        ("identity-p0", lambda: checks.identity_check(identity_corpus(200 if q else 1000), seed=seed)),
        ("first-skip-uniformity", lambda: checks.uniformity_check(n_draws=20_000 if q else 100_000)),
        ("distance-tail-shape", lambda: checks.tail_shape_check(n=1000 if q else 10_000,
                                                                  replicates=5 if q else 20, seed=seed)),
        ("rope-shift-invariance", lambda: checks.rope_shift_check(trials=200 if q else 1000)),
        ("rope-gradient", lambda: checks.gradient_check(seed=seed)),
        ("packing", lambda: checks.packing_check(n=200 if q else 1000)),
        ("determinism", lambda: determinism_check(Path(out_dir) / "determinism" if out_dir else None)),
    ]
    if include_toy:
        def toy():
            cfg = ToyExperimentConfig(seed=seed)
            if q:
                cfg.n_train, cfg.epochs, cfg.eval_per_bucket = 1000, 2, 6
            res = run_toy_experiment(cfg, Path(out_dir) / "toy" if out_dir else None)
            detail = {name: [round(a, 3) for a in arm["accuracy"]] for name, arm in res["arms"].items()}
            detail.update(wins=res["skip_beats_dense_buckets"], skip_mean=res["skip_mean"],
                          packed_mean=res["packed_mean"])
            return res["passed"], detail
        steps.insert(6, ("toy-needle-analog", toy))
    results = []
    for name, fn in steps:
        r = timed(name, fn)
        results.append(r)
        if on_result:
            on_result(r)
    return results

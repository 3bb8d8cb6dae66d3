"""Line-delimited JSON I/O, content digests and run manifests."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import platform
from pathlib import Path
from typing import Iterable, Iterator

from . import __version__
from .skip import RNG_NAME, RNG_VERSION

MANIFEST_NAME = "manifest.json"


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


class JsonlWriter:
    """Streaming writer that keeps a running sha256 of what it wrote."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self._hash = hashlib.sha256()
        self.count = 0

    def write(self, obj) -> None:
        line = dumps(obj) + "\n"
        self._fh.write(line)
        self._hash.update(line.encode("utf-8"))
        self.count += 1

    def write_all(self, objs: Iterable) -> None:
        for o in objs:
            self.write(o)

    @property
    def digest(self) -> str:
        return self._hash.hexdigest()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def output_digests(run_dir: str | Path) -> dict[str, str]:
    """sha256 of every file in the run directory except the manifest and logs."""
    run_dir = Path(run_dir)
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME and p.suffix != ".log":
            out[str(p.relative_to(run_dir))] = file_digest(p)
    return out


def write_manifest(run_dir: str | Path, subcommand: str, config: dict, inputs: Iterable[str | Path] = (),
                   started: _dt.datetime | None = None, extra: dict | None = None) -> dict:
    run_dir = Path(run_dir)
    now = _dt.datetime.now(_dt.timezone.utc)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {str(p): file_digest(p) for p in inputs if p and Path(p).is_file()},
        "outputs": output_digests(run_dir),
        "toolkit_version": __version__,
        "rng": {"name": RNG_NAME, "version": RNG_VERSION},
        "python": platform.python_version(),
        "started": (started or now).isoformat(),
        "finished": now.isoformat(),
    }
    if extra:
        manifest.update(extra)
    tmp = run_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, run_dir / MANIFEST_NAME)
    return manifest


def load_config_file(path: str | Path) -> dict:
    """Flag values from a JSON/YAML config file or from a previous run manifest."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if isinstance(data, dict) and "config" in data and "subcommand" in data:
        data = data["config"]
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return data

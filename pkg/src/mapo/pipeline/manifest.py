"""Run manifest: stage completion records with artifact digests.

A stage record is written only after its outputs are fully on disk, so the
manifest doubles as the stage-ordering guard. Digests let a later run (or
a reviewer) detect any single-byte corruption of an artifact.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from mapo.errors import PipelineError

MANIFEST_NAME = "manifest.json"
STAGE_ORDER = ("warmup", "sft", "reward", "rl", "eval")


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    def __init__(self, run_dir: Path, run_id: str, config_hash: str, data: dict | None = None):
        self.run_dir = Path(run_dir)
        self.data = data or {"run_id": run_id, "config_hash": config_hash, "stages": {}}

    @classmethod
    def load_or_create(cls, run_dir: Path, config_hash: str) -> "RunManifest":
        run_dir = Path(run_dir)
        path = run_dir / MANIFEST_NAME
        if path.exists():
            data = json.loads(path.read_text(encoding="utf-8"))
            if data.get("config_hash") != config_hash:
                raise PipelineError(
                    "config does not match the one this run directory was created with "
                    "(use a fresh run_dir for a different config)"
                )
            return cls(run_dir, data["run_id"], config_hash, data)
        run_dir.mkdir(parents=True, exist_ok=True)
        return cls(run_dir, run_id=f"run-{config_hash}", config_hash=config_hash)

    def save(self) -> None:
        path = self.run_dir / MANIFEST_NAME
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True), encoding="utf-8")

    def has_stage(self, stage: str) -> bool:
        return stage in self.data["stages"]

    def require_stage(self, stage: str) -> None:
        if not self.has_stage(stage):
            raise PipelineError(f"stage '{stage}' has not been run yet (missing upstream)")

    def guard_rerun(self, stage: str, force: bool) -> None:
        if self.has_stage(stage) and not force:
            raise PipelineError(
                f"stage '{stage}' already completed; pass --force to rerun"
            )

    def record_stage(self, stage: str, seed: int, artifacts: list[Path], extra: dict | None = None) -> None:
        record = {
            "completed_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "seed": seed,
            "artifacts": {
                str(Path(p).relative_to(self.run_dir)): file_digest(p) for p in artifacts
            },
        }
        if extra:
            record.update(extra)
        self.data["stages"][stage] = record
        self.save()

    def verify_artifacts(self) -> list[str]:
        """Paths whose current digest no longer matches the recorded one."""
        bad = []
        for stage, record in self.data["stages"].items():
            for rel, digest in record.get("artifacts", {}).items():
                path = self.run_dir / rel
                if not path.exists() or file_digest(path) != digest:
                    bad.append(f"{stage}: {rel}")
        return bad

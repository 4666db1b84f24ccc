import os
import json
import shutil
import hashlib
import logging
import tempfile
from datetime import datetime
from typing import Dict, Any, List, Optional

from pydantic import BaseModel, Field

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# Stage order of a full run; each stage needs the ones listed for it.
STAGE_PREREQUISITES: Dict[str, List[str]] = {
    "index": [],
    "retrieve": ["index"],
    "teacher-rerank": ["retrieve"],
    "parse": ["teacher-rerank"],
    "train": ["parse"],
    "student-rerank": ["train"],
    "evaluate": ["student-rerank"],
    "cost-report": ["teacher-rerank"],
    "behavior-report": ["parse"],
}


class MissingStageError(RuntimeError):
    def __init__(self, stage: str, missing: str):
        self.stage = stage
        self.missing = missing
        super().__init__(f"stage '{stage}' needs stage '{missing}' to have completed; run '{missing}' first")


class ManifestMismatchError(RuntimeError):
    def __init__(self, stage: str):
        self.stage = stage
        super().__init__(f"stage '{stage}' already completed with different inputs or config; re-run with --force to redo it")


def canonical_hash(value: Any) -> str:
    material = json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"), default=str)
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


def hash_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_path(path: str) -> str:
    """Content hash of a file, or of every file under a directory (relative names included)."""
    if os.path.isfile(path):
        return hash_file(path)
    digest = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            digest.update(os.path.relpath(full, path).replace(os.sep, "/").encode("utf-8"))
            digest.update(hash_file(full).encode("ascii"))
    return digest.hexdigest()


# --- Pydantic Models ---
class StageRecord(BaseModel):
    completed: bool = False
    fingerprint: str = Field("", description="Hash of the stage's config slice and input hashes.")
    outputs: Dict[str, str] = Field(default_factory=dict, description="Output name -> path relative to the run dir.")
    output_hashes: Dict[str, str] = Field(default_factory=dict)
    details: Dict[str, Any] = Field(default_factory=dict)


class RunManifest(BaseModel):
    version: int = MANIFEST_VERSION
    config_hash: str = ""
    config: Dict[str, Any] = Field(default_factory=dict)
    stages: Dict[str, StageRecord] = Field(default_factory=dict)


class StateManager:
    """Owns runs/<name>/manifest.json: stage flags, fingerprints and output hashes."""

    def __init__(self, run_dir: str, backup_dir: Optional[str] = None):
        self.run_dir = run_dir
        self.backup_dir = backup_dir or os.path.join(run_dir, "manifest_backups")
        os.makedirs(self.run_dir, exist_ok=True)
        self.manifest = self._load()

    @property
    def path(self) -> str:
        return os.path.join(self.run_dir, MANIFEST_NAME)

    def _load(self) -> RunManifest:
        if not os.path.exists(self.path):
            logging.info(f"No manifest at {self.path}. Starting fresh.")
            return RunManifest()
        with open(self.path, "r", encoding="utf-8") as f:
            return RunManifest.model_validate(json.load(f))

    def save(self) -> None:
        fd, tmp_path = tempfile.mkstemp(dir=self.run_dir, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(self.manifest.model_dump(), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp_path, self.path)

    def backup_manifest(self) -> Optional[str]:
        if not os.path.exists(self.path):
            return None
        os.makedirs(self.backup_dir, exist_ok=True)
        backup_path = os.path.join(self.backup_dir, f"{MANIFEST_NAME}.{datetime.now().strftime('%Y%m%d_%H%M%S_%f')}")
        shutil.copy2(self.path, backup_path)
        logging.info(f"Backed up {self.path} to {backup_path}")
        return backup_path

    def set_config(self, config_snapshot: Dict[str, Any]) -> None:
        config_hash = canonical_hash(config_snapshot)
        if config_hash != self.manifest.config_hash:
            self.manifest.config = config_snapshot
            self.manifest.config_hash = config_hash
            self.save()

    def resolve(self, relative: str) -> str:
        return os.path.join(self.run_dir, relative)

    def record_of(self, stage: str) -> StageRecord:
        return self.manifest.stages.get(stage, StageRecord())

    def require(self, stage: str) -> None:
        for prerequisite in STAGE_PREREQUISITES.get(stage, []):
            if not self.record_of(prerequisite).completed:
                raise MissingStageError(stage, prerequisite)

    def output_hash(self, stage: str, name: str) -> str:
        record = self.record_of(stage)
        if not record.completed or name not in record.output_hashes:
            raise MissingStageError(stage, stage)
        return record.output_hashes[name]

    def _outputs_intact(self, record: StageRecord) -> bool:
        for name, relative in record.outputs.items():
            path = self.resolve(relative)
            if not os.path.exists(path) or hash_path(path) != record.output_hashes.get(name):
                return False
        return True

    def should_run(self, stage: str, fingerprint: str, force: bool = False) -> bool:
        """False when the stage is already done for this fingerprint and its outputs are untouched."""
        self.require(stage)
        record = self.record_of(stage)
        if not record.completed:
            return True
        if record.fingerprint == fingerprint and self._outputs_intact(record):
            logging.info(f"Stage {stage} is up to date; skipping")
            return False
        if not force:
            raise ManifestMismatchError(stage)
        logging.warning(f"Stage {stage} is stale; redoing it (--force)")
        self.backup_manifest()
        self.reset(stage)
        return True

    def reset(self, stage: str) -> None:
        """Drop a stage and every stage that depends on it."""
        dependents = [stage]
        changed = True
        while changed:
            changed = False
            for name, prerequisites in STAGE_PREREQUISITES.items():
                if name not in dependents and any(p in dependents for p in prerequisites):
                    dependents.append(name)
                    changed = True
        for name in dependents:
            if self.manifest.stages.pop(name, None) is not None:
                logging.info(f"Reset stage {name}")
        self.save()

    def complete(self, stage: str, fingerprint: str, outputs: Dict[str, str], details: Optional[Dict[str, Any]] = None) -> StageRecord:
        record = StageRecord(
            completed=True,
            fingerprint=fingerprint,
            outputs=dict(outputs),
            output_hashes={name: hash_path(self.resolve(relative)) for name, relative in outputs.items()},
            details=details or {},
        )
        self.manifest.stages[stage] = record
        self.save()
        logging.info(f"Stage {stage} complete")
        return record

    def get_state_stats(self) -> Dict[str, Any]:
        """Summary of the manifest for logs and the run-all report."""
        return {
            "run_dir": self.run_dir,
            "config_hash": self.manifest.config_hash[:12],
            "completed": [name for name in STAGE_PREREQUISITES if self.record_of(name).completed],
            "pending": [name for name in STAGE_PREREQUISITES if not self.record_of(name).completed],
        }

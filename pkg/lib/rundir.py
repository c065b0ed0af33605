import json
import logging
from pathlib import Path

from django.utils.text import slugify

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class RunDirectory:
    """
    The directory holding every artifact of one experiment run.

    Artifacts are registered by file name as they are written, and
    ``manifest.json`` lists them together with the state of each stage. A
    manifest already on disk is merged, so stages may run as separate commands.
    """

    def __init__(self, out, name: str):
        self.root = Path(out) / (slugify(name) or "run")
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = {"artifacts": [], "stages": {}}
        existing = self.root / MANIFEST
        if existing.exists():
            self.manifest.update(json.loads(existing.read_text()))

    def __repr__(self):
        return f"RunDirectory({self.root})"

    def path(self, name: str) -> Path:
        return self.root / name

    def has(self, name: str) -> bool:
        return name in self.manifest["artifacts"] and self.path(name).exists()

    def record(self, name: str) -> Path:
        if name not in self.manifest["artifacts"]:
            self.manifest["artifacts"] = sorted([*self.manifest["artifacts"], name])
        return self.path(name)

    def write_text(self, name: str, text: str) -> Path:
        path = self.record(name)
        path.write_text(text)
        return path

    def write_json(self, name: str, payload) -> Path:
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def read_json(self, name: str):
        return json.loads(self.path(name).read_text())

    def set(self, key: str, value):
        self.manifest[key] = value

    def finish_stage(self, stage: str):
        self.manifest["stages"][stage] = {"status": "ok"}
        self.save()

    def fail_stage(self, stage: str, error: BaseException):
        self.manifest["stages"][stage] = {
            "status": "failed",
            "error": f"{type(error).__name__}: {error}",
        }
        self.save()
        logger.warning("stage=%s status=failed run=%s error=%s", stage, self.root, error)

    def save(self) -> Path:
        path = self.root / MANIFEST
        path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return path

"""Atomic artifact writing, run manifests, checkpoints and prediction documents."""
from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import torch

from . import __version__
from .config import Config
from .data.schema import CategorySpec
from .prompts import Vocabulary

CHECKPOINT_FORMAT = "promptkpt-checkpoint"
PREDICTIONS_FORMAT = "promptkpt-predictions"


def atomic_write(path, data: bytes | str) -> Path:
    """Write via a temp file in the same directory, then ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps(doc: Any) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_inputs(paths) -> dict[str, str]:
    """sha256 per file; directories are walked in sorted order."""
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file() and not q.name.startswith(".")):
                out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


@dataclass
class RunManifest:
    command: list[str]
    config: dict[str, Any] | None
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    finished: str = ""

    @staticmethod
    def now() -> str:
        return datetime.now(timezone.utc).isoformat(timespec="seconds")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunManifest":
        return cls(**d)

    def write(self, path) -> Path:
        return atomic_write(path, dumps(self.to_dict()))

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def manifest_path(output) -> Path:
    output = Path(output)
    if output.is_dir():
        return output / "manifest.json"
    return output.with_name(output.name + ".manifest.json")


def save_checkpoint(path, model, cfg: Config, categories: list[CategorySpec]) -> Path:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "vocab": list(model.vocab.itos),
        "categories": [c.to_dict() for c in categories],
        "state_dict": model.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    return atomic_write(path, buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Returns ``(model, config, categories)``."""
    from .model import PromptPoseModel

    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except Exception as exc:  # noqa: BLE001 - any unpickling failure means a bad file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != 1:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = Config.from_dict(payload["config"])
    vocab = Vocabulary(t for t in payload["vocab"] if t not in Vocabulary().stoi)
    model = PromptPoseModel(cfg.model, vocab)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    cats = [CategorySpec(c["id"], c["name"], c["keypoint_names"], c.get("swap_pairs"), c.get("skeleton", []),
                         c.get("taxonomy")) for c in payload["categories"]]
    return model, cfg, cats


PREDICTIONS_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "threshold", "images"],
    "properties": {
        "format": {"const": PREDICTIONS_FORMAT},
        "version": {"const": 1},
        "threshold": {"type": "number"},
        "modality": {"enum": ["text", "visual"]},
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "detections"],
                "properties": {
                    "image_id": {"type": "integer"},
                    "file_name": {"type": "string"},
                    "detections": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["category", "score", "bbox", "keypoints", "keypoint_names",
                                         "obj_logits"],
                            "properties": {
                                "category": {"type": "string"},
                                "score": {"type": "number", "minimum": 0, "maximum": 1},
                                "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4,
                                         "maxItems": 4},
                                "keypoints": {"type": "array", "items": {
                                    "type": "array", "items": {"type": "number"}, "minItems": 3,
                                    "maxItems": 3}},
                                "keypoint_names": {"type": "array", "items": {"type": "string"}},
                                "obj_logits": {"type": "array", "items": {"type": "number"}},
                            },
                        },
                    },
                },
            },
        },
    },
}


def detection_to_dict(det) -> dict[str, Any]:
    """``bbox`` is normalized cx, cy, w, h; each keypoint is x, y, score."""
    scores = det.kpt_scores.tolist()
    return {
        "category": det.class_name,
        "score": float(det.score),
        "bbox": [det.box.cx, det.box.cy, det.box.w, det.box.h],
        "keypoints": [[float(x), float(y), float(s)] for (x, y), s in zip(det.kpt_coords.tolist(), scores)],
        "keypoint_names": list(det.keypoint_names),
        "obj_logits": [float(v) for v in det.obj_logits.tolist()],
    }


def predictions_document(dets_by_image: dict[int, list], threshold: float, modality: str = "text",
                         file_names: dict[int, str] | None = None) -> dict[str, Any]:
    images = []
    for image_id in sorted(dets_by_image):
        entry = {"image_id": int(image_id), "detections": [detection_to_dict(d) for d in dets_by_image[image_id]]}
        if file_names and image_id in file_names:
            entry["file_name"] = file_names[image_id]
        images.append(entry)
    return {"format": PREDICTIONS_FORMAT, "version": 1, "threshold": threshold, "modality": modality,
            "images": images}


def predictions_from_document(doc: dict[str, Any]):
    """Back to :class:`metrics.Prediction` rows."""
    import numpy as np

    from .metrics import Prediction

    if doc.get("format") != PREDICTIONS_FORMAT:
        raise ValueError("not a predictions document")
    out = []
    for im in doc["images"]:
        for d in im["detections"]:
            kp = np.asarray(d["keypoints"], dtype=np.float64).reshape(-1, 3)[:, :2]
            out.append(Prediction(int(im["image_id"]), d["category"], float(d["score"]),
                                  np.asarray(d["bbox"], dtype=np.float64), kp))
    return out

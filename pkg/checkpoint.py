"""
Model checkpoints: a directory holding manifest.json (parameter names, shapes and the
detector config) and weights.vdt (one tensor record per parameter, manifest order).
"""
import json
from pathlib import Path
from typing import Union

from pydantic import ValidationError

from errors import CheckpointError, ShapeError
from ml.detector import VertexDetector
from ml.tensor import DUMP_MAGIC, read_tensor, write_tensor
from observability import get_logger
from schemas import CheckpointManifest, DetectorConfig, ParameterRecord

logger = get_logger("checkpoint")

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.vdt"


def save_checkpoint(model: VertexDetector, path: Union[str, Path], epochs_trained: int = 0) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    manifest = CheckpointManifest(
        format=DUMP_MAGIC.decode(),
        parameters=[ParameterRecord(name=p.name, shape=list(p.shape)) for p in params],
        config=model.config,
        epochs_trained=epochs_trained,
    )
    (path / MANIFEST_NAME).write_text(json.dumps(manifest.model_dump(mode="json"), indent=2))
    with open(path / WEIGHTS_NAME, "wb") as fh:
        for p in params:
            write_tensor(fh, p.data)
    logger.info(f"saved checkpoint with {len(params)} parameters to {path}")
    return path


def read_manifest(path: Union[str, Path]) -> CheckpointManifest:
    manifest_path = Path(path) / MANIFEST_NAME
    try:
        return CheckpointManifest.model_validate(json.loads(manifest_path.read_text()))
    except OSError as e:
        raise CheckpointError(f"{manifest_path}: cannot read manifest: {e}")
    except (json.JSONDecodeError, ValidationError) as e:
        raise CheckpointError(f"{manifest_path}: malformed manifest: {e}")


def load_checkpoint(path: Union[str, Path], expected: DetectorConfig = None) -> VertexDetector:
    """Rebuild the detector from the manifest config and load its weights."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.format != DUMP_MAGIC.decode():
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.format!r}")
    if expected is not None and expected != manifest.config:
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")

    model = VertexDetector(manifest.config)
    names = model.store.names()
    recorded = [p.name for p in manifest.parameters]
    if names != recorded:
        raise CheckpointError(f"{path}: parameter list does not match the model built from its config")

    state = {}
    try:
        with open(path / WEIGHTS_NAME, "rb") as fh:
            for record in manifest.parameters:
                array = read_tensor(fh)
                if list(array.shape) != record.shape:
                    raise CheckpointError(
                        f"{path}: parameter {record.name} has shape {array.shape}, manifest says {record.shape}"
                    )
                state[record.name] = array
            if fh.read(1):
                raise CheckpointError(f"{path}: trailing bytes after the last parameter")
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read weights: {e}")
    except ShapeError as e:
        raise CheckpointError(f"{path}: corrupt weights: {e}")
    model.store.load_state(state)
    return model

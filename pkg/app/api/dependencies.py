from pathlib import Path
from typing import Tuple

from fastapi import HTTPException, status

from app.core.config import Settings, settings
from app.core.errors import PatLabError
from app.core.training import assemble_int
from app.models.params import ModelParams, TrainMode
from app.storage.checkpoints import load_checkpoint


def get_settings() -> Settings:
    """Process settings; overridden in tests."""
    return settings


def bad_request(exc: Exception) -> HTTPException:
    """Library errors become 400 responses carrying the message."""
    return HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(exc))


def resolve_checkpoint_path(name: str, cfg: Settings) -> Path:
    """
    Map a checkpoint name onto CHECKPOINT_DIR.

    A name may point at a single file (with or without the .patc suffix) or at
    a directory of per-class independent-training files.
    """
    root = Path(cfg.CHECKPOINT_DIR).resolve()
    for candidate in (root / name, root / f"{name}.patc"):
        candidate = candidate.resolve()
        if root not in candidate.parents:
            break
        if candidate.exists():
            return candidate
    raise HTTPException(
        status_code=status.HTTP_404_NOT_FOUND,
        detail=f"Checkpoint '{name}' not found"
    )


def load_predictor(name: str, cfg: Settings) -> Tuple[ModelParams, TrainMode]:
    """Evaluation parameters (EMA when present) and training mode of a named checkpoint."""
    path = resolve_checkpoint_path(name, cfg)
    try:
        if path.is_dir():
            files = sorted(path.glob("int_class_*.patc"))
            if not files:
                raise HTTPException(
                    status_code=status.HTTP_404_NOT_FOUND,
                    detail=f"No independent-training checkpoints under '{name}'"
                )
            return assemble_int([load_checkpoint(f) for f in files]), TrainMode.INT
        checkpoint = load_checkpoint(path)
    except PatLabError as exc:
        raise bad_request(exc) from exc
    return checkpoint.eval_params, checkpoint.mode

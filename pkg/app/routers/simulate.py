"""POST /api/v1/simulate: run one subcommand on an uploaded run configuration.

The pipeline is the one behind the command line; it runs in a worker
thread and writes its artifacts under ``[runner] output_root``.
"""

import asyncio
import logging
import time
from pathlib import Path

from fastapi import APIRouter, Depends, File, Form, HTTPException, UploadFile, status

from app.auth import verify_api_key
from app.config import AppConfig, get_config
from app.services.errors import DickeError
from app.services.run_config import ConfigError, parse_config
from app.services.runner import COMMANDS, config_hash, run
from app.services.validation import ValidationFailure

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/v1", tags=["simulation"])


def _split_overrides(raw: str) -> list[str]:
    return [line.strip() for line in raw.splitlines() if line.strip()]


@router.post("/simulate")
async def simulate(
    config_file: UploadFile = File(...),
    command: str = Form("simulate"),
    overrides: str = Form(""),
    workers: int | None = Form(None),
    _api_key: str = Depends(verify_api_key),
    config: AppConfig = Depends(get_config),
):
    """Parse the uploaded configuration, run ``command`` and return the manifest and summary.

    ``overrides`` holds one ``key=value`` per line.
    """
    start_time = time.time()

    if command not in COMMANDS:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=f"Unknown command '{command}'. Allowed: {', '.join(COMMANDS)}",
        )
    if workers is not None and workers < 1:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail="workers must be >= 1")

    content = await config_file.read()
    if len(content) > config.max_upload_size_kb * 1024:
        raise HTTPException(
            status_code=status.HTTP_413_REQUEST_ENTITY_TOO_LARGE,
            detail=f"Run configuration exceeds {config.max_upload_size_kb} KB limit",
        )
    try:
        text = content.decode("utf-8")
    except UnicodeDecodeError:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail="Run configuration must be UTF-8 text",
        )

    try:
        cfg = parse_config(text, _split_overrides(overrides))
    except ConfigError as e:
        logger.warning("Rejected configuration '%s': %s", config_file.filename, e)
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail={"message": "Invalid run configuration", "errors": e.errors},
        )

    out_dir = Path(config.output_root) / f"{command}-{config_hash(cfg, command)[:16]}"
    logger.info("API run: %s from '%s' into %s", command, config_file.filename, out_dir)

    try:
        result = await asyncio.to_thread(run, cfg, command, workers, out_dir)
    except ConfigError as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail={"message": "Invalid run configuration", "errors": e.errors},
        )
    except ValidationFailure as e:
        logger.error("Validation failed: %s", e)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail={"message": str(e), "failed_checks": e.failed},
        )
    except DickeError as e:
        logger.error("Run failed: %s", e, exc_info=True)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail={"message": f"Numerical failure: {e}", "error_type": type(e).__name__},
        )

    processing_time = round(time.time() - start_time, 2)
    logger.info("API run completed in %.2fs", processing_time)
    return {
        "status": "success",
        "command": command,
        "output_dir": str(out_dir),
        "files": result.manifest["files"],
        "manifest": result.manifest,
        "summary": result.summary,
        "processing_time_seconds": processing_time,
    }

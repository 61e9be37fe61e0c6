"""
Analysis Routes - Variant presets, architecture reports, LR schedules and CKA
"""
import logging
from functools import lru_cache
from typing import Optional

import numpy as np
from fastapi import APIRouter, HTTPException, Query

from app.core.exceptions import ConvTransformerError
from app.models.presets import REFERENCE_PARAMETER_COUNTS, TASK_IDS, VARIANT_SIZES
from app.models.schemas import (
    ArchitectureSummary,
    CkaRequest,
    CkaResponse,
    ScheduleResponse,
    TrainConfig,
    VariantConfig,
)
from app.services.convtransformer_service import architecture_summary
from app.services.diversity_service import unbiased_linear_cka
from app.services.training_service import lr_at_epoch

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/v1", tags=["convtransformer"])


# ============================================
# Endpoints
# ============================================

@router.get("/variants")
async def list_variants():
    """Named variants with their (H, D, C, E, F) sizes and reported parameter counts."""
    return {
        "success": True,
        "variants": [
            {
                "name": name,
                "heads": H,
                "projections": D,
                "local_features": C,
                "expansions": E,
                "final_channels": F,
                "reference_parameters": REFERENCE_PARAMETER_COUNTS[name],
            }
            for name, (H, D, C, E, F) in VARIANT_SIZES.items()
        ],
        "tasks": list(TASK_IDS),
    }


@lru_cache(maxsize=32)
def cached_summary(name: str, num_classes: int, time_frames: int) -> ArchitectureSummary:
    return architecture_summary(VariantConfig.preset(name, num_classes=num_classes, time_frames=time_frames))


@router.get("/variants/{name}/summary", response_model=ArchitectureSummary)
def variant_summary(
    name: str,
    num_classes: int = Query(72, ge=2),
    time_frames: int = Query(32, ge=1),
):
    """
    Per-module parameter counts and output shapes.

    Builds the variant's tensors once per configuration to count them exactly;
    runs in the threadpool.
    """
    try:
        return cached_summary(name, num_classes, time_frames)
    except (ConvTransformerError, ValueError) as e:
        logger.warning(f"Summary for {name} failed: {e}")
        raise HTTPException(status_code=400, detail=str(e))


@router.get("/schedule", response_model=ScheduleResponse)
async def schedule(
    task: str = Query("6cat"),
    variant: str = Query("slim"),
    epochs: Optional[int] = Query(None, ge=1),
):
    """Per-epoch learning rate under the task's default decay."""
    try:
        cfg = TrainConfig.for_task(task, variant, epochs=epochs)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return ScheduleResponse(
        task=task,
        variant=variant,
        epochs=cfg.epochs,
        gamma=cfg.gamma,
        learning_rates=[lr_at_epoch(cfg, epoch) for epoch in range(1, cfg.epochs + 1)],
    )


@router.post("/cka", response_model=CkaResponse)
def cka(request: CkaRequest):
    """Unbiased linear CKA between two representation matrices."""
    try:
        a = np.asarray(request.a, dtype=np.float64)
        b = np.asarray(request.b, dtype=np.float64)
        value = unbiased_linear_cka(a, b)
    except (ConvTransformerError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    return CkaResponse(cka=value, rows=a.shape[0])

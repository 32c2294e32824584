"""
HALSIE segmentation service - REST API

Energy estimates, voxelization and inference over a trained checkpoint.
"""

import os
from datetime import datetime, timezone
from typing import Dict, Tuple

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from .checkpoint import load_model
from .energy import estimate_energy, estimate_from_flops
from .errors import CheckpointError, HalsieError
from .evio import parse_events, voxelize
from .models import (
    EnergyEstimateRequest,
    EnergyReport,
    InferRequest,
    InferResponse,
    VoxelizeRequest,
    VoxelizeResponse,
)
from .trainer import to_model_inputs

app = FastAPI(
    title="HALSIE Segmentation API",
    description="Hybrid event/frame semantic segmentation with spiking temporal encoding",
    version="1.0.0",
)

_models: Dict[str, Tuple[float, object]] = {}


def current_model():
    """Model of HALSIE_CHECKPOINT, reloaded when the file changes; None when unset."""
    path = os.getenv("HALSIE_CHECKPOINT")
    if not path:
        return None
    try:
        mtime = os.path.getmtime(path)
    except OSError:
        raise HTTPException(status_code=404, detail=f"checkpoint not found: {path}") from None
    cached = _models.get(path)
    if cached is None or cached[0] != mtime:
        _models[path] = (mtime, load_model(path))
    return _models[path][1]


def _require_model():
    model = current_model()
    if model is None:
        raise HTTPException(status_code=404, detail="no checkpoint configured (set HALSIE_CHECKPOINT)")
    return model


@app.get("/")
async def root():
    """Root endpoint with API information."""
    return {
        "service": "HALSIE Segmentation API",
        "version": "1.0.0",
        "checkpoint": os.getenv("HALSIE_CHECKPOINT"),
        "status": "operational",
        "endpoints": {
            "energy": "/api/v1/energy/estimate (POST)",
            "voxelize": "/api/v1/voxelize (POST)",
            "model": "/api/v1/model (GET)",
            "infer": "/api/v1/infer (POST)",
            "health": "/health (GET)",
            "docs": "/docs (GET)",
        },
    }


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {
        "status": "healthy",
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "model_loaded": bool(_models),
    }


@app.post("/api/v1/energy/estimate", response_model=EnergyReport)
async def energy_estimate(request: EnergyEstimateRequest):
    """
    Price one inference.

    Layer profiles take precedence over raw FLOP counts when both are given.
    """
    if request.layers is not None:
        return estimate_energy(request.layers, request.timesteps, sample_set="request layers")
    return estimate_from_flops(request.flops_ann or 0.0, request.flops_snn or 0.0)


@app.post("/api/v1/voxelize", response_model=VoxelizeResponse)
async def voxelize_events(request: VoxelizeRequest):
    window = parse_events(request.events_csv, request.width, request.height)
    volume = voxelize(window, request.bins)
    return VoxelizeResponse(
        shape=list(volume.data.shape),
        events=len(window),
        on_mass=volume.polarity_mass(1),
        off_mass=volume.polarity_mass(0),
        nonzero_density=volume.nonzero_density(),
    )


@app.get("/api/v1/model")
async def model_info():
    model = _require_model()
    return {
        "setting": model.setting,
        "parameters": model.num_params(),
        "spec": model.spec.model_dump(),
    }


@app.post("/api/v1/infer", response_model=InferResponse)
async def infer(request: InferRequest):
    """Class-id map and per-class pixel counts for one frame and its events."""
    model = _require_model()
    frame = np.asarray(request.frame)
    if frame.ndim != 2:
        raise HTTPException(status_code=422, detail="frame must be a rectangular list of rows")
    frame = np.clip(frame, 0, 255).astype(np.uint8)
    height, width = frame.shape
    window = parse_events(request.events_csv, width, height)
    volume = voxelize(window, model.spec.bins)
    frames, volumes = to_model_inputs(frame[None, None], volume.data[None])
    ids = np.argmax(model.forward(frames, volumes).data, axis=1)[0]
    histogram = np.bincount(ids.reshape(-1), minlength=model.spec.classes)
    return InferResponse(classes=ids.tolist(), histogram=histogram.tolist())


@app.exception_handler(HTTPException)
async def http_exception_handler(request, exc):
    """Custom exception handler for better error messages."""
    return JSONResponse(
        status_code=exc.status_code,
        content={
            "error": exc.detail,
            "status_code": exc.status_code,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        },
    )


@app.exception_handler(HalsieError)
async def pipeline_exception_handler(request, exc):
    status = 404 if isinstance(exc, CheckpointError) else 422
    return JSONResponse(
        status_code=status,
        content={
            "error": str(exc),
            "status_code": status,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        },
    )


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host="0.0.0.0", port=6000)

"""
EEG-ConvTransformer - Analysis API
Architecture reports, learning-rate schedules and CKA over HTTP
"""
import logging

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

# Load environment variables FIRST
load_dotenv()

from app.api.routes import router as api_router  # noqa: E402
from app.config import settings  # noqa: E402

logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

app = FastAPI(
    title="EEG-ConvTransformer API",
    description="""
    Companion service for the EEG-ConvTransformer library.

    ## Endpoints

    - **Variants** - Slim / Fit / Wide sizes and per-module parameter reports
    - **Schedule** - Per-epoch learning rates with the per-task defaults
    - **CKA** - Unbiased linear CKA between two representation matrices

    Training and mesh projection run through the `eegct` command line.
    """,
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(api_router)  # /api/v1/*


@app.get("/")
async def root():
    """Health check and API info"""
    return {
        "status": "healthy",
        "app": "EEG-ConvTransformer API",
        "version": "1.0.0",
        "endpoints": {
            "variants": "/api/v1/variants",
            "summary": "/api/v1/variants/{name}/summary",
            "schedule": "/api/v1/schedule",
            "cka": "/api/v1/cka",
            "docs": "/docs",
        },
    }


@app.get("/health")
async def health_check():
    """Basic health check"""
    return {
        "status": "healthy",
        "message": "EEG-ConvTransformer API is running",
        "environment": settings.environment,
    }


if __name__ == "__main__":
    import uvicorn
    uvicorn.run("app.main:app", host="0.0.0.0", port=8000, reload=settings.debug)

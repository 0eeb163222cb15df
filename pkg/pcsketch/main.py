from fastapi import FastAPI
from contextlib import asynccontextmanager
import logging

from .config import configure_logging, get_settings

configure_logging()
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    settings = get_settings()
    logger.info(f"Serving sketches from '{settings.sketch_dir}'")
    logger.info("Application startup complete.")
    yield


app = FastAPI(title="pcsketch", lifespan=lifespan)

from .routers.calibrate_router import router as calibrate_router
from .routers.sketches_router import router as sketches_router

app.include_router(calibrate_router)
app.include_router(sketches_router)


@app.get("/health")
async def health_check():
    return {"status": "healthy"}

import logging
import re
from pathlib import Path

from fastapi import APIRouter, Form
from fastapi.responses import JSONResponse

# Local imports
from ..config import get_settings
from ..exceptions import SketchError
from ..models import QueryResponseModel
from ..services.sketch_service import sketch_service

logger = logging.getLogger(__name__)

SKETCH_SUFFIX = ".pcss"
NAME_PATTERN = re.compile(r"^[A-Za-z0-9_.-]+$")

router = APIRouter(prefix="/sketches", tags=["sketches"])


def _sketch_dir() -> Path:
    return Path(get_settings().sketch_dir)


@router.get("")
async def list_sketches():
    directory = _sketch_dir()
    names = sorted(p.stem for p in directory.glob(f"*{SKETCH_SUFFIX}")) if directory.is_dir() else []
    return {"success": True, "sketches": names}


@router.post("/query")
async def query_sketch(
    name: str = Form(...),
    indices: str = Form(...),
    estimator: str = Form(None)
):
    if not NAME_PATTERN.match(name) or name.startswith("."):
        return JSONResponse(status_code=400, content={"success": False, "message": f"Invalid sketch name '{name}'"})
    try:
        parsed = [int(token) for token in indices.split(",") if token.strip()]
    except ValueError:
        return JSONResponse(status_code=400, content={"success": False, "message": "indices must be comma-separated integers"})

    path = _sketch_dir() / f"{name}{SKETCH_SUFFIX}"
    if not path.is_file():
        return JSONResponse(status_code=404, content={"success": False, "message": f"Sketch '{name}' not found"})

    try:
        sketch = sketch_service.load_sketch(path)
        estimates = sketch_service.estimate_all(sketch, parsed, estimator or None)
    except (SketchError, ValueError) as e:
        logger.warning(f"⚠️ Query on '{name}' rejected: {e}")
        return JSONResponse(status_code=400, content={"success": False, "message": str(e)})

    used = estimator or sketch_service.default_estimator(sketch.variant).value
    return QueryResponseModel(
        name=name, estimator=used, indices=parsed, estimates=[float(e) for e in estimates]
    )

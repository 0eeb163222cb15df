from fastapi import APIRouter
from fastapi.responses import JSONResponse

# Local imports
from ..exceptions import SketchError
from ..models import CalibrationResponseModel
from ..services.privacy_service import privacy_service

router = APIRouter(tags=["calibrate"])


@router.get("/calibrate")
async def calibrate(epsilon: float, delta: float, k: int):
    try:
        sigma = privacy_service.calibrate_gaussian(epsilon, delta, k)
        rho = privacy_service.zcdp_of(sigma, k)
    except SketchError as e:
        return JSONResponse(status_code=400, content={"success": False, "message": str(e)})
    return CalibrationResponseModel(epsilon=epsilon, delta=delta, k=k, sigma=sigma, rho=rho)

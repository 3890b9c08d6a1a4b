from fastapi import APIRouter

from app.api.grid import router as grid_router

router = APIRouter()
router.include_router(grid_router)

__all__ = ["router"]

from fastapi import APIRouter

from app.models import HealthView
from app.services.monitor import get_serving_context

router = APIRouter()

@router.get("/", response_model=HealthView)
async def health():
    context = get_serving_context()
    return HealthView(
        ok=context.graph is not None and context.victim is not None,
        graph_loaded=context.graph is not None,
        victim_loaded=context.victim is not None,
        detector_loaded=context.monitor is not None,
        details=context.problems,
    )

from typing import Optional

from fastapi import Header, HTTPException

from app import settings
from app.services.monitor import LiveMonitor, ServingContext, get_serving_context

if settings.API_KEY:
    print(f"[DEPS] Found API key: {settings.API_KEY[:4]}...", flush=True)
else:
    print("[DEPS] API_KEY_INTERNAL is not set; admin endpoints will refuse requests", flush=True)


async def verify_internal(x_api_key: Optional[str] = Header(None, alias="X-API-Key")):
    """
    Verify internal API key from X-API-Key header.
    """
    api_key = settings.API_KEY
    if not api_key:
        print("[AUTH ERROR] API_KEY_INTERNAL is not set in environment!", flush=True)
        raise HTTPException(status_code=500, detail="API key not configured on server")

    if not x_api_key:
        print("[AUTH ERROR] X-API-Key header is missing", flush=True)
        raise HTTPException(status_code=401, detail="Unauthorized: X-API-Key header required")

    if x_api_key != api_key:
        print(f"[AUTH ERROR] API key mismatch! Received: {x_api_key[:4]}...", flush=True)
        raise HTTPException(status_code=401, detail="Unauthorized: Invalid API key")

    print("[AUTH] API key verified successfully", flush=True)


def get_context() -> ServingContext:
    context = get_serving_context()
    if context.graph is None or context.victim is None:
        raise HTTPException(status_code=503, detail="Model artifacts not loaded")
    return context


def get_monitor() -> LiveMonitor:
    context = get_context()
    if context.monitor is None:
        raise HTTPException(status_code=503, detail="Detector not loaded")
    return context.monitor


def user_header(x_user_id: Optional[str]) -> str:
    if not x_user_id:
        raise HTTPException(status_code=400, detail="X-User-Id header required")
    return x_user_id

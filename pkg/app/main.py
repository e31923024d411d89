import traceback

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.routers import health, query, users
from app.services.monitor import get_serving_context
from app.settings import CORS_ORIGINS, configure_logging


app = FastAPI(title="ATOM Extraction Monitor", version="0.1.0")

@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    """Catch all unhandled exceptions and log them."""
    print(f"[GLOBAL ERROR] Unhandled exception: {type(exc).__name__}: {exc}")
    print(f"[GLOBAL ERROR] Path: {request.url.path}")
    traceback_str = traceback.format_exc()
    print(f"[GLOBAL ERROR] Traceback:\n{traceback_str}")
    return JSONResponse(
        status_code=500,
        content={
            "detail": f"Internal server error: {str(exc)}",
            "type": type(exc).__name__
        }
    )

app.add_middleware(
    CORSMiddleware,
    allow_origins=CORS_ORIGINS,
    allow_methods=["*"],
    allow_headers=["*"],
    allow_credentials=True,
)

@app.on_event("startup")
async def on_startup():
    configure_logging()
    context = get_serving_context()
    app.state.context = context
    print(f"[STARTUP] Artifacts from {context.artifact_dir}; problems: {context.problems or 'none'}", flush=True)

@app.on_event("shutdown")
async def on_shutdown():
    print("[SHUTDOWN] Monitor stopped", flush=True)

app.include_router(health.router, prefix="/health", tags=["health"])
app.include_router(query.router, prefix="/query", tags=["query"])
app.include_router(users.router, prefix="/users", tags=["users"])

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.api.endpoints import causal, inference, metrics, patching
from app.core.logging import configure_logging

configure_logging()

app = FastAPI(
    title="Counterfactual Patching Lab",
    description="Patch-based TDE fusion, multi-label metrics and causal-model checks",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["http://localhost:3000"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Include routers
app.include_router(causal.router)
app.include_router(metrics.router)
app.include_router(patching.router)
app.include_router(inference.router)


@app.get("/")
def root():
    return {
        "message": "Counterfactual Patching Lab API",
        "docs": "/docs",
        "version": "1.0.0"
    }


@app.get("/health")
def health_check():
    return {"status": "healthy"}

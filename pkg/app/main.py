"""FastAPI application: lifespan, middleware, and route registration."""

import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app import __version__
from app.config import get_config
from app.routers.simulate import router as simulate_router

logging.basicConfig(
    level=get_config().log_level,
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Log the effective settings at startup."""
    config = get_config()
    logger.info("Starting open Dicke solver service %s", __version__)
    logger.info("Server: %s:%d", config.server_host, config.server_port)
    logger.info("Runner: %d default worker(s), output root %s", config.default_workers, config.output_root)
    yield
    logger.info("Shutting down open Dicke solver service")


app = FastAPI(
    title="Open Dicke Solver",
    description="Exact, mean-field, cumulant and nuHOPS simulations of the open Dicke model",
    version=__version__,
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(simulate_router)


@app.get("/health")
async def health_check():
    """Service status and runner defaults."""
    config = get_config()
    return {
        "status": "ok",
        "service": "dicke-hops",
        "version": __version__,
        "default_workers": config.default_workers,
    }

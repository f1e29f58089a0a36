"""Parallel nuHOPS ensembles with scheduling-independent results.

Every trajectory draws its noise from a generator keyed by
(base_seed, trajectory index), workers return records over the pool's
ordered map, and all reductions run in index order. The worker count
therefore never changes a single bit of the output.
"""

import logging
import time
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from app.services.nuhops import (
    DimensionBlowup,
    EnsembleAverage,
    HopsConfig,
    TrajectoryRecord,
    ensemble_average,
    propagate_trajectory,
)
from app.services.spin_algebra import ModelParams, SpinState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajectoryFailure:
    traj_index: int
    reason: str


@dataclass(frozen=True, eq=False)
class EnsembleRun:
    records: list[TrajectoryRecord]
    failures: list[TrajectoryFailure]
    average: EnsembleAverage
    wall_time: float


def _run_one(task: tuple[SpinState, ModelParams, HopsConfig, int]) -> TrajectoryRecord | TrajectoryFailure:
    psi0, params, cfg, index = task
    try:
        return propagate_trajectory(psi0, params, cfg, index)
    except DimensionBlowup as e:
        return TrajectoryFailure(traj_index=index, reason=str(e))


def run_ensemble(
    psi0: SpinState,
    params: ModelParams,
    cfg: HopsConfig,
    workers: int = 1,
    on_record: Callable[[TrajectoryRecord], None] | None = None,
) -> EnsembleRun:
    """Propagate ``cfg.n_traj`` trajectories and average them.

    Args:
        psi0: Initial spin state (the auxiliary mode starts in its vacuum).
        params: Model parameters.
        cfg: nuHOPS settings, including ``n_traj`` and ``base_seed``.
        workers: Worker processes; 1 runs in the calling process.
        on_record: Called with every successful record in index order
            (used for streaming trajectories to disk).

    Returns:
        Records, failures, the ensemble average and the wall time.
    """
    started = time.perf_counter()
    tasks = [(psi0, params, cfg, i) for i in range(cfg.n_traj)]
    logger.info("Running %d trajectories (N=%d, dt=%g) on %d worker(s)",
                cfg.n_traj, params.N, cfg.dt, workers)

    if workers <= 1:
        results = map(_run_one, tasks)
        collected = _collect(results, on_record)
    else:
        chunksize = max(1, cfg.n_traj // (8 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            collected = _collect(pool.map(_run_one, tasks, chunksize=chunksize), on_record)
    records, failures = collected

    for failure in failures:
        logger.debug("Trajectory %d dropped: %s", failure.traj_index, failure.reason)
    if not records:
        raise DimensionBlowup(f"all {cfg.n_traj} trajectories failed")

    average = ensemble_average(records, n_failed=len(failures))
    wall = time.perf_counter() - started
    logger.info("Ensemble finished in %.1fs: %d ok, %d failed", wall, len(records), len(failures))
    return EnsembleRun(records=records, failures=failures, average=average, wall_time=wall)


def _collect(results, on_record) -> tuple[list[TrajectoryRecord], list[TrajectoryFailure]]:
    records, failures = [], []
    for result in results:
        if isinstance(result, TrajectoryFailure):
            failures.append(result)
            continue
        records.append(result)
        if on_record is not None:
            on_record(result)
    return records, failures

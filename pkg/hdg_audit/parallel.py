import concurrent.futures
from typing import Dict, List, Optional, Tuple
import logging
import time

from .cache import AuditCache
from .inequalities import (
    AuditResult,
    SweepResult,
    VerdictPolicy,
    audit_level,
    get_inequality,
    judge,
    verdict_ok,
)
from .linalg import DEFAULT_NULL_TOL
from .rich_utils import (
    create_progress_bar,
    print_audit_table,
    print_error,
    print_run_complete,
    print_run_start,
)

logger = logging.getLogger(__name__)


class ParallelSweepRunner:
    def __init__(
        self,
        cache_dir: str = ".cache",
        cache_duration: int = 24,
        max_workers: int = 2,
        use_cache: bool = True,
        show_progress: bool = True,
    ):
        """
        Initialize the parallel sweep runner.

        Args:
            cache_dir: Directory for cache files
            cache_duration: How long to keep cache entries in hours
            max_workers: Maximum number of parallel audit workers
            use_cache: Read and write per-level results through the cache
            show_progress: Render a progress bar and summary tables
        """
        self.cache = AuditCache(cache_dir, cache_duration) if use_cache else None
        self.max_workers = max_workers
        self.show_progress = show_progress

    def _audit(
        self,
        inequality: str,
        k: int,
        level: int,
        mode: str,
        samples: int,
        seed: int,
        gamma: str,
        null_tol: float,
    ) -> AuditResult:
        """Audit one level, reading the cache first."""
        if self.cache is not None:
            cached = self.cache.get_cached_result(inequality, k, level, mode, samples, seed, gamma, null_tol)
            if cached is not None:
                return cached
        result = audit_level(inequality, k, level, mode, samples, seed, gamma, null_tol)
        if self.cache is not None:
            self.cache.cache_result(result, gamma, null_tol)
        return result

    def run(
        self,
        inequalities: List[str],
        k: int,
        levels: int,
        mode: str = "eigen",
        samples: int = 0,
        seed: int = 0,
        gamma: str = "left",
        policy: VerdictPolicy = VerdictPolicy(),
        null_tol: float = DEFAULT_NULL_TOL,
    ) -> List[SweepResult]:
        """
        Audit every (inequality, level) pair in parallel and judge each sweep.

        Returns:
            One SweepResult per inequality, in the order given
        """
        for inequality in inequalities:
            get_inequality(inequality)
        start_time = time.time()
        jobs: List[Tuple[str, int]] = [(i, level) for i in inequalities for level in range(levels)]
        results: Dict[Tuple[str, int], AuditResult] = {}

        if self.show_progress:
            print_run_start("Inequality audit", {
                "Inequalities": ", ".join(inequalities), "k": k, "Levels": levels, "Mode": mode,
            })

        with create_progress_bar() as progress:
            task_id = progress.add_task(
                "[cyan]Auditing", total=len(jobs), done=f"0/{len(jobs)}", visible=self.show_progress
            )
            with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                future_to_job = {
                    executor.submit(self._audit, i, k, level, mode, samples, seed, gamma, null_tol): (i, level)
                    for i, level in jobs
                }
                completed = 0
                for future in concurrent.futures.as_completed(future_to_job):
                    job = future_to_job[future]
                    try:
                        results[job] = future.result()
                    except Exception as e:
                        print_error(f"Error auditing {job[0]} level {job[1]}: {str(e)}")
                        raise
                    completed += 1
                    progress.update(task_id, advance=1, done=f"{completed}/{len(jobs)}")

        sweeps = [
            judge(i, [results[(i, level)] for level in range(levels)], policy)
            for i in inequalities
        ]

        if self.show_progress:
            print_audit_table(sweeps)
            ok = sum(verdict_ok(s.verdict) for s in sweeps)
            print_run_complete(ok, len(sweeps), time.time() - start_time)
        return sweeps

    def clear_cache(self, inequality: Optional[str] = None):
        if self.cache is not None:
            self.cache.clear_cache(inequality)

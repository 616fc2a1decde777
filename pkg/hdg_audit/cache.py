import os
import json
import hashlib
from datetime import datetime, timedelta
from typing import Dict, Optional
import logging

from .inequalities import AuditResult

logger = logging.getLogger(__name__)


class AuditCache:
    def __init__(self, cache_dir: str = ".cache", cache_duration: int = 24):
        """
        Initialize the audit cache.

        Args:
            cache_dir: Directory to store cache files
            cache_duration: How long to keep cache entries in hours
        """
        self.cache_dir = cache_dir
        self.cache_duration = timedelta(hours=cache_duration)
        self._ensure_cache_dir()

    def _ensure_cache_dir(self):
        if not os.path.exists(self.cache_dir):
            os.makedirs(self.cache_dir)

    @staticmethod
    def _params(inequality: str, k: int, level: int, mode: str, samples: int, seed: int,
                gamma: str, null_tol: float) -> Dict:
        return {
            'inequality': inequality, 'k': k, 'level': level, 'mode': mode,
            'samples': samples, 'seed': seed, 'gamma': gamma, 'null_tol': repr(null_tol),
        }

    def _get_cache_key(self, params: Dict) -> str:
        """Generate a unique cache key for the audit parameters."""
        key_string = json.dumps(params, sort_keys=True)
        return hashlib.md5(key_string.encode()).hexdigest()

    def _get_cache_file(self, cache_key: str) -> str:
        return os.path.join(self.cache_dir, f"{cache_key}.json")

    def get_cached_result(self, inequality: str, k: int, level: int, mode: str = "eigen",
                          samples: int = 0, seed: int = 0, gamma: str = "left",
                          null_tol: float = 1e-10) -> Optional[AuditResult]:
        """
        Retrieve a cached audit result if it exists and is not expired.

        Returns:
            The cached AuditResult if valid, None otherwise
        """
        params = self._params(inequality, k, level, mode, samples, seed, gamma, null_tol)
        cache_file = self._get_cache_file(self._get_cache_key(params))

        if not os.path.exists(cache_file):
            return None

        try:
            with open(cache_file, 'r', encoding='utf-8') as f:
                cache_data = json.load(f)

            cache_time = datetime.fromisoformat(cache_data['timestamp'])
            if datetime.now() - cache_time > self.cache_duration:
                logger.info(f"Cache expired for {inequality} k={k} level={level}")
                return None

            logger.info(f"Using cached result for {inequality} k={k} level={level}")
            return AuditResult.from_dict(cache_data['result'])

        except Exception as e:
            logger.error(f"Error reading cache: {str(e)}")
            return None

    def cache_result(self, result: AuditResult, gamma: str = "left", null_tol: float = 1e-10):
        """
        Cache one audit result; the verdict is not stored since it depends on the whole sweep.

        Args:
            result: Audit result to cache
            gamma: Boundary subset the result was computed with
            null_tol: Null-space threshold the result was computed with
        """
        params = self._params(result.inequality, result.k, result.level, result.mode,
                              result.samples, result.seed, gamma, null_tol)
        cache_file = self._get_cache_file(self._get_cache_key(params))

        try:
            data = result.to_dict()
            data['verdict'] = ""
            cache_data = {
                'timestamp': datetime.now().isoformat(),
                'inequality': result.inequality,
                'params': params,
                'result': data,
            }
            with open(cache_file, 'w', encoding='utf-8') as f:
                json.dump(cache_data, f, indent=2)

            logger.info(f"Cached {result.inequality} k={result.k} level={result.level}")

        except Exception as e:
            logger.error(f"Error writing to cache: {str(e)}")

    def clear_cache(self, inequality: Optional[str] = None):
        """
        Clear the cache, optionally for a single inequality.

        Args:
            inequality: Optional inequality id to clear cache for
        """
        try:
            for filename in os.listdir(self.cache_dir):
                if not filename.endswith('.json'):
                    continue
                cache_file = os.path.join(self.cache_dir, filename)
                if inequality:
                    with open(cache_file, 'r', encoding='utf-8') as f:
                        cache_data = json.load(f)
                    if cache_data.get('inequality') != inequality:
                        continue
                os.remove(cache_file)
            if inequality:
                logger.info(f"Cleared cache for inequality: {inequality}")
            else:
                logger.info("Cleared all cache files")

        except Exception as e:
            logger.error(f"Error clearing cache: {str(e)}")

"""
On-disk cache of projection matrices.

Tracing a 128x128 detector through a 64^3 grid takes far longer than
rendering with a stored matrix, and every phantom of a dataset shares the
same geometry, so the matrix is traced once and kept as a scipy ``.npz``.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional

from scipy import sparse

from ..config import ProjectionGeometry
from .siddon import RayWeights, extract_ray_weights

logger = logging.getLogger(__name__)

CACHE_VERSION = "1"


class RayWeightCache:
    """
    Cache of ``extract_ray_weights`` results keyed by geometry and grid.

    Each entry is a ``<key>_weights.npz`` matrix with a ``<key>_weights.json``
    description next to it.
    """

    def __init__(self, cache_dir: str = "./cache"):
        """
        Initialize cache.

        Args:
            cache_dir: Directory to store cached matrices
        """
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(geom: ProjectionGeometry, dims: tuple[int, int, int], spacing: tuple[float, float, float]) -> str:
        payload = json.dumps(
            {
                "geometry": geom.model_dump(mode="json"),
                "dims": list(dims),
                "spacing": list(spacing),
                "version": CACHE_VERSION,
            },
            sort_keys=True,
        )
        return hashlib.blake2b(payload.encode("utf-8"), digest_size=12).hexdigest()

    def get_cache_path(self, key: str) -> Path:
        """Get matrix file path for a key."""
        return self.cache_dir / f"{key}_weights.npz"

    def is_cached(self, key: str) -> bool:
        return self.get_cache_path(key).exists()

    def save(self, key: str, weights: RayWeights, geom: ProjectionGeometry) -> None:
        sparse.save_npz(self.get_cache_path(key), weights.matrix, compressed=True)
        meta = {
            "key": key,
            "geometry": geom.model_dump(mode="json"),
            "detector_shape": list(weights.detector_shape),
            "volume_dims": list(weights.volume_dims),
            "spacing": list(weights.spacing),
            "nnz": int(weights.matrix.nnz),
            "version": CACHE_VERSION,
        }
        with open(self.get_cache_path(key).with_suffix(".json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2)

    def load(self, key: str) -> Optional[RayWeights]:
        """
        Load a cached matrix.

        Returns:
            RayWeights, or None if missing or unreadable
        """
        path = self.get_cache_path(key)
        meta_path = path.with_suffix(".json")
        if not path.exists() or not meta_path.exists():
            return None
        try:
            with open(meta_path, "r", encoding="utf-8") as f:
                meta = json.load(f)
            matrix = sparse.load_npz(path).tocsr()
        except (OSError, ValueError, KeyError) as e:
            logger.warning("Ignoring unreadable weight cache entry %s: %s", path.name, e)
            return None
        return RayWeights(
            matrix=matrix,
            detector_shape=tuple(meta["detector_shape"]),
            volume_dims=tuple(meta["volume_dims"]),
            spacing=tuple(meta["spacing"]),
        )

    def get_or_compute(
        self,
        geom: ProjectionGeometry,
        dims: tuple[int, int, int],
        spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> RayWeights:
        """Return cached weights, tracing and storing them on a miss."""
        key = self.key(geom, dims, spacing)
        weights = self.load(key)
        if weights is not None:
            logger.debug("weight cache hit %s", key)
            return weights
        logger.info("Tracing projection matrix for detector %s and grid %s", geom.detector_shape, dims)
        weights = extract_ray_weights(geom, dims, spacing)
        self.save(key, weights, geom)
        return weights

    def clear(self, key: str) -> bool:
        """
        Remove one entry.

        Returns:
            True if cleared, False if not found
        """
        path = self.get_cache_path(key)
        if not path.exists():
            return False
        path.unlink()
        path.with_suffix(".json").unlink(missing_ok=True)
        return True

    def clear_all(self) -> int:
        count = 0
        for entry in self.cache_dir.glob("*_weights.npz"):
            entry.unlink()
            entry.with_suffix(".json").unlink(missing_ok=True)
            count += 1
        return count

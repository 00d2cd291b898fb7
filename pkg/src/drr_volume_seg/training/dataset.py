"""
Dataset assembly.

Each item is a phantom rendered to a normalized DRR at the network input
resolution plus its center-cropped target mask. Rendering runs in a process
pool; results are collected in index order, so the files do not depend on
the worker count.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..config import DatasetSpec, ProjectionGeometry
from ..core.rng import RngState
from ..errors import ConfigError, PhantomError
from ..imaging import (
    RayWeightCache,
    RayWeights,
    aligned_geometry,
    apply_domain_shift,
    center_crop,
    extract_ray_weights,
    generate_phantom,
    render_network_input,
    to_network_layout,
)
from ..storage.formats import read_imgf, read_volb, write_imgf, write_volb
from ..storage.schemas import DatasetItem, DatasetManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "dataset.json"
MAX_PHANTOM_ATTEMPTS = 10

Progress = Optional[Callable[[dict], None]]


def dataset_geometry(spec: DatasetSpec) -> ProjectionGeometry:
    """The explicit geometry, or one aligned with the target crop."""
    if spec.geometry is not None:
        return spec.geometry
    return aligned_geometry(spec.target_dims, spec.phantom.spacing, spec.detector_pixels)


def item_seed(spec: DatasetSpec, index: int, attempt: int = 0) -> int:
    name = f"item{index}" if attempt == 0 else f"item{index}/retry{attempt}"
    return RngState(spec.seed).child_seed(name)


def _render_item(args: tuple[DatasetSpec, ProjectionGeometry, RayWeights, int]) -> dict:
    spec, geom, weights, index = args
    for attempt in range(MAX_PHANTOM_ATTEMPTS):
        seed = item_seed(spec, index, attempt)
        try:
            volume, mask = generate_phantom(spec.phantom, seed)
            break
        except PhantomError as e:
            logger.warning("Phantom %d attempt %d rejected: %s", index, attempt, e)
    else:
        raise PhantomError(f"No valid phantom for item {index} after {MAX_PHANTOM_ATTEMPTS} attempts")

    if spec.shift is not None and not spec.shift.is_identity:
        volume = apply_domain_shift(volume, spec.shift, seed)
    image = render_network_input(volume, geom, spec.image_dims, weights)
    target = center_crop(mask, spec.target_dims)
    return {"index": index, "seed": seed, "image": image, "mask": target}


def build_dataset(
    spec: DatasetSpec,
    out_dir: str,
    workers: int = 1,
    cache_dir: Optional[str] = None,
    progress: Progress = None,
) -> DatasetManifest:
    """
    Render ``spec.n_train + spec.n_test`` phantoms and write the dataset.

    Layout::

        out_dir/
        ├── dataset.json        # DatasetManifest
        ├── images/item_0000.imgf
        └── masks/item_0000.volb

    Args:
        spec: Dataset description.
        out_dir: Target directory (created).
        workers: Rendering processes; 1 renders in-process.
        cache_dir: Optional ``RayWeightCache`` directory.
        progress: Called with ``{"event": "item", ...}`` per finished item.

    Returns:
        The written manifest.
    """
    geom = dataset_geometry(spec)
    dims = spec.phantom.dims
    if cache_dir:
        weights = RayWeightCache(cache_dir).get_or_compute(geom, dims, spec.phantom.spacing)
    else:
        weights = extract_ray_weights(geom, dims, spec.phantom.spacing)

    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    total = spec.n_train + spec.n_test
    jobs = [(spec, geom, weights, index) for index in range(total)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(_render_item, jobs))
    else:
        rendered = [_render_item(job) for job in jobs]

    manifest = DatasetManifest(
        spec=spec.model_dump(mode="json"),
        geometry=geom.model_dump(mode="json"),
        image_dims=spec.image_dims,
        target_dims=spec.target_dims,
        view=geom.view,
    )
    for result in rendered:
        index = result["index"]
        image_rel = f"images/item_{index:04d}.imgf"
        mask_rel = f"masks/item_{index:04d}.volb"
        write_imgf(root / image_rel, result["image"])
        write_volb(root / mask_rel, result["mask"])
        manifest.items.append(
            DatasetItem(
                index=index,
                split="train" if index < spec.n_train else "test",
                seed=result["seed"],
                image_file=image_rel,
                mask_file=mask_rel,
                drr_min=result["image"].norm_min,
                drr_max=result["image"].norm_max,
                mask_fraction=float(result["mask"].values.mean()),
            )
        )
        if progress:
            progress({"event": "item", "index": index, "total": total})

    manifest.update_statistics()
    manifest.to_json(str(root / MANIFEST_NAME))
    logger.info("Wrote %d items to %s", total, root)
    return manifest


@dataclass
class PairedSplit:
    """
    One split in network layout.

    Attributes:
        images: ``[N, 1, H, W]`` float32 in [0, 1].
        masks: ``[N, 1, D, H, W]`` float32 in {0, 1}.
        items: Manifest entries, same order.
    """

    images: np.ndarray
    masks: np.ndarray
    items: list[DatasetItem]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def target_shape(self) -> tuple[int, int, int]:
        return tuple(self.masks.shape[2:])

    def subset(self, n: int) -> "PairedSplit":
        if n > len(self):
            raise ConfigError(f"Requested {n} items but the split has {len(self)}")
        return PairedSplit(self.images[:n], self.masks[:n], self.items[:n])

    def batches(self, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
        """Index arrays of consecutive ``batch_size`` chunks of ``order``."""
        return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def load_split(dataset_dir: str, split: str) -> PairedSplit:
    """
    Load one split of a dataset written by ``build_dataset``.

    Raises:
        ConfigError: If the directory holds no dataset manifest.
    """
    root = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    items = manifest.split(split)
    images, masks = [], []
    for item in items:
        images.append(read_imgf(root / item.image_file).values[None])
        masks.append(to_network_layout(read_volb(root / item.mask_file).values, manifest.view)[None])
    h, w = manifest.image_dims
    t = manifest.target_dims
    if not items:
        shape = to_network_layout(np.zeros(t), manifest.view).shape
        return PairedSplit(np.zeros((0, 1, h, w), np.float32), np.zeros((0, 1) + shape, np.float32), [])
    return PairedSplit(
        np.stack(images).astype(np.float32),
        np.stack(masks).astype(np.float32),
        items,
    )


def load_manifest(dataset_dir: str) -> DatasetManifest:
    """Read ``dataset.json``; ConfigError when absent."""
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"No dataset manifest at {path}")
    return DatasetManifest.from_json(str(path))

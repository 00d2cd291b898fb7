"""
Run output tracking.

Each artifact-producing command owns one ``OutputManager``. Files are written
wherever the command puts them and registered here; ``finalize`` writes the
single ``run_manifest.json`` next to them.

Output classes:
    final    - volumes, images, checkpoints, reports
    interim  - previews and logs, safe to delete
"""

import time
from datetime import datetime
from pathlib import Path
from typing import Any, Optional

from .. import __version__
from .schemas import RunManifest

MANIFEST_NAME = "run_manifest.json"


class OutputType:
    """Output file type classifications."""

    FINAL = "final"
    INTERIM = "interim"


class OutputManager:
    """
    Register the files a run produces and describe the run.

    Example:
        >>> manager = OutputManager("./runs/phantoms", "phantom", config, seed=0)
        >>> manager.register_file(path, OutputType.FINAL, "volb")
        >>> manager.finalize()
    """

    def __init__(
        self,
        base_output_dir: str,
        subcommand: str,
        config: Optional[dict[str, Any]] = None,
        seed: Optional[int] = None,
    ):
        self.base_dir = Path(base_output_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.base_dir / MANIFEST_NAME
        self._started = time.perf_counter()
        self.manifest = RunManifest(
            subcommand=subcommand,
            config=config or {},
            seed=seed,
            tool_version=__version__,
            started_at=datetime.now(),
            statistics={"total_final": 0, "total_interim": 0},
        )
        self._finalized = False

    def path(self, filename: str) -> Path:
        """Path for an output file inside the run directory."""
        target = self.base_dir / filename
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def register_input(self, file_path: str) -> None:
        self.manifest.inputs.append(str(file_path))

    def register_file(
        self,
        file_path,
        output_type: str,
        format_name: str,
        metadata: Optional[dict[str, Any]] = None,
    ) -> Path:
        """
        Register an output file.

        Args:
            file_path: Written file
            output_type: "final" or "interim"
            format_name: Format tag (volb, imgf, ckpt, pgm, json)
            metadata: Optional metadata about the file

        Returns:
            The registered path
        """
        file_path = Path(file_path)
        if output_type == OutputType.FINAL:
            self.manifest.statistics["total_final"] += 1
        elif output_type == OutputType.INTERIM:
            self.manifest.statistics["total_interim"] += 1
        else:
            raise ValueError(f"Invalid output type: {output_type}")

        try:
            relative = str(file_path.relative_to(self.base_dir))
        except ValueError:
            relative = str(file_path)
        self.manifest.outputs.append(
            {
                "path": relative,
                "output_type": output_type,
                "format": format_name,
                "size_bytes": file_path.stat().st_size if file_path.exists() else 0,
                "metadata": metadata or {},
            }
        )
        return file_path

    def list_files(self, output_type: Optional[str] = None, format_name: Optional[str] = None) -> list[dict[str, Any]]:
        return [
            entry
            for entry in self.manifest.outputs
            if (output_type is None or entry["output_type"] == output_type)
            and (format_name is None or entry["format"] == format_name)
        ]

    def get_statistics(self) -> dict[str, Any]:
        stats = dict(self.manifest.statistics)
        final_size = sum(e["size_bytes"] for e in self.manifest.outputs if e["output_type"] == OutputType.FINAL)
        interim_size = sum(e["size_bytes"] for e in self.manifest.outputs if e["output_type"] == OutputType.INTERIM)
        stats["final_size_mb"] = round(final_size / 1024 / 1024, 2)
        stats["interim_size_mb"] = round(interim_size / 1024 / 1024, 2)
        return stats

    def finalize(self, statistics: Optional[dict[str, Any]] = None) -> Path:
        """Write the run manifest; only the first call writes."""
        if self._finalized:
            return self.manifest_path
        self.manifest.finished_at = datetime.now()
        self.manifest.wall_clock_s = round(time.perf_counter() - self._started, 3)
        if statistics:
            self.manifest.statistics.update(statistics)
        self.manifest.to_json(str(self.manifest_path))
        self._finalized = True
        return self.manifest_path

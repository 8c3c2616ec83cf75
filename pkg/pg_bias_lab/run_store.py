# ABOUTME: This file manages the on-disk artifacts of one experiment run under its output directory.
# ABOUTME: It writes the manifest, schema-checked CSV metrics, checkpoints, trajectory JSONL and error reports.
import csv
import json
import logging
import math
import os
from datetime import datetime
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .exceptions import SchemaError
from .mdp import Trajectory, write_trajectories_jsonl
from .optim import OptimState
from .policy import PolicyModel

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

METRICS_HEADER = ["epoch", "mean_return", "exact_return", "lr_used", "eard", "clamped_ratios"]
WALL_TIME_COLUMN = "wall_time"
BIAS_SPREAD_HEADER = ["epoch", "d1", "d2", "d_pct", "d1_smoothed", "d2_smoothed", "d_pct_smoothed"]
ALIAS_TOY_HEADER = ["gamma", "mode", "measured_unbiased", "measured_biased", "predicted_unbiased",
                    "predicted_biased", "measured_ratio", "predicted_ratio"]
SURFACE_HEADER = ["a", "b", "loss"]
PROJECTION_HEADER = ["x", "y", "action"]


def format_cell(value) -> str:
    """Lossless, byte-stable text for one CSV cell; None becomes an empty cell."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class RunStore:
    """
    Output tree of one run:

        <output_dir>/manifest.json
        <output_dir>/*.csv
        <output_dir>/checkpoints/<variant>_<seed>.json
        <output_dir>/trajectories/<name>.jsonl
        <output_dir>/plots/*.svg
        <output_dir>/logs/
    """

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.checkpoint_dir = os.path.join(output_dir, "checkpoints")
        self.trajectory_dir = os.path.join(output_dir, "trajectories")
        self.plot_dir = os.path.join(output_dir, "plots")
        self.log_dir = os.path.join(output_dir, "logs")
        for directory in (output_dir, self.checkpoint_dir, self.trajectory_dir, self.plot_dir, self.log_dir):
            try:
                os.makedirs(directory, exist_ok=True)
            except OSError as e:
                logger.error(f"Failed to create output directory {directory}: {e}")
                raise
        self.artifacts: list[str] = []

    def path(self, *parts: str) -> str:
        return os.path.join(self.output_dir, *parts)

    def _record(self, path: str) -> str:
        relative = os.path.relpath(path, self.output_dir)
        if relative not in self.artifacts:
            self.artifacts.append(relative)
        return path

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
        """Write `rows` under `header`; every row must have one cell per column and no NaN/inf."""
        path = self.path(name)
        formatted = []
        for index, row in enumerate(rows):
            row = list(row)
            if len(row) != len(header):
                raise SchemaError(f"{name} row {index} has {len(row)} cells, header has {len(header)}")
            for column, value in zip(header, row):
                if isinstance(value, (float, np.floating)) and not math.isfinite(value):
                    raise SchemaError(f"{name} row {index} column '{column}' is not finite: {value}")
            formatted.append([format_cell(v) for v in row])
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(formatted)
        logger.debug(f"Wrote {len(formatted)} rows to {path}")
        return self._record(path)

    def read_csv(self, name: str) -> list[dict]:
        with open(self.path(name), "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))

    def write_metrics(self, variant: str, seed: int, rows: Iterable[Sequence], with_wall_time: bool = False) -> str:
        header = METRICS_HEADER + ([WALL_TIME_COLUMN] if with_wall_time else [])
        return self.write_csv(f"metrics_{variant}_{seed}.csv", header, rows)

    def write_bias_spread(self, seed: int, rows: Iterable[Sequence]) -> str:
        return self.write_csv(f"bias_spread_{seed}.csv", BIAS_SPREAD_HEADER, rows)

    def write_checkpoint(self, variant: str, seed: int, policy: PolicyModel,
                         optim_state: OptimState | None = None) -> str:
        path = os.path.join(self.checkpoint_dir, f"{variant}_{seed}.json")
        payload = policy.to_checkpoint()
        if optim_state is not None:
            payload["optim_state"] = optim_state.to_dict()
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True)
        logger.debug(f"Checkpoint written to {path}")
        return self._record(path)

    def write_trajectories(self, name: str, trajectories: Iterable[Trajectory]) -> str:
        path = os.path.join(self.trajectory_dir, f"{name}.jsonl")
        write_trajectories_jsonl(path, trajectories)
        return self._record(path)

    def plot_path(self, name: str) -> str:
        return self._record(os.path.join(self.plot_dir, name))

    def write_manifest(self, command: str, config: dict, config_hash: str, seeds: Sequence[int],
                       variants: dict[str, str] | None = None, extra: dict | None = None) -> str:
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "command": command,
            "created": datetime.now().isoformat(timespec="seconds"),
            "config": config,
            "config_hash": config_hash,
            "seeds": list(seeds),
            "versions": {"pg_bias_lab": __version__, "numpy": np.__version__},
            "variants": variants or {},
            "artifacts": sorted(self.artifacts),
        }
        if extra:
            manifest.update(extra)
        path = self.path("manifest.json")
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(manifest, f, indent=2, sort_keys=True)
            logger.info(f"Manifest written to {path}")
        except OSError as e:
            logger.error(f"Failed to write manifest: {e}")
            raise
        return path

    def load_manifest(self) -> dict | None:
        path = self.path("manifest.json")
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError:
            logger.debug(f"No manifest at {path}")
            return None
        except json.JSONDecodeError as e:
            logger.error(f"Manifest {path} is corrupt: {e}")
            return None

    def write_error(self, error: Exception) -> str:
        path = self.path("error.json")
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(error_payload(error), f, sort_keys=True)
        except OSError as e:
            logger.error(f"Failed to write error report: {e}")
        return path


def error_payload(error: Exception) -> dict:
    return {"error": type(error).__name__, "message": str(error)}

# ABOUTME: This file contains unit tests for the RunStore class.
# ABOUTME: It tests the output tree, CSV schema checks, byte-stable float formatting, checkpoints and the manifest.
import unittest
import tempfile
import os
import json

import numpy as np

from pg_bias_lab.exceptions import SchemaError
from pg_bias_lab.mdp import Step, Trajectory, read_trajectories_jsonl
from pg_bias_lab.optim import ADAM, new_optim_state
from pg_bias_lab.policy import TiedAliasPolicy, load_checkpoint
from pg_bias_lab.run_store import METRICS_HEADER, WALL_TIME_COLUMN, RunStore, error_payload, format_cell


class TestRunStore(unittest.TestCase):
    """Test cases for RunStore."""

    def setUp(self):
        """Set up a store in a temporary directory."""
        self.temp_dir = tempfile.mkdtemp()
        self.store = RunStore(os.path.join(self.temp_dir, "run"))

    def tearDown(self):
        import shutil
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_initialization_creates_tree(self):
        for sub in ("checkpoints", "trajectories", "plots", "logs"):
            self.assertTrue(os.path.isdir(os.path.join(self.temp_dir, "run", sub)))
        self.assertEqual(self.store.artifacts, [])

    def test_format_cell(self):
        self.assertEqual(format_cell(None), "")
        self.assertEqual(format_cell(True), "true")
        self.assertEqual(format_cell(np.int64(3)), "3")
        self.assertEqual(format_cell(0.1), "0.1")
        self.assertEqual(float(format_cell(np.float64(1 / 3))), 1 / 3)
        self.assertEqual(format_cell("exact"), "exact")

    def test_metrics_round_trip(self):
        rows = [[0, -1.5, None, 0.1, 0.02, 0], [1, -1.25, None, 0.1, 0.01, 2]]
        self.store.write_metrics("biased_baseline", 3, rows)
        read = self.store.read_csv("metrics_biased_baseline_3.csv")
        self.assertEqual(list(read[0]), METRICS_HEADER)
        self.assertEqual(read[1]["mean_return"], "-1.25")
        self.assertEqual(read[0]["exact_return"], "")
        self.assertIn("metrics_biased_baseline_3.csv", self.store.artifacts)

    def test_wall_time_column_is_optional(self):
        self.store.write_metrics("v", 0, [[0, 1.0, 1.0, 0.1, 0.0, 0, 0.5]], with_wall_time=True)
        self.assertEqual(list(self.store.read_csv("metrics_v_0.csv")[0])[-1], WALL_TIME_COLUMN)

    def test_schema_errors(self):
        with self.assertRaises(SchemaError):
            self.store.write_metrics("v", 0, [[0, 1.0]])
        with self.assertRaises(SchemaError):
            self.store.write_metrics("v", 0, [[0, float("nan"), None, 0.1, 0.0, 0]])
        with self.assertRaises(SchemaError):
            self.store.write_bias_spread(0, [[0, 0.1, 0.2, np.inf, 0.1, 0.2, 0.0]])

    def test_identical_rows_give_identical_bytes(self):
        rows = [[0, 0.1 + 0.2, 1e-17, 3.0, 2.5e10, 1]]
        first = self.store.write_csv("a.csv", METRICS_HEADER, rows)
        second = self.store.write_csv("b.csv", METRICS_HEADER, rows)
        with open(first, "rb") as f1, open(second, "rb") as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_checkpoint_with_optimizer_state(self):
        path = self.store.write_checkpoint("unbiased_experimental", 1, TiedAliasPolicy(theta=0.35),
                                           new_optim_state(ADAM, 1, 0.01))
        self.assertEqual(load_checkpoint(path).theta, 0.35)
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        self.assertEqual(payload["optim_state"]["algorithm"], ADAM)
        self.assertIn(os.path.join("checkpoints", "unbiased_experimental_1.json"), self.store.artifacts)

    def test_trajectories(self):
        trajectory = Trajectory(steps=[Step(state=0, action=1, reward=0.5, behavior_log_prob=-0.7, timestep=0)])
        path = self.store.write_trajectories("epoch_0", [trajectory])
        loaded = read_trajectories_jsonl(path)
        self.assertEqual(len(loaded), 1)
        self.assertEqual(loaded[0].steps[0].reward, 0.5)

    def test_manifest(self):
        self.assertIsNone(self.store.load_manifest())
        self.store.write_metrics("v", 0, [])
        self.store.write_manifest("run-performance", {"env": "alias"}, "ab" * 32, [0, 1],
                                  variants={"v_0": "ok"}, extra={"directional_only": False})
        manifest = self.store.load_manifest()
        self.assertEqual(manifest["command"], "run-performance")
        self.assertEqual(manifest["seeds"], [0, 1])
        self.assertEqual(manifest["variants"], {"v_0": "ok"})
        self.assertEqual(manifest["artifacts"], ["metrics_v_0.csv"])
        self.assertIn("pg_bias_lab", manifest["versions"])
        self.assertFalse(manifest["directional_only"])

    def test_corrupt_manifest_loads_as_none(self):
        with open(self.store.path("manifest.json"), "w", encoding="utf-8") as f:
            f.write("{")
        self.assertIsNone(self.store.load_manifest())

    def test_error_report(self):
        path = self.store.write_error(SchemaError("bad row"))
        with open(path, "r", encoding="utf-8") as f:
            self.assertEqual(json.load(f), {"error": "SchemaError", "message": "bad row"})
        self.assertEqual(error_payload(ValueError("x")), {"error": "ValueError", "message": "x"})


if __name__ == '__main__':
    unittest.main()

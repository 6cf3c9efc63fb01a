"""
End-to-end runs on the default universe. Slow: set PERSONAFED_RUN_ACCEPTANCE=1.
"""
import json
import os
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from unittest import IsolatedAsyncioTestCase

import numpy as np

from app_create import create_config
from experiments import run_preset

RUN_ACCEPTANCE = os.getenv("PERSONAFED_RUN_ACCEPTANCE") == "1"
FPIR = "0.01"


def rows_by_label(run_dir: Path) -> dict:
    summary = json.loads((run_dir / "summary.json").read_text())
    return {(row["label"], row["method"]): row for row in summary["rows"]}


@unittest.skipUnless(RUN_ACCEPTANCE, "set PERSONAFED_RUN_ACCEPTANCE=1 to run")
class TestAcceptance(IsolatedAsyncioTestCase):
    async def asyncSetUp(self):
        self.output = tempfile.TemporaryDirectory()
        self.addCleanup(self.output.cleanup)
        self.config = replace(create_config(), output_dir=self.output.name, emit_svg=False)

    async def run_named(self, preset, **presets):
        config = replace(self.config, preset=preset, presets=replace(self.config.presets, **presets))
        return rows_by_label(await run_preset(config))

    async def test_personalized_beats_pretrained(self):
        rows = await self.run_named("main")
        margin = rows[("main", "personalized")]["auroc"] - rows[("baseline", "pretrained")]["auroc"]
        self.assertGreaterEqual(margin, 0.02)

    async def test_ablation_ordering(self):
        rows = await self.run_named("ablation", ablation_setups=("A", "B", "full"))
        a, b, full = (rows[(s, "personalized")]["tpir"][FPIR] for s in ("A", "B", "full"))
        self.assertGreaterEqual(full, b)
        self.assertGreaterEqual(b, a)
        self.assertGreaterEqual(full - a, 0.01)

    async def test_tpir_rises_with_participation(self):
        rows = await self.run_named("sweep", sweep_rates=(0.01, 0.1, 0.7))
        tpir = [rows[(f"rate={r}", "personalized")]["tpir"][FPIR] for r in (0.01, 0.1, 0.7)]
        self.assertEqual(tpir, sorted(tpir))

    async def test_trained_histograms_overlap_less(self):
        rows = await self.run_named("similarity")
        self.assertLess(rows[("full", "personalized")]["overlap"], rows[("baseline", "pretrained")]["overlap"])
        self.assertLess(
            rows[("full", "personalized")]["intra_class_variance"],
            rows[("baseline", "pretrained")]["intra_class_variance"],
        )

    async def test_metrics_do_not_depend_on_parallelism(self):
        first = await run_preset(replace(self.config, output_dir=self.output.name + "/serial", parallelism=1))
        second = await run_preset(replace(self.config, output_dir=self.output.name + "/parallel", parallelism=4))
        self.assertEqual((first / "metrics.csv").read_bytes(), (second / "metrics.csv").read_bytes())

    async def test_convergence_report_is_well_formed(self):
        config = replace(self.config, presets=replace(self.config.presets, seeds=(1,)))
        run_dir = await run_preset(config)
        log = json.loads((run_dir / "experiment_log.json").read_text())
        report = next(r["convergence"] for r in log["runs"] if r["method"] == "personalized")
        self.assertTrue(np.isfinite(report["lipschitz_w"]))
        self.assertEqual(len(report["w_distances"]), report["steps"] + 1)


if __name__ == "__main__":
    unittest.main()

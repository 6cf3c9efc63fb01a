import json
import unittest
from dataclasses import replace
from pathlib import Path
from unittest import IsolatedAsyncioTestCase

from client import TrainingDivergedError
from conftest import TestConfig
from experiments import (
    ABLATION_SETUPS,
    METRICS_COLUMNS,
    ArtifactMissingError,
    ExperimentError,
    PresetConfig,
    dry_run_plan,
    plan_runs,
    report,
    run_gradient_checks,
    run_preset,
)
from losses import LossSettings


class TestPlanRuns(TestConfig, unittest.TestCase):
    def setUp(self):
        super().setUp()
        self.config = self.small_experiment_config(self.temporary_directory())

    def test_main_preset_runs_baseline_then_personalized(self):
        specs = plan_runs(self.config)
        self.assertEqual(
            [(s.seed, s.label, s.method) for s in specs],
            [
                (1, "baseline", "pretrained"),
                (1, "main", "personalized"),
                (2, "baseline", "pretrained"),
                (2, "main", "personalized"),
            ],
        )

    def test_central_comparison_is_optional(self):
        config = replace(self.config, presets=replace(self.config.presets, include_central=True))
        self.assertIn(("main", "central"), {(s.label, s.method) for s in plan_runs(config)})

    def test_sweep_labels_carry_the_rate(self):
        specs = plan_runs(replace(self.config, preset="sweep"))
        swept = [(s.label, s.participation_rate) for s in specs if s.seed == 1 and s.method == "personalized"]
        self.assertEqual(swept, [("rate=0.2", 0.2), ("rate=1.0", 1.0)])

    def test_ablation_setups_switch_loss_terms(self):
        config = replace(
            self.config,
            preset="ablation",
            presets=replace(self.config.presets, ablation_setups=("A", "B", "C", "full")),
        )
        settings = {s.label: s.loss for s in plan_runs(config) if s.method == "personalized"}
        self.assertEqual(set(settings), set(ABLATION_SETUPS))
        self.assertFalse(settings["A"].use_reg_loss)
        self.assertFalse(settings["A"].use_adaptive_soft_label)
        self.assertTrue(settings["B"].use_reg_loss)
        self.assertFalse(settings["C"].use_topk_gamma)
        self.assertEqual(settings["full"], self.hyper.loss)

    def test_similarity_preset_compares_random_and_trained(self):
        specs = plan_runs(replace(self.config, preset="similarity"))
        self.assertEqual(
            [(s.label, s.method) for s in specs if s.seed == 1],
            [("baseline", "pretrained"), ("baseline", "random"), ("full", "personalized")],
        )

    def test_unknown_preset(self):
        with self.assertRaises(ExperimentError):
            plan_runs(replace(self.config, preset="grid"))

    def test_dry_run_plan_lists_every_run(self):
        plan = dry_run_plan(self.config)
        self.assertIn("preset: main", plan)
        self.assertIn("seed 2: main/personalized rate=0.5 rounds=2", plan)
        self.assertEqual(len(plan.splitlines()), 2 + 4)


class TestReport(TestConfig, unittest.TestCase):
    def write_summary(self, directory, preset):
        summary = {
            "preset": preset,
            "fpir_points": [0.5],
            "rows": [
                {"label": "baseline", "method": "pretrained", "auroc": 0.8, "tpir": {"0.5": 0.25}},
                {"label": "A", "method": "personalized", "auroc": 0.88, "tpir": {"0.5": None}},
            ],
        }
        (directory / "summary.json").write_text(json.dumps(summary))

    def test_ablation_report_shows_reference_line(self):
        directory = self.temporary_directory()
        self.write_summary(directory, "ablation")
        table = report(directory)
        self.assertIn("pretrained reference AUROC 0.8000", table)
        self.assertFalse(any(line.startswith("baseline") for line in table.splitlines()))
        row = next(line for line in table.splitlines() if line.startswith("A "))
        self.assertIn("10.0000", row)
        self.assertIn("n/a", row)

    def test_main_report_shows_baseline_row(self):
        directory = self.temporary_directory()
        self.write_summary(directory, "main")
        table = report(directory)
        self.assertTrue(any(line.startswith("baseline") for line in table.splitlines()))
        self.assertNotIn("reference", table)

    def test_missing_summary(self):
        with self.assertRaises(ArtifactMissingError):
            report(self.temporary_directory())

    def test_unreadable_summary(self):
        directory = self.temporary_directory()
        (directory / "summary.json").write_text("{broken")
        with self.assertRaises(ArtifactMissingError):
            report(directory)


class TestGradientChecks(TestConfig, unittest.TestCase):
    def test_every_loss_passes(self):
        worst = run_gradient_checks(seed=0, points=3)
        self.assertEqual(set(worst), {"hard_label", "intra_subject", "regularization", "total"})
        for name, error in worst.items():
            self.assertLess(error, 1e-4, name)

    def test_ratio_k_passes(self):
        worst = run_gradient_checks(seed=1, points=2, settings=LossSettings(k=0.5, k_as_ratio=True))
        self.assertLess(max(worst.values()), 1e-4)


class TestRunPreset(TestConfig, IsolatedAsyncioTestCase):
    async def test_main_preset_writes_artifacts(self):
        config = self.small_experiment_config(self.temporary_directory())
        run_dir = await run_preset(config)
        self.assertEqual(run_dir.name, "main")
        for name in ("metrics.csv", "summary.json", "histograms.csv", "roc.csv", "experiment_log.json", "config.yaml"):
            self.assertTrue((run_dir / name).is_file(), name)

        lines = (run_dir / "metrics.csv").read_text().splitlines()
        self.assertEqual(lines[0], ",".join(METRICS_COLUMNS))
        self.assertEqual(len(lines) - 1, 2 * 2 * 6 * 2)

        summary = json.loads((run_dir / "summary.json").read_text())
        self.assertEqual([(r["label"], r["method"]) for r in summary["rows"]], [("baseline", "pretrained"), ("main", "personalized")])
        self.assertEqual(summary["rows"][1]["seeds"], [1, 2])

        log = json.loads((run_dir / "experiment_log.json").read_text())
        personalized = [r for r in log["runs"] if r["method"] == "personalized"]
        self.assertEqual(len(personalized[0]["rounds"]), 2)
        self.assertEqual(personalized[0]["convergence"]["client_id"], 1)
        self.assertIsNone(log["error"])
        self.assertIn("main", report(run_dir))

    async def test_same_config_same_metrics(self):
        first = await run_preset(self.small_experiment_config(self.temporary_directory(), parallelism=1))
        second = await run_preset(self.small_experiment_config(self.temporary_directory(), parallelism=3))
        for name in ("metrics.csv", "summary.json", "histograms.csv"):
            self.assertEqual((first / name).read_text(), (second / name).read_text(), name)

    async def test_ablation_preset_rows(self):
        config = self.small_experiment_config(
            self.temporary_directory(), preset="ablation", presets=PresetConfig(seeds=(1,))
        )
        run_dir = await run_preset(config)
        summary = json.loads((run_dir / "summary.json").read_text())
        self.assertEqual([r["label"] for r in summary["rows"]], ["baseline", "A", "B", "full"])
        self.assertIn("pretrained reference AUROC", report(run_dir))

    async def test_svg_figures_for_the_first_seed(self):
        config = self.small_experiment_config(
            self.temporary_directory(), preset="similarity", presets=PresetConfig(seeds=(1,)), emit_svg=True
        )
        run_dir = await run_preset(config)
        self.assertTrue((run_dir / "roc.svg").read_text().startswith("<svg"))
        self.assertIn("baseline/random", (run_dir / "histograms.svg").read_text())

    async def test_divergence_keeps_partial_artifacts(self):
        config = self.small_experiment_config(
            self.temporary_directory(),
            presets=PresetConfig(seeds=(1,)),
            client=replace(self.hyper, learning_rate=1e300),
        )
        with self.assertRaises(TrainingDivergedError):
            await run_preset(config)
        run_dir = Path(config.output_dir) / "main"
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        self.assertEqual(len(lines) - 1, 6 * 2)
        self.assertTrue(all(",baseline,pretrained," in line for line in lines[1:]))
        log = json.loads((run_dir / "experiment_log.json").read_text())
        self.assertIn("diverged", log["error"])


if __name__ == "__main__":
    unittest.main()

import glob
import json
import os
import shutil

import jsonschema

from helpers import TestHelper

QUICK_QV = ["--set", "grid.n_steps=64", "--set", "grid.n_paths=20", "--set", "experiment.realizations=3",
            "--set", "tolerances.qv_relative=10"]

ACCEPTANCE_CONFIGS = [
    "qv-check.ini", "ito-residual.ini", "solve-bdsde.ini", "variational-z.ini", "solve-spde.ini",
    "cross-validate-linear.ini", "cross-validate-nonlinear.ini", "oracle.ini", "picard.ini",
    "horizon-cauchy.ini", "periodic.ini", "periodic-noise.ini", "stationary.ini", "validate.ini",
]


class TestHelperCli(TestHelper):

    json_schema = None

    def _test_cli_(self, kind, name, opts=(), returncode=0):
        """
        Run one experiment into a fresh output directory and check its manifest.
        kind: experiment subcommand
        name: name of the test, used for the output directory
        opts: extra command line options
        returncode: expected exit code
        """
        output_dir = self.get_output_path(name)
        shutil.rmtree(output_dir, ignore_errors=True)
        self.assertRun([kind, "-o", output_dir, *opts], returncode=returncode)

        manifest_file = os.path.join(output_dir, "manifest.json")
        self.assertTrue(os.path.isfile(manifest_file), msg=f"Manifest {manifest_file} not written")
        manifest = self.load_json(manifest_file)

        if self.json_schema is None:
            schema_file = os.path.join(os.path.dirname(__file__), "json_schema.json")
            self.assertTrue(os.path.isfile(schema_file), msg=f"Schema file {schema_file} not found")
            self.json_schema = self.load_json(schema_file)

        jsonschema.validate(instance=manifest, schema=self.json_schema)
        self.assertEqual(manifest["kind"], kind)
        self.assertEqual(manifest["passed"], returncode == 0)
        for output in manifest["outputs"]:
            self.assertTrue(os.path.isfile(os.path.join(output_dir, output)), msg=f"{output} not written")
        return manifest, self.load_json(os.path.join(output_dir, "report.json"))

    def _read(self, name, fn):
        with open(os.path.join(self.get_output_path(name), fn), "rb") as f:
            return f.read()


class TestRuns(TestHelperCli):

    def test_qv_check(self):
        manifest, report = self._test_cli_("qv-check", "qv_check", QUICK_QV)
        self.assertIn("qv.csv", manifest["outputs"])
        self.assertEqual(len(manifest["seeds"]), 3)
        self.assertEqual(report["realizations"], 3)
        self.assertEqual(report["assertions"], {"qv_relative": True})
        self.assertEqual(report["plots"][0]["name"], "qv_per_realization")

    def test_validate(self):
        manifest, report = self._test_cli_("validate", "validate",
                                           ["--set", "driver.a=-1", "--set", "driver.h0=1",
                                            "--set", "probes.n_samples=200"])
        self.assertEqual(set(manifest["assertions"]), {"kernel_valid", "driver_valid", "coefficients_valid"})
        self.assertAlmostEqual(report["margin"]["margin"], 1.5)

    def test_seed_option(self):
        manifest, _ = self._test_cli_("qv-check", "qv_check_seed", QUICK_QV + ["--seed", "17"])
        self.assertEqual(manifest["seed"], 17)
        config = self._read("qv_check_seed", "config.ini").decode("utf-8")
        self.assertIn("seed = 17", config)

    def test_tolerance_failure(self):
        fail = QUICK_QV + ["--set", "tolerances.qv_relative=0"]
        manifest, report = self._test_cli_("qv-check", "qv_check_fail", fail, returncode=4)
        self.assertEqual(manifest["assertions"], {"qv_relative": False})
        self.assertFalse(report["assertions"]["qv_relative"])


class TestReproducibility(TestHelperCli):

    def test_rerun_is_identical(self):
        self._test_cli_("qv-check", "rerun_a", QUICK_QV)
        self._test_cli_("qv-check", "rerun_b", QUICK_QV)
        self._test_cli_("qv-check", "rerun_jobs", QUICK_QV + ["--jobs", "2"])
        for fn in ("config.ini", "report.json", "qv.csv"):
            self.assertEqual(self._read("rerun_a", fn), self._read("rerun_b", fn), msg=fn)
            self.assertEqual(self._read("rerun_a", fn), self._read("rerun_jobs", fn), msg=fn)
        a = self.load_json(os.path.join(self.get_output_path("rerun_a"), "manifest.json"))
        b = self.load_json(os.path.join(self.get_output_path("rerun_b"), "manifest.json"))
        self.assertEqual(a["config_hash"], b["config_hash"])
        self.assertEqual(a["seeds"], b["seeds"])

    def test_seed_changes_results(self):
        self._test_cli_("qv-check", "reseed_a", QUICK_QV)
        self._test_cli_("qv-check", "reseed_b", QUICK_QV + ["--seed", "1"])
        self.assertNotEqual(self._read("reseed_a", "qv.csv"), self._read("reseed_b", "qv.csv"))


class TestExitCodes(TestHelperCli):

    def test_invalid_value(self):
        _, stderr = self.assertRun(["qv-check", "-o", self.get_output_path("bad"), "--set", "grid.n_steps=-1"],
                                   returncode=2)
        self.assertIn("grid.n_steps", stderr)

    def test_unknown_section(self):
        _, stderr = self.assertRun(["validate", "-o", self.get_output_path("bad"), "--set", "bogus.x=1"],
                                   returncode=2)
        self.assertIn("[bogus]", stderr)

    def test_missing_config(self):
        self.assertRun(["validate", "--config", self.get_output_path("no_such_config.ini")], returncode=3)


class TestPlot(TestHelperCli):

    def test_plot_subcommand(self):
        self._test_cli_("qv-check", "plot_run", QUICK_QV)
        output_dir = self.get_output_path("plot_run")
        for svg in glob.glob(os.path.join(output_dir, "*.svg")):
            os.remove(svg)
        self.assertRun(["plot", os.path.join(output_dir, "manifest.json")])
        svg = os.path.join(output_dir, "qv_per_realization.svg")
        self.assertTrue(os.path.isfile(svg))
        with open(svg, encoding="utf-8") as f:
            first = f.read()
        self.assertIn("<svg", first)
        self.assertRun(["plot", os.path.join(output_dir, "manifest.json")])
        with open(svg, encoding="utf-8") as f:
            self.assertEqual(f.read(), first)


class TestAcceptance(TestHelperCli):

    def _test_config_(self, fn, opts=()):
        if self.skipLongTests():
            return None
        config = self.get_config_path(fn)
        kind = os.path.splitext(fn)[0]
        with open(config, encoding="utf-8") as f:
            for line in f:
                key, _, value = line.partition("=")
                if key.strip() == "kind":
                    kind = value.strip()
        return self._test_cli_(kind, f"acceptance_{os.path.splitext(fn)[0]}", ["--config", config, *opts])

    def test_qv_check(self):
        self._test_config_("qv-check.ini", ["--jobs", "4"])

    def test_ito_residual(self):
        self._test_config_("ito-residual.ini", ["--jobs", "4"])

    def test_linear_fk(self):
        result = self._test_config_("solve-bdsde.ini", ["--jobs", "4"])
        if result:
            self.assertGreaterEqual(result[1]["pass_fraction"], 7 / 8)

    def test_variational_z(self):
        self._test_config_("variational-z.ini")

    def test_spde_heat(self):
        result = self._test_config_("solve-spde.ini")
        if result:
            for ratio in result[1]["refinement"]["ratios"]:
                self.assertLess(ratio, 1.0)

    def test_cross_validate_linear(self):
        self._test_config_("cross-validate-linear.ini", ["--jobs", "4"])

    def test_cross_validate_nonlinear(self):
        self._test_config_("cross-validate-nonlinear.ini", ["--jobs", "4"])

    def test_oracle(self):
        self._test_config_("oracle.ini", ["--jobs", "4"])

    def test_picard(self):
        self._test_config_("picard.ini", ["--jobs", "4"])

    def test_horizon_cauchy(self):
        result = self._test_config_("horizon-cauchy.ini", ["--jobs", "4"])
        if result:
            self.assertLessEqual(result[1]["limit_error"], 1e-3)

    def test_periodic(self):
        self._test_config_("periodic.ini")

    def test_periodic_with_noise(self):
        result = self._test_config_("periodic-noise.ini")
        if result:
            manifest, report = result
            self.assertTrue(manifest["assertions"]["periodicity"])
            self.assertNotIn("periodic_oracle", manifest["assertions"])
            self.assertGreater(report["combined_stderr"], 0.0)
            self.assertLessEqual(report["discrepancy"], max(1e-3, 3 * report["combined_stderr"]))

    def test_stationary(self):
        result = self._test_config_("stationary.ini")
        if result:
            self.assertEqual(set(result[1]["shift_discrepancies"]), {"0.5", "1", "2"})
            self.assertEqual(set(result[1]["shift_stderrs"]), {"0.5", "1", "2"})

    def test_validate(self):
        self._test_config_("validate.ini")

    def test_every_config_is_covered(self):
        configs = sorted(os.path.basename(p) for p in glob.glob(os.path.join(self.get_config_path(), "*.ini")))
        self.assertEqual(configs, sorted(ACCEPTANCE_CONFIGS), msg=json.dumps(configs))

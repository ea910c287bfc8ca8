import json
import os
import subprocess
import sys
import tempfile
import unittest

import numpy as np

SKIP_LONG_TESTS = True
CMD_OPTIONS = []


class TestHelper(unittest.TestCase):

    def skipLongTests(self):
        return SKIP_LONG_TESTS

    def setUp(self):
        self.maxDiff = None

    def get_main_path(self, fn=None, check=False):
        return self._get_path("bdsde_fk", fn, check=check)

    def get_config_path(self, fn=None, check=True):
        return self._get_path("configs", fn, check=check)

    def get_output_path(self, fn=None):
        if fn is None:
            return tempfile.gettempdir()
        return os.path.join(tempfile.gettempdir(), "bdsde_fk_tests", fn)

    def _get_path(self, prefix, fn=None, check=True):
        path = os.path.join(
            os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
            prefix
        )
        if fn:
            path = os.path.join(path, fn)
        if check:
            self.assertTrue(os.path.exists(path), f"Cannot find {path}")
        return path

    def main_script(self, pyscript="harness.py", exename="bdsde_fk"):
        main_script = self.get_main_path(pyscript, check=False)
        if not os.path.exists(main_script):
            return [exename]
        return [sys.executable, "-m", "bdsde_fk.harness"]

    def runCli(self, args):
        if isinstance(args, str):
            args = args.split()
        cmd = self.main_script() + list(args) + CMD_OPTIONS
        print("Running:", " ".join(cmd))
        root = self._get_path("", check=False)
        p = subprocess.Popen(cmd,
                             cwd=root,
                             env=dict(os.environ, PYTHONPATH=os.pathsep.join([root] + sys.path)),
                             stdout=subprocess.PIPE, stderr=subprocess.PIPE
                             )
        (stdout, stderr) = p.communicate()
        return p.returncode, stdout.decode("utf-8"), stderr.decode("utf-8")

    def assertRun(self, args, returncode=0):
        code, stdout, stderr = self.runCli(args)
        self.assertEqual(code, returncode, msg=stderr)
        return stdout, stderr

    def load_json(self, path):
        with open(path, encoding="utf-8") as f:
            return json.load(f)

    def assertWithinStandardErrors(self, value, expected, stderr, n_se=3.0, atol=1e-12, msg=None):
        gap = abs(value - expected)
        self.assertLessEqual(gap, n_se * stderr + atol,
                             msg=msg or f"{value} differs from {expected} by {gap:.3g} > {n_se} x {stderr:.3g}")

    def assertArrayClose(self, a, b, atol=1e-12, rtol=0.0, msg=None):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        self.assertEqual(a.shape, b.shape, msg=msg)
        self.assertTrue(np.allclose(a, b, atol=atol, rtol=rtol),
                        msg=msg or f"max difference {np.max(np.abs(a - b)) if a.size else 0:.3g}")

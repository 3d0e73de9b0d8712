import importlib
import unittest
from unittest import mock


class PackageEntrypointTests(unittest.TestCase):
    def test_package_main_delegates_to_cli_main(self):
        main_module = importlib.import_module("cobiaslab.__main__")
        with mock.patch("cobiaslab.__main__.app_main", return_value=7):
            code = main_module.main()
        self.assertEqual(code, 7)

    def test_package_main_forwards_arguments(self):
        main_module = importlib.import_module("cobiaslab.__main__")
        with mock.patch("cobiaslab.__main__.app_main", return_value=0) as app_main:
            main_module.main(["report", "runs"])
        app_main.assert_called_once_with(["report", "runs"])

    def test_package_main_guard_uses_system_exit(self):
        fake_globals = {
            "__name__": "__main__",
            "main": mock.Mock(return_value=3),
            "SystemExit": SystemExit,
            "__builtins__": __builtins__,
        }
        with self.assertRaises(SystemExit) as exc:
            exec("raise SystemExit(main())", fake_globals)
        self.assertEqual(exc.exception.code, 3)

    def test_run_script_imports_cli_main(self):
        run_script = importlib.import_module("run_cobiaslab")
        cli_module = importlib.import_module("cobiaslab.cli")
        self.assertIs(run_script.main, cli_module.main)

    def test_package_exports_public_api(self):
        package = importlib.import_module("cobiaslab")
        for name in ("BiasModel", "SpuriousSpec", "estimate_cobias", "exact_mi", "main"):
            self.assertTrue(hasattr(package, name), name)


if __name__ == "__main__":
    unittest.main()

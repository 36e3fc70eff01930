"""Tests for run-config parsing, the command line and the experiment runner"""

import contextlib
import io
import os
import tempfile
import unittest
from unittest import mock

from pit_operator import cli
from pit_operator.experiment import run_experiment
from pit_operator.position_attention import container, harness
from pit_operator.position_attention._shared.errors import ConfigError
from pit_operator.position_attention.config import RunConfig
from pit_operator.position_attention.datasets import DARCY, make_dataset

TINY_CONFIG = """# pit
encoding_dim = 8
processor_depth = 1
heads = 2
latent_resolution = 8
# train
epochs = 2
batch_size = 4
initial_lr = 0.01
# task
n_train = 4
n_test = 2
input_resolution = 16
output_resolution = 16
fine_resolution = 64
"""


class TestRunConfig(unittest.TestCase):
    """Tests for the key = value format"""

    def test_canonical_text_is_stable(self):
        run = RunConfig.from_text(TINY_CONFIG)
        text = run.to_text()
        self.assertEqual(RunConfig.from_text(text).to_text(), text)
        self.assertIn("latent_resolution = 8\n", text)
        self.assertIn("mlp_hidden = none\n", text)
        self.assertEqual(run.seed, 0)

    def test_missing_keys_keep_defaults(self):
        run = RunConfig.from_text("heads = 4  # per layer\n")
        self.assertEqual(run.pit.heads, 4)
        self.assertEqual(run.train.epochs, 500)
        self.assertEqual(run.task.kernel_width, 0.05)

    def test_value_types(self):
        run = RunConfig.from_text(
            "latent_resolution = 8x8\nmlp_hidden = 16\ndecoder_processor_block = true\n"
            "space_dim = 2\ntask = darcy\ninput_resolution = 32\noutput_resolution = 32\n"
        )
        self.assertEqual(run.pit.latent_resolution, (8, 8))
        self.assertEqual(run.pit.mlp_hidden, 16)
        self.assertTrue(run.pit.decoder_processor_block)
        self.assertEqual(run.task.task, DARCY)
        self.assertIsNone(RunConfig.from_text("mlp_hidden = None\n").pit.mlp_hidden)

    def assert_config_error(self, text, key, line):
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_text(text)
        self.assertEqual(ctx.exception.key, key)
        self.assertEqual(ctx.exception.line, line)

    def test_unknown_key(self):
        self.assert_config_error("heads = 2\n\nlearning_rate = 0.1\n", "learning_rate", 3)

    def test_duplicated_key(self):
        self.assert_config_error("heads = 2\nepochs = 3\nheads = 4\n", "heads", 3)

    def test_malformed_line(self):
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_text("# comment\nheads 2\n")
        self.assertEqual(ctx.exception.line, 2)

    def test_invalid_values(self):
        self.assert_config_error("epochs = ten\n", "epochs", 1)
        self.assert_config_error(
            "initial_lr = 1e-3\ndecoder_processor_block = yes\n", "decoder_processor_block", 2
        )
        self.assert_config_error("task =\n", "task", 1)

    def test_validation_reports_the_line(self):
        self.assert_config_error("epochs = 3\nheads = 3\n", "heads", 2)
        self.assert_config_error("input_resolution = 48\n", "input_resolution", 1)

    def test_sections_must_agree(self):
        self.assert_config_error("task = darcy\n", "space_dim", None)
        run = RunConfig.from_text("task = darcy\n", validate=False)
        self.assertEqual(run.task.task, DARCY)

    def test_from_file(self):
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, "run.cfg")
            with open(path, "w", encoding="utf-8") as fp:
                fp.write(TINY_CONFIG)
            self.assertEqual(RunConfig.from_file(path).pit.encoding_dim, 8)


class TestCommandLine(unittest.TestCase):
    """Tests for the ``pit`` subcommands"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = self.path("run.cfg")
        with open(self.config, "w", encoding="utf-8") as fp:
            fp.write(TINY_CONFIG)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def run_cli(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            code = cli.main(list(argv))
        return code, stdout.getvalue().splitlines()

    def train(self):
        code, lines = self.run_cli(
            "train",
            "--config",
            self.config,
            "--out",
            self.path("model.pitd"),
            "--log",
            self.path("log.csv"),
        )
        self.assertEqual(code, cli.EXIT_OK)
        return lines

    def test_train(self):
        lines = self.train()
        self.assertEqual(len(lines), 3)
        self.assertEqual(lines[1].split(",")[0], "1")
        self.assertTrue(lines[-1].startswith("test_rel_l2_mean,"))
        for name in ("model.pitd", "log.csv", "pit_training.png"):
            self.assertTrue(os.path.exists(self.path(name)), name)
        with open(self.path("log.csv")) as fp:
            self.assertEqual(len(fp.read().splitlines()), 3)

    def test_eval(self):
        self.train()
        code, lines = self.run_cli("eval", "--checkpoint", self.path("model.pitd"))
        self.assertEqual(code, cli.EXIT_OK)
        self.assertTrue(lines[0].startswith("rel_l2_mean,"))
        code, lines = self.run_cli(
            "eval", "--checkpoint", self.path("model.pitd"), "--resolution", "48"
        )
        self.assertEqual(code, cli.EXIT_OK)

        run = RunConfig.from_text(TINY_CONFIG)
        container.write_dataset(self.path("data.pitd"), make_dataset(run.task, seed=3))
        code, lines = self.run_cli(
            "eval", "--checkpoint", self.path("model.pitd"), "--data", self.path("data.pitd")
        )
        self.assertEqual(code, cli.EXIT_OK)
        self.assertGreater(float(lines[0].split(",")[1]), 0.0)

    def test_convergence_and_lambda_report(self):
        self.train()
        code, lines = self.run_cli(
            "convergence",
            "--checkpoint",
            self.path("model.pitd"),
            "--resolutions",
            "16,24",
            "--out",
            self.tmp.name,
        )
        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(lines[0], "resolution,rel_l2_mean")
        self.assertEqual([line.split(",")[0] for line in lines[1:]], ["16", "24"])
        self.assertTrue(os.path.exists(self.path("convergence.csv")))

        code, lines = self.run_cli(
            "lambda-report",
            "--checkpoint",
            self.path("model.pitd"),
            "--out",
            self.path("radii.csv"),
        )
        self.assertEqual(code, cli.EXIT_OK)
        self.assertTrue(lines[0].startswith("Layer"))
        self.assertEqual(len(lines), 4)
        with open(self.path("radii.csv")) as fp:
            self.assertEqual(len(fp.read().splitlines()), 7)

    def test_theorem1(self):
        code, lines = self.run_cli(
            "--log-dir",
            self.tmp.name,
            "theorem1",
            "--lambda",
            "1",
            "--n-list",
            "32,64",
            "--reps",
            "2",
            "--dim",
            "1",
            "--out",
            self.path("mc.csv"),
        )
        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(lines[0], "lambda,n,mean,spread,median,slope")
        self.assertEqual(len(lines), 3)
        self.assertTrue(os.path.exists(self.path("mc.csv")))
        self.assertTrue(os.path.exists(self.path("pit_log.log")))

    def test_gradcheck(self):
        with open(self.path("grad.cfg"), "w", encoding="utf-8") as fp:
            fp.write("encoding_dim = 4\nprocessor_depth = 1\nheads = 2\n")
        code, lines = self.run_cli(
            "gradcheck", "--config", self.path("grad.cfg"), "--max-entries", "2"
        )
        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(len(lines), 9)
        self.assertTrue(all(line.endswith("True") for line in lines[1:]))

    def test_failed_gradient_check_is_a_validation_error(self):
        failing = harness.GradCheckReport(checks=[harness.ParamCheck("w", 1, 1.0)])
        with mock.patch.object(
            cli.harness, "gradient_check_suite", return_value=[("posatt", "tan", failing)]
        ):
            code, lines = self.run_cli("gradcheck")
        self.assertEqual(code, cli.EXIT_VALIDATION)
        self.assertTrue(lines[1].endswith("False"))

    def test_scaling(self):
        code, lines = self.run_cli(
            "scaling", "--config", self.config, "--n-list", "32,64", "--repeats", "1"
        )
        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(lines[0], "n_a,seconds")
        self.assertTrue(lines[-1].startswith("r_squared,"))

    def test_exit_codes(self):
        self.assertEqual(self.run_cli()[0], cli.EXIT_VALIDATION)
        self.assertEqual(self.run_cli("train")[0], cli.EXIT_VALIDATION)
        self.assertEqual(self.run_cli("theorem1", "--n-list", "a,b")[0], cli.EXIT_VALIDATION)
        self.assertEqual(
            self.run_cli("train", "--config", self.path("missing.cfg"))[0], cli.EXIT_RUNTIME
        )
        with open(self.path("bad.cfg"), "w", encoding="utf-8") as fp:
            fp.write("heads = 3\n")
        self.assertEqual(
            self.run_cli("train", "--config", self.path("bad.cfg"))[0], cli.EXIT_VALIDATION
        )
        with open(self.path("broken.pitd"), "wb") as fp:
            fp.write(b"PITD\x07")
        self.assertEqual(
            self.run_cli("eval", "--checkpoint", self.path("broken.pitd"))[0],
            cli.EXIT_VALIDATION,
        )


class TestExperiment(unittest.TestCase):
    """Tests for the results-folder experiment runner"""

    def test_run_writes_every_artifact(self):
        run = RunConfig.from_text(TINY_CONFIG)
        with tempfile.TemporaryDirectory() as folder:
            results = os.path.join(folder, "results")
            log = run_experiment(
                pit_params=vars(run.pit),
                train_params=vars(run.train),
                task_params=vars(run.task),
                results_folder=results,
                super_resolutions=[16, 32],
            )
            produced = set(os.listdir(results))
            with open(os.path.join(results, "run_config.txt"), encoding="utf-8") as fp:
                self.assertEqual(fp.read(), run.to_text())
        self.assertEqual(len(log.losses), 2)
        expected = {
            "run_config.txt",
            "model.pitd",
            "training_log.csv",
            "pit_training.png",
            "lambda_report.csv",
            "convergence.csv",
            "pit_convergence.png",
            "pit_log.log",
        }
        self.assertTrue(expected <= produced, expected - produced)

    def test_invalid_parameters(self):
        with tempfile.TemporaryDirectory() as folder:
            with self.assertRaises(ConfigError):
                run_experiment({"heads": 3}, {}, {}, os.path.join(folder, "results"))
            self.assertFalse(os.path.exists(os.path.join(folder, "results")))


if __name__ == "__main__":
    unittest.main()

import io
import json
import tempfile
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, tag

from lab.config import dump_config, load_config, parse_config
from lab.datasets import IMAGES_MAGIC, LABELS_MAGIC, load_csv, load_idx, make_synthetic
from lab.exceptions import ConfigError, DatasetFormatError
from lab.management.base import exit_codes
from lab.runner import ExperimentRunner, compare_runs
from trainers.loops import train_standard
from trainers.specs import TrainSpec

FIXTURES = Path(settings.BASE_DIR) / "fixtures"


def idx_bytes(magic, dims, payload):
    return np.asarray([magic, *dims], dtype=">u4").tobytes() + bytes(payload)


class ConfigTestCase(SimpleTestCase):
    def test_minimal_config_fills_defaults(self):
        config = parse_config('[train]\nmethod = "adt_exp"\n')
        self.assertEqual(config.threat_model.epsilon, 8 / 255)
        self.assertEqual(config.train.inner.lam, 0.01)
        self.assertEqual(config.train.inner.steps, 7)
        self.assertEqual(config.train.inner.samples, 5)
        self.assertEqual(config.eval.suite, ("natural", "fgsm", "pgd20", "mim20", "cw30"))

    def test_negative_epsilon_names_the_field(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("[threat_model]\nepsilon = -0.1\n")
        self.assertEqual(ctx.exception.field, "threat_model.epsilon")
        self.assertIn("threat_model.epsilon", str(ctx.exception))

    def test_unknown_key_suggests_the_nearest(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config("[threat_model]\nepslion = 0.1\n")
        self.assertIn("did you mean 'epsilon'", str(ctx.exception))

    def test_syntax_error_carries_a_line(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config('name = "x"\n[train\nmethod = "standard"\n')
        self.assertIsNotNone(ctx.exception.line)
        self.assertTrue(str(ctx.exception).startswith("line "))

    def test_round_trip(self):
        """Dumping a config and parsing it back gives the same config."""
        for fixture in ("moons_adt_exp.toml", "circles_trades_imp_am.toml", "smoke.toml"):
            with self.subTest(fixture=fixture):
                config = load_config(FIXTURES / fixture)
                restored = parse_config(dump_config(config))
                self.assertEqual(restored.model_dump(), config.model_dump())

    def test_overrides(self):
        config = load_config(
            FIXTURES / "moons_adt_exp.toml",
            ["train.inner.lam=0.5", "threat_model.epsilon=0.2", "name=swept", "seed=9"],
        )
        self.assertEqual(config.train.inner.lam, 0.5)
        self.assertEqual(config.name, "swept")
        spec = config.train_spec()
        self.assertEqual(spec.threat_model.epsilon, 0.2)
        self.assertEqual(spec.seed, 9)

    def test_malformed_override(self):
        with self.assertRaises(ConfigError):
            parse_config("", overrides=["no-assignment"])
        with self.assertRaises(ConfigError):
            parse_config('name = "x"\n', overrides=["name.inner=1"])

    def test_attack_lookup(self):
        config = load_config(FIXTURES / "circles_trades_imp_am.toml")
        self.assertEqual(config.attack("pgd50").steps, 50)
        self.assertEqual(config.attack("cw30").steps, 30)
        self.assertEqual([spec.label for spec in config.suite()][-2:], ["pgd50", "imp_am"])
        with self.assertRaises(ConfigError) as ctx:
            config.attack("nope")
        self.assertEqual(ctx.exception.field, "attacks")

    def test_fixtures_keep_inputs_in_the_unit_box(self):
        for path in sorted(FIXTURES.glob("*.toml")):
            with self.subTest(fixture=path.name):
                config = load_config(path)
                self.assertEqual(config.threat_model.pixel_box, (0.0, 1.0))
                features = config.dataset.load().features
                self.assertGreaterEqual(features.min(), 0.0)
                self.assertLessEqual(features.max(), 1.0)

    def test_suite_names_must_resolve(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config('[eval]\nsuite = ["natural", "pgd21"]\n')
        self.assertIn("pgd21", str(ctx.exception))
        self.assertIsNone(ctx.exception.field)

    def test_missing_data_file(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config('[dataset]\nsource = "csv"\npath = "missing.csv"\n', base_dir=FIXTURES)
        self.assertEqual(ctx.exception.field, "dataset.path")


class SyntheticTestCase(SimpleTestCase):
    def test_same_seed_same_data(self):
        first = make_synthetic("circles", 50, seed=4)
        second = make_synthetic("circles", 50, seed=4)
        np.testing.assert_array_equal(first.features, second.features)
        np.testing.assert_array_equal(first.labels, second.labels)

    def test_classes_alternate(self):
        dataset = make_synthetic("two_moons", 1000, noise=0.1)
        self.assertEqual(np.sum(dataset.labels == 0), 500)
        np.testing.assert_array_equal(dataset.labels[:4], [0, 1, 0, 1])

    def test_unit_square(self):
        for kind in ("two_moons", "blobs", "circles"):
            with self.subTest(kind=kind):
                features = make_synthetic(kind, 200, noise=0.2, seed=1).features
                self.assertEqual(features.min(), 0.0)
                self.assertEqual(features.max(), 1.0)

    def test_noiseless_blobs_are_two_points(self):
        dataset = make_synthetic("blobs", 20, noise=0.0)
        self.assertEqual(len(np.unique(dataset.features, axis=0)), 2)

    def test_bad_arguments(self):
        with self.assertRaises(ValueError):
            make_synthetic("blobs", 1)
        with self.assertRaises(ValueError):
            make_synthetic("blobs", 10, noise=-1.0)

    def test_split_is_seeded(self):
        dataset = make_synthetic("two_moons", 100)
        train, test = dataset.split(0.2, seed=5)
        again, _ = dataset.split(0.2, seed=5)
        self.assertEqual((train.n, test.n), (80, 20))
        np.testing.assert_array_equal(train.features, again.features)


class IdxTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def _write(self, images, labels):
        images_path, labels_path = self.root / "images.idx", self.root / "labels.idx"
        images_path.write_bytes(images)
        labels_path.write_bytes(labels)
        return images_path, labels_path

    def test_full_pixel(self):
        paths = self._write(
            idx_bytes(IMAGES_MAGIC, (1, 2, 2), [255] * 4), idx_bytes(LABELS_MAGIC, (1,), [0])
        )
        dataset = load_idx(*paths)
        np.testing.assert_array_equal(dataset.features, [[1.0, 1.0, 1.0, 1.0]])

    def test_three_image_fixture(self):
        pixels = [0, 255, 51, 102, 10, 20, 30, 40, 200, 0, 0, 100]
        paths = self._write(
            idx_bytes(IMAGES_MAGIC, (3, 2, 2), pixels), idx_bytes(LABELS_MAGIC, (3,), [2, 0, 1])
        )
        dataset = load_idx(*paths)
        np.testing.assert_allclose(dataset.features, np.reshape(pixels, (3, 4)) / 255.0)
        self.assertEqual(dataset.features[0, 0], 0.0)
        np.testing.assert_array_equal(dataset.labels, [2, 0, 1])
        self.assertEqual(dataset.num_classes, 3)

    def test_rejects_broken_files(self):
        good_labels = idx_bytes(LABELS_MAGIC, (1,), [0])
        cases = {
            "magic": (idx_bytes(0x0801, (1, 2, 2), [0] * 4), good_labels),
            "count": (idx_bytes(IMAGES_MAGIC, (2, 2, 2), [0] * 8), good_labels),
            "truncated": (idx_bytes(IMAGES_MAGIC, (1, 2, 2), [0] * 3), good_labels),
            "header": (b"\x00\x00", good_labels),
        }
        for name, (images, labels) in cases.items():
            with self.subTest(case=name), self.assertRaises(DatasetFormatError):
                load_idx(*self._write(images, labels))


class CsvTestCase(SimpleTestCase):
    def test_last_column_is_the_label(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "points.csv"
            path.write_text("# x,y,label\n0,10,0\n5,20,1\n10,30,1\n")
            dataset = load_csv(path)
        np.testing.assert_allclose(dataset.features, [[0, 0], [0.5, 0.5], [1, 1]])
        np.testing.assert_array_equal(dataset.labels, [0, 1, 1])
        self.assertEqual(dataset.num_classes, 2)

    def test_fractional_labels_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "points.csv"
            path.write_text("0,0.5\n1,1\n")
            with self.assertRaises(DatasetFormatError):
                load_csv(path)


class RunnerTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.out = Path(self.tmp.name)
        self.config = load_config(FIXTURES / "smoke.toml")

    def test_full_run_writes_every_artifact(self):
        runner = ExperimentRunner(self.config, out=self.out / "a")
        runner.run()
        manifest = json.loads(runner.rundir.path("manifest.json").read_text())
        for name in (
            "config.toml",
            "runlog.jsonl",
            "classifier.snap",
            "report.csv",
            "report.json",
            "summary.txt",
            "landscape.csv",
            "pca.csv",
            "probes.json",
        ):
            self.assertIn(name, manifest["artifacts"])
            self.assertTrue(runner.rundir.path(name).exists(), msg=name)
        self.assertEqual(set(manifest["stages"]), {"train", "eval", "landscape"})
        written = parse_config(runner.rundir.path("config.toml").read_text())
        self.assertEqual(written.model_dump(), self.config.model_dump())

        again = ExperimentRunner(self.config, out=self.out / "b")
        again.run()
        self.assertEqual(
            runner.rundir.path("report.csv").read_bytes(),
            again.rundir.path("report.csv").read_bytes(),
        )

        table = compare_runs([runner.rundir.root, again.rundir.root])
        self.assertEqual(len(table.splitlines()), 1 + 4)
        self.assertTrue(table.splitlines()[-1].startswith("robust"))

    def test_stages_run_separately(self):
        runner = ExperimentRunner(self.config, out=self.out)
        runner.train()
        outcome = ExperimentRunner(self.config, out=self.out).attack("fgsm")
        self.assertLessEqual(outcome["max_abs_delta"], self.config.threat_model.epsilon + 1e-12)
        self.assertTrue(runner.rundir.path("attack_fgsm.json").exists())

    def test_missing_snapshot_marks_the_stage_failed(self):
        runner = ExperimentRunner(self.config, out=self.out)
        with self.assertRaises(FileNotFoundError):
            runner.evaluate()
        manifest = json.loads(runner.rundir.path("manifest.json").read_text())
        self.assertEqual(manifest["stages"]["eval"]["status"], "failed")


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.config = str(FIXTURES / "smoke.toml")

    def _call(self, name, **options):
        options.setdefault("stdout", io.StringIO())
        return call_command(name, config=self.config, out=self.tmp.name, **options)

    def test_config_error_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            self._call("train", override=["threat_model.epsilon=-1"])
        self.assertEqual(ctx.exception.returncode, 2)

    def test_unknown_attack_is_a_config_error(self):
        self._call("train")
        with self.assertRaises(CommandError) as ctx:
            self._call("attack", attacks=["nope"])
        self.assertEqual(ctx.exception.returncode, 2)

    def test_lookup_failures_outside_the_config_propagate(self):
        with self.assertRaises(KeyError), exit_codes():
            raise KeyError("missing")

    def test_io_error_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            self._call("eval")
        self.assertEqual(ctx.exception.returncode, 4)

    def test_train_then_attack(self):
        stdout = io.StringIO()
        call_command("train", config=self.config, out=self.tmp.name, seed=5, stdout=stdout)
        self.assertIn("Artifacts in", stdout.getvalue())
        stdout = io.StringIO()
        call_command(
            "attack", config=self.config, out=self.tmp.name, attacks=["fgsm"], stdout=stdout
        )
        self.assertIn("fgsm: accuracy", stdout.getvalue())


@tag("slow")
class SeparableBlobsTestCase(SimpleTestCase):
    def test_standard_training_is_perfect_on_noiseless_blobs(self):
        dataset = make_synthetic("blobs", 100, noise=0.0)
        result = train_standard(TrainSpec(epochs=20), dataset)
        accuracy = np.mean(result.classifier.classify(dataset.features) == dataset.labels)
        self.assertEqual(accuracy, 1.0)

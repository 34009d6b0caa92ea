"""End-to-end tests for the colorizer command line. Offline; tiny networks only."""
import contextlib
import io
import json
import os
import tempfile
import unittest
from unittest import mock

import numpy as np
from PIL import Image

import colorizer as cli
import trainer
from dataio import read_manifest, split_manifest
from errors import ConfigError
from trainer import latest_checkpoint

TOY_CONFIG = """\
dataset_root: {root}
out_dir: {out}
network:
  image_size: 8
  levels: 2
  base_channels: 4
  max_channels: 8
  head_width: 8
  disc_channels: [4, 4, 8, 8]
  disc_fc_width: 8
train:
  learning_rate: "1e-4"
  batch_size: 4
  epochs: 2
  workers: 2
extractor:
  kind: random
  channels: 4
"""


def colour_image(seed, size=32):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    px = np.zeros((size, size, 3), dtype=np.uint8)
    px[..., 0] = np.clip(100 + 90 * np.cos(xx / (2.0 + seed % 4)), 0, 255)
    px[..., 1] = np.clip(40 + 5 * yy, 0, 255)
    px[..., 2] = rng.integers(150, 256, (size, size))
    return px


def run(*argv):
    """Exit code plus stdout with the coloured log lines stripped."""
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = cli.main(list(argv))
    lines = [ln for ln in out.getvalue().splitlines() if not ln.startswith("\033")]
    return code, "\n".join(lines)


class _Tmp(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name
        self.data = os.path.join(self.tmp, "data")
        self.out = os.path.join(self.tmp, "run")
        self.config = os.path.join(self.tmp, "run.yaml")
        with open(self.config, "w") as fh:
            fh.write(TOY_CONFIG.format(root=self.data, out=self.out))

    def tearDown(self):
        self._tmp.cleanup()

    def populate(self, colour=8, gray=0):
        for i in range(colour):
            cls = ("lake", "town")[i % 2]
            os.makedirs(os.path.join(self.data, cls), exist_ok=True)
            Image.fromarray(colour_image(i)).save(os.path.join(self.data, cls, f"c{i}.png"))
        for i in range(gray):
            os.makedirs(os.path.join(self.data, "lake"), exist_ok=True)
            Image.fromarray(np.full((32, 32), 30 * i + 20, dtype=np.uint8)).save(
                os.path.join(self.data, "lake", f"g{i}.png"))


class TestRunConfig(_Tmp):
    def test_load(self):
        cfg = cli.load_run_config(self.config)
        self.assertEqual(cfg.train.learning_rate, 1e-4)
        self.assertEqual(cfg.train.network.disc_channels, (4, 4, 8, 8))
        self.assertEqual(cfg.train.extractor.channels, 4)
        self.assertEqual(cfg.manifest_path, os.path.join(self.out, cli.MANIFEST_NAME))

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            cli.parse_run_config({"train": {"learning_rat": 0.1}})
        with self.assertRaises(ConfigError):
            cli.parse_run_config({"optimizer": "adam"})

    def test_defaults(self):
        cfg = cli.parse_run_config({})
        self.assertEqual(cfg.train.batch_size, 16)
        self.assertEqual(cfg.filter.chroma_threshold, 5.0)

    def test_saved_copy_reloads(self):
        cfg = cli.load_run_config(self.config)
        path = cli.save_run_config(cfg, self.out)
        self.assertEqual(cli.load_run_config(path).to_dict(), cfg.to_dict())


class TestPrepareData(_Tmp):
    def test_counts(self):
        self.populate(colour=7, gray=3)
        code, out = run("--config", self.config, "prepare-data")
        self.assertEqual(code, 0)
        counts = dict(line.split() for line in out.splitlines())
        self.assertEqual(int(counts["total"]), 10)
        self.assertEqual(int(counts["rejected-grayscale"]), 3)
        self.assertLessEqual(int(counts["surviving"]), 7)
        self.assertEqual(sum(int(counts[k]) for k in
                             ("rejected-grayscale", "rejected-low-chroma", "surviving")), 10)

    def test_seventy_of_a_hundred(self):
        self.populate(colour=70, gray=0)
        for i in range(20):
            Image.fromarray(np.full((32, 32), 5 * i + 30, dtype=np.uint8)).save(
                os.path.join(self.data, "lake", f"gray{i}.png"))
        for i in range(10):
            # One-level tint: chroma near 1, under the default threshold of 5.
            px = np.full((32, 32, 3), 100 + 8 * i, dtype=np.uint8)
            px[..., 0] += 1
            Image.fromarray(px).save(os.path.join(self.data, "town", f"dull{i}.png"))
        code, out = run("--config", self.config, "prepare-data")
        self.assertEqual(code, 0)
        counts = dict(line.split() for line in out.splitlines())
        self.assertEqual(counts, {"total": "100", "rejected-grayscale": "20",
                                  "rejected-low-chroma": "10", "surviving": "70"})

    def test_rerun_is_byte_identical(self):
        self.populate(colour=4)
        manifest = os.path.join(self.out, cli.MANIFEST_NAME)
        run("--config", self.config, "prepare-data")
        with open(manifest, "rb") as fh:
            first = fh.read()
        run("--config", self.config, "prepare-data")
        with open(manifest, "rb") as fh:
            self.assertEqual(fh.read(), first)

    def test_empty_root(self):
        os.makedirs(self.data)
        code, _ = run("--config", self.config, "prepare-data")
        self.assertEqual(code, 2)

    def test_missing_root(self):
        code, _ = run("--config", self.config, "prepare-data", os.path.join(self.tmp, "nope"))
        self.assertEqual(code, 2)


class TestTrainAndUse(_Tmp):
    def test_pipeline(self):
        self.populate(colour=12)
        self.assertEqual(run("--config", self.config, "prepare-data")[0], 0)
        self.assertEqual(run("--config", self.config, "train")[0], 0)
        train_split, _ = split_manifest(read_manifest(os.path.join(self.out, cli.MANIFEST_NAME)))
        steps = 2 * (len(train_split) // 4)
        self.assertGreater(steps, 0)
        self.assertTrue(os.path.isfile(os.path.join(self.out, "config.yaml")))
        with open(os.path.join(self.out, "train_log.txt")) as fh:
            self.assertEqual(len(fh.read().splitlines()), steps)

        ckpt = os.path.join(self.out, f"ckpt_{steps}.bin")
        self.assertEqual(latest_checkpoint(self.out), ckpt)
        src = os.path.join(self.tmp, "old.png")
        Image.fromarray(np.full((20, 24), 90, dtype=np.uint8)).save(src)
        outs = [os.path.join(self.tmp, f"out{i}.png") for i in range(2)]
        for dst in outs:
            self.assertEqual(run("colorize", ckpt, src, dst)[0], 0)
        with open(outs[0], "rb") as a, open(outs[1], "rb") as b:
            self.assertEqual(a.read(), b.read())
        self.assertEqual(Image.open(outs[0]).size, (24, 20))

        code, out = run("--config", self.config, "evaluate", ckpt, "--split", "all", "--json")
        self.assertEqual(code, 0)
        self.assertEqual(set(json.loads(out)), {"psnr", "ssim", "mse", "uqi", "vif"})

        code, out = run("--config", self.config, "evaluate", "--oracle", "--json")
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["psnr"], 99.0)

    def test_empty_split(self):
        os.makedirs(self.out)
        with open(os.path.join(self.out, cli.MANIFEST_NAME), "w") as fh:
            fh.write("# label_mode=single-class\n# num_classes=1\n")
        self.assertEqual(run("--config", self.config, "evaluate", "--oracle", "--split", "all")[0], 2)

    def test_train_never_sees_holdout(self):
        self.populate(colour=20)
        run("--config", self.config, "prepare-data")
        _, holdout = split_manifest(read_manifest(os.path.join(self.out, cli.MANIFEST_NAME)))
        self.assertTrue(holdout.entries)
        seen = []

        def spy(manifest, *args, **kwargs):
            seen.extend(e.path for e in manifest.entries)
            return real(manifest, *args, **kwargs)

        real = trainer.load_samples
        with mock.patch.object(trainer, "load_samples", side_effect=spy):
            self.assertEqual(run("--config", self.config, "train")[0], 0)
        self.assertTrue(seen)
        self.assertFalse(set(seen) & {e.path for e in holdout.entries})

    def test_malformed_manifest_line(self):
        os.makedirs(self.out)
        with open(os.path.join(self.out, cli.MANIFEST_NAME), "w") as fh:
            fh.write("# label_mode=single-class\na/x.png\tbeach\n")
        self.assertEqual(run("--config", self.config, "evaluate", "--oracle")[0], 2)

    def test_malformed_config(self):
        with open(self.config, "w") as fh:
            fh.write("train: [unclosed\n")
        self.assertEqual(run("--config", self.config, "train")[0], 2)

    def test_colorize_missing_files(self):
        code, _ = run("colorize", os.path.join(self.tmp, "no.bin"),
                      os.path.join(self.tmp, "no.png"), os.path.join(self.tmp, "o.png"))
        self.assertEqual(code, 2)

    def test_colorize_corrupt_checkpoint(self):
        ckpt, src = os.path.join(self.tmp, "bad.bin"), os.path.join(self.tmp, "in.png")
        with open(ckpt, "wb") as fh:
            fh.write(b"junk")
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(src)
        self.assertEqual(run("colorize", ckpt, src, os.path.join(self.tmp, "o.png"))[0], 3)

    def test_seed_override(self):
        self.populate(colour=12)
        run("--config", self.config, "prepare-data")
        self.assertEqual(run("--config", self.config, "--seed", "7", "train")[0], 0)
        cfg = cli.load_run_config(os.path.join(self.out, "config.yaml"))
        self.assertEqual(cfg.train.seed, 7)


class TestAblate(_Tmp):
    def test_table(self):
        self.populate(colour=40)
        cfg_path = os.path.join(self.tmp, "ablate.yaml")
        with open(self.config) as src, open(cfg_path, "w") as dst:
            dst.write(src.read().replace("  epochs: 2\n", "  epochs: 1\n  max_steps: 1\n"))
        code, out = run("--config", cfg_path, "ablate")
        self.assertEqual(code, 0)
        self.assertEqual(out.splitlines()[0].split()[1:], ["L1", "per", "L1+per"])
        self.assertTrue(os.path.isfile(os.path.join(self.out, "ablation_table.txt")))
        for mode in ("l1_only", "per_only", "l1_plus_per"):
            self.assertTrue(os.path.isfile(os.path.join(self.out, mode, "ckpt_1.bin")))
        again = os.path.join(self.tmp, "again")
        self.assertEqual(run("--config", cfg_path, "--out-dir", again, "ablate")[0], 0)
        with open(os.path.join(self.out, "ablation_table.txt")) as a, \
                open(os.path.join(again, "ablation_table.txt")) as b:
            self.assertEqual(a.read(), b.read())

    def test_too_few_images_is_a_data_error(self):
        self.populate(colour=2)
        code, _ = run("--config", self.config, "ablate")
        self.assertEqual(code, 2)


if __name__ == "__main__":
    unittest.main(verbosity=2)

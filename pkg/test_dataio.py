"""Offline tests for dataio: decoding, filtering, manifests, splits and batching."""
import os
import tempfile
import unittest

import numpy as np
from PIL import Image

import colorspace as cs
import dataio as dio
from errors import DatasetError, EmptyDatasetError, ImageFormatError, UsageError


def write_png(path, pixels):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def colour_pixels(seed, size=16):
    rng = np.random.default_rng(seed)
    px = np.zeros((size, size, 3), dtype=np.uint8)
    px[..., 0] = rng.integers(150, 256, size=(size, size))
    px[..., 1] = rng.integers(0, 80, size=(size, size))
    px[..., 2] = rng.integers(0, 80, size=(size, size))
    return px


def gray_pixels(value=120, size=16):
    return np.full((size, size, 3), value, dtype=np.uint8)


class _Tmp(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()


class TestLoadImage(_Tmp):
    def test_rgb_file(self):
        p = os.path.join(self.root, "a.png")
        write_png(p, colour_pixels(0, 12)[:, :10])
        img = dio.load_image(p)
        self.assertEqual((img.height, img.width), (12, 10))

    def test_single_channel_expands(self):
        p = os.path.join(self.root, "g.png")
        write_png(p, np.arange(64, dtype=np.uint8).reshape(8, 8))
        px = dio.load_image(p).pixels
        self.assertTrue((px[..., 0] == px[..., 1]).all())
        self.assertTrue((px[..., 1] == px[..., 2]).all())

    def test_truncated_file(self):
        p = os.path.join(self.root, "t.png")
        write_png(p, colour_pixels(1, 32))
        with open(p, "rb") as fh:
            head = fh.read(40)
        with open(p, "wb") as fh:
            fh.write(head)
        with self.assertRaises(ImageFormatError) as ctx:
            dio.load_image(p)
        self.assertEqual(ctx.exception.path, p)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            dio.load_image(os.path.join(self.root, "nope.png"))

    def test_sixteen_bit_gray_is_rescaled(self):
        p = os.path.join(self.root, "scan16.png")
        wide = np.array([[0, 257, 32768, 65535]] * 4, dtype=np.uint16)
        Image.fromarray(wide).save(p)
        px = dio.load_image(p).pixels
        self.assertEqual(px.dtype, np.uint8)
        self.assertEqual(px[0, :, 0].tolist(), [0, 1, 128, 255])
        self.assertTrue((px[..., 0] == px[..., 2]).all())


class TestFilter(unittest.TestCase):
    def test_gray_is_rejected(self):
        img = cs.RgbImage(gray_pixels())
        self.assertFalse(dio.is_colorful(img, dio.FilterPolicy()))
        self.assertEqual(dio.filter_reason(img, dio.FilterPolicy()), "grayscale")

    def test_red_is_colourful(self):
        img = cs.RgbImage(np.tile(np.array([255, 0, 0], dtype=np.uint8), (8, 8, 1)))
        self.assertTrue(dio.is_colorful(img, dio.FilterPolicy()))

    def test_low_chroma_is_rejected(self):
        # A one-level red tint: chroma around 1, well under the threshold of 5.
        img = cs.RgbImage(np.tile(np.array([121, 120, 120], dtype=np.uint8), (8, 8, 1)))
        self.assertLess(float(cs.chroma(cs.rgb_to_lab(img)).mean()), 5.0)
        self.assertEqual(dio.filter_reason(img, dio.FilterPolicy(chroma_threshold=5.0)),
                         "low_chroma")

    def test_negative_threshold(self):
        with self.assertRaises(ValueError):
            dio.FilterPolicy(chroma_threshold=-1.0)


class TestResize(unittest.TestCase):
    def test_shape(self):
        img = cs.RgbImage(np.zeros((512, 512, 3), dtype=np.uint8))
        self.assertEqual(dio.resize_to_training(img).pixels.shape, (256, 256, 3))

    def test_constant_stays_constant(self):
        out = dio.resize_to_training(cs.RgbImage(np.full((300, 200, 3), 77, dtype=np.uint8)))
        self.assertTrue((out.pixels == 77).all())

    def test_identity_at_training_size(self):
        px = colour_pixels(4, 256)
        out = dio.resize_to_training(cs.RgbImage(px))
        self.assertTrue(np.array_equal(out.pixels, px))

    def test_custom_size(self):
        out = dio.resize_to_training(cs.RgbImage(colour_pixels(2, 40)), size=16)
        self.assertEqual(out.pixels.shape, (16, 16, 3))


class TestManifest(_Tmp):
    def populate(self):
        for cls in ("forest", "beach"):
            for i in range(2):
                write_png(os.path.join(self.root, cls, f"{i}.png"), colour_pixels(i))

    def test_directory_per_class(self):
        self.populate()
        m = dio.build_manifest(self.root)
        self.assertEqual(len(m), 4)
        self.assertEqual(m.num_classes, 2)
        self.assertEqual(m.class_names, ("beach", "forest"))
        labels = {e.path.split("/")[0]: e.label for e in m.entries}
        self.assertEqual(labels, {"beach": 0, "forest": 1})

    def test_rerun_is_byte_identical(self):
        self.populate()
        a, b = os.path.join(self.root, "a.tsv"), os.path.join(self.root, "b.tsv")
        dio.write_manifest(dio.build_manifest(self.root), a)
        dio.write_manifest(dio.build_manifest(self.root), b)
        with open(a, "rb") as fa, open(b, "rb") as fb:
            self.assertEqual(fa.read(), fb.read())

    def test_write_read(self):
        self.populate()
        m = dio.build_manifest(self.root)
        path = os.path.join(self.root, "m.tsv")
        dio.write_manifest(m, path)
        back = dio.read_manifest(path)
        self.assertEqual(back.entries, m.entries)
        self.assertEqual(back.num_classes, 2)
        self.assertEqual(back.root, self.root)

    def test_empty_root(self):
        with self.assertRaises(EmptyDatasetError):
            dio.build_manifest(self.root)

    def test_missing_root(self):
        with self.assertRaises(UsageError):
            dio.build_manifest(os.path.join(self.root, "absent"))

    def test_attribute_table(self):
        for name in ("000001.jpg", "000002.jpg"):
            Image.fromarray(colour_pixels(3)).save(os.path.join(self.root, name))
        with open(os.path.join(self.root, dio.DEFAULT_ATTRIBUTES_FILE), "w") as fh:
            fh.write("2\nSmiling Young Eyeglasses\n"
                     "000001.jpg  1 -1 -1\n"
                     "000002.jpg -1  1  1\n")
        m = dio.build_manifest(self.root, dio.LabelMode.MULTI_ATTRIBUTE)
        self.assertEqual(m.num_classes, 3)
        self.assertEqual(m.class_names, ("Smiling", "Young", "Eyeglasses"))
        self.assertEqual([e.label for e in m.entries], [(1, 0, 0), (0, 1, 1)])
        self.assertEqual(m.encode_label(m.entries[1]).tolist(), [0.0, 1.0, 1.0])

    def test_bad_label_rejected(self):
        with self.assertRaises(DatasetError):
            dio.DatasetManifest((dio.ManifestEntry("x.png", 5),), 2, dio.LabelMode.SINGLE_CLASS)

    def test_split_is_deterministic_and_disjoint(self):
        entries = tuple(dio.ManifestEntry(f"c/{i:03d}.png", 0) for i in range(100))
        m = dio.DatasetManifest(entries, 1, dio.LabelMode.SINGLE_CLASS)
        tr1, ho1 = dio.split_manifest(m)
        tr2, ho2 = dio.split_manifest(m)
        self.assertEqual(ho1.entries, ho2.entries)
        self.assertTrue(ho1.entries)
        self.assertEqual(len(tr1) + len(ho1), 100)
        self.assertFalse(set(tr1.entries) & set(ho1.entries))

    def write_text(self, body):
        path = os.path.join(self.root, "m.tsv")
        with open(path, "w") as fh:
            fh.write(body)
        return path

    def test_non_integer_label(self):
        path = self.write_text("# label_mode=single-class\na/x.png\tbeach\n")
        with self.assertRaises(DatasetError) as ctx:
            dio.read_manifest(path)
        self.assertIn("m.tsv:2", str(ctx.exception))

    def test_unknown_label_mode(self):
        with self.assertRaises(DatasetError):
            dio.read_manifest(self.write_text("# label_mode=colours\na/x.png\t0\n"))

    def test_non_integer_class_count(self):
        with self.assertRaises(DatasetError):
            dio.read_manifest(self.write_text("# num_classes=many\na/x.png\t0\n"))

    def test_vector_in_single_class_manifest(self):
        with self.assertRaises(DatasetError):
            dio.read_manifest(self.write_text("a/x.png\t0\nb/y.png\t1,0\n"))


class TestFilterManifest(_Tmp):
    def test_counts_are_conserved(self):
        for i in range(7):
            write_png(os.path.join(self.root, "c", f"col{i}.png"), colour_pixels(i))
        for i in range(3):
            write_png(os.path.join(self.root, "c", f"gray{i}.png"), gray_pixels(40 * i + 10))
        surviving, stats = dio.filter_manifest(dio.build_manifest(self.root), dio.FilterPolicy(),
                                               workers=2)
        self.assertEqual(stats.total, 10)
        self.assertEqual(stats.rejected_grayscale, 3)
        self.assertEqual(stats.surviving, 7)
        self.assertEqual(stats.rejected_grayscale + stats.rejected_low_chroma + stats.surviving, 10)
        self.assertEqual(len(surviving), 7)


class TestBatches(_Tmp):
    def manifest(self, n):
        for i in range(n):
            write_png(os.path.join(self.root, "c", f"{i:03d}.png"), colour_pixels(i, 8))
        return dio.build_manifest(self.root)

    def test_floor_division(self):
        batches = list(dio.make_batches(self.manifest(33), dio.FilterPolicy(), 16, seed=0,
                                        size=8, workers=2))
        self.assertEqual(len(batches), 2)
        b = batches[0]
        self.assertEqual(b.batch_size, 16)
        self.assertEqual(b.L_n.shape, (16, 1, 8, 8))
        self.assertEqual(b.ab_target.shape, (16, 2, 8, 8))
        self.assertEqual(b.labels.shape, (16, 1))
        self.assertLessEqual(float(np.abs(b.L_n).max()), 1.0)
        self.assertLessEqual(float(np.abs(b.ab_target).max()), 1.0)

    def test_same_seed_same_order(self):
        m = self.manifest(20)
        a = list(dio.make_batches(m, dio.FilterPolicy(), 4, seed=9, size=8, workers=1))
        b = list(dio.make_batches(m, dio.FilterPolicy(), 4, seed=9, size=8, workers=3))
        for x, y in zip(a, b):
            self.assertTrue(np.array_equal(x.L_n, y.L_n))
            self.assertTrue(np.array_equal(x.ab_target, y.ab_target))

    def test_source_holds_no_pixels(self):
        samples = dio.load_samples(self.manifest(10), dio.FilterPolicy(), size=8, workers=2)
        self.assertEqual(len(samples), 10)
        self.assertEqual(samples.paths[0], "c/000.png")
        self.assertFalse(any(isinstance(v, np.ndarray) for v in vars(samples).values()))

    def test_decoding_stays_a_bounded_distance_ahead(self):
        decoded = []

        class CountingSource(dio.SampleSource):
            def prepare(self, entry):
                decoded.append(entry.path)
                return super().prepare(entry)

        m = self.manifest(40)
        samples = CountingSource(dio.filter_manifest(m, dio.FilterPolicy(), workers=1)[0], 8, 2)
        batches = dio.iter_batches(samples, 4, seed=0, prefetch=1)
        first = next(batches)
        batches.close()
        self.assertEqual(first.batch_size, 4)
        self.assertLessEqual(len(decoded), 2 * 4)

    def test_skip_matches_the_full_epoch(self):
        samples = dio.load_samples(self.manifest(12), dio.FilterPolicy(), size=8, workers=2)
        full = list(dio.iter_batches(samples, 4, seed=5, epoch=1))
        tail = list(dio.iter_batches(samples, 4, seed=5, epoch=1, skip=1))
        self.assertEqual(len(tail), 2)
        for x, y in zip(full[1:], tail):
            self.assertTrue(np.array_equal(x.ab_target, y.ab_target))

    def test_epochs_reshuffle(self):
        self.assertFalse(np.array_equal(dio.epoch_order(50, 1, 0), dio.epoch_order(50, 1, 1)))
        self.assertTrue(np.array_equal(dio.epoch_order(50, 1, 2), dio.epoch_order(50, 1, 2)))

    def test_nothing_survives(self):
        write_png(os.path.join(self.root, "c", "g.png"), gray_pixels())
        with self.assertRaises(EmptyDatasetError):
            list(dio.make_batches(dio.build_manifest(self.root), dio.FilterPolicy(), 1, seed=0,
                                  size=8))


if __name__ == "__main__":
    unittest.main(verbosity=2)

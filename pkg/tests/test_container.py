"""Tests for the PITD container"""

import os
import struct
import tempfile
import unittest

import numpy as np

from pit_operator.position_attention import container
from pit_operator.position_attention._shared.errors import ContainerFormatError
from pit_operator.position_attention.config import RunConfig, build_run, load_model
from pit_operator.position_attention.datasets import OperatorDataset, TaskConfig, make_dataset
from pit_operator.position_attention.geometry import Mesh
from pit_operator.position_attention.model import PiTConfig


def tiny_run_config() -> RunConfig:
    """Run configuration of a small smoothing model"""
    return RunConfig(
        pit=PiTConfig(encoding_dim=8, processor_depth=1, heads=2, latent_resolution=(8,)),
        task=TaskConfig(
            n_train=4, n_test=2, input_resolution=16, output_resolution=16, fine_resolution=64
        ),
    )


class TestContainer(unittest.TestCase):
    """Tests for the raw array container"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "arrays.pitd")

    def tearDown(self):
        self.tmp.cleanup()

    def write_bytes(self, data: bytes):
        with open(self.path, "wb") as fp:
            fp.write(data)

    def read_bytes(self) -> bytes:
        with open(self.path, "rb") as fp:
            return fp.read()

    def test_exact_layout(self):
        container.write_container(self.path, {"x": np.array([1.0, 2.0])})
        expected = (
            b"PITD"
            + b"\x01\x00\x00\x00"
            + b"\x01\x00\x00\x00"
            + b"\x01\x00"
            + b"x"
            + b"\x01\x00\x00\x00"
            + b"\x02\x00\x00\x00\x00\x00\x00\x00"
            + b"\x01"
            + b"\x00\x00\x00\x00\x00\x00\xf0\x3f"
            + b"\x00\x00\x00\x00\x00\x00\x00\x40"
        )
        self.assertEqual(self.read_bytes(), expected)

    def test_arrays_keep_order_and_shape(self):
        arrays = {
            "b": np.arange(24.0).reshape(2, 3, 4),
            "a": np.array(7.5),
            "empty": np.zeros((0, 3)),
        }
        container.write_container(self.path, arrays)
        read = container.read_container(self.path)
        self.assertEqual(list(read), ["b", "a", "empty"])
        for name, value in arrays.items():
            self.assertEqual(read[name].shape, value.shape)
            np.testing.assert_array_equal(read[name], value)

    def test_bad_magic(self):
        container.write_container(self.path, {"x": np.ones(2)})
        self.write_bytes(b"NOPE" + self.read_bytes()[4:])
        with self.assertRaises(ContainerFormatError):
            container.read_container(self.path)

    def test_unsupported_version(self):
        container.write_container(self.path, {"x": np.ones(2)})
        data = self.read_bytes()
        self.write_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
        with self.assertRaises(ContainerFormatError):
            container.read_container(self.path)

    def test_unknown_dtype(self):
        container.write_container(self.path, {"x": np.ones(2)})
        data = bytearray(self.read_bytes())
        dtype_offset = 4 + 8 + 2 + 1 + 4 + 8
        data[dtype_offset] = 2
        self.write_bytes(bytes(data))
        with self.assertRaises(ContainerFormatError):
            container.read_container(self.path)

    def test_truncated_file(self):
        container.write_container(self.path, {"x": np.ones(4)})
        self.write_bytes(self.read_bytes()[:-3])
        with self.assertRaises(ContainerFormatError):
            container.read_container(self.path)

    def test_trailing_bytes(self):
        container.write_container(self.path, {"x": np.ones(4)})
        self.write_bytes(self.read_bytes() + b"\x00")
        with self.assertRaises(ContainerFormatError):
            container.read_container(self.path)

    def test_text_arrays(self):
        text = "kernel_width = 0.05\nname = λ-radius ✓\n"
        values = container.text_to_array(text)
        self.assertEqual(values.dtype, np.float64)
        self.assertEqual(container.array_to_text(values), text)
        with self.assertRaises(ContainerFormatError):
            container.array_to_text(np.array([65.0, 300.0]))
        with self.assertRaises(ContainerFormatError):
            container.array_to_text(np.array([65.5]))


class TestDatasetFiles(unittest.TestCase):
    """Tests for dataset containers"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "data.pitd")

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        config = TaskConfig(
            n_train=3, n_test=2, input_resolution=32, output_resolution=16, fine_resolution=64
        )
        ds = make_dataset(config, seed=1)
        container.write_dataset(self.path, ds)
        read = container.read_dataset(self.path)
        np.testing.assert_array_equal(read.inputs, ds.inputs)
        np.testing.assert_array_equal(read.outputs, ds.outputs)
        np.testing.assert_array_equal(read.input_mesh.points, ds.input_mesh.points)
        self.assertEqual(read.output_mesh.grid_shape, (16,))
        self.assertEqual(read.split, ds.split)
        self.assertEqual(read.metadata, ds.metadata)

    def test_point_cloud_meshes(self):
        rng = np.random.default_rng(0)
        mesh = Mesh(points=rng.uniform(size=(5, 2)))
        ds = OperatorDataset(mesh, mesh, rng.standard_normal((2, 5, 1)), np.zeros((2, 5, 1)))
        container.write_dataset(self.path, ds)
        read = container.read_dataset(self.path)
        self.assertFalse(read.input_mesh.is_grid)
        np.testing.assert_array_equal(read.input_mesh.points, mesh.points)

    def test_checkpoint_is_not_a_dataset(self):
        container.write_container(self.path, {"config.text": container.text_to_array("")})
        with self.assertRaises(ContainerFormatError):
            container.read_dataset(self.path)


class TestCheckpoints(unittest.TestCase):
    """Tests for model checkpoints"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.pitd")
        self.run = tiny_run_config()
        self.split, self.model = build_run(self.run)
        state = self.model.state_dict()
        state["encoder.lift.weight"] = state["encoder.lift.weight"] + 0.25
        self.model.load_state_dict(state)

    def tearDown(self):
        self.tmp.cleanup()

    def test_restored_model_predicts_identically(self):
        container.write_checkpoint(self.path, self.model, self.run.to_text())
        restored, run = load_model(self.path)
        self.assertEqual(run.to_text(), self.run.to_text())
        ds = self.split.test
        np.testing.assert_array_equal(
            restored.predict(ds.inputs, ds.input_mesh, ds.output_mesh),
            self.model.predict(ds.inputs, ds.input_mesh, ds.output_mesh),
        )

    def test_checkpoint_contents(self):
        container.write_checkpoint(self.path, self.model, self.run.to_text())
        checkpoint = container.read_checkpoint(self.path)
        self.assertEqual(checkpoint.config_text, self.run.to_text())
        self.assertEqual(set(checkpoint.state), set(self.model.state_dict()))
        np.testing.assert_array_equal(
            checkpoint.latent_mesh.points, self.model.latent_mesh.points
        )

    def test_checkpoints_are_byte_identical(self):
        other = os.path.join(self.tmp.name, "copy.pitd")
        container.write_checkpoint(self.path, self.model, self.run.to_text())
        container.write_checkpoint(other, self.model, self.run.to_text())
        with open(self.path, "rb") as a, open(other, "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_dataset_is_not_a_checkpoint(self):
        container.write_dataset(self.path, self.split.test)
        with self.assertRaises(ContainerFormatError):
            container.read_checkpoint(self.path)


if __name__ == "__main__":
    unittest.main()

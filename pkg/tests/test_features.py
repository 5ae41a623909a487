import numpy as np
import pytest

from driftcomp.errors import CorruptionError, DataError, FormatError, ShapeError
from driftcomp.features import (
    FeatureMatrix,
    header_size,
    l2_normalize,
    load_dump,
    write_dump,
)


def seeded_matrix(d=8, n=100, seed=0, task_id=3, tag="model_t1"):
    rng = np.random.default_rng(seed)
    # f32-representable values so disk round trips are bit-identical
    values = rng.standard_normal((n, d)).astype(np.float32).astype(np.float64)
    labels = rng.integers(0, 5, size=n).astype(np.int32)
    return FeatureMatrix(values, labels, task_id, tag)


class TestFeatureMatrix:
    def test_rejects_nan(self):
        with pytest.raises(DataError):
            FeatureMatrix(np.array([[np.nan, 0.0]]), np.array([0]))

    def test_rejects_negative_label(self):
        with pytest.raises(DataError):
            FeatureMatrix(np.ones((1, 2)), np.array([-1]))

    def test_rejects_label_length_mismatch(self):
        with pytest.raises(ShapeError):
            FeatureMatrix(np.ones((2, 2)), np.array([0]))

    def test_restrict_preserves_order(self):
        m = FeatureMatrix(np.arange(8.0).reshape(4, 2),
                          np.array([1, 0, 1, 0]))
        sub = m.restrict(1)
        assert sub.n == 2
        np.testing.assert_array_equal(sub.values, [[0, 1], [4, 5]])


class TestDumpFormat:
    def test_single_sample_file_size(self, tmp_path):
        # 25-byte fixed header + 8-byte tag pads to 40, then one i32 label
        # and two f32 values
        m = FeatureMatrix(np.array([[1.0, 0.0]]), np.array([0]),
                          model_tag="model_t1")
        path = tmp_path / "one.ftd"
        write_dump(m, path)
        assert header_size("model_t1") == 40
        assert path.stat().st_size == 40 + 4 + 8

    def test_empty_matrix_round_trip(self, tmp_path):
        m = FeatureMatrix(np.zeros((0, 4)), np.zeros(0, dtype=np.int32))
        path = tmp_path / "empty.ftd"
        write_dump(m, path)
        back = load_dump(path)
        assert back.n == 0 and back.d == 4

    def test_round_trip_bit_identical(self, tmp_path):
        m = seeded_matrix()
        path = tmp_path / "dump.ftd"
        write_dump(m, path)
        back = load_dump(path)
        np.testing.assert_array_equal(back.values, m.values)
        np.testing.assert_array_equal(back.labels, m.labels)
        assert back.task_id == m.task_id
        assert back.model_tag == m.model_tag

    def test_write_is_deterministic(self, tmp_path):
        m = seeded_matrix()
        write_dump(m, tmp_path / "a.ftd")
        write_dump(m, tmp_path / "b.ftd")
        assert (tmp_path / "a.ftd").read_bytes() == (tmp_path / "b.ftd").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ftd"
        write_dump(seeded_matrix(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_dump(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.ftd"
        write_dump(seeded_matrix(), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_dump(path)

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        path = tmp_path / "cut.ftd"
        write_dump(seeded_matrix(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 10])
        with pytest.raises(CorruptionError, match=rf"{len(blob)}.*{len(blob) - 10}"):
            load_dump(path)

    def test_corrupted_values_detected(self, tmp_path):
        path = tmp_path / "nan.ftd"
        write_dump(seeded_matrix(d=2, n=1), path)
        blob = bytearray(path.read_bytes())
        blob[-8:] = np.array([np.nan, np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptionError):
            load_dump(path)


class TestL2Normalize:
    def test_three_four_five(self):
        m = FeatureMatrix(np.array([[3.0, 4.0]]), np.array([0]))
        np.testing.assert_allclose(l2_normalize(m).values, [[0.6, 0.8]])

    def test_unit_row_unchanged(self):
        m = FeatureMatrix(np.array([[1.0, 0.0]]), np.array([0]))
        np.testing.assert_array_equal(l2_normalize(m).values, m.values)

    def test_random_rows_unit_norm(self):
        m = seeded_matrix(d=16, n=200, seed=4)
        norms = np.linalg.norm(l2_normalize(m).values, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_idempotent(self):
        m = seeded_matrix(d=16, n=50, seed=5)
        once = l2_normalize(m)
        twice = l2_normalize(once)
        np.testing.assert_allclose(twice.values, once.values, atol=1e-12)

    def test_zero_row_passes_through_with_warning(self):
        m = FeatureMatrix(np.array([[0.0, 0.0], [3.0, 4.0]]),
                          np.array([0, 1]))
        with pytest.warns(UserWarning, match="zero-norm"):
            out = l2_normalize(m)
        np.testing.assert_array_equal(out.values[0], [0.0, 0.0])

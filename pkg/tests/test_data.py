import numpy as np
import pytest

from nnsampling import (Architecture, Dataset, IdxFormatError, MinibatchStream,
                        filter_two_classes, full_gradient, load_mnist_idx,
                        loss_and_gradient, make_gaussian_model, make_harmonic,
                        make_two_clusters, minibatch_gradient,
                        split_train_validation_test, write_idx_images,
                        write_idx_labels)


class TestHarmonicDataset:
    @pytest.mark.parametrize("a,feature", [(4.0, 2.0), (1.0, 1.0), (0.01, 0.1)])
    def test_single_item_sqrt_prefactor(self, a, feature):
        ds = make_harmonic(a)
        assert ds.n_items == 1
        assert ds.inputs[0, 0] == pytest.approx(feature, rel=1e-15)
        assert ds.labels[0, 0] == 0.0

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            make_harmonic(0.0)
        with pytest.raises(ValueError):
            make_harmonic(-1.0)


class TestTwoClusters:
    def test_counts_and_labels(self):
        ds = make_two_clusters(500, seed=1)
        assert ds.n_items == 500
        assert (ds.labels == 1.0).sum() == 250
        assert (ds.labels == -1.0).sum() == 250
        pos = ds.inputs[ds.labels.ravel() == 1.0]
        neg = ds.inputs[ds.labels.ravel() == -1.0]
        assert np.linalg.norm(pos.mean(axis=0) - [2, 2]) < 0.5
        assert np.linalg.norm(neg.mean(axis=0) - [-2, -2]) < 0.5

    def test_minimal_two_points(self):
        ds = make_two_clusters(2, seed=3)
        assert ds.n_items == 2
        assert sorted(ds.labels.ravel()) == [-1.0, 1.0]

    def test_empirical_cluster_mean(self):
        ds = make_two_clusters(200_000, seed=11)
        pos = ds.inputs[ds.labels.ravel() == 1.0]
        assert np.all(np.abs(pos.mean(axis=0) - 2.0) < 0.05)

    def test_zero_noise_collapses_to_centers(self):
        ds = make_two_clusters(10, seed=2, cluster_std=0.0, relative_noise=0.0)
        pos = ds.inputs[ds.labels.ravel() == 1.0]
        neg = ds.inputs[ds.labels.ravel() == -1.0]
        np.testing.assert_array_equal(pos, np.full((5, 2), 2.0))
        np.testing.assert_array_equal(neg, np.full((5, 2), -2.0))

    def test_odd_count_rejected(self):
        with pytest.raises(ValueError):
            make_two_clusters(7, seed=0)

    def test_seed_reproducible(self):
        a = make_two_clusters(20, seed=42)
        b = make_two_clusters(20, seed=42)
        np.testing.assert_array_equal(a.inputs, b.inputs)


class TestGaussianModel:
    def test_reconstructed_eigenvalues_two_dims(self):
        ds, eigenvalues, _ = make_gaussian_model(2, 1.0, 100.0, seed=4)
        second_moment = ds.inputs.T @ ds.inputs
        got = np.sort(np.linalg.eigvalsh(second_moment))
        np.testing.assert_allclose(got, [1.0, 100.0], atol=1e-10)
        np.testing.assert_allclose(eigenvalues, [1.0, 100.0])

    def test_equidistant_eigenvalues_four_dims(self):
        _, eigenvalues, _ = make_gaussian_model(4, 1.0, 100.0, seed=4)
        np.testing.assert_allclose(eigenvalues, [1.0, 34.0, 67.0, 100.0])

    def test_eigenvectors_orthonormal(self):
        _, _, vecs = make_gaussian_model(6, 1.0, 100.0, seed=8)
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(6), atol=1e-10)

    def test_loss_equals_quadratic_form(self, rng):
        # w^T (sum x x^T) w must equal the network loss with zero bias
        n = 5
        ds, eigenvalues, vecs = make_gaussian_model(n, 1.0, 100.0, seed=13)
        arch = Architecture((n, 1))
        second_moment = ds.inputs.T @ ds.inputs
        for _ in range(50):
            w = rng.standard_normal(n)
            params = np.concatenate([w, [0.0]])
            lg = loss_and_gradient(arch, params, ds.inputs, ds.labels)
            assert lg.loss == pytest.approx(w @ second_moment @ w, rel=1e-10)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            make_gaussian_model(1, 1.0, 100.0, seed=0)
        with pytest.raises(ValueError):
            make_gaussian_model(4, 5.0, 2.0, seed=0)


class TestIdxFiles:
    def _write_pair(self, tmp_path, images, labels):
        img_path = tmp_path / "images-idx3-ubyte"
        lab_path = tmp_path / "labels-idx1-ubyte"
        write_idx_images(img_path, images)
        write_idx_labels(lab_path, labels)
        return img_path, lab_path

    def test_round_trip_bit_exact(self, tmp_path, rng):
        images = rng.integers(0, 256, (10, 4, 4), dtype=np.uint8)
        labels = rng.integers(0, 10, 10, dtype=np.uint8)
        img, lab = self._write_pair(tmp_path, images, labels)
        ds = load_mnist_idx(img, lab)
        expected = images.reshape(10, 16).astype(np.float64) / 255.0
        assert np.array_equal(ds.inputs, expected)
        assert np.array_equal(np.argmax(ds.labels, axis=1), labels)

    def test_single_blank_image(self, tmp_path):
        img, lab = self._write_pair(tmp_path, np.zeros((1, 28, 28), np.uint8),
                                    np.array([7], np.uint8))
        ds = load_mnist_idx(img, lab)
        assert ds.inputs.shape == (1, 784)
        np.testing.assert_array_equal(ds.inputs, 0.0)
        assert ds.labels[0, 7] == 1.0

    def test_bad_magic_names_offset(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"\x00\x00\x08\x04" + b"\x00" * 12)
        with pytest.raises(IdxFormatError, match="offset 0"):
            load_mnist_idx(path, path)

    def test_truncated_payload(self, tmp_path, rng):
        images = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, 4, dtype=np.uint8)
        img, lab = self._write_pair(tmp_path, images, labels)
        img.write_bytes(img.read_bytes()[:-5])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_mnist_idx(img, lab)

    def test_count_mismatch(self, tmp_path, rng):
        images = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
        img, lab = self._write_pair(tmp_path, images,
                                    rng.integers(0, 10, 5, dtype=np.uint8))
        with pytest.raises(IdxFormatError, match="5 labels.*4 images"):
            load_mnist_idx(img, lab)

    def test_two_class_filter(self, tmp_path):
        images = np.arange(6 * 4, dtype=np.uint8).reshape(6, 2, 2)
        labels = np.array([7, 9, 1, 7, 9, 9], np.uint8)
        img, lab = self._write_pair(tmp_path, images, labels)
        ds = load_mnist_idx(img, lab, two_class_filter=(7, 9))
        assert ds.n_items == 5
        assert ds.labels.shape == (5, 2)
        np.testing.assert_array_equal(ds.labels[:, 0], [1, 0, 1, 0, 0])

    def test_filter_two_classes_standalone(self):
        labels = np.eye(10)[[3, 7, 9, 9, 0]]
        ds = Dataset(np.arange(5.0)[:, None] * np.ones((5, 2)), labels)
        out = filter_two_classes(ds, (7, 9))
        assert out.n_items == 3
        np.testing.assert_array_equal(out.labels, [[1, 0], [0, 1], [0, 1]])


def test_split_train_validation_test():
    train = Dataset(np.arange(20.0)[:, None], np.zeros((20, 1)))
    test = Dataset(np.arange(100.0, 104.0)[:, None], np.zeros((4, 1)))
    split = split_train_validation_test(train, test, n_heldout=5)
    assert split["train"].n_items == 15
    assert split["validation"].n_items == 4
    assert split["test"].n_items == 5
    np.testing.assert_array_equal(split["test"].inputs.ravel(), np.arange(15.0, 20.0))


class TestMinibatchStream:
    def test_full_batch_is_permutation(self):
        ds = Dataset(np.zeros((8, 1)), np.zeros((8, 1)))
        stream = MinibatchStream(ds, 8, seed=0)
        assert sorted(stream.next_batch()) == list(range(8))

    def test_epoch_covers_every_index(self):
        ds = Dataset(np.zeros((3, 1)), np.zeros((3, 1)))
        stream = MinibatchStream(ds, 1, seed=5)
        seen = {int(stream.next_batch()[0]) for _ in range(3)}
        assert seen == {0, 1, 2}

    def test_multiple_epochs_resample(self):
        ds = Dataset(np.zeros((6, 1)), np.zeros((6, 1)))
        stream = MinibatchStream(ds, 2, seed=5)
        for _ in range(4):
            epoch = np.concatenate([stream.next_batch() for _ in range(3)])
            assert sorted(epoch) == list(range(6))

    def test_seed_determinism(self):
        ds = Dataset(np.zeros((10, 1)), np.zeros((10, 1)))
        a = MinibatchStream(ds, 3, seed=9)
        b = MinibatchStream(ds, 3, seed=9)
        for _ in range(10):
            np.testing.assert_array_equal(a.next_batch(), b.next_batch())

    def test_short_final_batch_when_not_divisible(self):
        ds = Dataset(np.zeros((7, 1)), np.zeros((7, 1)))
        stream = MinibatchStream(ds, 3, seed=2)
        sizes = [len(stream.next_batch()) for _ in range(3)]
        assert sizes == [3, 3, 1]

    def test_batch_size_bounds(self):
        ds = Dataset(np.zeros((4, 1)), np.zeros((4, 1)))
        with pytest.raises(ValueError):
            MinibatchStream(ds, 0, seed=0)
        with pytest.raises(ValueError):
            MinibatchStream(ds, 5, seed=0)


class TestGradientAdapters:
    def test_minibatch_full_equals_full_gradient(self, rng):
        ds = make_two_clusters(20, seed=3)
        arch = Architecture((2, 1))
        theta = rng.standard_normal(3)
        full = full_gradient(arch, ds)
        mini = minibatch_gradient(arch, ds, MinibatchStream(ds, 20, seed=1))
        loss_f, grad_f = full(theta)
        loss_m, grad_m = mini(theta)
        assert loss_m == pytest.approx(loss_f, rel=1e-12)
        np.testing.assert_allclose(grad_m, grad_f, rtol=1e-12)

    def test_minibatch_rescale_is_unbiased(self, rng):
        ds = make_two_clusters(16, seed=3)
        arch = Architecture((2, 1))
        theta = rng.standard_normal(3)
        _, grad_f = full_gradient(arch, ds)(theta)
        mini = minibatch_gradient(arch, ds, MinibatchStream(ds, 4, seed=1))
        grads = np.array([mini(theta)[1] for _ in range(4)])   # one epoch
        np.testing.assert_allclose(grads.mean(axis=0), grad_f, rtol=1e-10)


def test_dataset_rejects_nan():
    with pytest.raises(ValueError, match="NaN"):
        Dataset(np.array([[np.nan]]), np.array([[0.0]]))


def test_dataset_csv_export(tmp_path):
    ds = make_two_clusters(4, seed=1)
    path = tmp_path / "data.csv"
    ds.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x0,x1,y0"
    assert len(lines) == 5
    first = [float(v) for v in lines[1].split(",")]
    assert first[0] == ds.inputs[0, 0] and first[2] == ds.labels[0, 0]

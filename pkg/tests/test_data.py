from pathlib import Path

import numpy as np
import pytest

from mcinet import data as D
from mcinet.tensor import save_nt

HEADER = "subject_id,label,plane,image_path\n"


def write_pgm(path, pixels):
    path.write_bytes(D.encode_pgm(np.asarray(pixels, dtype=np.uint8)))
    return path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    m = D.synth_dataset(10, seed=3, out_dir=out, size=32)
    return out, m


class TestManifest:
    def test_balanced_summary(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", [[0]])
        rows = [f"s{i},{'normal' if i < 210 else 'mci'},axial,a.pgm" for i in range(420)]
        (tmp_path / "m.csv").write_text(HEADER + "\n".join(rows) + "\n")
        m = D.load_manifest(tmp_path / "m.csv")
        assert m.class_summary() == {"normal": 210, "mci": 210}

    def test_empty_after_header(self, tmp_path):
        (tmp_path / "m.csv").write_text(HEADER)
        m = D.load_manifest(tmp_path / "m.csv")
        assert len(m) == 0
        assert m.class_summary() == {"normal": 0, "mci": 0}

    def test_unknown_label_names_line_and_value(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", [[0]])
        (tmp_path / "m.csv").write_text(HEADER + "s1,normal,axial,a.pgm\ns2,AD,axial,a.pgm\n")
        with pytest.raises(D.DataError, match=r"m\.csv:3.*'AD'"):
            D.load_manifest(tmp_path / "m.csv")

    def test_case_insensitive(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", [[0]])
        (tmp_path / "m.csv").write_text(HEADER + "s1,MCI,Sagittal,a.pgm\n")
        r = D.load_manifest(tmp_path / "m.csv").records[0]
        assert (r.label, r.plane) == ("mci", "sagittal")

    def test_unknown_plane(self, tmp_path):
        (tmp_path / "m.csv").write_text(HEADER + "s1,mci,coronal,a.pgm\n")
        with pytest.raises(D.DataError, match="coronal"):
            D.load_manifest(tmp_path / "m.csv", check_files=False)

    def test_duplicate_subject_plane(self, tmp_path):
        (tmp_path / "m.csv").write_text(HEADER + "s1,mci,axial,a.pgm\ns1,mci,axial,b.pgm\n")
        with pytest.raises(D.DataError, match=":3.*duplicate"):
            D.load_manifest(tmp_path / "m.csv", check_files=False)

    def test_malformed_row(self, tmp_path):
        (tmp_path / "m.csv").write_text(HEADER + "s1,mci\n")
        with pytest.raises(D.DataError, match=":2"):
            D.load_manifest(tmp_path / "m.csv", check_files=False)

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,label\n")
        with pytest.raises(D.DataError, match="header"):
            D.load_manifest(tmp_path / "m.csv")

    def test_missing_image(self, tmp_path):
        (tmp_path / "m.csv").write_text(HEADER + "s1,mci,axial,nope.pgm\n")
        with pytest.raises(D.DataError, match="nope.pgm"):
            D.load_manifest(tmp_path / "m.csv")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(D.DataError, match="absent.csv"):
            D.load_manifest(tmp_path / "absent.csv")

    def test_write_roundtrip(self, corpus, tmp_path):
        out, m = corpus
        D.write_manifest(m, out / "copy.csv")
        again = D.load_manifest(out / "copy.csv")
        assert again.records == m.records


class TestDecode:
    def test_p5_endpoints(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", [[0, 255], [0, 255]])
        img = D.decode_image(tmp_path / "a.pgm")
        assert img.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(img.reshape(-1), [0, 1, 0, 1])

    def test_p6_planes(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P6\n3 1\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255]))
        img = D.decode_image(tmp_path / "a.ppm")
        assert img.shape == (1, 3, 1, 3)
        np.testing.assert_array_equal(img[0, :, 0, :], np.eye(3))

    def test_header_comment(self):
        img = D.decode_netpbm(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(img.reshape(-1), [0, 1])

    def test_truncated(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(D.DataError, match="truncated"):
            D.decode_image(tmp_path / "a.pgm")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(D.DataError, match="magic"):
            D.decode_image(tmp_path / "a.pgm")

    def test_maxval(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(D.DataError, match="maxval"):
            D.decode_image(tmp_path / "a.pgm")

    def test_nt_tensor(self, tmp_path):
        x = np.random.default_rng(0).random((2, 3))
        save_nt(tmp_path / "a.nt", x)
        np.testing.assert_array_equal(D.decode_image(tmp_path / "a.nt"), x[None, None])

    def test_pgm_roundtrip_bytes(self, corpus):
        out, m = corpus
        path = m.records[0].image_path
        img = D.decode_image(path)
        pixels = np.rint(img[0, 0] * 255).astype(np.uint8)
        assert D.encode_pgm(pixels) == path.read_bytes()


class TestResize:
    def test_same_size_identity(self):
        img = np.random.default_rng(0).random((1, 1, 5, 7))
        np.testing.assert_allclose(D.resize_bilinear(img, (5, 7)), img, rtol=0, atol=1e-12)

    def test_constant(self):
        out = D.resize_bilinear(np.full((1, 1, 3, 5), 0.25), (11, 4))
        assert out.shape == (1, 1, 11, 4)
        np.testing.assert_allclose(out, 0.25, atol=1e-15)

    def test_two_by_two_ramp(self):
        out = D.resize_bilinear(np.array([[[[0.0, 1.0], [0.0, 1.0]]]]), 4)
        assert out.shape == (1, 1, 4, 4)
        assert np.all((out >= 0) & (out <= 1))
        assert np.all(np.diff(out, axis=-1) >= 0)
        # half-pixel centres: 4 outputs sample x = -0.25, 0.25, 0.75, 1.25 (clamped)
        np.testing.assert_allclose(out[0, 0, 0], [0.0, 0.25, 0.75, 1.0])


class TestNetworkInput:
    def test_grey_replicated(self):
        img = np.random.default_rng(0).random((1, 1, 8, 8))
        x = D.to_network_input(img, 8, D.NormStats.identity())
        assert x.shape == (3, 8, 8)
        np.testing.assert_array_equal(x[0], x[1])
        np.testing.assert_array_equal(x[0], img[0, 0])

    def test_extent_always_target(self):
        img = np.random.default_rng(0).random((1, 3, 13, 9))
        assert D.to_network_input(img, 20, D.NormStats.identity()).shape == (3, 20, 20)

    def test_standardization(self):
        stats = D.NormStats(np.array([0.5, 0.0, 1.0]), np.array([2.0, 1.0, 0.5]))
        x = D.to_network_input(np.ones((1, 1, 2, 2)), 2, stats)
        np.testing.assert_allclose(x[:, 0, 0], [0.25, 1.0, 0.0])

    def test_degenerate_std(self):
        stats = D.compute_norm_stats(np.ones((2, 3, 4, 4)))
        assert stats.degenerate
        np.testing.assert_array_equal(stats.std, 1.0)

    def test_two_channel_rejected(self):
        with pytest.raises(D.DataError):
            D.to_network_input(np.ones((1, 2, 4, 4)), 4, D.NormStats.identity())


def toy_manifest(n_normal, n_mci, planes=D.PLANES):
    recs = []
    for i in range(n_normal + n_mci):
        lab = "normal" if i < n_normal else "mci"
        recs += [D.SubjectRecord(f"s{i:03d}", lab, p, Path(f"{i}_{p}.pgm")) for p in planes]
    return D.DatasetManifest(recs)


class TestSplit:
    def test_210_per_class_arithmetic(self):
        s = D.subject_split(toy_manifest(210, 210), 0.7, seed=0)
        assert len(s.train.subjects()) == 294
        assert len(s.test.subjects()) == 126
        assert s.train.class_summary() == {"normal": 147, "mci": 147}

    def test_disjoint_and_complete(self):
        m = toy_manifest(13, 8)
        s = D.subject_split(m, 0.7, seed=5)
        assert not set(s.train.subjects()) & set(s.test.subjects())
        assert sorted(map(repr, s.train.records + s.test.records)) == sorted(map(repr, m.records))

    def test_per_class_floor(self):
        s = D.subject_split(toy_manifest(13, 8), 0.7, seed=1)
        # 9.1 and 5.6 floor to 9 and 5, which already meets the overall floor of 14.7
        assert s.train.class_summary() == {"normal": 9, "mci": 5}

    def test_remainder_top_up(self):
        # 3.5 + 3.5 floors to 6 while the overall floor is 7; the tie goes to normal
        s = D.subject_split(toy_manifest(5, 5), 0.7, seed=1)
        assert s.train.class_summary() == {"normal": 4, "mci": 3}

    def test_deterministic(self):
        m = toy_manifest(20, 20)
        a, b = D.subject_split(m, 0.7, seed=4), D.subject_split(m, 0.7, seed=4)
        assert a.train.records == b.train.records
        assert a.fingerprint() == b.fingerprint()
        assert D.subject_split(m, 0.7, seed=5).fingerprint() != a.fingerprint()

    def test_two_subjects(self):
        s = D.subject_split(toy_manifest(1, 1), 0.5, seed=0)
        assert len(s.train.subjects()) == 1 and len(s.test.subjects()) == 1
        assert set(s.train.class_summary().values()) == {0, 1}

    def test_planes_stay_together(self):
        s = D.subject_split(toy_manifest(10, 10), 0.7, seed=2)
        for part in (s.train, s.test):
            for sid in part.subjects():
                assert sum(r.subject_id == sid for r in part.records) == 3

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.1, 1.5])
    def test_bad_fraction(self, f):
        with pytest.raises(D.DataError):
            D.subject_split(toy_manifest(2, 2), f)


class TestBatches:
    def test_single_batch(self):
        idx = D.batch_indices(10, 64)
        assert len(idx) == 1 and sorted(idx[0]) == list(range(10))

    def test_sizes_sum(self):
        idx = D.batch_indices(37, 8, shuffle_seed=3)
        assert [len(b) for b in idx] == [8, 8, 8, 8, 5]
        assert sorted(np.concatenate(idx)) == list(range(37))

    def test_seeded_order(self):
        a = D.batch_indices(30, 4, shuffle_seed=1, epoch=2)
        b = D.batch_indices(30, 4, shuffle_seed=1, epoch=2)
        c = D.batch_indices(30, 4, shuffle_seed=1, epoch=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_batches_yield_data(self, corpus):
        out, m = corpus
        ds = D.prepare(m, 16)
        total = 0
        for x, y in D.batches(ds, 7, shuffle_seed=0):
            assert x.shape[1:] == (3, 16, 16) and len(x) == len(y)
            total += len(y)
        assert total == len(m)


class TestSynth:
    def test_counts(self, corpus):
        out, m = corpus
        assert m.class_summary() == {"normal": 10, "mci": 10}
        assert len(m) == 60
        assert (out / "manifest.csv").is_file()
        assert D.load_manifest(out / "manifest.csv").records == m.records

    def test_byte_identical(self, corpus, tmp_path):
        out, m = corpus
        D.synth_dataset(10, seed=3, out_dir=tmp_path, size=32)
        for r in m.records:
            assert (tmp_path / "images" / r.image_path.name).read_bytes() == r.image_path.read_bytes()

    def test_mci_darker(self, corpus):
        _, m = corpus
        means = {lab: np.mean([D.decode_image(r.image_path).mean() for r in m.records if r.label == lab])
                 for lab in D.LABELS}
        assert means["mci"] < means["normal"]

    def test_planes_differ(self):
        rng = lambda: np.random.default_rng(0)
        a = D.synth_slice(rng(), "normal", "frontal")
        b = D.synth_slice(rng(), "normal", "sagittal")
        assert a.shape == b.shape == (64, 64)
        assert not np.array_equal(a, b)


def test_norm_stats_from_train_only(corpus):
    _, m = corpus
    s = D.subject_split(m, 0.7, seed=0)
    tr = D.prepare(s.train, 16)
    te = D.prepare(s.test, 16, tr.stats)
    raw_train = D.load_images(s.train, 16)
    np.testing.assert_allclose(tr.stats.mean, raw_train.mean(axis=(0, 2, 3)))
    assert te.stats is tr.stats

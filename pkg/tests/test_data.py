import numpy as np
import pytest

from pointjepa.data import (
    CLASS_NAMES,
    ShapeClass,
    build_dataset,
    cube_faces,
    decode_cloud,
    encode_cloud,
    gen_shape,
    read_cloud,
    read_index,
    write_cloud,
)
from pointjepa.errors import FormatError, InvalidArgument


@pytest.mark.parametrize("kind", CLASS_NAMES)
@pytest.mark.parametrize("rotate", [False, True])
def test_generated_clouds_are_normalized(kind, rotate):
    pts = gen_shape(ShapeClass(kind), 2048, np.random.default_rng(0), jitter=0.02, rotate=rotate)
    assert pts.dtype == np.float32 and pts.shape == (2048, 3)
    assert np.all(np.isfinite(pts))
    assert np.linalg.norm(pts.astype(np.float64).mean(axis=0)) <= 1e-5
    assert abs(np.linalg.norm(pts, axis=1).max() - 1) <= 1e-5


def test_sphere_radius():
    pts = gen_shape(ShapeClass("sphere"), 3000, np.random.default_rng(1))
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-5)


def test_plane_coplanar():
    pts = gen_shape(ShapeClass("plane"), 3000, np.random.default_rng(2), rotate=True)
    centered = pts - pts.mean(axis=0)
    assert np.linalg.svd(centered, compute_uv=False)[-1] <= 1e-5 * np.sqrt(len(pts))
    assert np.linalg.svd(centered / np.sqrt(len(pts)), compute_uv=False)[-1] <= 1e-5


def test_cube_face_frequencies_area_weighted():
    """Face assignment counts follow the multinomial with area-proportional weights."""
    params = (0.5, 1.0, 1.5)
    n = 100_000
    raw = gen_shape(ShapeClass("cube", params), n, np.random.default_rng(3)).astype(np.float64)
    # undo normalization: recover face by the coordinate sitting on a bounding plane
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    tol = 1e-5
    counts = []
    for axis in range(3):
        counts.append(np.sum(np.abs(raw[:, axis] - lo[axis]) < tol))
        counts.append(np.sum(np.abs(raw[:, axis] - hi[axis]) < tol))
    counts = np.array(counts, dtype=float)
    p = cube_faces(params) / cube_faces(params).sum()
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_torus_and_cone_surfaces():
    rng = np.random.default_rng(4)
    t = gen_shape(ShapeClass("torus", (1.0, 0.25)), 4000, rng)
    # distance to the core ring is constant after normalization
    ring = np.sqrt(t[:, 0] ** 2 + t[:, 1] ** 2)
    core = (ring.max() + ring.min()) / 2
    tube = np.sqrt((ring - core) ** 2 + t[:, 2] ** 2)
    np.testing.assert_allclose(tube, 0.25 / 1.25, atol=1e-3)
    c = gen_shape(ShapeClass("cone", (1.0, 2.0)), 4000, rng)
    assert np.all(np.isfinite(c))


def test_shape_validation():
    with pytest.raises(InvalidArgument):
        ShapeClass("pyramid")
    with pytest.raises(InvalidArgument):
        ShapeClass("sphere", (-1.0,))
    with pytest.raises(InvalidArgument):
        ShapeClass("torus", (0.3, 0.5))
    with pytest.raises(InvalidArgument):
        gen_shape(ShapeClass("sphere"), 0, np.random.default_rng(0))


def test_cloud_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    for n in (1, 7, 1024):
        pts = gen_shape(ShapeClass("cube"), n, rng, jitter=0.01, rotate=True)
        write_cloud(tmp_path / "c.pcj", pts)
        back = read_cloud(tmp_path / "c.pcj")
        assert back.tobytes() == pts.tobytes()
        raw = (tmp_path / "c.pcj").read_bytes()
        assert raw[:4] == b"PCJ1" and int.from_bytes(raw[4:8], "little") == n
        assert len(raw) == 8 + 12 * n


def test_cloud_format_errors():
    good = encode_cloud(np.zeros((3, 3), dtype=np.float32))
    with pytest.raises(FormatError):
        decode_cloud(b"PCJ2" + good[4:])
    with pytest.raises(FormatError):
        decode_cloud(good[:-1])
    with pytest.raises(FormatError):
        decode_cloud(good[:6])
    bad = np.zeros((2, 3), dtype=np.float32)
    bad[1, 1] = np.inf
    with pytest.raises(FormatError):
        decode_cloud(encode_cloud(bad))


def test_build_dataset_counts_and_determinism(tmp_path):
    a = build_dataset(tmp_path / "a", per_class=10, n_points=64, split_ratio=0.8, seed=7)
    b = build_dataset(tmp_path / "b", per_class=10, n_points=64, split_ratio=0.8, seed=7)
    assert len(a.split("train")) == 48 and len(a.split("test")) == 12
    assert (tmp_path / "a" / "index.txt").read_bytes() == (tmp_path / "b" / "index.txt").read_bytes()
    for e in a.entries:
        assert (tmp_path / "a" / e.path).read_bytes() == (tmp_path / "b" / e.path).read_bytes()
    index = read_index(tmp_path / "a" / "index.txt")
    assert index.classes == CLASS_NAMES
    for e in index.entries:
        assert read_cloud(index.resolve(e)).shape == (64, 3)
    clouds, labels = index.load("test")
    assert len(clouds) == 12 and sorted(set(labels.tolist())) == list(range(6))


def test_index_text_format(tmp_path):
    build_dataset(tmp_path, per_class=2, n_points=8, split_ratio=0.5, seed=0)
    lines = (tmp_path / "index.txt").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "pcjepa-index v1"
    assert lines[1] == "#class 0 sphere"
    assert lines[7].split("\t") == ["clouds/sphere_0000.pcj", "0", "train"]


def test_index_parse_errors(tmp_path):
    p = tmp_path / "index.txt"
    p.write_text("bogus\n")
    with pytest.raises(FormatError):
        read_index(p)
    p.write_text("pcjepa-index v1\n#class 0 a\nx.pcj\t3\ttrain\n")
    with pytest.raises(FormatError):
        read_index(p)
    p.write_text("pcjepa-index v1\n#class 0 a\nx.pcj\t0\ttrain\nx.pcj\t0\ttest\n")
    with pytest.raises(FormatError):
        read_index(p)


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        build_dataset(blocker / "sub", per_class=1, n_points=4)

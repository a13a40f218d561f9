import json
import math

import numpy as np
import pytest
from PIL import Image

from nnsg.cli import main
from nnsg.guidance import depth_map
from nnsg.metrics import MetricReport
from nnsg.morphable import ParamVector, load_basis, load_params, reconstruct_mesh, save_params
from nnsg.protodb import load_database
from nnsg.renderer import Camera, rasterize

EXPECTED_SUBSET = ["000001.jpg", "000005.jpg", "000007.jpg", "000010.jpg"]


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    assert main(["fixture", "--out", str(out), "--seed", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def db_path(fixture_dir):
    path = fixture_dir / "protos.db"
    code = main([
        "db", "build", "--attrs", str(fixture_dir / "list_attr_celeba.txt"),
        "--params-dir", str(fixture_dir / "params"), "--out", str(path),
    ])
    assert code == 0
    return path


def guide(fixture_dir, db_path, out_dir, *extra):
    return main([
        "guide", "--input", str(fixture_dir / "query.json"), "--db", str(db_path),
        "--basis", str(fixture_dir / "basis.bin"), "--out-dir", str(out_dir), *extra,
    ])


def read_outputs(out_dir):
    return {name: (out_dir / name).read_bytes()
            for name in ("depth.png", "contour.png", "mask.png", "manifest.json")}


# -- fixture / db --------------------------------------------------------------

def test_fixture_is_deterministic(tmp_path, fixture_dir):
    assert main(["fixture", "--out", str(tmp_path), "--seed", "0"]) == 0
    for name in ("basis.bin", "list_attr_celeba.txt", "query.json", "params/000005.json"):
        assert (tmp_path / name).read_bytes() == (fixture_dir / name).read_bytes()


def test_db_build_selects_hand_derived_subset(db_path, capsys):
    db = load_database(db_path)
    assert list(db.ids) == EXPECTED_SUBSET


def test_db_build_summary_line(fixture_dir, tmp_path, capsys):
    code = main([
        "db", "build", "--attrs", str(fixture_dir / "list_attr_celeba.txt"),
        "--params-dir", str(fixture_dir / "params"), "--out", str(tmp_path / "x.db"),
    ])
    assert code == 0
    assert "selected 4 of 10 rows; ingested 4; missing 0" in capsys.readouterr().out


def test_db_build_skips_missing_params(fixture_dir, tmp_path, capsys, caplog):
    params = tmp_path / "params"
    params.mkdir()
    for stem in ("000001", "000007", "000010"):
        (params / f"{stem}.json").write_bytes((fixture_dir / "params" / f"{stem}.json").read_bytes())
    code = main([
        "db", "build", "--attrs", str(fixture_dir / "list_attr_celeba.txt"),
        "--params-dir", str(params), "--out", str(tmp_path / "x.db"),
    ])
    assert code == 0
    assert "ingested 3; missing 1" in capsys.readouterr().out
    assert "000005" in caplog.text
    assert list(load_database(tmp_path / "x.db").ids) == ["000001.jpg", "000007.jpg", "000010.jpg"]


def test_db_build_empty_selection(fixture_dir, tmp_path, capsys):
    code = main([
        "db", "build", "--attrs", str(fixture_dir / "list_attr_celeba.txt"),
        "--params-dir", str(fixture_dir / "params"), "--out", str(tmp_path / "x.db"),
        "--include", "Attractive,Young,Bald",
    ])
    assert code == 2
    assert "no prototypes selected" in capsys.readouterr().err
    assert not (tmp_path / "x.db").exists()


def test_db_build_parse_error_names_line(tmp_path, fixture_dir, capsys):
    lines = (fixture_dir / "list_attr_celeba.txt").read_text().splitlines()
    lines[4] = lines[4].rsplit(" ", 1)[0] + " 7"
    bad = tmp_path / "attrs.txt"
    bad.write_text("\n".join(lines) + "\n")
    code = main(["db", "build", "--attrs", str(bad), "--params-dir", str(fixture_dir / "params"),
                 "--out", str(tmp_path / "x.db")])
    assert code == 2
    err = capsys.readouterr().err
    assert "attrs.txt:5:" in err


def test_missing_file_is_io_error(tmp_path, fixture_dir):
    code = main(["db", "build", "--attrs", str(tmp_path / "nope.txt"),
                 "--params-dir", str(fixture_dir / "params"), "--out", str(tmp_path / "x.db")])
    assert code == 3


def test_corrupt_db_is_validation_error(tmp_path, db_path, fixture_dir):
    bad = tmp_path / "bad.db"
    bad.write_bytes(db_path.read_bytes()[:-10])
    assert main(["db", "search", "--db", str(bad), "--query", str(fixture_dir / "query.json")]) == 2


# -- search --------------------------------------------------------------------

def test_search_exact_record_scores_one(db_path, fixture_dir, capsys):
    query = fixture_dir / "params" / "000007.json"
    assert main(["db", "search", "--db", str(db_path), "--query", str(query), "--k", "4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    rank, idx, ident, score = lines[0].split()
    assert (rank, idx, ident, score) == ("1", "2", "000007.jpg", "1.000000")
    scores = [float(line.split()[3]) for line in lines]
    assert scores == sorted(scores, reverse=True)


def test_search_k_too_large(db_path, fixture_dir, capsys):
    code = main(["db", "search", "--db", str(db_path), "--query", str(fixture_dir / "query.json"),
                 "--k", "9"])
    assert code == 2
    assert "k" in capsys.readouterr().err


def test_search_zero_norm_query(db_path, tmp_path):
    q = tmp_path / "zero.json"
    save_params(ParamVector.zeros(), q)
    assert main(["db", "search", "--db", str(db_path), "--query", str(q)]) == 2


# -- guide ---------------------------------------------------------------------

def test_guide_defaults(fixture_dir, db_path, tmp_path):
    out = tmp_path / "g"
    assert guide(fixture_dir, db_path, out) == 0
    depth = Image.open(out / "depth.png")
    assert depth.size == (512, 512) and depth.mode == "I;16"
    for name in ("contour.png", "mask.png"):
        img = Image.open(out / name)
        assert img.size == (512, 512) and img.mode == "L"
        assert set(np.unique(np.asarray(img))) <= {0, 255}
    manifest = json.loads((out / "manifest.json").read_text())
    assert (manifest["omega"], manifest["eta"]) == (0.3, 0.5)
    assert (manifest["lambda"], manifest["mu"]) == (0.5, 0.5)
    assert manifest["dilation_px"] == 8
    assert manifest["reference_id"] in EXPECTED_SUBSET


def test_guide_dilation_scales_with_size(fixture_dir, db_path, tmp_path):
    assert guide(fixture_dir, db_path, tmp_path / "a", "--size", "256") == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["dilation_px"] == 4
    assert Image.open(tmp_path / "a" / "mask.png").size == (256, 256)


def test_guide_unfused_matches_plain_render(fixture_dir, db_path, tmp_path):
    out = tmp_path / "g"
    assert guide(fixture_dir, db_path, out, "--size", "128", "--lambda", "1", "--mu", "0") == 0
    face, _ = load_params(fixture_dir / "query.json")
    basis = load_basis(fixture_dir / "basis.bin")
    render = rasterize(reconstruct_mesh(basis, face.alpha, face.beta, face.delta), face.pose,
                       Camera.for_size(128))
    got = np.asarray(Image.open(out / "depth.png")).astype(np.uint16)
    np.testing.assert_array_equal(got, depth_map(render))


def test_guide_is_deterministic(fixture_dir, db_path, tmp_path, monkeypatch):
    assert guide(fixture_dir, db_path, tmp_path / "a", "--size", "160") == 0
    monkeypatch.setenv("NNSG_THREADS", "4")
    assert guide(fixture_dir, db_path, tmp_path / "b", "--size", "160") == 0
    assert read_outputs(tmp_path / "a") == read_outputs(tmp_path / "b")


def test_guide_rejects_bad_weight(fixture_dir, db_path, tmp_path):
    assert guide(fixture_dir, db_path, tmp_path / "g", "--omega", "1.5") == 2


def test_guide_empty_render_exit_code(fixture_dir, db_path, tmp_path):
    face, _ = load_params(fixture_dir / "query.json")
    pose = face.pose.copy()
    pose[5] = -30.0
    q = tmp_path / "behind.json"
    save_params(face.replace(pose=pose), q)
    code = main(["guide", "--input", str(q), "--db", str(db_path),
                 "--basis", str(fixture_dir / "basis.bin"), "--out-dir", str(tmp_path / "g"),
                 "--size", "64"])
    assert code == 4


# -- render --------------------------------------------------------------------

def test_render_writes_color_mask_and_obj(fixture_dir, tmp_path, capsys):
    code = main(["render", "--params", str(fixture_dir / "query.json"),
                 "--basis", str(fixture_dir / "basis.bin"), "--out", str(tmp_path / "c.png"),
                 "--size", "96", "--mask", str(tmp_path / "m.png"), "--obj", str(tmp_path / "f.obj"),
                 "--shade"])
    assert code == 0
    assert Image.open(tmp_path / "c.png").mode == "RGB"
    mask = np.asarray(Image.open(tmp_path / "m.png"))
    assert mask.shape == (96, 96) and mask.max() == 255
    obj = (tmp_path / "f.obj").read_text().splitlines()
    assert sum(line.startswith("v ") for line in obj) == 40 * 40
    assert "covered" in capsys.readouterr().out


# -- metrics -------------------------------------------------------------------

def _write_gray(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def test_metrics_identical(fixture_dir, tmp_path, capsys):
    img = tmp_path / "a.png"
    _write_gray(img, np.random.default_rng(0).integers(0, 256, (32, 32)))
    q = str(fixture_dir / "query.json")
    assert main(["metrics", "--image-a", str(img), "--image-b", str(img),
                 "--params-a", q, "--params-b", q]) == 0
    out = capsys.readouterr().out
    assert "psnr_db=inf" in out
    report = MetricReport.from_text(out)
    assert report.ssim == 1.0 and report.id_similarity == 1.0 and math.isinf(report.psnr_db)


def test_metrics_constant_offset(tmp_path, capsys):
    base = np.random.default_rng(1).integers(0, 255, (32, 32))
    _write_gray(tmp_path / "a.png", base)
    _write_gray(tmp_path / "b.png", base + 1)
    assert main(["metrics", "--image-a", str(tmp_path / "a.png"),
                 "--image-b", str(tmp_path / "b.png")]) == 0
    report = MetricReport.from_text(capsys.readouterr().out)
    assert report.psnr_db == pytest.approx(48.1308, abs=1e-3)
    assert report.id_similarity is None


def test_metrics_params_only(fixture_dir, capsys):
    a, b = fixture_dir / "params" / "000001.json", fixture_dir / "params" / "000005.json"
    assert main(["metrics", "--params-a", str(a), "--params-b", str(b)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("id_similarity=") and len(out.strip().splitlines()) == 1


def test_metrics_size_mismatch(tmp_path, capsys):
    _write_gray(tmp_path / "a.png", np.zeros((32, 32)))
    _write_gray(tmp_path / "b.png", np.zeros((24, 24)))
    args = ["metrics", "--image-a", str(tmp_path / "a.png"), "--image-b", str(tmp_path / "b.png")]
    assert main(args) == 2
    assert "--resize" in capsys.readouterr().err
    assert main(args + ["--resize"]) == 0
    assert "psnr_db=inf" in capsys.readouterr().out


def test_metrics_needs_a_pair(tmp_path):
    assert main(["metrics", "--image-a", str(tmp_path / "a.png")]) == 2
    assert main(["metrics"]) == 2

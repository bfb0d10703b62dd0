from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from scipy import ndimage

from flarekit import rawio
from flarekit.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, file_digest, main
from flarekit.dataset import manifest_read
from flarekit.registration import apply_homography
from flarekit.synthetic import make_scattering_capture


def run(*argv):
    return main(["--quiet", *map(str, argv)])


def digests(root):
    return {p.relative_to(root).as_posix(): file_digest(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run_record.json"}


@pytest.fixture(scope="module")
def scattering(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    caps = root / "caps"
    assert run("synth", "--kind", "scattering", "--count", 10, "--seed", 5, "--out", caps) == 0
    pairs = root / "pairs"
    assert run("build", "--capture-dir", caps, "--kind", "scattering", "--out", pairs) == 0
    return root, caps, pairs


def test_synth_count_zero(tmp_path):
    assert run("synth", "--kind", "scattering", "--count", 0, "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "manifest.jsonl").read_text() == ""
    record = json.loads((tmp_path / "run_record.json").read_text())
    assert record["command"] == "synth" and record["seed"] == 0


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--kind", "scattering", "--count", 2, "--seed", 9, "--size", 256,
                   "--out", tmp_path / name) == 0
    assert digests(tmp_path / "a") == digests(tmp_path / "b")
    assert run("synth", "--kind", "scattering", "--count", 2, "--seed", 10, "--size", 256,
               "--out", tmp_path / "c") == 0
    assert digests(tmp_path / "a") != digests(tmp_path / "c")


def test_synth_reflective_ghost_symmetry(tmp_path):
    assert run("synth", "--kind", "reflective", "--count", 2, "--seed", 3, "--out", tmp_path) == 0
    for line in (tmp_path / "manifest.jsonl").read_text().splitlines():
        cap = json.loads(line)
        c = np.array(cap["optical_center"])
        view_b = np.array(cap["view_b"])
        src_a = np.array([s["center"] for s in cap["scene"]["sources"]])
        for role, src in (("flare_layer_a", src_a), ("flare_layer_b", apply_homography(view_b, src_a))):
            layer = rawio.read_linear(tmp_path / cap["files"][role]).mean(axis=-1)
            labels, n = ndimage.label(layer > 1e-4 * layer.max())
            assert n == len(src)
            found = np.array(ndimage.center_of_mass(layer, labels, range(1, n + 1)))[:, ::-1]
            for p in src:
                assert np.linalg.norm(found - (2 * c - p), axis=1).min() <= 1.0


def test_isp_front_end_and_preset(tmp_path):
    cap = make_scattering_capture(0, size=128)
    raw = rawio.write_raw(tmp_path / "in.pgm", cap.raw_corrupted)
    cfg = tmp_path / "empty.json"
    cfg.write_text("{}")
    assert run("isp", "--raw", raw, "--config", cfg, "--out", tmp_path / "plain.png") == 0
    trace = json.loads((tmp_path / "plain.trace.json").read_text())
    assert trace_stages(trace) == []
    assert len(trace["stages"]) == 5
    assert (tmp_path / "plain.run.json").exists()
    cfg.write_text(json.dumps({"config_id": 3}))
    assert run("isp", "--raw", raw, "--config", cfg, "--out", tmp_path / "p3.png") == EXIT_INVALID
    assert run("isp", "--raw", raw, "--config", cfg, "--remover", "baseline",
               "--out", tmp_path / "p3.png") == 0
    trace = json.loads((tmp_path / "p3.trace.json").read_text())
    assert trace_stages(trace) == ["denoise", "sharpen", "compression", "flare_removal"]
    assert rawio.read_image(tmp_path / "p3.png").shape == (128, 128, 3)


def trace_stages(trace):
    back = {"denoise", "sharpen", "compression", "flare_removal"}
    return [s["stage"] for s in trace["stages"] if s["stage"] in back]


def test_isp_missing_sidecar(tmp_path, capsys):
    cap = make_scattering_capture(0, size=64)
    raw = rawio.write_raw(tmp_path / "in.pgm", cap.raw_corrupted)
    sidecar = rawio.sidecar_path(raw)
    sidecar.unlink()
    assert run("isp", "--raw", raw, "--out", tmp_path / "o.png") == EXIT_INVALID
    assert "in.json" in capsys.readouterr().err
    rawio.write_raw(raw, cap.raw_corrupted)
    meta = json.loads(sidecar.read_text())
    del meta["white_level"]
    sidecar.write_text(json.dumps(meta))
    assert run("isp", "--raw", raw, "--out", tmp_path / "o.png") == EXIT_INVALID
    assert "white_level" in capsys.readouterr().err


def test_register_writes_translation(tmp_path):
    cap = make_scattering_capture(2, size=256, noise_sigma=0.0)
    from flarekit.isp import run_frontend
    a = rawio.write_png(tmp_path / "a.png", run_frontend(cap.raw_corrupted))
    b = rawio.write_png(tmp_path / "b.png", run_frontend(cap.raw_clean))
    assert run("register", "--reference", a, "--moving", b, "--out", tmp_path / "t.json") == 0
    t = json.loads((tmp_path / "t.json").read_text())
    assert t["dx"] == pytest.approx(cap.shift[0], abs=0.3)
    assert t["dy"] == pytest.approx(cap.shift[1], abs=0.3)


def test_build_acceptance_rate(scattering):
    _, _, pairs = scattering
    manifest = manifest_read(pairs / "manifest.jsonl")
    assert manifest.records
    rate = sum(r.accepted for r in manifest.records) / len(manifest.records)
    assert rate >= 0.9
    for r in manifest.accepted():
        for rel in r.paths.values():
            assert (pairs / rel).exists()


def test_ablate_two_orderings(scattering, tmp_path):
    _, _, pairs = scattering
    out = tmp_path / "abl"
    assert run("ablate", "--manifest", pairs / "manifest.jsonl", "--orderings", "1,4",
               "--limit", 3, "--out", out) == 0
    lines = (out / "report.csv").read_text().splitlines()
    body = [l for l in lines if not l.startswith("#")]
    assert len(body) == 1 + 2
    record = json.loads((out / "run_record.json").read_text())
    assert set(record["outputs"]) >= {"report.csv", "report.txt", "experiment.json"}


def test_ablate_config_file_and_flag_precedence(scattering, tmp_path):
    _, _, pairs = scattering
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"manifest": str(pairs / "manifest.jsonl"), "orderings": [2],
                               "remover": "identity", "seed": 4, "limit": 2}))
    out = tmp_path / "abl"
    assert run("ablate", "--config", cfg, "--seed", 7, "--out", out) == 0
    exp = json.loads((out / "experiment.json").read_text())
    assert exp["seed"] == 7 and exp["remover"] == "identity" and exp["orderings"] == [2]
    assert "# remover=identity" in (out / "report.csv").read_text()


def test_eval_identical_pairs(tmp_path):
    img = (np.arange(64 * 64 * 3) % 251).astype(np.uint8).reshape(64, 64, 3)
    rawio.write_png(tmp_path / "x.png", img)
    (tmp_path / "pairs.txt").write_text("# identical\nx.png x.png\n")
    assert run("eval", "--pairs", tmp_path / "pairs.txt", "--out", tmp_path / "m.csv") == 0
    rows = list(csv.DictReader((tmp_path / "m.csv").open()))
    assert rows[0]["psnr"] == "inf" and float(rows[0]["ssim"]) == pytest.approx(1.0)


@pytest.mark.parametrize("argv", [
    ("ablate", "--manifest", "does/not/exist.jsonl", "--out", "{tmp}/o"),
    ("build", "--capture-dir", "{tmp}/nothing", "--kind", "scattering", "--out", "{tmp}/o"),
    ("synth", "--kind", "scattering", "--count", "-1", "--out", "{tmp}/o"),
    ("eval", "--pairs", "{tmp}/p.txt", "--metrics", "lpips", "--out", "{tmp}/m.csv"),
    ("ablate", "--manifest", "x", "--orderings", "1,x", "--out", "{tmp}/o"),
])
def test_usage_errors_exit_2(tmp_path, argv):
    (tmp_path / "p.txt").write_text("")
    assert run(*[a.format(tmp=tmp_path) for a in argv]) == EXIT_INVALID


def test_bad_arguments_exit_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("synth", "--kind", "lens", "--count", 1, "--out", tmp_path)
    assert info.value.code == EXIT_INVALID


def test_unregistrable_capture_is_rejected_not_fatal(tmp_path):
    caps = tmp_path / "caps"
    assert run("synth", "--kind", "scattering", "--count", 1, "--size", 256, "--out", caps) == 0
    cap = json.loads((caps / "manifest.jsonl").read_text())
    raw = rawio.read_raw(caps / cap["files"]["raw_clean"])
    rng = np.random.default_rng(0)
    noise = rng.integers(0, 4096, raw.pixels.shape).astype(np.uint16)
    rawio.write_raw(caps / cap["files"]["raw_clean"], type(raw)(noise, raw.meta))
    assert run("build", "--capture-dir", caps, "--kind", "scattering", "--out", tmp_path / "p") == 0
    recs = manifest_read(tmp_path / "p" / "manifest.jsonl").records
    assert [r.reject_reason for r in recs] == ["registration_failed"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "flarekit", "synth", "--kind", "scattering",
                           "--count", "0", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == ""
    proc = subprocess.run([sys.executable, "-m", "flarekit", "ablate", "--manifest",
                           str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_INVALID and "none.jsonl" in proc.stderr
    assert EXIT_FAILED == 3


def test_build_honours_background_mask(tmp_path):
    caps = tmp_path / "caps"
    assert run("synth", "--kind", "scattering", "--count", 1, "--seed", 2, "--out", caps) == 0
    line = (caps / "manifest.jsonl").read_text()
    cap = json.loads(line)
    rgb = rawio.read_image(caps / cap["files"]["rgb_clean"])
    rawio.write_png(caps / "mask.png", np.full_like(rgb, 255))
    cap["files"]["background_mask"] = "mask.png"
    (caps / "manifest.jsonl").write_text(json.dumps(cap) + "\n")
    assert run("build", "--capture-dir", caps, "--kind", "scattering", "--out", tmp_path / "p") == 0
    assert manifest_read(tmp_path / "p" / "manifest.jsonl").records == []

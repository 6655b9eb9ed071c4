import hashlib
import json

from src import __version__
from src.manifest import MANIFEST_NAME, RunManifest, file_digest


def test_file_digest(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"abc")
    assert file_digest(str(path)) == hashlib.sha256(b"abc").hexdigest()


def test_manifest_round_trip(tmp_path):
    (tmp_path / "runs").mkdir()
    (tmp_path / "runs" / "a.csv").write_text("gen\n0\n")
    (tmp_path / "model.npz").write_bytes(b"weights")
    m = RunManifest(command="evolve", config={"bits": 4, "lam": 4}, seeds=[7])
    m.add_input(str(tmp_path / "model.npz"))
    m.add_outputs(str(tmp_path), ["runs/a.csv"])
    m.save(str(tmp_path))
    loaded = RunManifest.load(str(tmp_path))
    assert loaded == m
    assert loaded.version == __version__
    assert set(loaded.outputs) == {"runs/a.csv"}
    assert set(loaded.inputs) == {"model.npz"}


def test_manifest_is_byte_stable(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for root in (a, b):
        RunManifest(command="report", config={"z": 1, "a": 2}, seeds=[1, 2]).save(str(root))
    assert (a / MANIFEST_NAME).read_bytes() == (b / MANIFEST_NAME).read_bytes()
    assert list(json.loads((a / MANIFEST_NAME).read_text())["config"]) == ["a", "z"]

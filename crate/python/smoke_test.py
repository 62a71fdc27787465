"""Smoke test for the `pds` extension module.

Build it first:

    cargo build -p pds-py --release --features extension-module

then run `python3 python/smoke_test.py` (or `pytest python/`). The test
copies target/release/libpds.so to a temporary directory as pds.so and
imports it from there.
"""

import importlib
import json
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_pds():
    lib = pathlib.Path(os.environ.get("PDS_LIB", ROOT / "target" / "release" / "libpds.so"))
    if not lib.exists():
        raise SystemExit(f"{lib} not found; build with cargo build -p pds-py --release --features extension-module")
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "pds.so"))
    sys.path.insert(0, tmp)
    return importlib.import_module("pds")


pds = load_pds()


def test_split_and_recombine():
    data = os.urandom(48)
    chunks = pds.split(data, 4)
    assert len(chunks) == 4 and all(len(c) == 48 for c in chunks)
    assert pds.recombine(chunks) == data
    assert pds.split(data, 3, seed=7) == pds.split(data, 3, seed=7)
    for bad in (1, 17):
        try:
            pds.split(data, bad)
        except ValueError:
            pass
        else:
            raise AssertionError(f"n={bad} accepted")


def test_keys():
    k = pds.gen_key()
    assert len(k) == 32 and int(k, 16) >= 0
    loc, digest = pds.make_hkr(k, "pn-alice")
    assert loc == "pn-alice" and len(digest) == 64
    assert pds.make_hkr(k, "pn-alice") == (loc, digest)


def test_cluster_operations():
    c = pds.Cluster(["Alice", "Bob"], storage=3, seed=5)
    assert "pn-alice" in c.node_ids()
    stored = c.store("pn-alice", "iban", b"DE89 3704 0044 0532 0130 00", {"type": "iban"})
    assert stored["outcome"] == "stored"
    assert c.read("pn-alice", "iban") == b"DE89 3704 0044 0532 0130 00"

    assert c.retrieve("pn-bob", "iban")["outcome"] == "rejected"
    assert c.share("pn-alice", "iban", "Bob", "pn-bob")["outcome"] == "shared"
    assert c.read("pn-bob", "iban") == b"DE89 3704 0044 0532 0130 00"
    assert c.update("pn-alice", "iban", b"new value")["outcome"] == "updated"
    assert c.read("pn-bob", "iban") == b"new value"
    assert c.revoke("pn-alice", "iban", "Bob") == {"outcome": "revoked", "found": True}
    assert c.retrieve("pn-bob", "iban") == {"outcome": "denied", "reason": "revoked"}

    mk = stored["mk"]
    dumps = c.dumps()
    assert c.messages() > 0
    assert pds.collude(dumps, ["in", "sn1", "sn2", "sn3"], mk)["bytes"] == b"new value"
    seen = pds.collude(dumps, ["sn1", "sn2"], mk)
    assert seen["bytes"] is None and seen["attribution"] is None

    c.restart("pn-alice")
    assert c.read("pn-alice", "iban") == b"new value"
    assert c.delete("pn-alice", "iban")["outcome"] == "deleted"
    assert c.retrieve("pn-alice", "iban") == {"outcome": "denied", "reason": "deleted"}


def test_scenario_with_audit():
    text = (ROOT / "scenarios" / "canonical.json").read_text()
    report = pds.run_scenario(text, audit=True)
    assert all(r["pass"] for r in report["results"])
    assert report["leak"]["findings"] == []
    json.dumps(report)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")

from __future__ import annotations

import socket
import threading

import pytest

from distprov.archive import read_envelope
from distprov.canonical import canonical_decode, canonical_encode
from distprov.cli import main
from distprov.fixtures import make_fixture_project
from distprov.registry_service import RegistryService, make_server

ADMIN = "admin"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv, "--json")
    raw = out.strip().encode()
    doc = canonical_decode(raw)
    assert canonical_encode(doc) == raw
    return code, doc


@pytest.fixture
def registry(tmp_path, capsys):
    d = tmp_path / "reg"
    assert run(capsys, "registry-init", d, "--id", "acme", "--url", "http://placeholder", "--namespace", "@acme", "--admin-token", ADMIN)[0] == 0
    server = make_server(RegistryService(d), "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield d, f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


@pytest.fixture
def workspace(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DISTPROV_PIN_STORE", str(tmp_path / "pins.json"))
    key = tmp_path / "pub.key"
    assert run(capsys, "keygen", "--out", key, "--seed-hex", "11" * 32)[0] == 0
    project = make_fixture_project(tmp_path / "project", modules=2)
    return tmp_path, key, project


def test_keygen_json_and_overwrite(workspace, capsys):
    tmp, key, _ = workspace
    code, doc = run_json(capsys, "keygen", "--out", tmp / "k2", "--seed-hex", "11" * 32)
    assert code == 0 and doc["fingerprint"].startswith("sha256:")
    assert run(capsys, "keygen", "--out", key)[0] == 2


def test_pack_offline_and_deterministic(workspace, capsys, monkeypatch):
    tmp, key, project = workspace

    def no_network(*a, **kw):
        raise AssertionError("pack touched the network")

    monkeypatch.setattr(socket, "socket", no_network)
    outs = []
    for i in range(2):
        out = tmp / f"a{i}.pkg"
        code, doc = run_json(capsys, "pack", project, "--key", key, "--out", out, "--timestamp", "2026-01-01T00:00:00Z")
        assert code == 0 and doc["path"] == str(out)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert read_envelope(outs[0]).manifest.name == "utils"


def test_pack_errors(workspace, capsys):
    tmp, key, _ = workspace
    (tmp / "empty").mkdir()
    assert run(capsys, "pack", tmp / "empty", "--key", key)[0] == 2
    assert run(capsys, "pack", tmp / "project")[0] == 2  # no key


def test_publish_verify_pin_cycle(workspace, registry, capsys):
    tmp, key, project = workspace
    reg_dir, url = registry
    code, doc = run_json(capsys, "register-publisher", "--registry", url, "--admin-token", ADMIN,
                         "--public-key", key, "--namespace", "@acme", "--token", "tok")
    assert code == 0 and doc["namespaces"] == ["@acme"]
    art = tmp / "utils.pkg"
    run(capsys, "pack", project, "--key", key, "--out", art, "--timestamp", "2026-01-01T00:00:00Z")
    code, doc = run_json(capsys, "publish", art, "--registry", url, "--token", "tok")
    assert code == 0 and doc["attestation"]["namespace"] == "@acme"
    assert run(capsys, "publish", art, "--registry", url, "--token", "tok")[0] == 1  # 409

    fetched = tmp / "fetched.pkg"
    assert run(capsys, "fetch", "@acme/utils", "1.0.0", "--registry", url, "--out", fetched)[0] == 0

    # strict without a pin still verifies signature and namespace
    code, doc = run_json(capsys, "verify", fetched, "--mode", "strict", "--registry", url)
    assert code == 0 and doc["composite"] is True
    assert sum(1 for v in doc["levels"].values() if v["evaluated"]) == 5
    code, doc = run_json(capsys, "verify", fetched, "--mode", "default", "--publisher-key", key)
    assert code == 0 and sum(1 for v in doc["levels"].values() if v["evaluated"]) == 3
    assert run(capsys, "verify", fetched, "--mode", "full", "--registry", url)[0] == 2  # no ledger

    code, doc = run_json(capsys, "pin", url)
    assert code == 0 and doc["pinned"] is False
    code, doc = run_json(capsys, "pin", url, "--yes")
    assert code == 0 and doc["pinned"] and doc["namespaces"] == ["@acme"]
    assert run(capsys, "pin", url, "--yes")[0] == 0
    assert run(capsys, "verify", fetched, "--mode", "strict", "--registry", url)[0] == 0

    data = fetched.read_bytes()
    tampered = bytearray(data)
    tampered[data.find(read_envelope(data).contents) + 20] ^= 0x01
    (tmp / "bad.pkg").write_bytes(bytes(tampered))
    code, out, _ = run(capsys, "verify", tmp / "bad.pkg", "--mode", "strict", "--registry", url)
    assert code == 1 and "FAILED at level" in out
    assert run(capsys, "verify", tmp / "missing.pkg", "--publisher-key", key)[0] == 2


def test_resolve_writes_lock(workspace, registry, capsys):
    tmp, key, project = workspace
    _, url = registry
    run(capsys, "register-publisher", "--registry", url, "--admin-token", ADMIN, "--public-key", key, "--namespace", "@acme", "--token", "tok")
    art = tmp / "utils.pkg"
    run(capsys, "pack", project, "--key", key, "--out", art)
    run(capsys, "publish", art, "--registry", url, "--token", "tok")
    consumer = make_fixture_project(tmp / "consumer", name="app", dependencies={"@acme/utils": "^1.0.0"})
    (consumer / "mashin.toml").write_text(f'[registries.acme]\nurl = "{url}"\nnamespaces = ["@acme"]\npriority = "authoritative"\n')
    assert run(capsys, "resolve", consumer)[0] == 1  # no pin yet
    run(capsys, "pin", url, "--yes")
    code, doc = run_json(capsys, "resolve", consumer)
    assert code == 0 and doc["packages"][0]["version"] == "1.0.0"
    assert (consumer / "provenance.lock").exists()


def test_rotation_conflict_and_update(workspace, registry, capsys):
    _, url = registry
    reg_dir, _ = registry
    run(capsys, "pin", url, "--yes")
    code, doc = run_json(capsys, "registry-rotate", reg_dir)
    assert code == 0 and len(doc["key_rotation_history"]) == 1
    # the running server loaded the old identity; restart-free check goes through a fresh server
    server = make_server(RegistryService(reg_dir), "127.0.0.1", 0)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        url2 = f"http://127.0.0.1:{server.server_address[1]}"
        code, _, err = run(capsys, "pin", url2, "--yes")
        assert code == 1
        assert doc["key_fingerprint"] in err and "pinned:" in err
        assert run(capsys, "pin", url2, "--yes", "--update")[0] == 0
    finally:
        server.shutdown()
        server.server_close()


def test_ledger_commands(tmp_path, capsys):
    ledger = tmp_path / "dev.jsonl"
    for kind in ("created", "tested"):
        code, doc = run_json(capsys, "ledger", "append", ledger, "--ledger-id", "dev", "--kind", kind,
                             "--namespace", "@acme", "--name", "utils", "--version", "1.0.0")
        assert code == 0 and doc["anchor"].startswith("dev:sha256:")
    code, doc = run_json(capsys, "ledger", "verify", ledger)
    assert code == 0 and doc == {"events": 2, "first_broken_index": None, "ok": True}
    lines = ledger.read_bytes().splitlines()
    lines[0] = lines[0].replace(b'"created"', b'"edited"')
    ledger.write_bytes(b"\n".join(lines) + b"\n")
    assert run(capsys, "ledger", "verify", ledger)[0] == 1
    assert run(capsys, "ledger", "append", ledger, "--kind", "deleted", "--namespace", "@a", "--name", "x", "--version", "1.0.0")[0] == 2


def test_simulate_attack(capsys):
    code, doc = run_json(capsys, "simulate-attack", "--kind", "dependency-confusion")
    assert code == 0 and doc["blocked_by"] == "layer-1"
    assert run(capsys, "simulate-attack", "--kind", "dependency-confusion", "--layers", "")[0] == 1
    assert run(capsys, "simulate-attack")[0] == 2
    assert run(capsys, "simulate-attack", "--kind", "dependency-confusion", "--layers", "4")[0] == 2


def test_bench_arguments(capsys):
    assert run(capsys, "bench", "--iterations", "0")[0] == 2
    code, doc = run_json(capsys, "bench", "--iterations", "1", "--warmup", "0", "--modules", "1")
    assert code == 0
    assert {t["name"] for t in doc["verification"]} >= {"verify-default", "verify-strict", "verify-full", "lifecycle"}
    assert [s["modules"] for s in doc["sizes"]] == [1, 4, 12]


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as err:
        main(["verify"])
    assert err.value.code == 2
    capsys.readouterr()
    assert run(capsys, "publish", "nothing.pkg")[0] == 2
    assert run(capsys, "pin", "http://127.0.0.1:9", "--yes")[0] == 2

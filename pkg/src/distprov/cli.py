"""Command-line interface.

Exit codes: 0 success, 1 verification or attack failure, 2 usage or
configuration error.  Flags marked [env] default to ``DISTPROV_<FLAG>``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .archive import ArchiveError, read_envelope
from .attestation import package_project
from .canonical import CanonicalError, Digest, canonical_decode, canonical_encode
from .client import HttpNetwork, RegistryError
from .documents import DocumentError, RegistryIdentityDoc
from .identity import (
    KeyMaterialError,
    PinConflict,
    PublisherIdentity,
    TofuStore,
    encode_public_key,
    generate_keypair,
    load_keypair,
    load_public_key,
    save_keypair,
)
from .ledger import ArtifactRef, Ledger, LedgerError
from .manifest import EvolutionAnchor, Lineage, ManifestError, lineage_from_parent
from .resolver import CONFIG_FILE, ConfigError, DependencyRequest, ResolutionError, load_config, pin_registry, resolve, resolve_project, write_lock
from .verifier import MODES, VerificationConfigError, VerificationContext, verify

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ENV_PREFIX = "DISTPROV_"

logger = logging.getLogger("distprov")


class UsageError(Exception):
    pass


def env(flag: str, default=None):
    return os.environ.get(ENV_PREFIX + flag.upper().replace("-", "_"), default)


def default_pin_store() -> str:
    return env("pin-store") or str(Path.home() / ".config" / "distprov" / "known_registries.json")


def emit(args, doc: dict, text: str) -> None:
    if getattr(args, "json", False):
        sys.stdout.buffer.write(canonical_encode(doc) + b"\n")
        sys.stdout.flush()
    else:
        print(text)


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _require(value, flag: str):
    if not value:
        raise UsageError(f"{flag} is required (or set {ENV_PREFIX}{flag.lstrip('-').upper().replace('-', '_')})")
    return value


# -- publisher -----------------------------------------------------------------


def cmd_keygen(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    seed = bytes.fromhex(args.seed_hex) if args.seed_hex else None
    kp = generate_keypair(seed)
    save_keypair(out, kp)
    emit(args, {"fingerprint": str(kp.fingerprint), "path": str(out), "public_key": encode_public_key(kp.public_key)},
         f"wrote {out}\npublic key  {encode_public_key(kp.public_key)}\nfingerprint {kp.fingerprint}")
    return EXIT_OK


def _lineage(args) -> Optional[Lineage]:
    anchor = EvolutionAnchor.parse(args.anchor) if args.anchor else None
    if args.parent:
        parent = read_envelope(_read(args.parent)).manifest
        return lineage_from_parent(parent, evolution_anchor=anchor)
    return Lineage(evolution_anchor=anchor) if anchor else None


def cmd_pack(args) -> int:
    key = load_keypair(_require(args.key, "--key"))
    publisher = PublisherIdentity.from_key_pair(key, args.publisher_id)
    data = package_project(args.project, publisher, timestamp=args.timestamp, lineage=_lineage(args))
    m = read_envelope(data).manifest
    out = Path(args.out or f"{m.name}-{m.version}.pkg")
    out.write_bytes(data)
    emit(args, {"bytes": len(data), "content_hash": str(m.content_hash), "path": str(out)},
         f"wrote {out} ({len(data)} bytes)\ncontent hash {m.content_hash}")
    return EXIT_OK


def cmd_publish(args) -> int:
    data = _read(args.artifact)
    m = read_envelope(data).manifest
    client = HttpNetwork()(_require(args.registry, "--registry"))
    body = client.publish(m.namespace, m.name, m.version, data, _require(args.token, "--token"))
    emit(args, canonical_decode(body), f"published {m.namespace}/{m.name} {m.version}\n{body.decode()}")
    return EXIT_OK


def cmd_fetch(args) -> int:
    req = DependencyRequest.parse(args.package)
    client = HttpNetwork()(_require(args.registry, "--registry"))
    data = client.fetch(req.namespace, req.name, args.version)
    out = Path(args.out or f"{req.name}-{args.version}.pkg")
    out.write_bytes(data)
    emit(args, {"bytes": len(data), "path": str(out)}, f"wrote {out} ({len(data)} bytes)")
    return EXIT_OK


# -- consumer ------------------------------------------------------------------


def _registry_doc(args) -> Optional[RegistryIdentityDoc]:
    if args.registry_doc:
        return RegistryIdentityDoc.from_bytes(_read(args.registry_doc))
    if args.registry:
        return HttpNetwork()(args.registry).well_known()
    return None


def cmd_verify(args) -> int:
    data = _read(args.artifact)
    doc = _registry_doc(args) if args.mode != "default" else None
    if args.publisher_key:
        pub = load_public_key(args.publisher_key)
    elif args.registry:
        fp = read_envelope(data).publisher_sig.publisher_fingerprint
        pub = HttpNetwork()(args.registry).publisher_key(fp)
    else:
        raise UsageError("--publisher-key or --registry is required")
    pinned = Digest.parse(args.pinned) if args.pinned else None
    if pinned is None and doc is not None:
        entry = TofuStore.load(args.pin_store).get(doc.registry_id)
        pinned = entry.fingerprint if entry else None
    ledger = Ledger(args.ledger, args.ledger_id) if args.ledger else None
    ctx = VerificationContext(pub, doc, pinned, args.namespace, ledger, args.clock_skew)
    report = verify(data, args.mode, ctx)
    lines = [f"mode {report.mode}"]
    for i, r in sorted(report.levels.items()):
        state = ("PASS" if r.passed else "FAIL") if r.evaluated else "skip"
        lines.append(f"  level {i}: {state:<4} {r.code}  {r.message}".rstrip())
    lines.append("verified" if report.composite else f"FAILED at level {report.first_failure().level}")
    emit(args, report.to_dict(), "\n".join(lines))
    return EXIT_OK if report.composite else EXIT_FAIL


def cmd_pin(args) -> int:
    client = HttpNetwork()(args.url)
    doc = client.well_known()
    store = TofuStore.load(args.pin_store)
    existing = store.get(doc.registry_id)
    if existing is not None and existing.fingerprint != doc.key_fingerprint and not args.update:
        raise PinConflict(doc.registry_id, existing.fingerprint, doc.key_fingerprint)
    if not args.yes:
        emit(args, {"fingerprint": str(doc.key_fingerprint), "pinned": False, "registry_id": doc.registry_id},
             f"{doc.registry_id} at {args.url}\nfingerprint {doc.key_fingerprint}\nre-run with --yes to pin")
        return EXIT_OK
    entry = pin_registry(store, client, update=args.update, expected=args.expect)
    emit(args, {"fingerprint": str(entry.fingerprint), "namespaces": list(entry.namespaces), "pinned": True, "registry_id": doc.registry_id},
         f"pinned {doc.registry_id} {entry.fingerprint}")
    return EXIT_OK


def cmd_resolve(args) -> int:
    tofu = TofuStore.load(args.pin_store)
    network = HttpNetwork()
    root = Path(args.project)
    config = load_config(args.config or root / CONFIG_FILE)
    if args.dep:
        results = [resolve(DependencyRequest.parse(d), config, tofu, network) for d in args.dep]
        write_lock(args.lock or root / "provenance.lock", [r.lock_entry() for r in results])
    else:
        results = resolve_project(root, tofu, network, config=config, lock_path=args.lock)
    if args.out:
        for r in results:
            (Path(args.out) / f"{r.request.name}-{r.version}.pkg").write_bytes(r.data)
    entries = [r.lock_entry().to_dict() for r in results]
    emit(args, {"packages": entries},
         "\n".join(f"{e['namespace']}/{e['name']} {e['version']}  {e['registry_fingerprint']}" for e in entries) or "nothing to resolve")
    return EXIT_OK


# -- registry -------------------------------------------------------------------


def cmd_registry_init(args) -> int:
    from .registry_service import RegistryService

    svc = RegistryService.create(
        args.dir, args.id, args.url, args.namespace or [], parent=args.parent,
        admin_token=args.admin_token, enforce_namespaces=not args.no_enforce,
    )
    emit(args, svc.doc.to_dict(), f"initialized {args.id} in {args.dir}\nfingerprint {svc.doc.key_fingerprint}")
    return EXIT_OK


def cmd_registry_rotate(args) -> int:
    from .registry_service import RegistryService

    doc = RegistryService(args.dir).rotate()
    emit(args, doc.to_dict(), f"rotated; new fingerprint {doc.key_fingerprint}\nhistory {len(doc.key_rotation_history)} keys")
    return EXIT_OK


def cmd_register_publisher(args) -> int:
    pub = load_public_key(args.public_key)
    if args.dir:
        from .registry_service import RegistryService

        record = RegistryService(args.dir).register_publisher(pub, args.namespace, args.publisher_id, args.token)
        doc = {"fingerprint": str(record.fingerprint), "namespaces": list(record.namespaces), "publisher_id": record.publisher_id}
    else:
        client = HttpNetwork()(_require(args.registry, "--registry"))
        doc = client.register_publisher(_require(args.admin_token, "--admin-token"), pub, args.namespace, args.publisher_id, args.token)
    emit(args, doc, f"registered {doc['publisher_id']} for {', '.join(doc['namespaces'])}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .registry_service import RegistryService, make_server, parse_listen

    host, port = parse_listen(args.listen)
    server = make_server(RegistryService(args.dir), host, port)
    print(f"serving {args.dir} on http://{host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- ledger ---------------------------------------------------------------------


def cmd_ledger_append(args) -> int:
    from .canonical import sha256

    ledger = Ledger(args.ledger, args.ledger_id)
    payload = Digest.parse(args.payload_hash) if args.payload_hash else sha256(_read(args.payload_file) if args.payload_file else b"")
    event = ledger.append(args.kind, ArtifactRef(args.name, args.namespace, args.version), payload, args.timestamp)
    anchor = f"{ledger.ledger_id}:{event.event_hash}"
    emit(args, {"anchor": anchor, "event": event.to_dict()}, f"{event.event_id} {event.kind}\nanchor {anchor}")
    return EXIT_OK


def cmd_ledger_verify(args) -> int:
    ledger = Ledger(args.ledger, args.ledger_id)
    ok, index = ledger.verify()
    emit(args, {"events": len(ledger), "first_broken_index": index, "ok": ok},
         f"{len(ledger)} events, chain intact" if ok else f"chain broken at event {index}")
    return EXIT_OK if ok else EXIT_FAIL


# -- harness --------------------------------------------------------------------


def cmd_simulate_attack(args) -> int:
    from .attack_sim import AttackScenario, format_table, matrix_violations, run_matrix, run_scenario, summarize

    if args.matrix:
        outcomes = run_matrix()
        rows = summarize(outcomes)
        problems = matrix_violations(outcomes)
        doc = {"outcomes": [o.to_dict() for o in outcomes], "table": [r.to_dict() for r in rows], "violations": problems}
        emit(args, doc, format_table(rows) + ("\n" + "\n".join(problems) if problems else ""))
        return EXIT_FAIL if problems else EXIT_OK
    if not args.kind:
        raise UsageError("give --kind or --matrix")
    layers = {int(x) for x in args.layers.split(",") if x} if args.layers is not None else {1, 2, 3}
    if not layers <= {1, 2, 3}:
        raise UsageError("--layers takes a comma list drawn from 1,2,3")
    outcome = run_scenario(AttackScenario(args.kind, 1 in layers, 2 in layers, 3 in layers))
    text = "\n".join(f"  {s.actor:<10} {s.action}: {s.outcome}" for s in outcome.transcript)
    verdict = "ATTACK SUCCEEDED" if outcome.succeeded else f"blocked by {outcome.blocked_by}"
    emit(args, outcome.to_dict(), f"{text}\n{verdict}: {outcome.result}")
    return EXIT_FAIL if outcome.succeeded else EXIT_OK


def cmd_bench(args) -> int:
    from .bench import envelope_overhead, format_sizes, format_timings, primitive_timings, verification_timings

    if args.iterations < 1 or args.warmup < 0:
        raise UsageError("--iterations must be at least 1 and --warmup non-negative")
    timings = verification_timings(args.iterations, args.warmup, args.modules)
    prims = primitive_timings(args.iterations, args.warmup)
    sizes = envelope_overhead()
    doc = {
        "primitives": [t.to_dict() for t in prims],
        "sizes": [s.to_dict() for s in sizes],
        "verification": [t.to_dict() for t in timings],
    }
    emit(args, doc, "\n\n".join([format_timings(timings), format_timings(prims), format_sizes(sizes)]))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="canonical JSON output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="distprov", description="Signed package distribution with registry countersigning.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("keygen", cmd_keygen, "generate an Ed25519 key file")
    sp.add_argument("--out", default=env("key", "distprov.key"), help="[env KEY]")
    sp.add_argument("--seed-hex", help="deterministic 32-byte seed (testing only)")
    sp.add_argument("--force", action="store_true")

    sp = add("pack", cmd_pack, "build and sign an artifact (offline)")
    sp.add_argument("project", nargs="?", default=".")
    sp.add_argument("--key", default=env("key"), help="[env KEY]")
    sp.add_argument("--out")
    sp.add_argument("--publisher-id")
    sp.add_argument("--timestamp", help="build time, default now or SOURCE_DATE_EPOCH")
    sp.add_argument("--anchor", help="<ledger_id>:sha256:<hex>")
    sp.add_argument("--parent", help="previous version's artifact, for the lineage link")

    sp = add("publish", cmd_publish, "upload an artifact for countersigning")
    sp.add_argument("artifact")
    sp.add_argument("--registry", default=env("registry"), help="[env REGISTRY]")
    sp.add_argument("--token", default=env("token"), help="[env TOKEN]")

    sp = add("fetch", cmd_fetch, "download an artifact")
    sp.add_argument("package", help="@namespace/name")
    sp.add_argument("version")
    sp.add_argument("--registry", default=env("registry"), help="[env REGISTRY]")
    sp.add_argument("--out")

    sp = add("verify", cmd_verify, "run the verification chain")
    sp.add_argument("artifact")
    sp.add_argument("--mode", choices=tuple(MODES), default=env("mode", "default"), help="[env MODE]")
    sp.add_argument("--publisher-key", help="key file or ed25519:<base64>")
    sp.add_argument("--registry", default=env("registry"), help="[env REGISTRY]")
    sp.add_argument("--registry-doc", help="identity document file instead of --registry")
    sp.add_argument("--pin-store", default=default_pin_store(), help="[env PIN_STORE]")
    sp.add_argument("--pinned", help="override the pinned fingerprint")
    sp.add_argument("--namespace", help="expected namespace")
    sp.add_argument("--ledger", default=env("ledger"), help="[env LEDGER]")
    sp.add_argument("--ledger-id")
    sp.add_argument("--clock-skew", type=int, default=0, help="seconds")

    sp = add("pin", cmd_pin, "pin a registry fingerprint (TOFU)")
    sp.add_argument("url")
    sp.add_argument("--yes", action="store_true", help="record the pin")
    sp.add_argument("--update", action="store_true", help="replace an existing, different pin")
    sp.add_argument("--expect", help="fingerprint obtained out of band")
    sp.add_argument("--pin-store", default=default_pin_store(), help="[env PIN_STORE]")

    sp = add("resolve", cmd_resolve, "resolve dependencies with enforcement")
    sp.add_argument("project", nargs="?", default=".")
    sp.add_argument("--dep", action="append", help="@ns/name[@constraint]; default: the project's [dependencies]")
    sp.add_argument("--config", help=f"default <project>/{CONFIG_FILE}")
    sp.add_argument("--pin-store", default=default_pin_store(), help="[env PIN_STORE]")
    sp.add_argument("--lock")
    sp.add_argument("--out", help="directory to save fetched artifacts")

    sp = add("registry-init", cmd_registry_init, "create registry state")
    sp.add_argument("dir")
    sp.add_argument("--id", required=True)
    sp.add_argument("--url", required=True)
    sp.add_argument("--namespace", action="append")
    sp.add_argument("--parent")
    sp.add_argument("--admin-token", default=env("admin-token"), help="[env ADMIN_TOKEN]")
    sp.add_argument("--no-enforce", action="store_true", help="accept any namespace from any publisher")

    sp = add("registry-rotate", cmd_registry_rotate, "rotate the registry signing key")
    sp.add_argument("dir")

    sp = add("register-publisher", cmd_register_publisher, "authorize a publisher for namespaces")
    sp.add_argument("--public-key", required=True, help="key file or ed25519:<base64>")
    sp.add_argument("--namespace", action="append", required=True)
    sp.add_argument("--publisher-id")
    sp.add_argument("--token", help="publisher bearer token")
    sp.add_argument("--dir", help="registry state directory (offline)")
    sp.add_argument("--registry", default=env("registry"), help="[env REGISTRY]")
    sp.add_argument("--admin-token", default=env("admin-token"), help="[env ADMIN_TOKEN]")

    sp = add("serve", cmd_serve, "serve a registry over HTTP")
    sp.add_argument("dir")
    sp.add_argument("--listen", default=env("listen", "127.0.0.1:8080"), help="host:port [env LISTEN]")

    sp = add("ledger", None, "evolution ledger")
    lsub = sp.add_subparsers(dest="ledger_command", required=True)
    la = lsub.add_parser("append", parents=[common])
    la.set_defaults(fn=cmd_ledger_append)
    la.add_argument("ledger")
    la.add_argument("--ledger-id")
    la.add_argument("--kind", required=True)
    la.add_argument("--namespace", required=True)
    la.add_argument("--name", required=True)
    la.add_argument("--version", required=True)
    la.add_argument("--payload-hash")
    la.add_argument("--payload-file")
    la.add_argument("--timestamp")
    lv = lsub.add_parser("verify", parents=[common])
    lv.set_defaults(fn=cmd_ledger_verify)
    lv.add_argument("ledger")
    lv.add_argument("--ledger-id")

    sp = add("simulate-attack", cmd_simulate_attack, "run the attack harness")
    sp.add_argument("--matrix", action="store_true")
    sp.add_argument("--kind")
    sp.add_argument("--layers", help="enabled layers, e.g. 1,3; empty for none (default all)")

    sp = add("bench", cmd_bench, "latency and size benchmarks")
    sp.add_argument("--modules", type=int, default=4)
    sp.add_argument("--iterations", type=int, default=50)
    sp.add_argument("--warmup", type=int, default=5)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except PinConflict as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"  pinned:  {exc.pinned}\n  offered: {exc.offered}\nre-run with --update --yes if the change is expected", file=sys.stderr)
        return EXIT_FAIL
    except ResolutionError as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except RegistryError as exc:
        print(f"registry error: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.status == 0 else EXIT_FAIL
    except (ArchiveError, DocumentError) as exc:
        print(f"invalid artifact: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (UsageError, ConfigError, ManifestError, VerificationConfigError, KeyMaterialError, LedgerError,
            CanonicalError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Reference registry: identity endpoint, publish pipeline, and artifact storage.

State lives in one directory::

    config.json      admin token hash, namespace enforcement, parent URL
    identity.json    the well-known identity document
    registry.key     current registry signing key (mode 0600)
    publishers.json  publisher directory
    index.json       (namespace, name, version) -> blob digest
    blobs/<hex>      attested artifacts, content-addressed

Routes (JSON bodies are canonical JSON)::

    GET  /.well-known/package-registry.json
    POST /api/v1/packages/{namespace}/{name}/{version}   bearer publisher token
    GET  /api/v1/packages/{namespace}/{name}/{version}
    GET  /api/v1/packages/{namespace}/{name}
    POST /api/v1/publishers                              bearer admin token
    GET  /api/v1/publishers/{fingerprint}
"""
from __future__ import annotations

import hmac
import logging
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import quote, unquote, urlsplit

from ._time import utc_now
from .archive import ArchiveError, read_envelope
from .attestation import (
    PublisherDirectory,
    PublishRejected,
    RegistryIdentity,
    ScanHook,
    publish,
    registry_init,
)
from .canonical import CanonicalError, Digest, canonical_decode, canonical_encode, sha256
from .documents import RegistryIdentityDoc
from .identity import KeyMaterialError, _atomic_write, decode_public_key, generate_keypair, load_keypair, save_keypair
from .manifest import ManifestError, check_name, check_namespace
from .versions import Version, is_semver

logger = logging.getLogger(__name__)

WELL_KNOWN = "/.well-known/package-registry.json"
API = "/api/v1"
JSON = "application/json"
OCTETS = "application/octet-stream"

# publish rejection code -> HTTP status
REJECTION_STATUS = {
    "unknown-publisher": 401,
    "namespace-unauthorized": 403,
    "bad-publisher-signature": 400,
    "signed-in-future": 400,
    "content-hash-mismatch": 400,
    "malformed-envelope": 400,
    "duplicate-attestation": 400,
    "scan-failed": 422,
}


@dataclass
class Response:
    status: int
    body: bytes = b""
    content_type: str = JSON
    headers: dict = field(default_factory=dict)

    def json(self):
        return canonical_decode(self.body)


def _json(status: int, doc) -> Response:
    return Response(status, canonical_encode(doc))


def _error(status: int, code: str, message: str) -> Response:
    return _json(status, {"error": code, "message": message})


def package_path(namespace: str, name: str, version: Optional[str] = None) -> str:
    parts = [API, "packages", quote(namespace, safe="@"), quote(name, safe="")]
    if version is not None:
        parts.append(quote(version, safe=""))
    return "/".join(parts)


def http_upstream(base_url: str, timeout: float = 10.0) -> Callable[[str], Response]:
    """GET forwarder used for read-through proxying to a parent registry."""

    def get(path: str) -> Response:
        try:
            with urllib.request.urlopen(base_url.rstrip("/") + path, timeout=timeout) as resp:
                return Response(resp.status, resp.read(), resp.headers.get_content_type())
        except urllib.error.HTTPError as exc:
            return Response(exc.code, exc.read(), exc.headers.get_content_type())
        except (urllib.error.URLError, OSError) as exc:
            return _error(502, "upstream-unreachable", str(exc))

    return get


class RegistryService:
    def __init__(
        self,
        root: os.PathLike | str,
        *,
        clock: Callable[[], str] = utc_now,
        scan: Optional[ScanHook] = None,
        upstream: Optional[Callable[[str], Response]] = None,
    ):
        self.root = Path(root)
        self.clock = clock
        self.scan = scan
        self._lock = threading.Lock()
        self.config = canonical_decode((self.root / "config.json").read_bytes())
        doc = RegistryIdentityDoc.from_bytes((self.root / "identity.json").read_bytes())
        self.identity = RegistryIdentity(doc, load_keypair(self.root / "registry.key"))
        self.directory = PublisherDirectory.load(self.root / "publishers.json")
        index_path = self.root / "index.json"
        self.index: dict = canonical_decode(index_path.read_bytes()) if index_path.exists() else {}
        parent = self.config.get("parent_url")
        self.upstream = upstream or (http_upstream(parent) if parent else None)

    # -- setup ------------------------------------------------------------

    @classmethod
    def create(
        cls,
        root: os.PathLike | str,
        registry_id: str,
        url: str,
        namespaces,
        *,
        parent: Optional[str] = None,
        admin_token: Optional[str] = None,
        enforce_namespaces: bool = True,
        key_pair=None,
        now: Optional[str] = None,
        **kwargs,
    ) -> "RegistryService":
        root = Path(root)
        if (root / "identity.json").exists():
            raise FileExistsError(f"registry already initialized in {root}")
        root.mkdir(parents=True, exist_ok=True)
        ident = registry_init(registry_id, url, namespaces, parent, key_pair=key_pair, now=now)
        save_keypair(root / "registry.key", ident.key_pair)
        _atomic_write(root / "identity.json", ident.doc.to_bytes())
        config = {
            "admin_token_hash": str(sha256(admin_token.encode("utf-8"))) if admin_token else None,
            "enforce_namespaces": enforce_namespaces,
            "parent_url": parent,
        }
        _atomic_write(root / "config.json", canonical_encode(config), mode=0o600)
        return cls(root, **kwargs)

    @property
    def doc(self) -> RegistryIdentityDoc:
        return self.identity.doc

    @property
    def enforce_namespaces(self) -> bool:
        return bool(self.config.get("enforce_namespaces", True))

    def set_enforce_namespaces(self, enabled: bool) -> None:
        self.config["enforce_namespaces"] = bool(enabled)
        _atomic_write(self.root / "config.json", canonical_encode(self.config), mode=0o600)

    def rotate(self, new_key=None, now: Optional[str] = None) -> RegistryIdentityDoc:
        with self._lock:
            rotated = self.identity.rotate(new_key or generate_keypair(), now or self.clock())
            # write the key first; a crash in between leaves a detectable mismatch
            save_keypair(self.root / "registry.key", rotated.key_pair)
            _atomic_write(self.root / "identity.json", rotated.doc.to_bytes())
            self.identity = rotated
        logger.info("rotated registry key to %s", rotated.fingerprint)
        return rotated.doc

    def register_publisher(self, public_key: bytes, namespaces, publisher_id=None, token=None):
        with self._lock:
            return self.directory.register(public_key, namespaces, publisher_id, token)

    # -- storage ----------------------------------------------------------

    def _blob(self, digest_hex: str) -> Path:
        return self.root / "blobs" / digest_hex

    def _store(self, namespace: str, name: str, version: str, data: bytes, manifest_hash: Digest) -> None:
        digest = sha256(data)
        blob = self._blob(digest.hex)
        if not blob.exists():
            _atomic_write(blob, data)
        entry = {"blob": str(digest), "manifest_hash": str(manifest_hash), "received_at": self.clock()}
        self.index.setdefault(f"{namespace}/{name}", {})[version] = entry
        _atomic_write(self.root / "index.json", canonical_encode(self.index))

    def lookup(self, namespace: str, name: str, version: str) -> Optional[bytes]:
        entry = self.index.get(f"{namespace}/{name}", {}).get(version)
        if entry is None:
            return None
        return self._blob(Digest.parse(entry["blob"]).hex).read_bytes()

    def versions(self, namespace: str, name: str) -> list[dict]:
        entries = self.index.get(f"{namespace}/{name}", {})
        return [
            {"manifest_hash": entries[v]["manifest_hash"], "version": v}
            for v in sorted(entries, key=Version)
        ]

    # -- operations ------------------------------------------------------

    def publish_artifact(self, namespace: str, name: str, version: str, data: bytes, token: Optional[str]) -> Response:
        record = self.directory.by_token(token) if token else None
        if record is None:
            return _error(401, "unknown-publisher", "missing or unknown publisher token")
        try:
            env = read_envelope(data)
        except ArchiveError as exc:
            return _error(400, "malformed-envelope", str(exc))
        m = env.manifest
        if (m.namespace, m.name, m.version) != (namespace, name, version):
            return _error(400, "path-mismatch", f"artifact is {m.namespace}/{m.name} {m.version}")
        if env.publisher_sig.publisher_fingerprint != record.fingerprint:
            return _error(401, "unknown-publisher", "token does not belong to the signing publisher")
        with self._lock:
            if self.lookup(namespace, name, version) is not None:
                return _error(409, "version-exists", f"{namespace}/{name} {version} is already published")
            try:
                attested = publish(
                    data,
                    self.identity,
                    self.directory,
                    scan=self.scan,
                    enforce_namespaces=self.enforce_namespaces,
                    now=self.clock(),
                )
            except PublishRejected as exc:
                return _error(REJECTION_STATUS.get(exc.code, 400), exc.code, exc.message)
            stored = read_envelope(attested)
            self._store(namespace, name, version, attested, sha256(stored.raw["provenance.json"]))
        logger.info("published %s/%s %s", namespace, name, version)
        return Response(201, stored.raw["registry_attestation.json"])

    def _proxy(self, namespace: str, path: str) -> Optional[Response]:
        if self.upstream is None or namespace in self.doc.namespaces:
            return None
        resp = self.upstream(path)
        return resp if resp.status == 200 else None

    def handle(self, method: str, path: str, headers: Optional[dict] = None, body: bytes = b"") -> Response:
        headers = {k.lower(): v for k, v in (headers or {}).items()}
        path = urlsplit(path).path
        try:
            return self._route(method.upper(), path, headers, body)
        except (ManifestError, CanonicalError, KeyMaterialError, ValueError) as exc:
            return _error(400, "bad-request", str(exc))

    def _route(self, method: str, path: str, headers: dict, body: bytes) -> Response:
        if path == WELL_KNOWN:
            if method != "GET":
                return _error(405, "method-not-allowed", method)
            return Response(200, self.doc.to_bytes())
        if not path.startswith(API + "/"):
            return _error(404, "not-found", path)
        parts = [unquote(p) for p in path[len(API) + 1:].split("/")]
        token = _bearer(headers)

        if parts[0] == "publishers":
            if len(parts) == 1 and method == "POST":
                return self._register(token, body)
            if len(parts) == 2 and method == "GET":
                record = self.directory.get(Digest.parse(parts[1]))
                if record is None:
                    return _error(404, "unknown-publisher", parts[1])
                doc = record.to_dict()
                del doc["token_hash"]
                return _json(200, doc)
            return _error(405, "method-not-allowed", method)

        if parts[0] != "packages" or len(parts) not in (3, 4):
            return _error(404, "not-found", path)
        namespace, name = check_namespace(parts[1]), check_name(parts[2])
        if len(parts) == 4:
            version = parts[3]
            if not is_semver(version):
                return _error(400, "bad-version", version)
            if method == "POST":
                return self.publish_artifact(namespace, name, version, body, token)
            if method != "GET":
                return _error(405, "method-not-allowed", method)
            data = self.lookup(namespace, name, version)
            if data is not None:
                return Response(200, data, OCTETS)
            return self._proxy(namespace, path) or _error(404, "not-found", f"{namespace}/{name} {version}")
        if method != "GET":
            return _error(405, "method-not-allowed", method)
        versions = self.versions(namespace, name)
        if versions:
            return _json(200, {"name": name, "namespace": namespace, "versions": versions})
        return self._proxy(namespace, path) or _error(404, "not-found", f"{namespace}/{name}")

    def _register(self, token: Optional[str], body: bytes) -> Response:
        expected = self.config.get("admin_token_hash")
        if not expected or not token or not hmac.compare_digest(
            sha256(token.encode("utf-8")).value, Digest.parse(expected).value
        ):
            return _error(401, "admin-required", "admin token required")
        req = canonical_decode(body, strict=False)
        try:
            record = self.register_publisher(
                decode_public_key(req["public_key"]),
                req["namespaces"],
                req.get("publisher_id"),
                req.get("token"),
            )
        except KeyError as exc:
            return _error(400, "bad-request", f"missing field {exc}")
        except ValueError as exc:
            code = 409 if "already registered" in str(exc) else 400
            return _error(code, "duplicate-publisher" if code == 409 else "bad-request", str(exc))
        doc = record.to_dict()
        del doc["token_hash"]
        doc["fingerprint"] = str(record.fingerprint)
        return _json(201, doc)


def _bearer(headers: dict) -> Optional[str]:
    auth = headers.get("authorization", "")
    scheme, _, value = auth.partition(" ")
    return value.strip() if scheme.lower() == "bearer" and value.strip() else None


# -- HTTP binding ---------------------------------------------------------------

MAX_BODY = 64 * 1024 * 1024


def make_handler(service: RegistryService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _dispatch(self, method: str) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                resp = _error(413, "too-large", f"body exceeds {MAX_BODY} bytes")
            else:
                body = self.rfile.read(length) if length else b""
                resp = service.handle(method, self.path, dict(self.headers.items()), body)
            self.send_response(resp.status)
            self.send_header("Content-Type", resp.content_type)
            self.send_header("Content-Length", str(len(resp.body)))
            for k, v in resp.headers.items():
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(resp.body)

        def do_GET(self) -> None:
            self._dispatch("GET")

        def do_POST(self) -> None:
            self._dispatch("POST")

        def log_message(self, fmt, *args) -> None:
            logger.info("%s %s", self.address_string(), fmt % args)

    return Handler


def parse_listen(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def make_server(service: RegistryService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), make_handler(service))

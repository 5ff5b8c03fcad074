"""Registry clients over HTTP or in-process, with a shared request log.

The resolver talks to registries only through a *network*: a callable that
maps a registry URL to a client.  Every request is appended to the network's
log, which is how tests observe which registries were queried.
"""
from __future__ import annotations

import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Callable, Optional

from .canonical import CanonicalError, Digest, canonical_decode, canonical_encode
from .documents import DocumentError, RegistryIdentityDoc
from .identity import decode_public_key, encode_public_key
from .registry_service import WELL_KNOWN, RegistryService, Response, package_path


class RegistryError(Exception):
    def __init__(self, status: int, code: str, message: str = ""):
        super().__init__(f"HTTP {status} {code}: {message}".rstrip(": "))
        self.status = status
        self.code = code
        self.message = message


@dataclass(frozen=True)
class RequestRecord:
    registry_url: str
    method: str
    path: str
    status: int


class RegistryClient:
    def __init__(self, url: str, transport: Callable[[str, str, dict, bytes], Response], log: Optional[list] = None):
        self.url = url.rstrip("/")
        self._transport = transport
        self.log = log if log is not None else []

    def request(self, method: str, path: str, body: bytes = b"", headers: Optional[dict] = None) -> Response:
        resp = self._transport(method, path, headers or {}, body)
        self.log.append(RequestRecord(self.url, method, path, resp.status))
        return resp

    def _check(self, resp: Response) -> Response:
        if 200 <= resp.status < 300:
            return resp
        try:
            err = canonical_decode(resp.body, strict=False)
            code, message = err.get("error", "error"), err.get("message", "")
        except (CanonicalError, AttributeError):
            code, message = "error", resp.body[:200].decode("utf-8", "replace")
        raise RegistryError(resp.status, code, message)

    def well_known(self) -> RegistryIdentityDoc:
        resp = self._check(self.request("GET", WELL_KNOWN))
        try:
            return RegistryIdentityDoc.from_bytes(resp.body)
        except DocumentError as exc:
            raise RegistryError(resp.status, "bad-identity-document", str(exc)) from exc

    def list_versions(self, namespace: str, name: str) -> list[dict]:
        resp = self.request("GET", package_path(namespace, name))
        if resp.status == 404:
            return []
        return self._check(resp).json()["versions"]

    def fetch(self, namespace: str, name: str, version: str) -> bytes:
        return self._check(self.request("GET", package_path(namespace, name, version))).body

    def publisher_key(self, fp: Digest | str) -> bytes:
        resp = self._check(self.request("GET", f"/api/v1/publishers/{fp}"))
        return decode_public_key(resp.json()["public_key"])

    def publish(self, namespace: str, name: str, version: str, artifact: bytes, token: str) -> bytes:
        headers = {"Authorization": f"Bearer {token}", "Content-Type": "application/octet-stream"}
        return self._check(self.request("POST", package_path(namespace, name, version), artifact, headers)).body

    def register_publisher(self, admin_token: str, public_key: bytes, namespaces, publisher_id=None, token=None) -> dict:
        body = canonical_encode(
            {
                "namespaces": list(namespaces),
                "public_key": encode_public_key(public_key),
                "publisher_id": publisher_id,
                "token": token,
            }
        )
        headers = {"Authorization": f"Bearer {admin_token}", "Content-Type": "application/json"}
        return self._check(self.request("POST", "/api/v1/publishers", body, headers)).json()


def _http_transport(base_url: str, timeout: float):
    def send(method: str, path: str, headers: dict, body: bytes) -> Response:
        req = urllib.request.Request(base_url + path, data=body if method == "POST" else None, method=method, headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return Response(resp.status, resp.read(), resp.headers.get_content_type())
        except urllib.error.HTTPError as exc:
            return Response(exc.code, exc.read(), exc.headers.get_content_type())
        except (urllib.error.URLError, OSError) as exc:
            raise RegistryError(0, "unreachable", f"{base_url}: {exc}") from exc

    return send


class HttpNetwork:
    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout
        self.log: list[RequestRecord] = []

    def __call__(self, url: str) -> RegistryClient:
        url = url.rstrip("/")
        return RegistryClient(url, _http_transport(url, self.timeout), self.log)


class LocalNetwork:
    """In-process registries addressed by URL; unknown URLs are unreachable."""

    def __init__(self, services: Optional[dict[str, RegistryService]] = None):
        self.services = {u.rstrip("/"): s for u, s in (services or {}).items()}
        self.log: list[RequestRecord] = []
        # optional hook to rewrite responses in flight (a poisoned cache or proxy)
        self.intercept: Optional[Callable[[str, str, str, Response], Response]] = None

    def add(self, url: str, service: RegistryService) -> None:
        self.services[url.rstrip("/")] = service

    def __call__(self, url: str) -> RegistryClient:
        url = url.rstrip("/")

        def send(method: str, path: str, headers: dict, body: bytes) -> Response:
            service = self.services.get(url)
            if service is None:
                raise RegistryError(0, "unreachable", url)
            resp = service.handle(method, path, headers, body)
            if self.intercept is not None:
                resp = self.intercept(url, method, path, resp)
            return resp

        return RegistryClient(url, send, self.log)

    def queried(self) -> set[str]:
        return {r.registry_url for r in self.log}

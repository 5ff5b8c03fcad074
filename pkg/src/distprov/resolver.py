"""Consumer configuration, authoritative namespace binding, and resolution
with enforcement.

Resolution runs seven steps and stops at the first failure:

  1 select the binding for the namespace
  2 query only that registry (and find the pin that applies)
  3 download and read the envelope without decompressing; check CHECKSUM
  4 verify the publisher signature
  5 verify the registry attestation, the pin, and the namespace
  6 (any failure above aborts here)
  7 extract, then check the content hash and per-file checksums
"""
from __future__ import annotations

import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .archive import ArchiveError, PackagedArtifact, read_envelope, unpack_contents
from .canonical import Digest, canonical_encode
from .client import RegistryClient, RegistryError
from .documents import RegistryIdentityDoc
from .identity import EXPLICIT_UPDATE, FIRST_USE, PinConflict, TofuStore, _atomic_write, normalize_fingerprint
from .manifest import Dependency, ManifestError, check_name, check_namespace, load_project
from .verifier import (
    LevelResult,
    VerificationReport,
    verify_level1,
    verify_level2,
    verify_level3,
    verify_level4,
    verify_level5,
)
from .versions import VersionError, highest_matching, validate_constraint

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

CONFIG_FILE = "mashin.toml"
LOCK_FILE = "provenance.lock"
DEFAULT_REGISTRY_URL = "https://registry.example.com"
AUTHORITATIVE = "authoritative"
DEFAULT = "default"
_BINDING_KEYS = {"url", "fingerprint", "namespaces", "priority"}


class ConfigError(ValueError):
    pass


class ResolutionError(Exception):
    def __init__(self, step: int, code: str, message: str, *, registry_url: Optional[str] = None):
        super().__init__(f"step {step} {code}: {message}")
        self.step = step
        self.code = code
        self.message = message
        self.registry_url = registry_url


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class RegistryBinding:
    alias: str
    url: str
    namespaces: tuple[str, ...] = ()
    priority: str = DEFAULT
    fingerprint: Optional[Digest] = None

    @property
    def authoritative(self) -> bool:
        return self.priority == AUTHORITATIVE


@dataclass(frozen=True)
class ConsumerConfig:
    bindings: tuple[RegistryBinding, ...] = ()
    default_registry: Optional[str] = None

    def binding(self, alias: str) -> Optional[RegistryBinding]:
        return next((b for b in self.bindings if b.alias == alias), None)

    def default_binding(self) -> RegistryBinding:
        if self.default_registry is not None:
            return self.binding(self.default_registry)
        for b in self.bindings:
            if not b.authoritative:
                return b
        return RegistryBinding("default", DEFAULT_REGISTRY_URL)


def parse_config(text: str) -> ConsumerConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{CONFIG_FILE}: {exc}") from exc
    unknown = set(doc) - {"registries", "default_registry"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    bindings = []
    claimed: dict[str, str] = {}
    for alias, entry in doc.get("registries", {}).items():
        if not isinstance(entry, dict):
            raise ConfigError(f"[registries.{alias}] must be a table")
        extra = set(entry) - _BINDING_KEYS
        if extra:
            raise ConfigError(f"[registries.{alias}] has unknown keys {sorted(extra)}")
        if not isinstance(entry.get("url"), str):
            raise ConfigError(f"[registries.{alias}] needs a url")
        priority = entry.get("priority", DEFAULT)
        if priority not in (AUTHORITATIVE, DEFAULT):
            raise ConfigError(f"[registries.{alias}] priority must be 'authoritative' or 'default'")
        try:
            namespaces = tuple(check_namespace(ns) for ns in entry.get("namespaces", []))
            fp = normalize_fingerprint(entry["fingerprint"]) if "fingerprint" in entry else None
        except (ManifestError, ValueError) as exc:
            raise ConfigError(f"[registries.{alias}]: {exc}") from exc
        if priority == AUTHORITATIVE:
            for ns in namespaces:
                if ns in claimed:
                    raise ConfigError(f"{ns} is claimed authoritatively by both {claimed[ns]!r} and {alias!r}")
                claimed[ns] = alias
        bindings.append(RegistryBinding(alias, entry["url"].rstrip("/"), namespaces, priority, fp))
    config = ConsumerConfig(tuple(bindings), doc.get("default_registry"))
    if config.default_registry is not None and config.binding(config.default_registry) is None:
        raise ConfigError(f"default_registry {config.default_registry!r} is not a configured registry")
    return config


def load_config(path: os.PathLike | str) -> ConsumerConfig:
    path = Path(path)
    if not path.exists():
        return ConsumerConfig()
    return parse_config(path.read_text("utf-8"))


def binding_for(config: ConsumerConfig, namespace: str) -> tuple[RegistryBinding, bool]:
    for b in config.bindings:
        if b.authoritative and namespace in b.namespaces:
            return b, True
    return config.default_binding(), False


# -- requests and results -----------------------------------------------------------


@dataclass(frozen=True)
class DependencyRequest:
    namespace: str
    name: str
    version_constraint: str = "*"

    def __post_init__(self) -> None:
        check_namespace(self.namespace)
        check_name(self.name)
        validate_constraint(self.version_constraint)

    @classmethod
    def parse(cls, text: str) -> "DependencyRequest":
        """``@ns/name`` optionally followed by ``@constraint``."""
        ns, sep, rest = text.partition("/")
        if not sep:
            raise ValueError(f"expected '@namespace/name[@constraint]', got {text!r}")
        name, _, constraint = rest.partition("@")
        try:
            return cls(ns, name, constraint or "*")
        except (ManifestError, VersionError) as exc:
            raise ValueError(str(exc)) from exc

    @classmethod
    def from_dependency(cls, dep: Dependency) -> "DependencyRequest":
        return cls(dep.namespace, dep.name, dep.version_constraint)

    def __str__(self) -> str:
        return f"{self.namespace}/{self.name}@{self.version_constraint}"


@dataclass(frozen=True)
class LockEntry:
    namespace: str
    name: str
    version: str
    content_hash: Digest
    registry_fingerprint: Digest

    def to_dict(self) -> dict:
        return {
            "content_hash": str(self.content_hash),
            "name": self.name,
            "namespace": self.namespace,
            "registry_fingerprint": str(self.registry_fingerprint),
            "version": self.version,
        }


@dataclass
class Resolved:
    request: DependencyRequest
    binding: RegistryBinding
    authoritative: bool
    registry_doc: RegistryIdentityDoc
    pinned: Optional[Digest]
    data: bytes = field(repr=False)
    artifact: PackagedArtifact = field(repr=False)
    files: list = field(repr=False)
    report: VerificationReport
    publisher_key: bytes = field(repr=False)

    @property
    def version(self) -> str:
        return self.artifact.manifest.version

    def lock_entry(self) -> LockEntry:
        m = self.artifact.manifest
        return LockEntry(m.namespace, m.name, m.version, m.content_hash, self.artifact.registry_attestation.attestation.registry_fingerprint)


def write_lock(path: os.PathLike | str, entries: Sequence[LockEntry]) -> bytes:
    ordered = sorted(entries, key=lambda e: (e.namespace, e.name, e.version))
    data = canonical_encode({"packages": [e.to_dict() for e in ordered]}) + b"\n"
    _atomic_write(Path(path), data)
    return data


# -- resolution -------------------------------------------------------------------

Network = Callable[[str], RegistryClient]


def _fail_on(step: int, result: LevelResult, url: str) -> None:
    if not result.passed:
        raise ResolutionError(step, result.code, result.message, registry_url=url)


def find_pin(
    namespace: str,
    binding: RegistryBinding,
    authoritative: bool,
    doc: RegistryIdentityDoc,
    tofu: TofuStore,
) -> Optional[Digest]:
    """The pin that governs ``namespace``, seeding a first-use pin from the
    config fingerprint when an authoritative binding has none yet."""
    covering = tofu.for_namespace(namespace)
    if covering is not None:
        return covering[1].fingerprint
    if not authoritative:
        return None
    entry = tofu.get(doc.registry_id)
    if entry is not None:
        return entry.fingerprint
    if binding.fingerprint is not None:
        namespaces = sorted(set(binding.namespaces))
        return tofu.pin(doc.registry_id, binding.url, binding.fingerprint, namespaces=namespaces, mode=FIRST_USE).fingerprint
    return None


def resolve(
    request: DependencyRequest,
    config: ConsumerConfig,
    tofu: TofuStore,
    network: Network,
    *,
    registry_docs: Optional[Mapping[str, RegistryIdentityDoc]] = None,
    publisher_keys: Optional[Mapping[Digest, bytes]] = None,
    enforce_pins: bool = True,
    clock_skew: int = 0,
) -> Resolved:
    # 1. binding
    binding, authoritative = binding_for(config, request.namespace)
    url = binding.url

    # 2. query only the selected registry
    client = network(url)
    try:
        doc = (registry_docs or {}).get(url) or client.well_known()
        versions = [v["version"] for v in client.list_versions(request.namespace, request.name)]
    except RegistryError as exc:
        raise ResolutionError(2, exc.code, str(exc), registry_url=url) from exc
    pinned = None
    if enforce_pins:
        try:
            pinned = find_pin(request.namespace, binding, authoritative, doc, tofu)
        except PinConflict as exc:
            raise ResolutionError(2, "pin-conflict", str(exc), registry_url=url) from exc
        if pinned is None and authoritative:
            raise ResolutionError(
                2,
                "missing-pin",
                f"{request.namespace} is bound to {url} but no fingerprint is pinned; run `distprov pin {url}`",
                registry_url=url,
            )
    version = highest_matching(request.version_constraint, versions)
    if version is None:
        raise ResolutionError(2, "no-matching-version", f"{url} has no {request}", registry_url=url)

    # 3. download, read the envelope, check CHECKSUM
    try:
        data = client.fetch(request.namespace, request.name, version)
    except RegistryError as exc:
        raise ResolutionError(3, exc.code, str(exc), registry_url=url) from exc
    try:
        artifact = read_envelope(data)
    except ArchiveError as exc:
        raise ResolutionError(3, exc.code, str(exc), registry_url=url) from exc
    m = artifact.manifest
    if (m.namespace, m.name, m.version) != (request.namespace, request.name, version):
        raise ResolutionError(3, "identity-mismatch", f"asked for {request.namespace}/{request.name} {version}, got {m.namespace}/{m.name} {m.version}", registry_url=url)
    levels = {4: verify_level4(artifact.contents, artifact.checksum)}
    _fail_on(3, levels[4], url)

    # 4. publisher signature
    fp = artifact.publisher_sig.publisher_fingerprint
    key = (publisher_keys or {}).get(fp)
    if key is None:
        try:
            key = client.publisher_key(fp)
        except RegistryError as exc:
            raise ResolutionError(4, "publisher-key-unavailable", str(exc), registry_url=url) from exc
    levels[3] = verify_level3(artifact.raw["provenance.json"], artifact.publisher_sig, key)
    _fail_on(4, levels[3], url)

    # 5. registry attestation, pin, namespace
    levels[5] = verify_level5(
        artifact.registry_attestation,
        doc,
        manifest=m,
        manifest_bytes=artifact.raw["provenance.json"],
        signature_bytes=artifact.raw["signature.json"],
        publisher_sig=artifact.publisher_sig,
        checksum_bytes=artifact.raw["CHECKSUM"],
        pinned=pinned,
        expected_namespace=request.namespace,
        clock_skew=clock_skew,
    )
    _fail_on(5, levels[5], url)

    # 7. only now decompress
    try:
        files = unpack_contents(artifact.contents)
    except ArchiveError as exc:
        raise ResolutionError(7, exc.code, str(exc), registry_url=url) from exc
    levels[1] = verify_level1(m, files)
    levels[2] = verify_level2(m, files)
    _fail_on(7, levels[1], url)
    _fail_on(7, levels[2], url)

    levels[6] = LevelResult(6, False, False, "not-in-mode")
    report = VerificationReport("strict", dict(sorted(levels.items())))
    logger.info("resolved %s -> %s from %s", request, version, url)
    return Resolved(request, binding, authoritative, doc, pinned, data, artifact, files, report, key)


def resolve_project(
    root: os.PathLike | str,
    tofu: TofuStore,
    network: Network,
    *,
    config: Optional[ConsumerConfig] = None,
    lock_path: Optional[os.PathLike | str] = None,
    **options,
) -> list[Resolved]:
    """Resolve a project's direct dependencies and write the lock record."""
    root = Path(root)
    project = load_project(root)
    config = config or load_config(root / CONFIG_FILE)
    results = [resolve(DependencyRequest.from_dependency(d), config, tofu, network, **options) for d in project.dependencies]
    write_lock(lock_path or root / LOCK_FILE, [r.lock_entry() for r in results])
    return results


def pin_registry(
    tofu: TofuStore,
    client: RegistryClient,
    *,
    update: bool = False,
    expected: Optional[Digest | str] = None,
):
    """Pin the registry's current fingerprint along with the namespaces it claims.

    Without ``update`` a different existing pin raises :class:`PinConflict`.
    ``expected`` guards against pinning something other than an
    out-of-band fingerprint.
    """
    doc = client.well_known()
    if expected is not None and normalize_fingerprint(expected) != doc.key_fingerprint:
        raise PinConflict(doc.registry_id, normalize_fingerprint(expected), doc.key_fingerprint)
    return tofu.pin(
        doc.registry_id,
        client.url,
        doc.key_fingerprint,
        namespaces=doc.namespaces,
        mode=EXPLICIT_UPDATE if update else FIRST_USE,
    )

"""Provenance manifest, content hash, and version lineage."""
from __future__ import annotations

import enum
import os
import platform
import posixpath
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from . import __version__
from ._time import utc_now
from .canonical import CanonicalError, Digest, canonical_encode, hash_canonical, sha256
from .versions import is_semver, validate_constraint

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PROJECT_MANIFEST = "manifest.toml"
SOURCE_DIR = "src"
EXCLUDED_DIRS = frozenset({".git", ".hg", ".svn", "__pycache__", "build", "dist"})
EXCLUDED_SUFFIXES = (".pkg",)

Source = tuple[str, bytes]


class ManifestError(ValueError):
    """Malformed provenance manifest or project."""


def check_namespace(namespace: str) -> str:
    if (
        not isinstance(namespace, str)
        or len(namespace) < 2
        or not namespace.startswith("@")
        or "/" in namespace
        or any(c.isspace() for c in namespace)
    ):
        raise ManifestError(f"namespace must look like '@name', got {namespace!r}")
    return namespace


_NAME_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]{0,127}")


def check_name(name: str) -> str:
    if not isinstance(name, str) or not _NAME_RE.fullmatch(name):
        raise ManifestError(f"package name must be letters, digits, '.', '_' or '-', got {name!r}")
    return name


def check_relpath(path: str) -> str:
    """Reject absolute, non-normalized, or escaping archive paths."""
    if (
        not isinstance(path, str)
        or not path
        or path.startswith("/")
        or "\\" in path
        or "\x00" in path
        or posixpath.normpath(path) != path
        or any(part in ("", ".", "..") for part in path.split("/"))
    ):
        raise ManifestError(f"unsafe or non-normalized path: {path!r}")
    return path


def _opt(d: dict, key: str, conv=lambda x: x):
    value = d[key]
    return None if value is None else conv(value)


@dataclass(frozen=True)
class ModuleMeta:
    name: str
    qualified_name: str
    file_path: str
    file_checksum: Digest
    description: str = ""
    input_schema: Any = field(default_factory=dict)
    output_schema: Any = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "description": self.description,
            "file_checksum": str(self.file_checksum),
            "file_path": self.file_path,
            "input_schema": self.input_schema,
            "name": self.name,
            "output_schema": self.output_schema,
            "qualified_name": self.qualified_name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleMeta":
        return cls(
            name=d["name"],
            qualified_name=d["qualified_name"],
            file_path=check_relpath(d["file_path"]),
            file_checksum=Digest.parse(d["file_checksum"]),
            description=d["description"],
            input_schema=d["input_schema"],
            output_schema=d["output_schema"],
        )


@dataclass(frozen=True)
class FileEntry:
    """A packaged file that is not a module (project manifest, README, ...)."""

    path: str
    sha256: Digest

    def to_dict(self) -> dict:
        return {"path": self.path, "sha256": str(self.sha256)}

    @classmethod
    def from_dict(cls, d: dict) -> "FileEntry":
        return cls(check_relpath(d["path"]), Digest.parse(d["sha256"]))


@dataclass(frozen=True)
class Dependency:
    namespace: str
    name: str
    version_constraint: str

    def to_dict(self) -> dict:
        return {"name": self.name, "namespace": self.namespace, "version_constraint": self.version_constraint}

    @classmethod
    def from_dict(cls, d: dict) -> "Dependency":
        return cls(check_namespace(d["namespace"]), d["name"], d["version_constraint"])


@dataclass(frozen=True)
class ForkOrigin:
    name: str
    namespace: str
    version: str
    content_hash: Digest

    def to_dict(self) -> dict:
        return {
            "content_hash": str(self.content_hash),
            "name": self.name,
            "namespace": self.namespace,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForkOrigin":
        return cls(d["name"], d["namespace"], d["version"], Digest.parse(d["content_hash"]))


@dataclass(frozen=True)
class EvolutionAnchor:
    ledger_id: str
    event_hash: Digest

    def to_dict(self) -> dict:
        return {"event_hash": str(self.event_hash), "ledger_id": self.ledger_id}

    @classmethod
    def from_dict(cls, d: dict) -> "EvolutionAnchor":
        return cls(d["ledger_id"], Digest.parse(d["event_hash"]))

    @classmethod
    def parse(cls, text: str) -> "EvolutionAnchor":
        """``<ledger_id>:sha256:<hex>``"""
        ledger_id, sep, digest = text.partition(":")
        if not sep or not ledger_id:
            raise ManifestError(f"anchor must be '<ledger_id>:sha256:<hex>', got {text!r}")
        return cls(ledger_id, Digest.parse(digest))


@dataclass(frozen=True)
class Lineage:
    parent_version: Optional[str] = None
    parent_content_hash: Optional[Digest] = None
    fork_origin: Optional[ForkOrigin] = None
    evolution_anchor: Optional[EvolutionAnchor] = None

    def __post_init__(self) -> None:
        if (self.parent_version is None) != (self.parent_content_hash is None):
            raise ManifestError("parent_version and parent_content_hash must be given together")

    @property
    def has_parent(self) -> bool:
        return self.parent_version is not None

    def to_dict(self) -> dict:
        return {
            "evolution_anchor": self.evolution_anchor.to_dict() if self.evolution_anchor else None,
            "fork_origin": self.fork_origin.to_dict() if self.fork_origin else None,
            "parent_content_hash": str(self.parent_content_hash) if self.parent_content_hash else None,
            "parent_version": self.parent_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Lineage":
        return cls(
            parent_version=d["parent_version"],
            parent_content_hash=_opt(d, "parent_content_hash", Digest.parse),
            fork_origin=_opt(d, "fork_origin", ForkOrigin.from_dict),
            evolution_anchor=_opt(d, "evolution_anchor", EvolutionAnchor.from_dict),
        )


@dataclass(frozen=True)
class BuildInfo:
    timestamp: str
    runtime_version: str

    def to_dict(self) -> dict:
        return {"runtime_version": self.runtime_version, "timestamp": self.timestamp}


@dataclass(frozen=True)
class ProvenanceManifest:
    name: str
    version: str
    pkg_id: str
    namespace: str
    content_hash: Digest
    modules: tuple[ModuleMeta, ...]
    extra_files: tuple[FileEntry, ...]
    dependencies: tuple[Dependency, ...]
    lineage: Lineage
    build: BuildInfo

    def __post_init__(self) -> None:
        check_namespace(self.namespace)
        check_name(self.name)
        if not is_semver(self.version):
            raise ManifestError(f"version must be semver, got {self.version!r}")
        paths = [m.file_path for m in self.modules] + [f.path for f in self.extra_files]
        if len(paths) != len(set(paths)):
            raise ManifestError("a file appears in more than one checksum entry")

    @property
    def file_checksums(self) -> dict[str, Digest]:
        out = {m.file_path: m.file_checksum for m in self.modules}
        out.update((f.path, f.sha256) for f in self.extra_files)
        return out

    def to_dict(self) -> dict:
        return {
            "build": self.build.to_dict(),
            "content_hash": str(self.content_hash),
            "dependencies": [d.to_dict() for d in self.dependencies],
            "extra_files": [f.to_dict() for f in self.extra_files],
            "lineage": self.lineage.to_dict(),
            "modules": [m.to_dict() for m in self.modules],
            "name": self.name,
            "namespace": self.namespace,
            "pkg_id": self.pkg_id,
            "version": self.version,
        }

    def to_bytes(self) -> bytes:
        return canonical_encode(self.to_dict())

    @property
    def manifest_hash(self) -> Digest:
        return hash_canonical(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ProvenanceManifest":
        try:
            return cls(
                name=d["name"],
                version=d["version"],
                pkg_id=d["pkg_id"],
                namespace=d["namespace"],
                content_hash=Digest.parse(d["content_hash"]),
                modules=tuple(ModuleMeta.from_dict(m) for m in d["modules"]),
                extra_files=tuple(FileEntry.from_dict(f) for f in d["extra_files"]),
                dependencies=tuple(Dependency.from_dict(x) for x in d["dependencies"]),
                lineage=Lineage.from_dict(d["lineage"]),
                build=BuildInfo(d["build"]["timestamp"], d["build"]["runtime_version"]),
            )
        except (KeyError, TypeError, AttributeError, CanonicalError) as exc:
            raise ManifestError(f"malformed provenance manifest: {exc!r}") from exc


def compute_content_hash(name: str, version: str, pkg_id: str, sources: Iterable[Source]) -> Digest:
    """Order-independent identity hash over per-file digests."""
    records = {}
    for path, data in sources:
        if path in records:
            raise ManifestError(f"duplicate source path {path!r}")
        records[path] = str(sha256(data))
    ordered = sorted(records.items(), key=lambda kv: kv[0].encode("utf-8"))
    return hash_canonical(
        {
            "name": name,
            "version": version,
            "pkg_id": pkg_id,
            "sources": [{"path": p, "sha256": h} for p, h in ordered],
        }
    )


# -- projects on disk -----------------------------------------------------------


@dataclass
class Project:
    root: Path
    package: dict
    module_config: dict
    dependencies: list[Dependency]
    sources: list[Source]

    @property
    def name(self) -> str:
        return self.package["name"]


def default_pkg_id(namespace: str, name: str) -> str:
    return "pkg_" + sha256(f"{namespace}/{name}".encode("utf-8")).hex[:20]


def collect_sources(root: os.PathLike | str) -> list[Source]:
    root = Path(root)
    real_root = root.resolve()
    if not real_root.is_dir():
        raise ManifestError(f"not a directory: {root}")
    sources = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in EXCLUDED_DIRS)
        for d in dirnames:
            p = Path(dirpath, d)
            if p.is_symlink() and not _within(p.resolve(), real_root):
                raise ManifestError(f"symlink escapes project root: {p}")
        for fname in sorted(filenames):
            if fname.endswith(EXCLUDED_SUFFIXES):
                continue
            p = Path(dirpath, fname)
            if not _within(p.resolve(), real_root):
                raise ManifestError(f"path escapes project root: {p}")
            rel = p.relative_to(root).as_posix()
            try:
                check_relpath(rel)
                sources.append((rel, p.read_bytes()))
            except OSError as exc:
                raise ManifestError(f"cannot read {p}: {exc}") from exc
    sources.sort(key=lambda s: s[0].encode("utf-8"))
    return sources


def _within(path: Path, root: Path) -> bool:
    return path == root or root in path.parents


def load_project(root: os.PathLike | str) -> Project:
    root = Path(root)
    manifest_path = root / PROJECT_MANIFEST
    if not root.is_dir():
        raise ManifestError(f"project directory not found: {root}")
    if not manifest_path.is_file():
        raise ManifestError(f"missing project manifest {PROJECT_MANIFEST} in {root}")
    try:
        doc = tomllib.loads(manifest_path.read_text("utf-8"))
    except (OSError, UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ManifestError(f"cannot parse {manifest_path}: {exc}") from exc
    package = doc.get("package")
    if not isinstance(package, dict) or not {"name", "version", "namespace"} <= package.keys():
        raise ManifestError("[package] needs name, version and namespace")
    check_namespace(package["namespace"])
    deps = []
    for spec, constraint in sorted(doc.get("dependencies", {}).items()):
        ns, sep, dep_name = spec.partition("/")
        if not sep or not dep_name:
            raise ManifestError(f"dependency must be '@namespace/name', got {spec!r}")
        deps.append(Dependency(check_namespace(ns), dep_name, validate_constraint(constraint)))
    sources = collect_sources(root)
    if not any(p.startswith(SOURCE_DIR + "/") for p, _ in sources):
        raise ManifestError(f"project has no source files under {SOURCE_DIR}/")
    return Project(root, package, doc.get("modules", {}), deps, sources)


def _module_name(path: str) -> str:
    stem = posixpath.splitext(path[len(SOURCE_DIR) + 1:])[0]
    return stem.replace("/", ".")


def default_runtime_version() -> str:
    return f"distprov/{__version__} python/{platform.python_version()}"


def build_manifest(
    project: Project | os.PathLike | str,
    *,
    name: Optional[str] = None,
    version: Optional[str] = None,
    namespace: Optional[str] = None,
    pkg_id: Optional[str] = None,
    lineage: Optional[Lineage] = None,
    timestamp: Optional[str] = None,
    runtime_version: Optional[str] = None,
) -> ProvenanceManifest:
    if not isinstance(project, Project):
        project = load_project(project)
    pkg = project.package
    name = name or pkg["name"]
    version = version or pkg["version"]
    namespace = namespace or pkg["namespace"]
    pkg_id = pkg_id or pkg.get("pkg_id") or default_pkg_id(namespace, name)

    modules, extra = [], []
    for path, data in project.sources:
        digest = sha256(data)
        if path.startswith(SOURCE_DIR + "/"):
            mod = _module_name(path)
            meta = project.module_config.get(mod, {})
            modules.append(
                ModuleMeta(
                    name=mod,
                    qualified_name=f"{namespace}/{name}.{mod}",
                    file_path=path,
                    file_checksum=digest,
                    description=meta.get("description", ""),
                    input_schema=meta.get("input_schema", {}),
                    output_schema=meta.get("output_schema", {}),
                )
            )
        else:
            extra.append(FileEntry(path, digest))

    manifest = ProvenanceManifest(
        name=name,
        version=version,
        pkg_id=pkg_id,
        namespace=namespace,
        content_hash=compute_content_hash(name, version, pkg_id, project.sources),
        modules=tuple(modules),
        extra_files=tuple(extra),
        dependencies=tuple(project.dependencies),
        lineage=lineage or Lineage(),
        build=BuildInfo(timestamp or utc_now(), runtime_version or default_runtime_version()),
    )
    try:
        manifest.to_bytes()
    except CanonicalError as exc:
        raise ManifestError(f"module metadata is not canonical-encodable: {exc}") from exc
    return manifest


# -- lineage ---------------------------------------------------------------------


class LinkStatus(enum.Enum):
    INTACT = "intact"
    BROKEN = "broken"
    NO_PARENT = "no-parent"

    def __bool__(self) -> bool:
        return self is LinkStatus.INTACT


def verify_lineage_link(child: ProvenanceManifest, parent: ProvenanceManifest) -> LinkStatus:
    if not child.lineage.has_parent:
        return LinkStatus.NO_PARENT
    if child.lineage.parent_content_hash == parent.content_hash and child.lineage.parent_version == parent.version:
        return LinkStatus.INTACT
    return LinkStatus.BROKEN


@dataclass(frozen=True)
class ChainReport:
    links: tuple[tuple[int, int, LinkStatus], ...]

    @property
    def intact(self) -> bool:
        return all(status for _, _, status in self.links)

    @property
    def broken_links(self) -> list[tuple[int, int]]:
        return [(i, j) for i, j, status in self.links if not status]


def verify_chain(versions: Sequence[ProvenanceManifest]) -> ChainReport:
    """Check each adjacent (older, newer) pair; versions ordered oldest first."""
    return ChainReport(
        tuple((i, i + 1, verify_lineage_link(versions[i + 1], versions[i])) for i in range(len(versions) - 1))
    )


def lineage_from_parent(parent: ProvenanceManifest, **extra) -> Lineage:
    return Lineage(parent_version=parent.version, parent_content_hash=parent.content_hash, **extra)

"""Attack harness: real in-process registries, a real resolver, and an
adversary playbook per attack kind, run under every combination of the
three defense layers.

Layers:
  layer-1  the public registry enforces namespace membership on publish
  layer-2  the consumer binds @acme authoritatively to the acme registry
  layer-3  the consumer holds TOFU pins for the registries it trusts

Signature checks (publisher and registry) are not a toggle: they always
run, and an attack they catch is reported as ``detected``.
"""
from __future__ import annotations

import itertools
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .archive import ATTESTATION, PROVENANCE, build_contents, encode_checksum, inject_attestation, read_envelope, read_raw_entries, unpack_contents, write_tar
from .attestation import package_project
from .canonical import Digest, sha256
from .client import LocalNetwork, RegistryError
from .fixtures import make_fixture_project, seeded_keypair, seeded_publisher
from .identity import TofuStore
from .manifest import compute_content_hash
from .registry_service import RegistryService, Response, _atomic_write
from .resolver import AUTHORITATIVE, DEFAULT, ConsumerConfig, DependencyRequest, RegistryBinding, ResolutionError, pin_registry, resolve

KINDS = (
    "dependency-confusion",
    "namespace-squatting",
    "tampered-artifact",
    "registry-db-compromise",
    "resolver-config-compromise",
)
LAYERS = ("layer-1", "layer-2", "layer-3")
DETECTED = "detected"

# layers that can stop each kind at all
APPLICABLE = {
    "dependency-confusion": frozenset(LAYERS),
    "namespace-squatting": frozenset({"layer-1", "layer-3"}),
    "tampered-artifact": frozenset({"layer-3"}),
    "registry-db-compromise": frozenset({"layer-3"}),
    "resolver-config-compromise": frozenset({"layer-3"}),
}

# adversary capabilities; the last three are outside the threat model
PUBLISH_PUBLIC = "publish-public"
OBSERVE_NAMES = "observe-names"
CONFIG_WRITE = "config-write"
MALICIOUS_REGISTRY = "malicious-registry"
CACHE_POISONING = "cache-poisoning"
REGISTRY_DB_WRITE = "registry-db-write"
FORBIDDEN = frozenset({"registry-server-compromise", "key-theft", "transit-modification"})

CAPABILITIES = {
    "dependency-confusion": frozenset({PUBLISH_PUBLIC, OBSERVE_NAMES}),
    "namespace-squatting": frozenset({PUBLISH_PUBLIC, OBSERVE_NAMES}),
    "tampered-artifact": frozenset({CACHE_POISONING}),
    "registry-db-compromise": frozenset({REGISTRY_DB_WRITE, PUBLISH_PUBLIC}),
    "resolver-config-compromise": frozenset({CONFIG_WRITE, MALICIOUS_REGISTRY, OBSERVE_NAMES}),
}

ACME_URL = "https://registry.acme.com"
PUBLIC_URL = "https://registry.example.com"
EVIL_URL = "https://registry.evil.example"
ACME_NAMESPACES = ("@acme", "@acme-internal", "@acme-labs")
PUBLIC_NAMESPACES = ("@stdlib", "@community")

REGISTRY_EPOCH = "2025-01-01T00:00:00Z"
SIGNED_AT = "2026-01-01T00:00:00Z"
ACCEPTED_AT = "2026-01-01T00:00:10Z"
PAYLOAD = "\nimport os  # MALICIOUS payload\n"


class HarnessError(RuntimeError):
    """Setup failed; distinct from an attack succeeding or failing."""


@dataclass(frozen=True)
class AttackScenario:
    kind: str
    layer1: bool = True
    layer2: bool = True
    layer3: bool = True
    capabilities: Optional[frozenset] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        caps = self.granted
        if caps & FORBIDDEN:
            raise ValueError(f"capabilities outside the threat model: {sorted(caps & FORBIDDEN)}")
        missing = CAPABILITIES[self.kind] - caps
        if missing:
            raise ValueError(f"{self.kind} needs capabilities {sorted(missing)}")

    @property
    def granted(self) -> frozenset:
        return frozenset(self.capabilities) if self.capabilities is not None else CAPABILITIES[self.kind]

    @property
    def enabled(self) -> frozenset:
        return frozenset(l for l, on in zip(LAYERS, (self.layer1, self.layer2, self.layer3)) if on)


@dataclass(frozen=True)
class Step:
    actor: str
    action: str
    outcome: str

    def to_dict(self) -> dict:
        return {"action": self.action, "actor": self.actor, "outcome": self.outcome}


@dataclass
class AttackOutcome:
    scenario: AttackScenario
    succeeded: bool
    blocked_by: Optional[str]
    result: str
    transcript: list[Step] = field(default_factory=list)
    detected_post_install: bool = False

    def to_dict(self) -> dict:
        s = self.scenario
        return {
            "blocked_by": self.blocked_by,
            "detected_post_install": self.detected_post_install,
            "kind": s.kind,
            "layers": {"layer-1": s.layer1, "layer-2": s.layer2, "layer-3": s.layer3},
            "result": self.result,
            "succeeded": self.succeeded,
            "transcript": [step.to_dict() for step in self.transcript],
        }


class _World:
    """Registries, publishers and a consumer for one scenario."""

    def __init__(self, root: Path, scenario: AttackScenario):
        self.root = root
        self.scenario = scenario
        self.transcript: list[Step] = []
        clock = lambda: ACCEPTED_AT  # noqa: E731
        self.acme = RegistryService.create(
            root / "acme", "acme", ACME_URL, ACME_NAMESPACES,
            key_pair=seeded_keypair("registry:acme"), now=REGISTRY_EPOCH, clock=clock,
        )
        self.public = RegistryService.create(
            root / "public", "public", PUBLIC_URL, PUBLIC_NAMESPACES,
            enforce_namespaces=scenario.layer1, key_pair=seeded_keypair("registry:public"), now=REGISTRY_EPOCH, clock=clock,
        )
        self.evil = RegistryService.create(
            root / "evil", "acme", EVIL_URL, ("@acme",),
            enforce_namespaces=False, key_pair=seeded_keypair("registry:evil"), now=REGISTRY_EPOCH, clock=clock,
        )
        self.network = LocalNetwork({ACME_URL: self.acme, PUBLIC_URL: self.public, EVIL_URL: self.evil})

        self.acme_dev = seeded_publisher("acme-dev")
        self.community_dev = seeded_publisher("community-dev")
        self.attacker = seeded_publisher("mallory")
        self.acme.register_publisher(self.acme_dev.key_pair.public_key, ACME_NAMESPACES, "acme-dev", "tok-acme")
        self.public.register_publisher(self.community_dev.key_pair.public_key, ["@community"], "community-dev", "tok-community")
        # the attacker holds an ordinary account on the public registry
        self.public.register_publisher(self.attacker.key_pair.public_key, ["@mallory"], "mallory", "tok-mallory")
        self.evil.register_publisher(self.attacker.key_pair.public_key, ["@acme"], "mallory", "tok-mallory")

        self.legit: set[Digest] = set()
        self.malicious: set[Digest] = set()
        self._publish("acme-dev", self.acme, "tok-acme", self.acme_dev, "@acme", "utils", "1.2.0")
        self._publish("acme-dev", self.acme, "tok-acme", self.acme_dev, "@acme-labs", "tool", "1.0.0")
        self._publish("community-dev", self.public, "tok-community", self.community_dev, "@community", "slack", "1.0.0")

        self.tofu = TofuStore(root / "consumer" / "known_registries.json")
        if scenario.layer3:
            for url in (ACME_URL, PUBLIC_URL):
                pin_registry(self.tofu, self.network(url))
        self.config = self._consumer_config()
        self.network.log.clear()

    def build(self, publisher, namespace: str, name: str, version: str, payload: str = "") -> bytes:
        label = f"{publisher.publisher_id}-{namespace}-{name}-{version}"
        project = make_fixture_project(self.root / "projects" / label, namespace=namespace, name=name, version=version, payload=payload)
        data = package_project(project, publisher, timestamp=SIGNED_AT)
        target = self.malicious if payload else self.legit
        target.add(read_envelope(data).manifest.content_hash)
        return data

    def _publish(self, actor, service, token, publisher, namespace, name, version, payload="") -> Response:
        data = self.build(publisher, namespace, name, version, payload)
        resp = service.handle("POST", f"/api/v1/packages/{namespace}/{name}/{version}", {"Authorization": f"Bearer {token}"}, data)
        self.transcript.append(Step(actor, f"publish {namespace}/{name} {version} to {service.doc.registry_url}", f"HTTP {resp.status}"))
        if resp.status != 201 and not payload:
            raise HarnessError(f"legitimate publish failed: {resp.body!r}")
        return resp

    def _consumer_config(self) -> ConsumerConfig:
        s = self.scenario
        acme_fp = self.acme.doc.key_fingerprint if s.layer3 else None
        acme = RegistryBinding(
            "acme", ACME_URL, ("@acme", "@acme-internal"),  # stale: @acme-labs never added
            AUTHORITATIVE if s.layer2 else DEFAULT, acme_fp,
        )
        public = RegistryBinding("public", PUBLIC_URL, PUBLIC_NAMESPACES)
        return ConsumerConfig((acme, public), default_registry="public")

    def consume(self, request: str):
        req = DependencyRequest.parse(request)
        try:
            resolved = resolve(req, self.config, self.tofu, self.network, enforce_pins=self.scenario.layer3)
        except ResolutionError as exc:
            self.transcript.append(Step("consumer", f"resolve {req}", f"rejected at step {exc.step}: {exc.code}"))
            return None, exc
        self.transcript.append(
            Step("consumer", f"resolve {req}", f"installed {resolved.version} from {resolved.binding.url}")
        )
        return resolved, None

    def legit_fingerprint(self, namespace: str) -> Digest:
        return (self.acme if namespace in ACME_NAMESPACES else self.public).doc.key_fingerprint


# -- playbooks ---------------------------------------------------------------------


def _dependency_confusion(w: _World):
    w._publish("attacker", w.public, "tok-mallory", w.attacker, "@acme", "utils", "1.99.0", PAYLOAD)
    return "@acme/utils@^1.0.0"


def _namespace_squatting(w: _World):
    w._publish("attacker", w.public, "tok-mallory", w.attacker, "@acme-labs", "tool", "1.5.0", PAYLOAD)
    return "@acme-labs/tool@^1.0.0"


def _tamper(data: bytes) -> bytes:
    """Swap a source file and patch every checksum the attacker can recompute."""
    raw = read_raw_entries(data)
    env = read_envelope(data)
    files = [(p, d + PAYLOAD.encode() if p.startswith("src/") else d) for p, d in unpack_contents(env.contents)]
    m = env.manifest
    modules = tuple(replace(mod, file_checksum=sha256(dict(files)[mod.file_path])) for mod in m.modules)
    forged = replace(m, modules=modules, content_hash=compute_content_hash(m.name, m.version, m.pkg_id, files))
    contents = build_contents(files)
    raw[PROVENANCE] = forged.to_bytes()
    raw["CHECKSUM"] = encode_checksum(sha256(contents))
    raw["contents.tar.gz"] = contents
    return write_tar(list(raw.items()))


def _tampered_artifact(w: _World):
    def poison(url: str, method: str, path: str, resp: Response) -> Response:
        if url == PUBLIC_URL and method == "GET" and path.endswith("/@community/slack/1.0.0") and resp.status == 200:
            tampered = _tamper(resp.body)
            w.malicious.add(read_envelope(tampered).manifest.content_hash)
            return Response(200, tampered, resp.content_type)
        return resp

    w.network.intercept = poison
    w.transcript.append(Step("attacker", "poison the package cache for @community/slack 1.0.0", "armed"))
    return "@community/slack@^1.0.0"


def _registry_db_compromise(w: _World):
    # database write access, but no access to the signing key
    entry = w.public.index["@community/slack"]["1.0.0"]
    stored = w.public.lookup("@community", "slack", "1.0.0")
    stolen_attestation = read_raw_entries(stored)[ATTESTATION]
    forged = w.build(w.attacker, "@community", "slack", "1.0.0", PAYLOAD)
    forged = inject_attestation(forged, stolen_attestation)
    digest = sha256(forged)
    _atomic_write(w.public._blob(digest.hex), forged)
    entry["blob"] = str(digest)
    w.transcript.append(Step("attacker", "overwrite stored @community/slack 1.0.0 with a copied attestation", "written"))
    return "@community/slack@^1.0.0"


def _resolver_config_compromise(w: _World):
    w._publish("attacker", w.evil, "tok-mallory", w.attacker, "@acme", "utils", "1.2.1", PAYLOAD)
    hijacked = RegistryBinding(
        "acme", EVIL_URL, ("@acme", "@acme-internal"),
        AUTHORITATIVE if w.scenario.layer2 else DEFAULT, w.evil.doc.key_fingerprint,
    )
    w.config = ConsumerConfig((hijacked,) + w.config.bindings[1:], default_registry="acme")
    w.transcript.append(Step("attacker", "rewrite mashin.toml: @acme -> attacker registry", "written"))
    return "@acme/utils@^1.0.0"


PLAYBOOKS = {
    "dependency-confusion": _dependency_confusion,
    "namespace-squatting": _namespace_squatting,
    "tampered-artifact": _tampered_artifact,
    "registry-db-compromise": _registry_db_compromise,
    "resolver-config-compromise": _resolver_config_compromise,
}


def run_scenario(scenario: AttackScenario, workdir: Optional[Path] = None) -> AttackOutcome:
    with tempfile.TemporaryDirectory(prefix="distprov-attack-", dir=workdir) as tmp:
        try:
            world = _World(Path(tmp), scenario)
        except (RegistryError, OSError, ValueError) as exc:
            raise HarnessError(f"scenario setup failed: {exc}") from exc
        request = PLAYBOOKS[scenario.kind](world)
        publish_refused = any(
            s.actor == "attacker" and s.action.startswith("publish") and s.outcome == "HTTP 403" for s in world.transcript
        )
        resolved, error = world.consume(request)
        return _judge(world, resolved, error, publish_refused)


def _judge(w: _World, resolved, error: Optional[ResolutionError], publish_refused: bool) -> AttackOutcome:
    s = w.scenario
    if resolved is not None and resolved.artifact.manifest.content_hash in w.malicious:
        fp = resolved.artifact.registry_attestation.attestation.registry_fingerprint
        audit = fp != w.legit_fingerprint(resolved.artifact.manifest.namespace)
        result = "installed attacker artifact" + (" (attestation names the wrong registry)" if audit else "")
        return AttackOutcome(s, True, None, result, w.transcript, audit)
    if publish_refused:
        return AttackOutcome(s, False, "layer-1", "attacker publish refused", w.transcript)
    if resolved is not None:
        if resolved.authoritative:
            return AttackOutcome(s, False, "layer-2", "resolved legitimate artifact from the bound registry", w.transcript)
        raise HarnessError(f"{s.kind}: attacker artifact never reached the consumer")
    if error.code == "pin-mismatch":
        return AttackOutcome(s, False, "layer-3", f"rejected: {error.message}", w.transcript)
    if error.step >= 3:
        return AttackOutcome(s, False, DETECTED, f"rejected at step {error.step}: {error.code}", w.transcript)
    raise HarnessError(f"{s.kind}: unexpected resolution failure {error}")


# -- matrix ----------------------------------------------------------------------


def toggle_subsets() -> list[tuple[bool, bool, bool]]:
    return list(itertools.product((False, True), repeat=3))


def run_matrix(kinds=KINDS) -> list[AttackOutcome]:
    return [run_scenario(AttackScenario(kind, *toggles)) for kind in kinds for toggles in toggle_subsets()]


@dataclass(frozen=True)
class TableRow:
    attack: str
    l1: str
    l2: str
    l3: str
    result: str

    def to_dict(self) -> dict:
        return {"attack": self.attack, "l1": self.l1, "l2": self.l2, "l3": self.l3, "result": self.result}


ROW_LABELS = {
    "dependency-confusion": "Dependency confusion",
    "namespace-squatting": "Namespace squatting",
    "tampered-artifact": "Tampered artifact",
    "registry-db-compromise": "Registry DB compromise",
    "resolver-config-compromise": "Resolver config compromise",
}
CHECK, STAR, DASH = "✓", "✓*", "--"


def matrix_violations(outcomes: list[AttackOutcome]) -> list[str]:
    """Runs that contradict the layered-defense claim."""
    problems = []
    for o in outcomes:
        s = o.scenario
        caught = not o.succeeded
        if s.enabled & APPLICABLE[s.kind] and not caught:
            problems.append(f"{s.kind} with {sorted(s.enabled)} succeeded")
        if s.layer3 and o.succeeded:
            problems.append(f"{s.kind} installed an unauthorized artifact with pins present")
        if o.blocked_by in LAYERS and o.blocked_by not in s.enabled:
            problems.append(f"{s.kind} attributed to disabled {o.blocked_by}")
    return problems


def summarize(outcomes: list[AttackOutcome]) -> list[TableRow]:
    by_key = {(o.scenario.kind, o.scenario.layer1, o.scenario.layer2, o.scenario.layer3): o for o in outcomes}
    rows = []
    for kind in KINDS:
        if (kind, False, False, False) not in by_key:
            continue
        if kind == "resolver-config-compromise":
            rows.append(TableRow("Typosquatting", DASH, DASH, DASH, "Not addressed"))
        baseline = by_key[(kind, False, False, False)]
        cells = []
        for i, layer in enumerate(LAYERS):
            only = tuple(j == i for j in range(3))
            single = by_key[(kind, *only)]
            if single.blocked_by == layer:
                cells.append(CHECK)
            elif layer == "layer-3" and baseline.blocked_by == DETECTED and not single.succeeded:
                cells.append(STAR)
            else:
                cells.append(DASH)
        subsets = [o for k, o in by_key.items() if k[0] == kind and o.scenario.enabled & APPLICABLE[kind]]
        if baseline.blocked_by == DETECTED:
            result = "Detected"
        elif baseline.succeeded and all(not o.succeeded for o in subsets):
            result = "Blocked"
        else:
            result = "Not blocked"
        rows.append(TableRow(ROW_LABELS[kind], *cells, result))
    if not any(r.attack == "Typosquatting" for r in rows):
        rows.append(TableRow("Typosquatting", DASH, DASH, DASH, "Not addressed"))
    return rows


def format_table(rows: list[TableRow]) -> str:
    header = ("Attack", "L1", "L2", "L3", "Result")
    data = [header] + [(r.attack, r.l1, r.l2, r.l3, r.result) for r in rows]
    widths = [max(len(row[i]) for row in data) for i in range(5)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in data]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)

"""The six-level verification chain.

Levels:
  1 per-file checksums          4 CHECKSUM over contents.tar.gz
  2 content hash                5 registry attestation and pin
  3 publisher signature         6 evolution anchor in a ledger

Every level of the selected mode is evaluated; a failure at one level never
hides the result of another.  Only levels 1 and 2 depend on another step:
they need the inner archive to decompress.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .archive import (
    ATTESTATION,
    CHECKSUM,
    CONTENTS,
    PROVENANCE,
    SIGNATURE,
    ArchiveError,
    PackagedArtifact,
    decode_checksum,
    decode_manifest,
    read_raw_entries,
    unpack_contents,
)
from .attestation import verify_attestation, verify_publisher_signature
from .canonical import Digest, canonical_encode, sha256
from .documents import DocumentError, PublisherSignature, RegistryAttestation, RegistryIdentityDoc
from .identity import KeyMaterialError, fingerprint, tofu_check
from .ledger import ChainBroken, Ledger
from .manifest import ManifestError, ProvenanceManifest, Source, compute_content_hash

MODES = {"default": (1, 2, 3), "strict": (1, 2, 3, 4, 5), "full": (1, 2, 3, 4, 5, 6)}
OK = "ok"


class VerificationConfigError(ValueError):
    """The context does not supply what the requested mode needs."""


@dataclass(frozen=True)
class LevelResult:
    level: int
    evaluated: bool
    passed: bool
    code: str = OK
    message: str = ""

    def to_dict(self) -> dict:
        return {"code": self.code, "evaluated": self.evaluated, "message": self.message, "passed": self.passed}


def _ok(level: int, message: str = "") -> LevelResult:
    return LevelResult(level, True, True, OK, message)


def _fail(level: int, code: str, message: str) -> LevelResult:
    return LevelResult(level, True, False, code, message)


def _skipped(level: int, code: str = "not-in-mode", message: str = "") -> LevelResult:
    return LevelResult(level, False, False, code, message)


@dataclass(frozen=True)
class VerificationReport:
    mode: str
    levels: dict[int, LevelResult]

    @property
    def composite(self) -> bool:
        # a level of the mode that could not run counts against the result
        required = MODES[self.mode]
        return all(self.levels[i].evaluated and self.levels[i].passed for i in required)

    @property
    def failures(self) -> list[LevelResult]:
        return [r for r in self.levels.values() if r.evaluated and not r.passed]

    def first_failure(self) -> Optional[LevelResult]:
        for i in sorted(self.levels):
            r = self.levels[i]
            if i in MODES[self.mode] and not (r.evaluated and r.passed):
                return r
        return None

    def to_dict(self) -> dict:
        return {
            "composite": self.composite,
            "levels": {str(i): r.to_dict() for i, r in sorted(self.levels.items())},
            "mode": self.mode,
        }

    def to_bytes(self) -> bytes:
        return canonical_encode(self.to_dict())


@dataclass
class VerificationContext:
    publisher_key: Optional[bytes] = None
    registry_doc: Optional[RegistryIdentityDoc] = None
    pinned: Optional[Digest] = None
    expected_namespace: Optional[str] = None
    ledger: Optional[Ledger] = None
    clock_skew: int = 0


# -- individual levels ------------------------------------------------------------


def verify_level1(manifest: ProvenanceManifest, files: Sequence[Source]) -> LevelResult:
    expected = manifest.file_checksums
    actual: dict[str, Digest] = {}
    for path, data in files:
        actual[path] = sha256(data)
    bad = sorted(p for p in expected.keys() & actual.keys() if expected[p] != actual[p])
    missing = sorted(expected.keys() - actual.keys())
    extra = sorted(actual.keys() - expected.keys())
    if bad:
        return _fail(1, "file-checksum-mismatch", "checksum mismatch: " + ", ".join(bad))
    if missing:
        return _fail(1, "missing-file", "missing: " + ", ".join(missing))
    if extra:
        return _fail(1, "extra-file", "not in manifest: " + ", ".join(extra))
    return _ok(1, f"{len(actual)} files")


def verify_level2(manifest: ProvenanceManifest, files: Sequence[Source]) -> LevelResult:
    try:
        recomputed = compute_content_hash(manifest.name, manifest.version, manifest.pkg_id, files)
    except ManifestError as exc:
        return _fail(2, "content-hash-mismatch", str(exc))
    if recomputed != manifest.content_hash:
        return _fail(2, "content-hash-mismatch", f"recomputed {recomputed}, manifest says {manifest.content_hash}")
    return _ok(2, str(recomputed))


def verify_level3(manifest_bytes: bytes, sig: PublisherSignature, public_key: bytes) -> LevelResult:
    try:
        key_fp = fingerprint(public_key)
    except KeyMaterialError as exc:
        return _fail(3, "bad-publisher-key", str(exc))
    if key_fp != sig.publisher_fingerprint:
        return _fail(3, "fingerprint-mismatch", f"signature claims {sig.publisher_fingerprint}, key is {key_fp}")
    if not verify_publisher_signature(manifest_bytes, sig, public_key):
        return _fail(3, "bad-publisher-signature", "publisher signature does not verify over provenance.json")
    return _ok(3, sig.publisher_id)


def verify_level4(contents: bytes, checksum: Digest) -> LevelResult:
    actual = sha256(contents)
    if actual != checksum:
        return _fail(4, "checksum-mismatch", f"contents.tar.gz hashes to {actual}, CHECKSUM says {checksum}")
    return _ok(4)


def _pin_accepts(attested_fp: Digest, pinned: Digest, doc: RegistryIdentityDoc) -> bool:
    if tofu_check(attested_fp, pinned):
        return True
    # the pinned key rotated away: accept older attestations only if the
    # registry's current key is still the pinned one
    return doc.key_fingerprint == pinned and any(p.fingerprint == attested_fp for p in doc.key_rotation_history)


def verify_level5(
    attested: Optional[RegistryAttestation],
    doc: RegistryIdentityDoc,
    *,
    manifest: ProvenanceManifest,
    manifest_bytes: bytes,
    signature_bytes: bytes,
    publisher_sig: Optional[PublisherSignature],
    checksum_bytes: bytes,
    pinned: Optional[Digest] = None,
    expected_namespace: Optional[str] = None,
    clock_skew: int = 0,
) -> LevelResult:
    if attested is None:
        return _fail(5, "missing-attestation", "artifact carries no registry attestation")
    ok, problems = verify_attestation(
        attested, doc, manifest_hash=sha256(manifest_bytes), publisher_sig=publisher_sig, clock_skew=clock_skew
    )
    a = attested.attestation
    codes = [(p.code, p.message) for p in problems]
    if pinned is not None and not _pin_accepts(a.registry_fingerprint, pinned, doc):
        codes.append(("pin-mismatch", f"attested by {a.registry_fingerprint}, pinned {pinned}"))
    expected_namespace = expected_namespace or manifest.namespace
    if a.namespace != expected_namespace or a.namespace != manifest.namespace:
        codes.append(("namespace-mismatch", f"attested for {a.namespace}, expected {expected_namespace}"))
    if a.artifact_name != manifest.name or a.version != manifest.version:
        codes.append(("identity-mismatch", f"attested {a.artifact_name} {a.version}, manifest is {manifest.name} {manifest.version}"))
    if sha256(signature_bytes) != a.signature_hash:
        codes.append(("signature-doc-mismatch", "signature.json differs from the attested one"))
    try:
        if decode_checksum(checksum_bytes) != a.contents_checksum:
            codes.append(("checksum-doc-mismatch", "CHECKSUM differs from the attested one"))
    except DocumentError as exc:
        codes.append(("checksum-doc-mismatch", str(exc)))
    if codes:
        return _fail(5, codes[0][0], "; ".join(f"{c}: {m}" for c, m in codes))
    return _ok(5, f"{a.registry_id} at {a.accepted_at}")


def verify_level6(manifest: ProvenanceManifest, ledger: Ledger) -> LevelResult:
    anchor = manifest.lineage.evolution_anchor
    if anchor is None:
        return _fail(6, "absent-anchor", "manifest has no evolution anchor")
    if anchor.ledger_id != ledger.ledger_id:
        return _fail(6, "ledger-mismatch", f"anchor is in {anchor.ledger_id!r}, ledger is {ledger.ledger_id!r}")
    try:
        event = ledger.anchor_lookup(anchor.ledger_id, anchor.event_hash)
    except ChainBroken as exc:
        return _fail(6, "chain-broken", str(exc))
    if event is None:
        return _fail(6, "anchor-not-found", f"no event {anchor.event_hash} in {ledger.ledger_id!r}")
    ref = event.artifact
    if (ref.namespace, ref.name) != (manifest.namespace, manifest.name):
        return _fail(6, "anchor-artifact-mismatch", f"anchored event is for {ref.namespace}/{ref.name}")
    return _ok(6, event.event_id)


# -- composition -----------------------------------------------------------------


def _check_context(mode: str, ctx: VerificationContext) -> None:
    if mode not in MODES:
        raise VerificationConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    if ctx.publisher_key is None:
        raise VerificationConfigError("publisher public key required for level 3")
    if mode in ("strict", "full") and ctx.registry_doc is None:
        raise VerificationConfigError(f"{mode} mode needs the registry identity document")
    if mode == "full" and ctx.ledger is None:
        raise VerificationConfigError("full mode needs a ledger")


def verify(
    artifact: bytes | PackagedArtifact,
    mode: str = "default",
    context: Optional[VerificationContext] = None,
    *,
    files: Optional[Sequence[Source]] = None,
) -> VerificationReport:
    """Run every level of ``mode``.  ``files`` overrides the extracted sources
    (for checking an install directory)."""
    ctx = context or VerificationContext()
    _check_context(mode, ctx)
    wanted = MODES[mode]
    levels = {i: _skipped(i) for i in range(1, 7)}

    if isinstance(artifact, PackagedArtifact):
        raw = dict(artifact.raw)
    else:
        try:
            raw = read_raw_entries(artifact)
        except ArchiveError as exc:
            for i in wanted:
                levels[i] = _fail(i, "malformed-envelope", str(exc))
            return VerificationReport(mode, levels)

    def parse(decoder, name):
        try:
            return decoder(raw[name]), None
        except (DocumentError, KeyError) as exc:
            return None, f"{name}: {exc}"

    manifest, manifest_err = parse(decode_manifest, PROVENANCE)
    sig, sig_err = parse(PublisherSignature.from_bytes, SIGNATURE)
    checksum, checksum_err = parse(decode_checksum, CHECKSUM)
    attested, attestation_err = (None, None)
    if ATTESTATION in raw:
        attested, attestation_err = parse(RegistryAttestation.from_bytes, ATTESTATION)

    if 1 in wanted or 2 in wanted:
        if files is None:
            try:
                files = unpack_contents(raw[CONTENTS])
                extract_err = None
            except ArchiveError as exc:
                extract_err = f"{exc.code}: {exc}"
        else:
            extract_err = None
        for i, check in ((1, verify_level1), (2, verify_level2)):
            if extract_err is not None:
                levels[i] = _skipped(i, "extraction-failed", extract_err)
            elif manifest is None:
                levels[i] = _fail(i, "malformed-manifest", manifest_err)
            else:
                levels[i] = check(manifest, files)

    if manifest is None:
        levels[3] = _fail(3, "malformed-manifest", manifest_err)
    elif sig is None:
        levels[3] = _fail(3, "malformed-signature", sig_err)
    else:
        levels[3] = verify_level3(raw[PROVENANCE], sig, ctx.publisher_key)

    if 4 in wanted:
        if checksum is None:
            levels[4] = _fail(4, "malformed-checksum", checksum_err)
        else:
            levels[4] = verify_level4(raw[CONTENTS], checksum)

    if 5 in wanted:
        if attestation_err is not None:
            levels[5] = _fail(5, "malformed-attestation", attestation_err)
        elif manifest is None:
            levels[5] = _fail(5, "malformed-manifest", manifest_err)
        else:
            levels[5] = verify_level5(
                attested,
                ctx.registry_doc,
                manifest=manifest,
                manifest_bytes=raw[PROVENANCE],
                signature_bytes=raw[SIGNATURE],
                publisher_sig=sig,
                checksum_bytes=raw[CHECKSUM],
                pinned=ctx.pinned,
                expected_namespace=ctx.expected_namespace,
                clock_skew=ctx.clock_skew,
            )

    if 6 in wanted:
        if manifest is None:
            levels[6] = _fail(6, "malformed-manifest", manifest_err)
        else:
            levels[6] = verify_level6(manifest, ctx.ledger)

    return VerificationReport(mode, levels)

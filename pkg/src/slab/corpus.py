"""Corpus manifests, ingestion, and the one-record-per-line document store."""
from __future__ import annotations

import json
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from .util import sha256_bytes


class IngestError(ValueError):
    pass


class UnreachableEntryError(IngestError):
    pass


class HashMismatchError(IngestError):
    pass


class EmptyCorpusError(IngestError):
    pass


@dataclass
class ManifestEntry:
    name: str
    source: str              # local path, or http(s) URL fetched with a plain GET
    domain: str
    hash: str | None = None  # sha256 of the raw source bytes, verified when present
    expected_size: int | None = None


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(names) != len(set(names)):
            raise ValueError("CorpusManifest: entry names must be unique")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rec = json.loads(line)
            entries.append(ManifestEntry(
                name=rec["name"], source=rec["source"], domain=rec["domain"],
                hash=rec.get("hash"), expected_size=rec.get("expected_size")))
        return cls(entries=entries)

    def save(self, path) -> None:
        lines = []
        for e in self.entries:
            rec = {"name": e.name, "source": e.source, "domain": e.domain}
            if e.hash:
                rec["hash"] = e.hash
            if e.expected_size is not None:
                rec["expected_size"] = e.expected_size
            lines.append(json.dumps(rec, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class Document:
    doc_id: str
    domain: str
    text: str


@dataclass
class DocumentStore:
    documents: list[Document] = field(default_factory=list)

    def __len__(self):
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def domains(self) -> list[str]:
        seen = []
        for d in self.documents:
            if d.domain not in seen:
                seen.append(d.domain)
        return seen

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for d in self.documents:
                f.write(json.dumps({"id": d.doc_id, "domain": d.domain, "text": d.text},
                                   sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DocumentStore":
        docs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                docs.append(Document(doc_id=rec["id"], domain=rec["domain"], text=rec["text"]))
        return cls(documents=docs)


def _read_source(entry: ManifestEntry) -> bytes:
    if entry.source.startswith(("http://", "https://")):
        try:
            with urllib.request.urlopen(entry.source) as resp:
                return resp.read()
        except Exception as exc:
            raise UnreachableEntryError(f"entry '{entry.name}': cannot fetch "
                                        f"{entry.source}: {exc}") from exc
    path = Path(entry.source)
    if not path.exists():
        raise UnreachableEntryError(f"entry '{entry.name}': no such file {entry.source}")
    return path.read_bytes()


def ingest(manifest: CorpusManifest, store_path=None) -> tuple[DocumentStore, list[dict]]:
    """Resolve every manifest entry into normalized documents (one per
    non-empty source line) and report per-domain document and byte counts."""
    if not manifest.entries:
        raise EmptyCorpusError("manifest has no entries")
    documents: list[Document] = []
    per_domain: dict[str, dict] = {}
    for entry in manifest.entries:
        raw = _read_source(entry)
        if entry.hash:
            actual = sha256_bytes(raw)
            if actual != entry.hash:
                raise HashMismatchError(f"entry '{entry.name}': hash mismatch "
                                        f"(manifest {entry.hash}, actual {actual})")
        n_before = len(documents)
        for i, line in enumerate(raw.decode("utf-8").splitlines()):
            text = line.strip()
            if text:
                documents.append(Document(doc_id=f"{entry.name}:{i}", domain=entry.domain,
                                          text=text))
        stats = per_domain.setdefault(entry.domain, {"documents": 0, "bytes": 0})
        stats["documents"] += len(documents) - n_before
        stats["bytes"] += len(raw)
    if not documents:
        raise EmptyCorpusError("manifest sources contained no documents")
    total_bytes = sum(s["bytes"] for s in per_domain.values())
    report = [{"domain": dom, "documents": s["documents"], "bytes": s["bytes"],
               "byte_share_pct": round(100.0 * s["bytes"] / total_bytes, 1)}
              for dom, s in per_domain.items()]
    store = DocumentStore(documents=documents)
    if store_path is not None:
        store.save(store_path)
    return store, report

"""Content-addressed blob store standing in for IPFS-style weight storage."""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

from .crypto import hash_hex
from .dataset import Dataset
from .model import ModelWeights

URI_SCHEME = "cas://"


class BlobMissing(KeyError):
    pass


class CommitmentMismatch(ValueError):
    pass


def uri_for(digest: str) -> str:
    return URI_SCHEME + digest


def digest_from_uri(uri: str) -> str:
    if not uri.startswith(URI_SCHEME):
        raise ValueError(f"not a content URI: {uri!r}")
    return uri[len(URI_SCHEME):]


class ContentStore:
    """Blobs keyed by their SHA-256 hex digest, in memory and optionally on disk."""

    def __init__(self, root: str | Path | None = None, cache_size: int = 256):
        self.root = Path(root) if root else None
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)
        self._blobs: dict[str, bytes] = {}
        self._decoded: OrderedDict[str, object] = OrderedDict()
        self._cache_size = cache_size

    def __contains__(self, digest: str) -> bool:
        return digest in self._blobs or bool(self.root and (self.root / digest).exists())

    def __len__(self) -> int:
        return len(self._blobs)

    def put(self, blob: bytes) -> str:
        digest = hash_hex(blob)
        if digest not in self._blobs:
            self._blobs[digest] = blob
            if self.root:
                (self.root / digest).write_bytes(blob)
        return digest

    def get(self, digest: str, verify: bool = False) -> bytes:
        blob = self._blobs.get(digest)
        if blob is None and self.root and (self.root / digest).exists():
            blob = (self.root / digest).read_bytes()
        if blob is None:
            raise BlobMissing(digest)
        if verify and hash_hex(blob) != digest:
            raise CommitmentMismatch(digest)
        return blob

    def delete(self, digest: str) -> None:
        self._blobs.pop(digest, None)
        self._decoded.pop(digest, None)
        if self.root and (self.root / digest).exists():
            (self.root / digest).unlink()

    def _remember(self, digest: str, obj) -> None:
        self._decoded[digest] = obj
        self._decoded.move_to_end(digest)
        while len(self._decoded) > self._cache_size:
            self._decoded.popitem(last=False)

    def put_weights(self, weights: ModelWeights) -> str:
        digest = self.put(weights.to_bytes())
        self._remember(digest, weights)
        return digest

    def get_weights(self, digest: str) -> ModelWeights:
        hit = self._decoded.get(digest)
        if isinstance(hit, ModelWeights):
            self._decoded.move_to_end(digest)
            return hit
        weights = ModelWeights.from_bytes(self.get(digest))
        self._remember(digest, weights)
        return weights

    def put_dataset(self, data: Dataset) -> str:
        return self.put(data.to_bytes())

    def get_dataset(self, digest: str, verify: bool = True) -> Dataset:
        return Dataset.from_bytes(self.get(digest, verify=verify))

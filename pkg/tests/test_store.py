import numpy as np
import pytest

from dagfl.crypto import hash_hex
from dagfl.dataset import Dataset
from dagfl.model import ModelWeights
from dagfl.store import BlobMissing, CommitmentMismatch, ContentStore, digest_from_uri, uri_for


def test_put_is_content_addressed():
    store = ContentStore()
    d = store.put(b"abc")
    assert d == hash_hex(b"abc")
    assert store.put(b"abc") == d and len(store) == 1
    assert store.get(d) == b"abc"


def test_missing_and_tampered_blobs():
    store = ContentStore()
    with pytest.raises(BlobMissing):
        store.get("00" * 32)
    d = store.put(b"payload")
    store._blobs[d] = b"other"
    assert store.get(d) == b"other"
    with pytest.raises(CommitmentMismatch):
        store.get(d, verify=True)


def test_disk_backing_survives_new_instance(tmp_path):
    d = ContentStore(tmp_path).put(b"xyz")
    fresh = ContentStore(tmp_path)
    assert d in fresh and fresh.get(d, verify=True) == b"xyz"
    fresh.delete(d)
    assert d not in fresh


def test_weights_and_dataset_roundtrip():
    store = ContentStore(cache_size=1)
    w = ModelWeights({"a": np.arange(6.0).reshape(2, 3)})
    d = store.put_weights(w)
    store.put_weights(ModelWeights({"a": np.zeros(1)}))  # evicts the decoded cache entry
    assert np.array_equal(store.get_weights(d).flat(), w.flat())
    data = Dataset(np.ones((3, 2)), np.array([0, 1, 0]), 2)
    back = store.get_dataset(store.put_dataset(data))
    assert np.array_equal(back.X, data.X) and np.array_equal(back.y, data.y)


def test_uri_helpers():
    assert digest_from_uri(uri_for("ab")) == "ab"
    with pytest.raises(ValueError):
        digest_from_uri("http://ab")

"""Frozen embedding providers standing in for a pretrained vision-language backbone.

Providers return plain numpy vectors, so nothing they produce can carry
gradient history. Each provider counts its calls, which the harness uses to
verify that ablated runs never touch a backbone.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

RECORD_HEADER = struct.Struct("<IqI")  # site_id u32, timestamp i64, dim u32


class ProviderError(RuntimeError):
    pass


def _hash64(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode(), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little")


def _orthogonal(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def prompt_tokens(prompt: str) -> list:
    """Field unigrams plus bigrams of adjacent fields."""
    fields = [p.strip() for p in " ".join(prompt.split()).split("|") if p.strip()]
    return fields + [f"{a}||{b}" for a, b in zip(fields, fields[1:])]


class StubTextProvider:
    """Hashed n-gram features mixed by a fixed random orthogonal matrix, unit L2 norm."""

    kind = "stub"

    def __init__(self, dim: int = 2048, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.calls = 0
        self._mix = None

    def buckets(self, prompt: str) -> list:
        out = []
        for tok in prompt_tokens(prompt):
            h = _hash64(tok, self.seed)
            out.append((h % self.dim, 1.0 if (h >> 63) & 1 else -1.0))
        return out

    def embed(self, prompt: str) -> np.ndarray:
        if not prompt or not prompt.strip():
            raise ProviderError("cannot embed an empty prompt")
        self.calls += 1
        v = np.zeros(self.dim)
        for b, s in self.buckets(prompt):
            v[b] += s
        norm = np.linalg.norm(v)
        if norm == 0.0:
            # all hashed contributions cancelled; fall back to the first bucket
            v[self.buckets(prompt)[0][0]] = 1.0
            norm = 1.0
        if self._mix is None:
            self._mix = _orthogonal(self.dim, self.seed + 1)
        out = self._mix @ (v / norm)
        return (out / np.linalg.norm(out)).astype(np.float32)

    def embed_text(self, site_id: int, timestamp: int, prompt: str) -> np.ndarray:
        return self.embed(prompt)


class StubImageProvider:
    """Scene-descriptor embedding whose coordinate 0 equals the cloud fraction.

    The remaining coordinates hold a fixed per-site direction scaled so the
    vector has unit norm.
    """

    kind = "stub"
    cloud_coordinate = 0

    def __init__(self, dim: int = 2048, seed: int = 0):
        if dim < 2:
            raise ValueError("image embedding dimension must be >= 2")
        self.dim = dim
        self.seed = seed
        self.calls = 0
        self._site_dirs = {}

    def _site_direction(self, site_id: int) -> np.ndarray:
        if site_id not in self._site_dirs:
            rng = np.random.default_rng(_hash64(f"site:{site_id}", self.seed))
            d = rng.standard_normal(self.dim - 1)
            self._site_dirs[site_id] = d / np.linalg.norm(d)
        return self._site_dirs[site_id]

    def embed(self, site_id: int, timestamp: int, cloud_fraction: float) -> np.ndarray:
        c = float(cloud_fraction)
        if not np.isfinite(c) or not 0.0 <= c <= 1.0:
            raise ProviderError(f"cloud fraction must lie in [0, 1], got {cloud_fraction}")
        self.calls += 1
        out = np.empty(self.dim)
        out[0] = c
        out[1:] = np.sqrt(max(1.0 - c * c, 0.0)) * self._site_direction(int(site_id))
        return out.astype(np.float32)

    def embed_image(self, site_id: int, timestamp: int, cloud_fraction: float) -> np.ndarray:
        return self.embed(site_id, timestamp, cloud_fraction)

    def embed_series(self, site_id: int, timestamps, cloud) -> np.ndarray:
        """Embed a whole per-site scene sequence, ``[steps, dim]``."""
        return np.stack([self.embed(site_id, int(t), float(c)) for t, c in zip(timestamps, cloud)])


# ---------------------------------------------------------------------------
# Binary embedding files
# ---------------------------------------------------------------------------


def write_embeddings(path, records) -> int:
    """Write ``(site_id, timestamp, vector)`` records; returns the record count."""
    n = 0
    with open(path, "wb") as fh:
        for site_id, timestamp, vec in records:
            v = np.asarray(vec, dtype="<f4").reshape(-1)
            fh.write(RECORD_HEADER.pack(int(site_id), int(timestamp), v.size))
            fh.write(v.tobytes())
            n += 1
    return n


def read_embeddings(path) -> dict:
    """Read a record stream into ``{(site_id, timestamp): float32 vector}``."""
    data = Path(path).read_bytes()
    out = {}
    pos = 0
    while pos < len(data):
        if pos + RECORD_HEADER.size > len(data):
            raise ProviderError(f"{path}: truncated record header at byte {pos}")
        site_id, ts, dim = RECORD_HEADER.unpack_from(data, pos)
        pos += RECORD_HEADER.size
        end = pos + 4 * dim
        if end > len(data):
            raise ProviderError(f"{path}: truncated record body at byte {pos}")
        out[(site_id, ts)] = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float32)
        pos = end
    return out


class FileProvider:
    """Precomputed embeddings keyed by ``(site_id, timestamp)``."""

    kind = "file"

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise ProviderError(f"embedding file not found: {self.path}")
        self.table = read_embeddings(self.path)
        dims = {v.size for v in self.table.values()}
        if len(dims) > 1:
            raise ProviderError(f"{self.path}: mixed embedding dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0
        self.calls = 0

    def lookup(self, site_id: int, timestamp: int) -> np.ndarray:
        self.calls += 1
        try:
            return self.table[(int(site_id), int(timestamp))]
        except KeyError:
            raise ProviderError(f"{self.path}: no embedding for site {site_id} at {timestamp}") from None

    def embed_text(self, site_id: int, timestamp: int, prompt: str) -> np.ndarray:
        return self.lookup(site_id, timestamp)

    def embed_image(self, site_id: int, timestamp: int, cloud_fraction: float) -> np.ndarray:
        return self.lookup(site_id, timestamp)

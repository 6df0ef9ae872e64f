"""
Synthesis artifact cache
Keeps invariant sets, dual winning sets and ellipsoids keyed by a content hash of their inputs
"""

import hashlib
import json
import os
import time
from pathlib import Path
from typing import Any, Dict, Optional

import structlog

logger = structlog.get_logger(__name__)


def content_hash(payload: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of `payload`."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


class SetCache:
    """Cache of serialized synthesis artifacts."""

    def __init__(self, max_size: int = 256, cache_dir: Optional[str] = None):
        """
        Initialize the cache.

        Args:
            max_size: Maximum number of artifacts held in memory
            cache_dir: Directory to persist artifacts (None for in-memory only)
        """
        self.cache: Dict[str, Dict[str, Any]] = {}
        self.max_size = max_size
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.hits = 0
        self.misses = 0
        self.access_times: Dict[str, float] = {}

        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self._load_persistent_cache()

    def get(self, key: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        """
        Look up an artifact.

        Args:
            key: Inputs the artifact was computed from

        Returns:
            The stored artifact or None
        """
        key_hash = content_hash(key)
        if key_hash in self.cache:
            self.hits += 1
            self.access_times[key_hash] = time.monotonic()
            return self.cache[key_hash]

        self.misses += 1
        return None

    def set(self, key: Dict[str, Any], artifact: Dict[str, Any], kind: str = "artifact") -> str:
        """
        Store an artifact and return its key hash.

        Args:
            key: Inputs the artifact was computed from
            artifact: JSON-serializable artifact
            kind: Label written next to the artifact on disk
        """
        key_hash = content_hash(key)
        self.cache[key_hash] = artifact
        self.access_times[key_hash] = time.monotonic()

        if self.cache_dir:
            self._save_artifact(key_hash, kind, artifact)

        if len(self.cache) > self.max_size:
            self._evict_lru()
        return key_hash

    def _evict_lru(self) -> None:
        """Drop the least recently used in-memory artifact."""
        if not self.access_times:
            return
        oldest = min(self.access_times.items(), key=lambda item: item[1])[0]
        self.cache.pop(oldest, None)
        self.access_times.pop(oldest, None)
        logger.debug("Evicted artifact from cache", key=oldest[:12])

    def _save_artifact(self, key_hash: str, kind: str, artifact: Dict[str, Any]) -> None:
        try:
            with open(self.cache_dir / f"{key_hash}.json", "w", encoding="utf-8") as f:
                json.dump({"hash": key_hash, "kind": kind, "artifact": artifact}, f)
        except OSError as e:
            logger.error(f"❌ Error saving artifact to disk: {e}")

    def _load_persistent_cache(self) -> None:
        loaded = 0
        for cache_file in sorted(self.cache_dir.glob("*.json")):
            if loaded >= self.max_size:
                break
            try:
                with open(cache_file, "r", encoding="utf-8") as f:
                    data = json.load(f)
                self.cache[data["hash"]] = data["artifact"]
                self.access_times[data["hash"]] = time.monotonic()
                loaded += 1
            except (OSError, ValueError, KeyError) as e:
                logger.error(f"❌ Error loading artifact from {cache_file}: {e}")

        logger.info("Loaded artifacts from persistent cache", count=loaded, directory=str(self.cache_dir))

    def clear(self) -> None:
        """Empty the cache, including the on-disk copies."""
        self.cache.clear()
        self.access_times.clear()
        if self.cache_dir and self.cache_dir.exists():
            for cache_file in self.cache_dir.glob("*.json"):
                try:
                    os.remove(cache_file)
                except OSError as e:
                    logger.error(f"❌ Error removing cache file {cache_file}: {e}")

    def get_stats(self) -> Dict[str, Any]:
        total = self.hits + self.misses
        return {
            "size": len(self.cache),
            "max_size": self.max_size,
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": self.hits / total if total > 0 else 0,
            "persistent": self.cache_dir is not None,
        }

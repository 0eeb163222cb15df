import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import ValidationError

# Local imports
from ..config import get_settings
from ..exceptions import MemoryGuardError, SerializationError
from ..models import HashFamily, SketchParams

logger = logging.getLogger(__name__)

FAMILY_MAGIC = b"PCSH1"
FAMILY_HEADER = struct.Struct("<5sQQQQ")
HASH_STREAM = 0


def hash_generator(seed: int) -> np.random.Generator:
    """Generator behind the hash tables of a given seed (stream 0 of the seed)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(HASH_STREAM,))))


class HashingService:
    def __init__(self, max_entries: Optional[int] = None, cache_size: int = 8):
        self.max_entries = max_entries
        self.cache_size = cache_size
        self._cache = OrderedDict()

    def _entry_limit(self) -> int:
        if self.max_entries is not None:
            return self.max_entries
        return get_settings().max_table_entries

    def build_hash_family(self, params: SketchParams, allow_large: bool = False) -> HashFamily:
        """
        Draw k bucket rows uniform on [0, b) and k sign rows uniform on {-1, +1}.
        The tables are a deterministic function of params (seed included).
        """
        limit = self._entry_limit()
        if params.hash_entries > limit and not allow_large:
            raise MemoryGuardError(
                f"k*d = {params.hash_entries} hash entries exceeds the limit of {limit}; "
                f"pass allow_large=True to build it anyway"
            )

        rng = hash_generator(params.seed)
        shape = (params.k, params.d)
        buckets = rng.integers(0, params.b, size=shape, dtype=np.int32)
        signs = rng.integers(0, 2, size=shape, dtype=np.int8) * 2 - 1
        logger.debug(f"Built hash family d={params.d} k={params.k} b={params.b} seed={params.seed}")
        return HashFamily(params=params, buckets=buckets, signs=signs)

    def family_for(self, params: SketchParams) -> HashFamily:
        """Cached build_hash_family; families are immutable so sharing is safe."""
        family = self._cache.get(params)
        if family is not None:
            self._cache.move_to_end(params)
            return family
        family = self.build_hash_family(params)
        self._cache[params] = family
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return family

    def serialize_family(self, family: HashFamily) -> bytes:
        p = family.params
        header = FAMILY_HEADER.pack(FAMILY_MAGIC, p.d, p.k, p.b, p.seed)
        return (
            header
            + family.buckets.astype("<u4").tobytes()
            + family.signs.astype("i1").tobytes()
        )

    def deserialize_family(self, data: bytes) -> HashFamily:
        if len(data) < FAMILY_HEADER.size:
            raise SerializationError(f"hash family blob too short ({len(data)} bytes)")
        magic, d, k, b, seed = FAMILY_HEADER.unpack_from(data, 0)
        if magic != FAMILY_MAGIC:
            raise SerializationError(f"bad magic {magic!r}, expected {FAMILY_MAGIC!r}")
        try:
            params = SketchParams(d=d, k=k, b=b, seed=seed)
        except ValidationError as e:
            raise SerializationError(f"invalid hash family header: {e}") from e

        n = params.hash_entries
        expected = FAMILY_HEADER.size + 4 * n + n
        if len(data) != expected:
            raise SerializationError(f"hash family blob has {len(data)} bytes, expected {expected}")

        offset = FAMILY_HEADER.size
        buckets = np.frombuffer(data, dtype="<u4", count=n, offset=offset).reshape(k, d)
        signs = np.frombuffer(data, dtype="i1", count=n, offset=offset + 4 * n).reshape(k, d)
        try:
            return HashFamily(params=params, buckets=buckets, signs=signs)
        except ValidationError as e:
            raise SerializationError(f"corrupt hash tables: {e}") from e

    def save_family(self, family: HashFamily, path: Union[str, Path]):
        Path(path).write_bytes(self.serialize_family(family))
        logger.info(f"Saved hash family to {path}")

    def load_family(self, path: Union[str, Path]) -> HashFamily:
        return self.deserialize_family(Path(path).read_bytes())


# Global hashing_service instance
hashing_service = HashingService()

"""64-bit FNV-1a, shared by the hashed caption embedder and the checkpoint checksum."""

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x00000100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, seed: int = FNV64_OFFSET) -> int:
    """FNV-1a over `data`, starting from `seed` instead of the standard offset basis."""
    h = seed & _MASK64
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h

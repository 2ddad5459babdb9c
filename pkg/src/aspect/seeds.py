import hashlib


def derive_seed(master, *names):
    """Stable 63-bit seed from a master seed and a path of names."""
    key = "/".join([str(int(master))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1

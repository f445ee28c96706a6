import hashlib


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def same_content(a: bytes, b: bytes) -> bool:
    return digest(a) == digest(b)

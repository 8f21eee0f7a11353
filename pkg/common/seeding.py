import hashlib
import json


def derive_seed(*parts):
    """
    Derive a 63-bit seed from an ordered tuple of integers/strings.

    The same parts give the same seed on every platform and regardless of the
    order in which runs or rollouts are scheduled.
    """
    payload = json.dumps(list(parts), separators=(',', ':')).encode('utf-8')
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], 'big') >> 1

"""Tamper-evident tags for controller messages.

A tag is HMAC-SHA256 over ``window_id || payload`` under a per-run key.
Verification recomputes the tag and compares; there is no PKI.
"""
import hashlib
import hmac
import struct

import numpy as np

from ._rng import derive_seed

TAG_BYTES = 32
HEARTBEAT_BYTES = 4 + TAG_BYTES  # window id + tag
DELTA_BYTES = 4 + 4 + 3 * 4 + TAG_BYTES  # node, window, 3 x f32, tag
NONCE_BYTES = TAG_BYTES


class ControllerSigner:
    def __init__(self, key):
        self.key = bytes(key)

    @classmethod
    def from_seed(cls, seed):
        return cls(derive_seed(seed, "controller", "key").to_bytes(8, "little") * 4)

    def sign(self, window_id, payload):
        msg = struct.pack(">Q", int(window_id)) + bytes(payload)
        return hmac.new(self.key, msg, hashlib.sha256).digest()

    def verify(self, window_id, payload, tag):
        return hmac.compare_digest(self.sign(window_id, payload), bytes(tag))

    @staticmethod
    def _delta_payload(d):
        return struct.pack(">I3f", d.node, *np.asarray(d.delta, dtype=np.float32))

    def sign_delta(self, d):
        return self.sign(d.window_id, self._delta_payload(d))

    def verify_delta(self, d):
        return self.verify(d.window_id, self._delta_payload(d), d.auth_tag)

    def sign_table(self, table):
        return self.sign(table.version, table.payload())

    def verify_table(self, table):
        return table is not None and self.verify(table.version, table.payload(),
                                                 table.auth_tag)

    def mint_nonce(self, tx_id, window_id):
        """One outburst nonce per (tx, window)."""
        return self.sign(window_id, b"nonce" + struct.pack(">Q", int(tx_id)))

    def verify_nonce(self, tx_id, window_id, nonce):
        return nonce is not None and self.verify(
            window_id, b"nonce" + struct.pack(">Q", int(tx_id)), nonce)

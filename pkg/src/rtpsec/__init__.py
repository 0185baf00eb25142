"""Authenticated media streaming over RTP.

The package is organised around the life of a frame: a capture source
(:mod:`rtpsec.media`) produces raw RGB frames, the codec layer turns them
into payload bytes, the packet layer (:mod:`rtpsec.packet`) fragments and
protects them, and the transport layer (:mod:`rtpsec.transport`) moves the
resulting datagrams.  Session secrets come from the control plane
(:mod:`rtpsec.control`) backed by a key provider (:mod:`rtpsec.keys`), and
all key schedule / cipher work lives in :mod:`rtpsec.crypto`.
"""

__version__ = "0.1.0"

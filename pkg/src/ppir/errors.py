"""Exception types shared across the engines and the protocol layer."""


class ProtocolError(RuntimeError):
    """A two-party protocol cannot continue."""


class HandshakeError(ProtocolError):
    """The parties disagree on session parameters."""


class TransportError(RuntimeError):
    """The channel failed or timed out."""

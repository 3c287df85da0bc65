from .channel import (
    ATTESTED,
    PLAIN,
    AttestationLog,
    AttestationMissing,
    Channel,
    ChannelClosed,
    ChannelIdentity,
    ConnectionRefused,
    HandshakeFailure,
    IntegrityFailure,
    Network,
    RemoteError,
    RequestContext,
    SbiError,
    SbiServer,
    Timeout,
    Unauthorized,
    fingerprint,
    open_channel,
    send_request,
)
from .frames import FrameError, Method, SbiMessage, decode, encode, read_frame
from .tokens import AccessToken, BootstrapGrant, TokenReject, TokenVerdict, verify_token

__all__ = [
    "ATTESTED", "PLAIN", "AccessToken", "BootstrapGrant", "AttestationLog", "AttestationMissing", "Channel",
    "ChannelClosed", "ChannelIdentity", "ConnectionRefused", "FrameError", "HandshakeFailure",
    "IntegrityFailure", "Method", "Network", "RemoteError", "RequestContext", "SbiError",
    "SbiMessage", "SbiServer", "Timeout", "TokenReject", "TokenVerdict", "Unauthorized",
    "decode", "encode", "fingerprint", "open_channel", "read_frame", "send_request",
    "verify_token",
]

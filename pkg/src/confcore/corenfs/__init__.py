"""Control-plane network functions."""

from .amf import Amf, RegistrationFailed, RegistrationResult
from .ausf import Ausf
from .errors import (
    CoreError,
    DuplicateInstanceConflict,
    MacFailure,
    NotRegistered,
    ResponseMismatch,
    ScopeNotOffered,
    ServiceUnavailable,
    SessionMissing,
    StorageFailure,
    SyncFailure,
    UnknownKeyId,
    UnknownRequester,
    UnknownSubscriber,
)
from .nrf import Nrf
from .runtime import OPERATOR_SUBJECT, SERVICE_PRODUCERS, NetworkFunction, NfEnv, NfProfile, NfStatus, SbiClient
from .stubs import Nssf, Smf, Upf
from .udm import Udm

__all__ = [
    "Amf", "Ausf", "CoreError", "DuplicateInstanceConflict", "MacFailure", "NF_CLASSES", "NetworkFunction",
    "NfEnv", "NfProfile", "NfStatus", "NotRegistered", "Nrf", "Nssf", "OPERATOR_SUBJECT", "RegistrationFailed",
    "RegistrationResult", "ResponseMismatch", "SERVICE_PRODUCERS", "SbiClient", "ScopeNotOffered",
    "ServiceUnavailable", "SessionMissing", "Smf", "StorageFailure", "SyncFailure", "Udm", "UnknownKeyId",
    "UnknownRequester", "UnknownSubscriber", "Upf", "create_nf",
]

NF_CLASSES = {cls.nf_type: cls for cls in (Nrf, Udm, Ausf, Amf, Smf, Nssf, Upf)}


def create_nf(nf_type: str, instance_id: str, memory, env: NfEnv, payload: dict | None = None, **kw) -> NetworkFunction:
    try:
        cls = NF_CLASSES[nf_type]
    except KeyError:
        raise ValueError(f"unknown NF type {nf_type!r}") from None
    return cls(instance_id, memory, env, payload, **kw)

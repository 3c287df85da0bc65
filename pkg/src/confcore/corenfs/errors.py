"""Domain errors shared by the NFs; they cross the SBI by name."""

from __future__ import annotations

from ..sbi import RemoteError, SbiError


class CoreError(SbiError):
    status = 400


class UnknownRequester(CoreError):
    status = 403


class ScopeNotOffered(CoreError):
    status = 403


class DuplicateInstanceConflict(CoreError):
    status = 409


class NotRegistered(CoreError):
    status = 404


class UnknownSubscriber(CoreError):
    status = 404


class SyncFailure(CoreError):
    status = 409


class ResponseMismatch(CoreError):
    status = 403


class MacFailure(CoreError):
    status = 400


class UnknownKeyId(CoreError):
    status = 404


class StorageFailure(CoreError):
    status = 507


class SessionMissing(CoreError):
    status = 404


class ServiceUnavailable(CoreError):
    status = 503


ERRORS = {cls.__name__: cls for cls in (
    UnknownRequester, ScopeNotOffered, DuplicateInstanceConflict, NotRegistered,
    UnknownSubscriber, SyncFailure, ResponseMismatch, MacFailure, UnknownKeyId,
    StorageFailure, SessionMissing, ServiceUnavailable,
)}


def reraise(exc: RemoteError):
    cls = ERRORS.get(exc.error)
    if cls is None:
        raise exc
    raise cls(exc.detail) from exc

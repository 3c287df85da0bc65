"""Where an NF keeps its working state.

``SvmMemory`` routes everything through the emulated TEE so a hypervisor
only ever sees ciphertext; ``HostMemory`` is an ordinary VM whose memory the
host reads in the clear (the plain-mode baseline).
"""

from __future__ import annotations

import threading

from .tee import NotAttested, Platform, SvmHandle


class HostMemory:
    def __init__(self, name: str = "vm"):
        self.name = name
        self._store: dict[str, bytes] = {}
        self._log = bytearray()
        self._lock = threading.Lock()
        self.terminated = False

    encrypted = False

    def put(self, name: str, value: bytes) -> None:
        with self._lock:
            self._store[name] = bytes(value)

    def get(self, name: str) -> bytes | None:
        with self._lock:
            return self._store.get(name)

    def delete(self, name: str) -> None:
        with self._lock:
            self._store.pop(name, None)

    def log(self, data: bytes) -> None:
        with self._lock:
            self._log += data

    def provision(self, channel_fp: bytes | None, payload: bytes) -> None:
        self.put("\x00provisioned", payload)

    def provisioned(self) -> bytes | None:
        return self.get("\x00provisioned")

    def mark_running(self) -> None:
        pass

    def host_read(self) -> bytes:
        with self._lock:
            parts = []
            for k, v in self._store.items():
                parts += [k.encode(), b"\x00", v, b"\x00"]
            return b"".join(parts) + bytes(self._log)

    def terminate(self) -> bytes:
        with self._lock:
            self.terminated = True
            return bytes(self._log)


class SvmMemory:
    def __init__(self, platform: Platform, svm: SvmHandle):
        self.platform = platform
        self.svm = svm

    @property
    def name(self) -> str:
        return self.svm.svm_id

    @property
    def encrypted(self) -> bool:
        return self.svm.encrypted

    def put(self, name: str, value: bytes) -> None:
        self.platform.write_protected(self.svm, name, value)

    def get(self, name: str) -> bytes | None:
        return self.platform.read_protected(self.svm, name)

    def delete(self, name: str) -> None:
        self.platform.delete_protected(self.svm, name)

    def log(self, data: bytes) -> None:
        self.platform.append_log(self.svm, data)

    def provision(self, channel_fp: bytes | None, payload: bytes) -> None:
        if channel_fp is None:
            raise NotAttested("provisioning requires a report-bound channel")
        self.platform.provision(self.svm, channel_fp, payload)

    def provisioned(self) -> bytes | None:
        return self.platform.provisioned_payload(self.svm)

    def mark_running(self) -> None:
        self.platform.mark_running(self.svm)

    def host_read(self) -> bytes:
        return self.platform.host_read(self.svm)

    def terminate(self) -> bytes:
        return self.platform.terminate(self.svm)

"""Topology files and the in-process testbed that deploys them."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import tee
from .clock import SimClock
from .corenfs import NetworkFunction
from .corenfs.suci import new_home_keypair
from .host import HostInfrastructure
from .sbi import ATTESTED, PLAIN, AttestationLog, Network
from .vnfm import BootstrapMode, LifecycleState, NfInstance, NfSpec, Vnfm
from .ztepolicy import PolicyDocument, load_policy

log = logging.getLogger(__name__)

HOME_KEY_ID = 1


class TopologyError(ValueError):
    pass


@dataclass
class NfEntry:
    instance_id: str
    nf_type: str
    image: str
    config: dict = field(default_factory=dict)
    required_features: tuple[str, ...] = ("memory_encryption", "register_encryption", "integrity_protection")

    def spec(self, payload: bytes = b"{}") -> NfSpec:
        return NfSpec(self.nf_type, self.image.encode(), dict(self.config),
                      tee.Feature.parse(self.required_features), payload, self.instance_id)

    def measurement(self) -> bytes:
        return tee.measure(self.image.encode(), self.config)


@dataclass
class Topology:
    name: str
    policy_path: Path
    bootstrap: BootstrapMode
    nfs: list[NfEntry]
    deployment_class: str = "private_cloud"
    reattest_period_ms: int = 30_000
    vnfm_image: str = "confcore-vnfm:1.0"

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "Topology":
        unknown = set(d) - {"name", "policy", "bootstrap", "nfs", "deployment_class",
                            "reattest_period_ms", "vnfm_image"}
        if unknown:
            raise TopologyError(f"unknown topology keys {sorted(unknown)}")
        if "bootstrap" not in d:
            raise TopologyError("bootstrap mode must be stated (trusted_host or self_attested)")
        try:
            bootstrap = BootstrapMode(d["bootstrap"])
        except ValueError:
            raise TopologyError(f"bad bootstrap mode {d['bootstrap']!r}") from None
        nfs = []
        seen = set()
        for raw in d.get("nfs", []):
            try:
                e = NfEntry(raw["instance_id"], raw["nf_type"], raw["image"], dict(raw.get("config", {})),
                            tuple(raw.get("required_features", NfEntry.required_features)))
                tee.Feature.parse(e.required_features)
            except (KeyError, ValueError) as exc:
                raise TopologyError(f"bad NF entry {raw!r}: {exc}") from exc
            if e.instance_id in seen:
                raise TopologyError(f"duplicate instance id {e.instance_id}")
            seen.add(e.instance_id)
            nfs.append(e)
        if [e.nf_type for e in nfs].count("NRF") != 1:
            raise TopologyError("topology needs exactly one NRF")
        nfs.sort(key=lambda e: e.nf_type != "NRF")
        policy = Path(d.get("policy", ""))
        if base is not None and not policy.is_absolute():
            policy = base / policy
        return cls(d.get("name", "topology"), policy, bootstrap, nfs,
                   d.get("deployment_class", "private_cloud"), int(d.get("reattest_period_ms", 30_000)),
                   d.get("vnfm_image", "confcore-vnfm:1.0"))

    @classmethod
    def load(cls, path: str | Path) -> "Topology":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise TopologyError(f"cannot read topology {path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def policy(self) -> PolicyDocument:
        return load_policy(self.policy_path)

    def entry(self, instance_id: str) -> NfEntry:
        for e in self.nfs:
            if e.instance_id == instance_id:
                return e
        raise KeyError(instance_id)


def demo_topology_path() -> Path:
    return Path(str(resources.files("confcore") / "data" / "demo-topology.json"))


def demo_topology() -> Topology:
    return Topology.load(demo_topology_path())


class Testbed:
    """A full core: one host, one VNFM, every NF from the topology."""

    __test__ = False  # not a pytest class

    def __init__(self, topology: Topology, mode: str = ATTESTED, *, policy: PolicyDocument | None = None,
                 clock: SimClock | None = None, store_dir: str | Path | None = None,
                 platform_features: tee.Feature = tee.SNP, token_channel_attested: bool = True,
                 flush_on_write: bool = True):
        if mode not in (PLAIN, ATTESTED):
            raise TopologyError(f"unknown mode {mode!r}")
        self.topology = topology
        self.mode = mode
        self.policy = policy if policy is not None else topology.policy()
        self.clock = clock or SimClock(1_700_000_000_000)
        self.network = Network()
        self.trust = AttestationLog()
        self.manufacturer = tee.Manufacturer()
        self.platform = tee.Platform(self.manufacturer, supported=platform_features)
        self.host = HostInfrastructure(self.network, self.clock, self.trust, mode, self.platform)
        self.vnfm = Vnfm(self.host, self.policy, self.manufacturer.root_pubkey, bootstrap=topology.bootstrap,
                         deployment_class=topology.deployment_class,
                         reattest_period_ms=topology.reattest_period_ms,
                         token_channel_attested=token_channel_attested)
        if topology.bootstrap == BootstrapMode.SELF_ATTESTED:
            image = topology.vnfm_image.encode()
            self.vnfm.attest_self(self.platform, self.manufacturer.root_pubkey,
                                  {tee.measure(image, {})}, image, {})
        # each deployment seals its store under a fresh key, so it gets its own directory
        self.store_dir = Path(tempfile.mkdtemp(prefix=f"{mode}-", dir=store_dir)) if store_dir else None
        self.flush_on_write = flush_on_write
        self.home_priv, self.home_pub = new_home_keypair()
        self._secrets: dict[str, list[bytes]] = {}
        self.instances: dict[str, NfInstance] = {}

    def payload_for(self, entry: NfEntry) -> dict:
        cred = os.urandom(32)
        doc: dict = {"nf_credential": cred.hex()}
        secrets = [cred]
        if entry.nf_type == "UDM":
            skey = os.urandom(32)
            doc["home_keys"] = {str(HOME_KEY_ID): self.home_priv.hex()}
            doc["storage_key"] = skey.hex()
            doc["flush_on_write"] = self.flush_on_write
            if self.store_dir is not None:
                doc["store_path"] = str(self.store_dir / f"{entry.instance_id}.db")
            secrets += [self.home_priv, skey]
        self._secrets[entry.instance_id] = secrets
        return doc

    def deploy(self, entry: NfEntry, fault_injector=None) -> NfInstance:
        payload = json.dumps(self.payload_for(entry)).encode()
        inst = self.vnfm.deploy_nf(entry.spec(payload), self.policy, instance_id=entry.instance_id,
                                   fault_injector=fault_injector)
        self.instances[entry.instance_id] = inst
        return inst

    def deploy_all(self) -> "Testbed":
        for e in self.topology.nfs:
            self.deploy(e)
        return self

    def secrets(self, instance_id: str | None = None) -> list[bytes]:
        if instance_id is not None:
            return list(self._secrets.get(instance_id, ()))
        return [s for v in self._secrets.values() for s in v]

    def nf(self, instance_id: str) -> NetworkFunction:
        nf = self.host.guests[instance_id].nf
        if nf is None:
            raise KeyError(f"{instance_id} is not running")
        return nf

    def first(self, nf_type: str) -> NetworkFunction:
        for e in self.topology.nfs:
            if e.nf_type == nf_type and e.instance_id in self.instances:
                g = self.host.guests.get(e.instance_id)
                if g is not None and g.nf is not None:
                    return g.nf
        raise KeyError(f"no running {nf_type}")

    @property
    def nrf(self):
        return self.first("NRF")

    @property
    def udm(self):
        return self.first("UDM")

    @property
    def ausf(self):
        return self.first("AUSF")

    @property
    def amf(self):
        return self.first("AMF")

    @property
    def upf(self):
        return self.first("UPF")

    def shutdown(self) -> None:
        # reverse order so the NRF outlives everything that deregisters from it
        for iid in reversed(list(self.instances)):
            inst = self.instances[iid]
            if inst.lifecycle_state not in (None, LifecycleState.TERMINATED):
                self.vnfm.terminate_nf(inst)

"""``confcore`` command line: deploy, bench, attest, inspect, policy-check, measure."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import bench, tee
from .ranuesim import registration_storm, spawn_ues
from .sbi import ATTESTED, PLAIN
from .topology import Testbed, Topology, TopologyError, demo_topology_path
from .vnfm import DeploymentError
from .ztepolicy import PolicyFileError, load_policy

log = logging.getLogger("confcore")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_REJECTED = 3
EXIT_BENCH = 4
EXIT_INTERNAL = 5


class ConfigError(Exception):
    pass


@dataclass
class CliConfig:
    topology_path: Path
    policy_path: Path | None = None
    mode: str = ATTESTED
    seed: int = 0
    output_dir: Path = Path("bench-out")

    def resolve(self) -> "CliConfig":
        topo = Path(self.topology_path).expanduser().resolve()
        if not topo.is_file():
            raise ConfigError(f"topology not found: {topo}")
        pol = Path(self.policy_path).expanduser().resolve() if self.policy_path else None
        if pol is not None and not pol.is_file():
            raise ConfigError(f"policy not found: {pol}")
        if self.mode not in (PLAIN, ATTESTED, "both"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        return replace(self, topology_path=topo, policy_path=pol, output_dir=Path(self.output_dir))

    def topology(self) -> Topology:
        topo = Topology.load(self.topology_path)
        if self.policy_path is not None:
            topo.policy_path = self.policy_path
        return topo


_CONFIG_KEYS = {"topology": "topology_path", "policy": "policy_path", "mode": "mode", "seed": "seed",
                "output_dir": "output_dir", "out": "output_dir"}


def build_config(args: argparse.Namespace) -> CliConfig:
    cfg = CliConfig(Path(args.topology) if args.topology else demo_topology_path(),
                    Path(args.policy) if args.policy else None, args.mode, args.seed, Path(args.out))
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(doc) - set(_CONFIG_KEYS) - {"trials", "sizes", "kind", "warmup"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        base = Path(args.config).resolve().parent
        for key, attr in _CONFIG_KEYS.items():
            if key in doc:
                val = doc[key]
                if attr in ("topology_path", "policy_path", "output_dir"):
                    val = Path(val) if Path(val).is_absolute() else base / val
                cfg = replace(cfg, **{attr: val})
        for key in ("trials", "sizes", "kind", "warmup"):
            if key in doc and hasattr(args, key):
                val = doc[key]
                if key == "sizes" and isinstance(val, list):
                    val = ",".join(str(v) for v in val)
                setattr(args, key, val)
    return cfg.resolve()


def parse_sizes(text: str) -> tuple[int, ...]:
    try:
        if ":" in text:
            start, stop, step = (int(p) for p in text.split(":"))
            return tuple(range(start, stop + 1, step))
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --sizes {text!r}; use '100,200' or 'start:stop:step'") from exc


def _testbed(cfg: CliConfig, mode: str | None = None) -> Testbed:
    return Testbed(cfg.topology(), mode or (ATTESTED if cfg.mode == "both" else cfg.mode)).deploy_all()


# -- subcommands -------------------------------------------------------------------

def cmd_deploy(cfg: CliConfig, args) -> int:
    tb = _testbed(cfg)
    print(f"topology {tb.topology.name}  mode {tb.mode}  bootstrap {tb.topology.bootstrap.value}"
          f"  origin: {tb.vnfm.origin}")
    print(f"{'instance':<10} {'type':<5} {'state':<10} {'measurement':<18} {'session ttl':>11}  endpoint")
    for inst in tb.instances.values():
        ttl = f"{inst.session.ttl_ms} ms" if inst.session else "-"
        print(f"{inst.instance_id:<10} {inst.spec.nf_type:<5} {inst.lifecycle_state.value:<10} "
              f"{inst.spec.measurement().hex()[:16]:<18} {ttl:>11}  {inst.endpoint}")
    tb.shutdown()
    return EXIT_OK


def cmd_bench(cfg: CliConfig, args) -> int:
    sizes = parse_sizes(args.sizes)
    modes = (PLAIN, ATTESTED) if cfg.mode == "both" else (cfg.mode,)
    kinds = list(bench.Kind) if args.kind == "all" else [bench.Kind(args.kind)]
    try:
        scenarios = [bench.Scenario(k, sizes, args.trials, m, cfg.seed, args.warmup) for k in kinds for m in modes]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    topo = cfg.topology()
    reports = []
    print(f"# {bench.HEADER_NOTE}")
    for sc in scenarios:
        rep = bench.run(sc, topo)
        reports.append(rep)
        fit = rep.linear_fit
        print(f"{sc.kind.value} [{sc.mode}] trials={sc.trials}"
              + (f"  fit slope={fit.slope:.4f} ms/unit intercept={fit.intercept:.3f} R2={fit.r_squared:.4f}"
                 if fit else ""))
        print(f"  {'size':>6} {'mean':>10} {'median':>10} {'p95':>10} {'stddev':>10}")
        for r in rep.rows:
            print(f"  {r.size:>6} {r.mean_ms:>10.3f} {r.median_ms:>10.3f} {r.p95_ms:>10.3f} {r.stddev_ms:>10.3f}")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    bench.write_raw(reports, out / "raw.csv")
    bench.write_summary(reports, out / "summary.csv")
    if len(modes) == 2:
        for k in kinds:
            a, b = [r for r in reports if r.scenario.kind == k]
            deltas = bench.compare(a, b)
            bench.write_deltas(deltas, k.value, out / f"delta_{k.value}.csv")
            print(f"{k.value} attested minus plain: "
                  + ", ".join(f"{d.size}:{d.abs_delta_ms:+.3f}ms" for d in deltas))
    print(f"wrote {out / 'raw.csv'} and {out / 'summary.csv'}")
    return EXIT_OK


def cmd_attest(cfg: CliConfig, args) -> int:
    tb = _testbed(cfg, ATTESTED)
    inst = tb.vnfm.instances.get(args.instance_id)
    if inst is None:
        raise ConfigError(f"no instance {args.instance_id!r} in topology")
    nonce = tee.Verifier.fresh_nonce()
    report = tb.platform.generate_report(inst.svm, nonce)
    raw = report.to_bytes()
    if args.mutate:
        if args.mutate not in tee.REPORT_FIELDS:
            raise ConfigError(f"unknown report field {args.mutate!r}; one of {', '.join(tee.REPORT_FIELDS)}")
        raw = _mutate(report, args.mutate).to_bytes()
    verdict = tb.vnfm.verifier.verify(raw, nonce, tb.policy.allowlist, tb.policy.required_features,
                                      svm_id=inst.instance_id)
    tb.shutdown()
    if not verdict:
        print(f"REJECTED {args.instance_id}: {verdict.reason.value} ({verdict.detail})")
        return EXIT_REJECTED
    r = verdict.report
    print(f"VERIFIED {args.instance_id}")
    print(f"  version           {r.version}")
    print(f"  measurement       {r.measurement.hex()}")
    print(f"  nonce             {r.nonce.hex()}")
    print(f"  firmware_version  {r.firmware_version}")
    print(f"  features          {', '.join(r.features.names())}")
    print(f"  channel key fp    {hashlib.sha256(r.channel_pubkey).hexdigest()}")
    return EXIT_OK


def _mutate(report: tee.AttestationReport, name: str) -> tee.AttestationReport:
    val = getattr(report, name)
    if isinstance(val, bytes):
        new = bytes([val[0] ^ 1]) + val[1:] if val else b"\x00"
    elif isinstance(val, str):
        new = val + ".1"
    elif isinstance(val, tee.Feature):
        new = tee.Feature(val ^ tee.Feature.INTEGRITY_PROTECTION)
    else:
        new = val + 1
    return replace(report, **{name: new})


def cmd_inspect(cfg: CliConfig, args) -> int:
    mode = PLAIN if cfg.mode == PLAIN else ATTESTED
    tb = _testbed(cfg, mode)
    if args.instance_id not in tb.host.guests:
        raise ConfigError(f"no instance {args.instance_id!r} in topology")
    # give the core something secret to hold: subscribers, concealed identities, UE contexts
    tb.udm.create_subscribers(args.ues, seed=cfg.seed)
    ues = spawn_ues(args.ues, cfg.seed, tb.home_pub, udm_rows=tb.udm.export_rows())
    registration_storm(ues, tb.amf)
    needles = [s for s in tb.secrets()] + [u.supi.encode() for u in ues] + [u.k for u in ues]
    snap = tb.host.host_read(args.instance_id)
    found = [n for n in needles if n in snap or n.hex().encode() in snap]
    guest = tb.host.guests[args.instance_id]
    print(f"{args.instance_id}: mode {mode}, memory {'encrypted' if guest.encrypted else 'plaintext'}, "
          f"{len(snap)} host-visible bytes, scanned for {len(needles)} secrets")
    if found:
        print(f"FOUND {len(found)} plaintext secrets in host_read snapshot")
    else:
        print("no plaintext secrets found")
    tb.shutdown()
    return EXIT_OK


def cmd_policy_check(cfg: CliConfig, args) -> int:
    path = Path(args.policy_file) if args.policy_file else cfg.policy_path or cfg.topology().policy_path
    try:
        policy = load_policy(path)
    except OSError as exc:
        raise ConfigError(f"cannot read policy {path}: {exc}") from exc
    problems = policy.violations()
    if problems:
        print(f"{path}: INVALID")
        for p in problems:
            print(f"  violation: {p}")
        return EXIT_CONFIG
    print(f"{path}: ok ({len(policy.allowlist)} measurements, ttl {policy.session_ttl_ms} ms, "
          f"max age {policy.max_attestation_age_ms} ms)")
    return EXIT_OK


def cmd_measure(cfg: CliConfig, args) -> int:
    if args.image:
        config = json.loads(args.launch_config) if args.launch_config else {}
        print(tee.measure(args.image.encode(), config).hex())
        return EXIT_OK
    for e in cfg.topology().nfs:
        print(f"{e.instance_id:<10} {e.measurement().hex()}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--topology", help="topology JSON (default: bundled demo)")
    common.add_argument("--policy", help="policy file overriding the topology's")
    common.add_argument("--mode", default=ATTESTED, choices=[PLAIN, ATTESTED, "both"])
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="bench-out", help="output directory")
    common.add_argument("--config", help="JSON config; its values override flags")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="confcore", description="Attested 5G core testbed")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("deploy", parents=[common], help="deploy the topology and print the fleet")
    b = sub.add_parser("bench", parents=[common], help="run benchmarks and write CSVs")
    b.add_argument("--kind", default="DbCreate", choices=[k.value for k in bench.Kind] + ["all"])
    b.add_argument("--sizes", default="100:1000:100")
    b.add_argument("--trials", type=int, default=30)
    b.add_argument("--warmup", type=int, default=bench.DEFAULT_WARMUP)
    a = sub.add_parser("attest", parents=[common], help="challenge one instance and verify its report")
    a.add_argument("instance_id")
    a.add_argument("--mutate", help="flip one report field before verification")
    i = sub.add_parser("inspect", parents=[common], help="scan a guest's host-visible memory for secrets")
    i.add_argument("instance_id")
    i.add_argument("--ues", type=int, default=5)
    pc = sub.add_parser("policy-check", parents=[common], help="validate a policy file")
    pc.add_argument("policy_file", nargs="?")
    m = sub.add_parser("measure", parents=[common], help="print launch measurements")
    m.add_argument("--image")
    m.add_argument("--launch-config", help="JSON launch config for --image")
    return p


COMMANDS = {"deploy": cmd_deploy, "bench": cmd_bench, "attest": cmd_attest, "inspect": cmd_inspect,
            "policy-check": cmd_policy_check, "measure": cmd_measure}


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "bench":
            parse_sizes(args.sizes)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, TopologyError, PolicyFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DeploymentError as exc:
        print(f"rejected at {exc.step.value}: {exc.detail}", file=sys.stderr)
        return EXIT_REJECTED
    except bench.BenchError as exc:
        print(f"benchmark failed: {exc}", file=sys.stderr)
        return EXIT_BENCH
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

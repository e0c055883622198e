"""Scenario files: INI text describing one simulated run.

    [cluster]
    name = demo            ; optional label echoed into reports
    n = 5
    f = 1
    protocol = RAFT        ; RAFT | HOTSTUFF_BASIC | HOTSTUFF_CHAINED
    duration = 8000        ; ticks (1 tick = 1 ms)
    seed = 42
    override_unsafe = off  ; allow configurations outside the fault bounds

    [channel]
    loss_prob = 0.05
    latency = uniform:3,9  ; or fixed:5
    bandwidth_cap = 8      ; sends per node per tick
    bandwidth.1 = 2000-3000:2      ; windowed cap override
    partition.1 = 1000-1500:0>1,1>0  ; directed links severed in [start,end)

    [workload]
    rate = 20              ; client commands per 1000 ticks
    start = 0
    stop = 0               ; 0 = run end

    [policy]               ; switch policy, all optional (defaults shown
    switching = on         ; in SwitchPolicy)
    detector = on
    byz_ratio_up = 0       ; 0 = 1/(3N)
    ...

    [monitor]
    probe_interval = 100
    report_interval = 200
    alpha = 0.2

    [protocol.raft]
    election_timeout_min = 150
    election_timeout_max = 300
    heartbeat_interval = 50

    [protocol.hotstuff]
    view_timeout = 400
    backoff_cap = 8

    [faults]
    node.2 = crash@1000-2500
    node.3 = byz_equivocate@500
    node.4 = byz_fraud_switch@0:report_latency=800

    [switches]
    manual.1 = 2000:HOTSTUFF_BASIC:0   ; tick:target[:initiator]

Validation failures are reported as "section.key: message" lines.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .faults import FaultPlan, FaultSpec, BYZ_KINDS, CRASH
from .hotstuff import HotstuffConfig
from .ledger import ProtocolMode
from .raft import RaftConfig
from .simcore import BandwidthWindow, ChannelConfig, Partition
from .switching import SwitchPolicy


class ScenarioError(Exception):
    def __init__(self, errors: list[str]) -> None:
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class Scenario:
    name: str = "scenario"
    n: int = 5
    f: int = 1
    protocol: ProtocolMode = ProtocolMode.RAFT
    duration: int = 8000
    seed: int = 42
    override_unsafe: bool = False
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    workload_rate: float = 20.0
    workload_start: int = 0
    workload_stop: int = 0          # 0 = duration
    policy: SwitchPolicy = field(default_factory=SwitchPolicy)
    probe_interval: int = 100
    report_interval: int = 200
    alpha: float = 0.2
    raft_cfg: RaftConfig = field(default_factory=RaftConfig)
    hs_cfg: HotstuffConfig = field(default_factory=HotstuffConfig)
    faults: FaultPlan = field(default_factory=FaultPlan)
    manual_switches: list[tuple[int, ProtocolMode, int]] = field(default_factory=list)

    def validate(self) -> list[str]:
        errs = []
        if self.n < 1:
            errs.append("cluster.n: must be >= 1")
        if self.f < 0:
            errs.append("cluster.f: must be >= 0")
        if self.duration < 1:
            errs.append("cluster.duration: must be >= 1")
        bft_possible = self.protocol.is_bft or self.policy.enabled
        if bft_possible and self.n < 3 * self.f + 1 and not self.override_unsafe:
            errs.append(f"cluster.f: n={self.n} cannot tolerate f={self.f} "
                        "Byzantine nodes (need n >= 3f+1)")
        errs.extend("channel." + e for e in self.channel.validate())
        if self.workload_rate < 0:
            errs.append("workload.rate: must be >= 0")
        if self.workload_start < 0:
            errs.append("workload.start: must be >= 0")
        stop = self.workload_stop or self.duration
        if stop < self.workload_start:
            errs.append("workload.stop: before workload.start")
        errs.extend("policy." + e for e in self.policy.validate())
        if self.probe_interval < 1 or self.report_interval < 1:
            errs.append("monitor.probe_interval: intervals must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            errs.append("monitor.alpha: must be in (0, 1]")
        errs.extend("faults.node: " + e for e in self.faults.validate(self.n))
        if not self.override_unsafe:
            byz = len(self.faults.byz_nodes())
            if byz > self.f:
                errs.append(f"faults.node: {byz} Byzantine nodes exceed f={self.f}")
            crashes = len(self.faults.crash_nodes())
            if self.n > 1 and crashes > (self.n - 1) // 2:
                errs.append(f"faults.node: {crashes} crashes break the "
                            f"majority of {self.n}")
        for i, (tick, _target, initiator) in enumerate(self.manual_switches, 1):
            if not 0 <= tick < self.duration:
                errs.append(f"switches.manual.{i}: tick {tick} outside the run")
            if not 0 <= initiator < self.n:
                errs.append(f"switches.manual.{i}: initiator {initiator} out of range")
        return errs

    def resolved_policy(self) -> SwitchPolicy:
        return self.policy.resolved(self.n)


_LATENCY_HELP = "expected fixed:K or uniform:A,B"


def _parse_latency(val: str) -> tuple[int, int]:
    kind, _, rest = val.partition(":")
    if kind == "fixed":
        k = int(rest)
        return (k, k)
    if kind == "uniform":
        a, b = rest.split(",")
        return (int(a), int(b))
    raise ValueError(_LATENCY_HELP)


def _parse_span(val: str) -> tuple[int, int]:
    a, _, b = val.partition("-")
    return (int(a), int(b))


def _parse_fault(node: int, val: str) -> FaultSpec:
    head, _, param_str = val.partition(":")
    kind, _, window = head.partition("@")
    kind = kind.strip()
    if not window:
        raise ValueError("expected kind@start[-end][:k=v,...]")
    if "-" in window:
        start, end = _parse_span(window)
    else:
        start, end = int(window), None
    params = {}
    if param_str:
        for pair in param_str.split(","):
            k, _, v = pair.partition("=")
            params[k.strip()] = float(v)
    return FaultSpec(node, kind, start, end, params)


def _parse_manual(val: str) -> tuple[int, ProtocolMode, int]:
    parts = val.split(":")
    if len(parts) not in (2, 3):
        raise ValueError("expected tick:TARGET[:initiator]")
    tick = int(parts[0])
    target = ProtocolMode(parts[1].strip())
    initiator = int(parts[2]) if len(parts) == 3 else 0
    return (tick, target, initiator)


_BOOL = {"on": True, "true": True, "yes": True, "1": True,
         "off": False, "false": False, "no": False, "0": False}


def _parse_bool(val: str) -> bool:
    try:
        return _BOOL[val.strip().lower()]
    except KeyError:
        raise ValueError("expected on/off") from None


_POLICY_FLOAT_KEYS = ("byz_ratio_up", "latency_req", "bandwidth_min", "z_thresh",
                      "chained_up", "chained_down")
_POLICY_INT_KEYS = ("byz_clear_window", "evidence_horizon", "cooldown",
                    "max_switch_rate", "rate_window", "switch_timeout",
                    "decide_interval", "report_staleness", "min_view_samples",
                    "commit_retx_delay")

# exact keys and accepted key prefixes per section; anything else is a typo
# and gets rejected rather than silently ignored
_KNOWN_KEYS: dict[str, tuple[frozenset[str], tuple[str, ...]]] = {
    "cluster": (frozenset({"name", "n", "f", "protocol", "duration", "seed",
                           "override_unsafe"}), ()),
    "channel": (frozenset({"loss_prob", "latency", "bandwidth_cap"}),
                ("bandwidth.", "partition.")),
    "workload": (frozenset({"rate", "start", "stop"}), ()),
    "policy": (frozenset({"switching", "detector", *_POLICY_FLOAT_KEYS,
                          *_POLICY_INT_KEYS}), ()),
    "monitor": (frozenset({"probe_interval", "report_interval", "alpha"}), ()),
    "protocol.raft": (frozenset({"election_timeout_min", "election_timeout_max",
                                 "heartbeat_interval"}), ()),
    "protocol.hotstuff": (frozenset({"view_timeout", "backoff_cap",
                                     "decide_retransmit_delay"}), ()),
    "faults": (frozenset(), ("node.",)),
    "switches": (frozenset(), ("manual.",)),
}


def parse_scenario(text: str) -> Scenario:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ScenarioError([f"parse: {e}"]) from None

    errs: list[str] = []
    sc = Scenario()

    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            errs.append(f"{section}: unrecognized section")
            continue
        exact, prefixes = _KNOWN_KEYS[section]
        for key in cp.options(section):
            if key not in exact and not key.startswith(prefixes):
                errs.append(f"{section}.{key}: unrecognized key")

    def take(section: str, key: str, conv, setter) -> None:
        if cp.has_option(section, key):
            raw = cp.get(section, key)
            try:
                setter(conv(raw))
            except (ValueError, KeyError) as e:
                errs.append(f"{section}.{key}: {e}")

    take("cluster", "name", str, lambda v: setattr(sc, "name", v))
    take("cluster", "n", int, lambda v: setattr(sc, "n", v))
    take("cluster", "f", int, lambda v: setattr(sc, "f", v))
    take("cluster", "protocol", lambda v: ProtocolMode(v.strip()),
         lambda v: setattr(sc, "protocol", v))
    take("cluster", "duration", int, lambda v: setattr(sc, "duration", v))
    take("cluster", "seed", int, lambda v: setattr(sc, "seed", v))
    take("cluster", "override_unsafe", _parse_bool,
         lambda v: setattr(sc, "override_unsafe", v))

    ch: dict = {}
    take("channel", "loss_prob", float, lambda v: ch.__setitem__("loss_prob", v))
    take("channel", "latency", _parse_latency,
         lambda v: (ch.__setitem__("latency_min", v[0]),
                    ch.__setitem__("latency_max", v[1])))
    take("channel", "bandwidth_cap", int, lambda v: ch.__setitem__("bandwidth_cap", v))
    windows = []
    partitions = []
    if cp.has_section("channel"):
        for key in sorted(cp.options("channel")):
            raw = cp.get("channel", key)
            if key.startswith("bandwidth."):
                try:
                    span, _, cap = raw.partition(":")
                    start, end = _parse_span(span)
                    windows.append(BandwidthWindow(start, end, int(cap)))
                except ValueError as e:
                    errs.append(f"channel.{key}: {e}")
            elif key.startswith("partition."):
                try:
                    span, _, link_str = raw.partition(":")
                    start, end = _parse_span(span)
                    links = []
                    for link in link_str.split(","):
                        a, _, b = link.partition(">")
                        links.append((int(a), int(b)))
                    partitions.append(Partition(start, end, tuple(links)))
                except ValueError as e:
                    errs.append(f"channel.{key}: {e}")
    if windows:
        ch["bandwidth_windows"] = tuple(windows)
    if partitions:
        ch["partitions"] = tuple(partitions)
    sc.channel = replace(sc.channel, **ch)

    take("workload", "rate", float, lambda v: setattr(sc, "workload_rate", v))
    take("workload", "start", int, lambda v: setattr(sc, "workload_start", v))
    take("workload", "stop", int, lambda v: setattr(sc, "workload_stop", v))

    pol: dict = {}
    bool_keys = {"switching": "enabled", "detector": "detector"}
    for key, attr in bool_keys.items():
        take("policy", key, _parse_bool, lambda v, a=attr: pol.__setitem__(a, v))
    for key in _POLICY_FLOAT_KEYS:
        take("policy", key, float, lambda v, a=key: pol.__setitem__(a, v))
    for key in _POLICY_INT_KEYS:
        take("policy", key, int, lambda v, a=key: pol.__setitem__(a, v))
    sc.policy = replace(sc.policy, **pol)

    take("monitor", "probe_interval", int, lambda v: setattr(sc, "probe_interval", v))
    take("monitor", "report_interval", int, lambda v: setattr(sc, "report_interval", v))
    take("monitor", "alpha", float, lambda v: setattr(sc, "alpha", v))

    rc: dict = {}
    for key in ("election_timeout_min", "election_timeout_max", "heartbeat_interval"):
        take("protocol.raft", key, int, lambda v, a=key: rc.__setitem__(a, v))
    sc.raft_cfg = replace(sc.raft_cfg, **rc)

    hc: dict = {}
    for key in ("view_timeout", "backoff_cap", "decide_retransmit_delay"):
        take("protocol.hotstuff", key, int, lambda v, a=key: hc.__setitem__(a, v))
    sc.hs_cfg = replace(sc.hs_cfg, **hc)

    if cp.has_section("faults"):
        for key in sorted(cp.options("faults")):
            if not key.startswith("node."):
                continue  # already flagged as unrecognized
            try:
                node = int(key.split(".", 1)[1])
                sc.faults.specs.append(_parse_fault(node, cp.get("faults", key)))
            except ValueError as e:
                errs.append(f"faults.{key}: {e}")

    if cp.has_section("switches"):
        for key in sorted(cp.options("switches")):
            try:
                sc.manual_switches.append(_parse_manual(cp.get("switches", key)))
            except ValueError as e:
                errs.append(f"switches.{key}: {e}")
    sc.manual_switches.sort(key=lambda m: m[0])

    if errs:
        raise ScenarioError(errs)
    errs = sc.validate()
    if errs:
        raise ScenarioError(errs)
    return sc


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


_SECTIONS = ("protocol.raft", "protocol.hotstuff", "cluster", "channel",
             "workload", "policy", "monitor", "faults", "switches")


def apply_overrides(sc_text: str, overrides: dict[str, str]) -> str:
    """Apply ``section.key=value`` overrides to scenario text, returning new
    text (so the override path reuses the normal parser and validation)."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(sc_text)
    for dotted, value in overrides.items():
        for section in _SECTIONS:
            if dotted.startswith(section + "."):
                key = dotted[len(section) + 1:]
                break
        else:
            raise ScenarioError([f"override {dotted!r}: unknown section"])
        if not key:
            raise ScenarioError([f"override {dotted!r}: expected section.key=value"])
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, value)
    out = []
    for section in cp.sections():
        out.append(f"[{section}]")
        for key, val in cp.items(section):
            out.append(f"{key} = {val}")
        out.append("")
    return "\n".join(out)


def to_text(sc: Scenario) -> str:
    """Render a scenario back to INI text (round-trips through the parser)."""
    lines = [
        "[cluster]",
        f"name = {sc.name}",
        f"n = {sc.n}",
        f"f = {sc.f}",
        f"protocol = {sc.protocol.value}",
        f"duration = {sc.duration}",
        f"seed = {sc.seed}",
        f"override_unsafe = {'on' if sc.override_unsafe else 'off'}",
        "",
        "[channel]",
        f"loss_prob = {sc.channel.loss_prob}",
    ]
    if sc.channel.latency_min == sc.channel.latency_max:
        lines.append(f"latency = fixed:{sc.channel.latency_min}")
    else:
        lines.append(f"latency = uniform:{sc.channel.latency_min},{sc.channel.latency_max}")
    lines.append(f"bandwidth_cap = {sc.channel.bandwidth_cap}")
    for i, w in enumerate(sc.channel.bandwidth_windows, 1):
        lines.append(f"bandwidth.{i} = {w.start}-{w.end}:{w.cap}")
    for i, p in enumerate(sc.channel.partitions, 1):
        links = ",".join(f"{a}>{b}" for a, b in p.links)
        lines.append(f"partition.{i} = {p.start}-{p.end}:{links}")
    lines += [
        "",
        "[workload]",
        f"rate = {sc.workload_rate}",
        f"start = {sc.workload_start}",
        f"stop = {sc.workload_stop}",
        "",
        "[policy]",
        f"switching = {'on' if sc.policy.enabled else 'off'}",
        f"detector = {'on' if sc.policy.detector else 'off'}",
    ]
    defaults = SwitchPolicy()
    for fld in fields(SwitchPolicy):
        if fld.name in ("enabled", "detector"):
            continue
        val = getattr(sc.policy, fld.name)
        if val != getattr(defaults, fld.name):
            lines.append(f"{fld.name} = {val}")
    lines += [
        "",
        "[monitor]",
        f"probe_interval = {sc.probe_interval}",
        f"report_interval = {sc.report_interval}",
        f"alpha = {sc.alpha}",
        "",
        "[protocol.raft]",
        f"election_timeout_min = {sc.raft_cfg.election_timeout_min}",
        f"election_timeout_max = {sc.raft_cfg.election_timeout_max}",
        f"heartbeat_interval = {sc.raft_cfg.heartbeat_interval}",
        "",
        "[protocol.hotstuff]",
        f"view_timeout = {sc.hs_cfg.view_timeout}",
        f"backoff_cap = {sc.hs_cfg.backoff_cap}",
    ]
    if sc.faults.specs:
        lines += ["", "[faults]"]
        for spec in sc.faults.specs:
            window = f"{spec.start}" if spec.end is None else f"{spec.start}-{spec.end}"
            param_str = ""
            if spec.params:
                param_str = ":" + ",".join(
                    f"{k}={spec.params[k]}" for k in sorted(spec.params))
            lines.append(f"node.{spec.node} = {spec.kind}@{window}{param_str}")
    if sc.manual_switches:
        lines += ["", "[switches]"]
        for i, (tick, target, initiator) in enumerate(sc.manual_switches, 1):
            lines.append(f"manual.{i} = {tick}:{target.value}:{initiator}")
    lines.append("")
    return "\n".join(lines)

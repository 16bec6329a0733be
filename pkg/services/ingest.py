import logging
import re
from dataclasses import dataclass, field
from typing import Iterable

from pydantic import ValidationError

from errors import StreamReadError
from models import Graph, Node, NodeKind
from schemas import AuditEvent, FileRef, IocRule, ProcessRef, RegistryRef, SocketRef, SubjectRef

logger = logging.getLogger(__name__)


@dataclass
class ParseResult:
    events: list[AuditEvent] = field(default_factory=list)
    skipped: int = 0


def parse_events(stream: Iterable[str | bytes]) -> ParseResult:
    """
    **Event Stream Parser**

    Reads line-delimited JSON, one `AuditEvent` per line, keeping input order.
    Byte lines are decoded as UTF-8 one at a time. Blank lines are ignored.
    Malformed lines (invalid UTF-8, bad JSON, schema violations, an illegal
    relation for the object kind) are skipped and counted, since long traces
    routinely contain truncated records.

    **Raises:** `StreamReadError` if the stream itself cannot be read.
    """
    result = ParseResult()
    try:
        for line_no, line in enumerate(stream, start=1):
            try:
                text = line.decode("utf-8") if isinstance(line, bytes) else line
            except UnicodeDecodeError as exc:
                result.skipped += 1
                logger.debug(f"Skipping line {line_no}: {exc.reason}")
                continue
            if not text.strip():
                continue
            try:
                result.events.append(AuditEvent.model_validate_json(text))
            except ValidationError as exc:
                result.skipped += 1
                logger.debug(f"Skipping line {line_no}: {exc.errors()[0].get('msg')}")
    except (OSError, UnicodeDecodeError) as exc:
        raise StreamReadError(f"events: unreadable stream ({exc})") from exc

    if result.skipped:
        logger.warning(f"Skipped {result.skipped} malformed event line(s)")
    return result


# --- ENTITY IDENTITY ---
def _process_node(ref: SubjectRef) -> Node:
    # pid + name: an exec that renames the process yields a new node
    return Node(
        id=f"proc:{ref.pid}:{ref.name.lower()}",
        kind=NodeKind.PROCESS,
        attrs={"name": ref.name, "args": ref.args},
    )


def _object_node(ref: ProcessRef | FileRef | SocketRef | RegistryRef) -> Node:
    if isinstance(ref, ProcessRef):
        return _process_node(ref)
    if isinstance(ref, FileRef):
        return Node(id=f"file:{ref.file_name.lower()}", kind=NodeKind.FILE, attrs={"file_name": ref.file_name})
    if isinstance(ref, SocketRef):
        attrs = {
            "src_ip": ref.src_ip,
            "dst_ip": ref.dst_ip,
            "src_port": str(ref.src_port),
            "dst_port": str(ref.dst_port),
        }
        key = f"{ref.src_ip}:{ref.src_port}->{ref.dst_ip}:{ref.dst_port}".lower()
        return Node(id=f"sock:{key}", kind=NodeKind.SOCKET, attrs=attrs)
    return Node(id=f"reg:{ref.key_name.lower()}", kind=NodeKind.REGISTRY, attrs={"key_name": ref.key_name})


def build_graph(events: Iterable[AuditEvent]) -> Graph:
    """
    **Provenance Graph Builder**

    One node per distinct entity and one edge per event, in event order. Node
    ids are derived from the entity keys, so the output is a pure function of
    the event list. The first occurrence of an entity fixes its attributes.
    """
    graph = Graph()
    for event in events:
        subject = _process_node(event.subject)
        obj = _object_node(event.obj)
        for node in (subject, obj):
            if node.id not in graph:
                graph.add_node(node)
        graph.add_edge(subject.id, obj.id, event.relation, event.ts)
    logger.info(f"Built provenance graph: {len(graph)} nodes, {graph.edge_count} edges")
    return graph


# --- IOC MATCHING ---
def compile_rules(rules: Iterable[IocRule]) -> list[tuple[IocRule, re.Pattern[str]]]:
    return [(rule, re.compile(rule.pattern, re.IGNORECASE)) for rule in rules]


def rule_matches(node: Node, rule: IocRule, pattern: re.Pattern[str]) -> bool:
    value = node.attrs.get(rule.target_attr)
    return value is not None and pattern.search(value) is not None


def mark_suspicious(graph: Graph, rules: Iterable[IocRule]) -> int:
    """
    **IOC Matcher**

    Flags every node whose attributes match any rule and records the rule's
    `ioc_id`. Edges touching a flagged node count as suspicious events further
    down the pipeline. Idempotent.

    **Returns:** number of nodes matching at least one rule.
    """
    compiled = compile_rules(rules)
    flagged = 0
    for node in graph.nodes:
        hits = [rule.ioc_id for rule, pattern in compiled if rule_matches(node, rule, pattern)]
        for ioc_id in hits:
            node.flag(ioc_id)
        if hits:
            flagged += 1
    logger.info(f"IOC matching flagged {flagged} node(s) using {len(compiled)} rule(s)")
    return flagged


def matched_nodes(graph: Graph) -> dict[str, set[str]]:
    """ ioc_id -> ids of nodes carrying it """
    matches: dict[str, set[str]] = {}
    for node in graph.nodes:
        for ioc_id in node.matched_iocs:
            matches.setdefault(ioc_id, set()).add(node.id)
    return matches

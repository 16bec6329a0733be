import logging
from pathlib import Path
from typing import TypeVar

from pydantic import BaseModel, ValidationError

from errors import MissingFileError, SchemaError
from models import Graph, Node
from schemas import EdgeRecord, GraphFile, IocRule, IocRuleList, NodeRecord, SampleFile

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)


def describe_validation_error(exc: ValidationError) -> str:
    """ First failing field of a pydantic error, as a one-line diagnostic. """
    first = exc.errors()[0]
    location = ".".join(str(part) for part in first.get("loc", ())) or "document"
    return f"{location}: {first.get('msg', 'invalid value')}"


def read_text(path: Path) -> str:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: file not found")
    return path.read_text(encoding="utf-8")


def read_model(path: Path, model: type[M]) -> M:
    """ Read and validate one JSON document. """
    text = read_text(path)
    try:
        return model.model_validate_json(text)
    except ValidationError as exc:
        raise SchemaError(f"{path}: {describe_validation_error(exc)}") from exc


def write_model(path: Path, document: BaseModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(document.model_dump_json(indent=1) + "\n", encoding="utf-8")
    return path


# --- GRAPHS ---
def graph_to_file(graph: Graph) -> GraphFile:
    return GraphFile(
        nodes=[
            NodeRecord(
                id=node.id,
                kind=node.kind,
                attrs=dict(node.attrs),
                suspicious=node.suspicious,
                matched_iocs=sorted(node.matched_iocs),
            )
            for node in graph.nodes
        ],
        edges=[
            EdgeRecord(src=edge.src, dst=edge.dst, rel=edge.relation, ts=edge.ts)
            for edge in graph.edges
        ],
    )


def graph_from_file(document: GraphFile) -> Graph:
    graph = Graph()
    for record in document.nodes:
        graph.add_node(
            Node(
                id=record.id,
                kind=record.kind,
                attrs=dict(record.attrs),
                suspicious=record.suspicious,
                matched_iocs=set(record.matched_iocs),
            )
        )
    for record in document.edges:
        graph.add_edge(record.src, record.dst, record.rel, record.ts)
    return graph


def load_graph(path: Path) -> Graph:
    return graph_from_file(read_model(path, GraphFile))


def save_graph(path: Path, graph: Graph) -> Path:
    return write_model(path, graph_to_file(graph))


# --- RULES ---
def load_rules(path: Path) -> list[IocRule]:
    text = read_text(path)
    try:
        return IocRuleList.validate_json(text)
    except ValidationError as exc:
        raise SchemaError(f"{path}: {describe_validation_error(exc)}") from exc


def save_rules(path: Path, rules: list[IocRule]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(IocRuleList.dump_json(rules, indent=1) + b"\n")
    return path


# --- DATASETS ---
def load_samples(directory: Path) -> list[tuple[str, SampleFile]]:
    """ All `*.json` samples of a dataset directory, in file-name order. """
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFileError(f"{directory}: directory not found")
    samples = [(path.name, read_model(path, SampleFile)) for path in sorted(directory.glob("*.json"))]
    logger.info(f"Loaded {len(samples)} samples from {directory}")
    return samples

import re
from typing import Annotated, Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, field_validator, model_validator

from models import ALL_ATTRIBUTE_KEYS, LEGAL_RELATIONS, NodeKind, Relation


# --- GRAPH FILE ---
class NodeRecord(BaseModel):
    id: str
    kind: NodeKind
    attrs: dict[str, Optional[str]] = Field(default_factory=dict)
    suspicious: bool = False
    matched_iocs: list[str] = Field(default_factory=list)


class EdgeRecord(BaseModel):
    src: str
    dst: str
    rel: Relation
    ts: Optional[int] = None


class GraphFile(BaseModel):
    """ Graph JSON shared by provenance graphs, subgraphs and query graphs """
    nodes: list[NodeRecord] = Field(default_factory=list)
    edges: list[EdgeRecord] = Field(default_factory=list)


# --- AUDIT EVENTS ---
class SubjectRef(BaseModel):
    pid: int
    name: str
    args: Optional[str] = None


class ProcessRef(SubjectRef):
    type: Literal["process"] = "process"


class FileRef(BaseModel):
    type: Literal["file"] = "file"
    file_name: str


class SocketRef(BaseModel):
    type: Literal["socket"] = "socket"
    src_ip: str
    dst_ip: str
    src_port: Union[int, str]
    dst_port: Union[int, str]


class RegistryRef(BaseModel):
    type: Literal["registry"] = "registry"
    key_name: str


ObjectRef = Annotated[
    Union[ProcessRef, FileRef, SocketRef, RegistryRef], Field(discriminator="type")
]


class AuditEvent(BaseModel):
    """ One line of the event JSONL stream """
    model_config = ConfigDict(populate_by_name=True)

    ts: int
    relation: Relation
    subject: SubjectRef
    obj: ObjectRef = Field(alias="object")

    @model_validator(mode="after")
    def check_relation(self) -> "AuditEvent":
        kind = NodeKind(self.obj.type)
        if self.relation not in LEGAL_RELATIONS[kind]:
            raise ValueError(f"relation {self.relation.value} is not legal for a {kind.value} object")
        return self


# --- IOC RULES ---
class IocRule(BaseModel):
    """ Regular expression over one node attribute """
    ioc_id: str = Field(min_length=1)
    target_attr: str
    pattern: str

    @field_validator("target_attr")
    @classmethod
    def check_target(cls, value: str) -> str:
        if value not in ALL_ATTRIBUTE_KEYS:
            raise ValueError(f"'{value}' is not an attribute key")
        return value

    @field_validator("pattern")
    @classmethod
    def check_pattern(cls, value: str) -> str:
        try:
            re.compile(value)
        except re.error as exc:
            raise ValueError(f"pattern does not compile: {exc}") from exc
        return value


IocRuleList = TypeAdapter(list[IocRule])


# --- EMBEDDINGS / CHECKPOINTS ---
class EmbeddingManifest(BaseModel):
    d_w: int
    vocab: list[str]
    vectors: list[float]    # row-major |V| x d_w

    @model_validator(mode="after")
    def check_shape(self) -> "EmbeddingManifest":
        if len(self.vectors) != len(self.vocab) * self.d_w:
            raise ValueError("vectors length must equal len(vocab) * d_w")
        return self


class TensorRecord(BaseModel):
    name: str
    shape: list[int]
    data: list[float]


class CheckpointManifest(BaseModel):
    config: dict[str, Any]
    tensors: list[TensorRecord]
    history: list[dict[str, Optional[float]]] = Field(default_factory=list)
    embedding: Optional[EmbeddingManifest] = None   # table the model was trained against


# --- DATASET ---
class SampleFile(BaseModel):
    prov: GraphFile
    query: GraphFile
    label: Literal[0, 1]
    note: dict[str, Any] = Field(default_factory=dict)


# --- REPORTS ---
class SuspGraphEntry(BaseModel):
    file: str
    nodes: int
    edges: int
    covered_iocs: list[str]
    uncovered_iocs: list[str]
    seed_trace: list[str]


class CoverageReport(BaseModel):
    indicators: list[str]
    matched_counts: dict[str, int]
    seeds: list[str]
    subgraphs: list[SuspGraphEntry]


class InconsistencyScore(BaseModel):
    missing_node_count: int
    missing_node_ratio: float = Field(ge=0.0, le=1.0)
    missing_path_count: int
    missing_path_ratio: float = Field(ge=0.0, le=1.0)
    ged_raw: float
    ged_norm: float = Field(ge=0.0, le=1.0)
    ged_approximate: bool = False


class MatchResult(BaseModel):
    score: float
    verdict: Literal["match", "no-match"]


class PairResult(BaseModel):
    sample: str
    label: int
    score: float
    verdict: Literal["match", "no-match"]
    wl_best: Optional[float] = None


class EvalReport(BaseModel):
    model_auc: float
    model_false_positives: int
    threshold: float
    wl_auc_best: Optional[float] = None
    wl_best_iterations: Optional[int] = None
    wl_auc_by_iterations: dict[int, float] = Field(default_factory=dict)
    per_pair: list[PairResult]


class HuntEntry(BaseModel):
    rank: int
    index: int
    score: float
    verdict: Literal["match", "no-match"]
    nodes: int
    edges: int
    covered_iocs: list[str]
    uncovered_iocs: list[str]


class HuntReport(BaseModel):
    query: str
    threshold: float
    entries: list[HuntEntry]

import numpy as np
import pytest

from config import ModelConfig
from models import Graph, Node, NodeKind
from services.embed import EmbeddingTable, node_tokens


def make_graph(nodes, edges) -> Graph:
    """ nodes: (id, kind, attrs) triples; edges: (src, dst, relation) triples """
    graph = Graph()
    for node_id, kind, attrs in nodes:
        graph.add_node(Node(id=node_id, kind=NodeKind(kind), attrs=attrs))
    for src, dst, rel in edges:
        graph.add_edge(src, dst, rel)
    return graph


def random_table(graphs, d_w: int = 8, seed: int = 0) -> EmbeddingTable:
    tokens = sorted({token for graph in graphs for node in graph.nodes for token in node_tokens(node)})
    vectors = np.random.default_rng(seed).normal(size=(len(tokens), d_w))
    return EmbeddingTable(vocab={token: i for i, token in enumerate(tokens)}, vectors=vectors)


@pytest.fixture
def chain_graph() -> Graph:
    """ word.exe reads a doc, forks ps.exe, which writes a dropped binary """
    return make_graph(
        [
            ("p1", "process", {"name": "word.exe", "args": "/n doc.docm"}),
            ("f1", "file", {"file_name": "c:\\users\\bob\\doc.docm"}),
            ("p2", "process", {"name": "ps.exe", "args": "-enc abc"}),
            ("f2", "file", {"file_name": "c:\\users\\public\\minner.exe"}),
        ],
        [("p1", "f1", "read"), ("p1", "p2", "fork"), ("p2", "f2", "write")],
    )


@pytest.fixture
def attack_graph() -> Graph:
    """ Two process trees with no shared ancestry, plus benign neighbours """
    return make_graph(
        [
            ("p1", "process", {"name": "winword.exe"}),
            ("p2", "process", {"name": "powershell.exe"}),
            ("f1", "file", {"file_name": "c:\\users\\public\\minner.exe"}),
            ("s1", "socket", {"src_ip": "10.0.0.2", "dst_ip": "203.0.113.50", "src_port": "50123", "dst_port": "8080"}),
            ("f9", "file", {"file_name": "c:\\windows\\system32\\kernel32.dll"}),
            ("p3", "process", {"name": "taskeng.exe"}),
            ("p4", "process", {"name": "minner.exe"}),
            ("r1", "registry", {"key_name": "hkcu\\software\\microsoft\\windows\\currentversion\\run\\minner"}),
            ("f8", "file", {"file_name": "c:\\windows\\temp\\log.txt"}),
        ],
        [
            ("p1", "p2", "fork"),
            ("p2", "s1", "recv"),
            ("p2", "f1", "write"),
            ("p2", "f9", "read"),
            ("p3", "p4", "fork"),
            ("p4", "r1", "regwrite"),
            ("p4", "f8", "write"),
        ],
    )


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        input_dim=8, hidden_dim=8, attention_dim=4, prov_layers=2, query_layers=2, ntn_slices=4, head_hidden=4
    )

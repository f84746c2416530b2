"""Aggregate evaluation episodes into a tree of acquired-view sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from viewacq.metrics import balanced_accuracy
from viewacq.synthstudy import ef_category_of

Node = tuple  # sorted tuple of acquired view indices


@dataclass
class NodeStats:
    reaching: int = 0
    terminating: int = 0
    bacc_as: float | None = None
    bacc_ef: float | None = None


@dataclass
class PathwayTree:
    n_views: int
    n_studies: int
    nodes: dict = field(default_factory=dict)  # Node -> NodeStats
    edges: dict = field(default_factory=dict)  # (Node, view) -> count

    def children(self, node: Node) -> dict:
        return {v: c for (p, v), c in self.edges.items() if p == node}

    def check_flow(self) -> list[str]:
        """Violations of reaching = terminating + outgoing and of the terminal partition; empty if sound."""
        errors = []
        for node, st in self.nodes.items():
            out = sum(self.children(node).values())
            if st.reaching != st.terminating + out:
                errors.append(f"{node}: reaching {st.reaching} != {st.terminating} + {out}")
        for (p, v), c in self.edges.items():
            if c > self.nodes[p].reaching:
                errors.append(f"edge {p}+{v}: {c} exceeds parent reaching {self.nodes[p].reaching}")
        total = sum(st.terminating for st in self.nodes.values())
        if total != self.n_studies:
            errors.append(f"terminating counts sum to {total}, expected {self.n_studies}")
        return errors

    def to_dict(self, view_names=None) -> dict:
        names = view_names or [f"view{i}" for i in range(self.n_views)]
        order = sorted(self.nodes, key=lambda s: (len(s), s))
        return {
            "n_views": self.n_views,
            "n_studies": self.n_studies,
            "view_names": list(names),
            "nodes": [{"views": list(s), "reaching": self.nodes[s].reaching,
                       "terminating": self.nodes[s].terminating,
                       "bacc_as": self.nodes[s].bacc_as, "bacc_ef": self.nodes[s].bacc_ef} for s in order],
            "edges": [{"parent": list(p), "view": v, "count": c}
                      for (p, v), c in sorted(self.edges.items(), key=lambda e: (len(e[0][0]), e[0]))],
        }

    def to_json(self, view_names=None) -> str:
        return json.dumps(self.to_dict(view_names), indent=1)

    def to_dot(self, view_names=None, min_count: int = 1) -> str:
        names = view_names or [f"view{i}" for i in range(self.n_views)]

        def nid(s):
            return "n_" + ("_".join(map(str, s)) or "root")

        def label(s):
            st = self.nodes[s]
            head = "+".join(names[v] for v in s) or "start"
            lines = [head, f"reach {st.reaching}", f"stop {st.terminating}"]
            if st.bacc_as is not None:
                lines.append(f"AS {100 * st.bacc_as:.1f} EF {100 * st.bacc_ef:.1f}")
            return "\\n".join(lines)

        out = ["digraph pathways {", "  rankdir=TB;", "  node [shape=box];"]
        for s in sorted(self.nodes, key=lambda s: (len(s), s)):
            if self.nodes[s].reaching >= min_count:
                out.append(f'  {nid(s)} [label="{label(s)}"];')
        for (p, v), c in sorted(self.edges.items(), key=lambda e: (len(e[0][0]), e[0])):
            if c >= min_count:
                child = tuple(sorted(p + (v,)))
                out.append(f'  {nid(p)} -> {nid(child)} [label="{names[v]} ({c})"];')
        out.append("}")
        return "\n".join(out) + "\n"


def build_pathway_tree(traces, n_as_classes: int = 3) -> PathwayTree:
    """Nodes are unordered view sets; edges keep the view added at each step."""
    if not traces:
        raise ValueError("no traces")
    n_views = traces[0].n_views
    tree = PathwayTree(n_views, len(traces))
    finals: dict = {}
    for tr in traces:
        node: Node = ()
        tree.nodes.setdefault(node, NodeStats()).reaching += 1
        for v in tr.acquired:
            tree.edges[(node, v)] = tree.edges.get((node, v), 0) + 1
            node = tuple(sorted(node + (v,)))
            tree.nodes.setdefault(node, NodeStats()).reaching += 1
        tree.nodes[node].terminating += 1
        finals.setdefault(node, []).append(tr)
    for node, group in finals.items():
        pa = np.array([t.pred_as for t in group])
        pe = np.array([t.pred_ef for t in group])
        ya = np.array([t.y_as_class for t in group])
        ye = ef_category_of(np.array([t.y_ef for t in group]))
        tree.nodes[node].bacc_as = balanced_accuracy(pa, ya, n_as_classes)
        tree.nodes[node].bacc_ef = balanced_accuracy(pe, ye, 3)
    return tree

"""
Rooted phylogenetic tree with branch lengths
"""
import numpy as np

from utils.errors import DomainError, SchemaError


class PhyloTree:
    """
    Rooted tree stored as parallel arrays in pre-order.

    Node 0 is the root. A node's parent always precedes it, so a reversed
    index scan is a valid post-order.

    Args:
        parents (sequence of int): Parent index per node, -1 for the root
        lengths (sequence of float): Branch length above each node (root's is ignored)
        labels (sequence of str or None): Node labels; every leaf must have one
    """
    def __init__(self, parents, lengths, labels):
        self.parents = np.array(parents, dtype=int)
        self.lengths = np.array(lengths, dtype=float)
        self.labels = tuple(None if label is None else str(label) for label in labels)
        count = len(self.parents)
        if count == 0 or len(self.lengths) != count or len(self.labels) != count:
            raise DomainError("Tree arrays must be non-empty and of equal length")
        if self.parents[0] != -1 or np.sum(self.parents == -1) != 1:
            raise DomainError("Tree must have exactly one root at index 0")
        if np.any(self.parents[1:] >= np.arange(1, count)):
            raise DomainError("Nodes must be stored in pre-order")
        self.lengths[0] = 0.0
        if not np.all(np.isfinite(self.lengths)) or np.any(self.lengths < 0):
            raise DomainError("Branch lengths must be finite and nonnegative")
        self.lengths.setflags(write=False)
        self.parents.setflags(write=False)

        self.children = [[] for _ in range(count)]
        for node in range(1, count):
            self.children[self.parents[node]].append(node)

        self.leaves = tuple(node for node in range(count) if not self.children[node])
        leaf_labels = [self.labels[node] for node in self.leaves]
        if any(label is None or label == "" for label in leaf_labels):
            raise DomainError("Every leaf must be labeled")
        if len(set(leaf_labels)) != len(leaf_labels):
            raise SchemaError("Leaf labels must be unique")
        self.leaf_labels = tuple(leaf_labels)

    @property
    def node_count(self):
        return len(self.parents)

    @property
    def edge_count(self):
        return self.node_count - 1

    def postorder(self):
        """Node indices, children before parents"""
        return self._postorder_from(0)

    def _postorder_from(self, start):
        order = []
        stack = [(start, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            stack.append((node, True))
            for child in reversed(self.children[node]):
                stack.append((child, False))
        return order

    def edges(self):
        """Non-root nodes in post-order; each identifies the edge above it"""
        return [node for node in self.postorder() if node != 0]

    def edge_ids(self):
        """Edge identifiers aligned with edges(): child label, or 'edge<k>'"""
        ids = []
        used = set(label for label in self.labels if label)
        for k, node in enumerate(self.edges()):
            label = self.labels[node]
            if not label:
                label = f"edge{k}"
                while label in used:
                    label = f"_{label}"
            ids.append(label)
        return ids

    def depths(self):
        """Root-to-node path length per node"""
        depth = np.zeros(self.node_count)
        for node in range(1, self.node_count):
            depth[node] = depth[self.parents[node]] + self.lengths[node]
        return depth

    def leaf_index(self):
        """Leaf label -> node index"""
        return {label: node for label, node in zip(self.leaf_labels, self.leaves)}

    def to_newick(self):
        """Serialize with 17-significant-digit branch lengths"""
        def render(node):
            text = ""
            if self.children[node]:
                text = "(" + ",".join(render(child) for child in self.children[node]) + ")"
            if self.labels[node]:
                text += self.labels[node]
            if node != 0:
                text += f":{self.lengths[node]:.17g}"
            return text
        return render(0) + ";"

    def to_dict(self):
        return {
            'parents': self.parents.tolist(),
            'lengths': self.lengths.tolist(),
            'labels': list(self.labels),
        }

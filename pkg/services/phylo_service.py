"""
Service functions for phylogenetic trees: Newick parsing, pruning to the
observed taxa, patristic distances, unweighted UniFrac and the edge mass
difference matrix.
"""
import logging

import numpy as np

from models.tables import EdgeMatrix, SquareMatrix
from models.tree import PhyloTree
from utils.errors import DomainError, ParseError, SchemaError

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

_LABEL_STOP = set("(),:;[]'") | set(" \t\r\n")
_NUMBER_CHARS = set("0123456789+-.eE")


def _parse_label(text, i):
    """Read a quoted or unquoted label starting at i; return (label, next index)"""
    if text[i] == "'":
        chars = []
        i += 1
        while i < len(text):
            if text[i] == "'":
                if i + 1 < len(text) and text[i + 1] == "'":
                    chars.append("'")
                    i += 2
                    continue
                return "".join(chars), i + 1
            chars.append(text[i])
            i += 1
        raise ParseError("Unterminated quoted label", position=i)
    start = i
    while i < len(text) and text[i] not in _LABEL_STOP:
        i += 1
    return text[start:i], i


def parse_newick(text):
    """
    Parse a rooted Newick string with branch lengths.

    Every non-root node needs a ':length'. Internal labels are optional.
    Leaf order follows appearance in the string.

    Raises:
        ParseError: Unbalanced parentheses, a missing or malformed length, an
            unlabeled or duplicated leaf, or trailing garbage; the message
            carries the character position
    """
    parents, lengths, labels, has_length = [-1], [0.0], [None], [True]
    label_positions = [0]
    current, depth, i = 0, 0, 0
    terminated = False

    def add_child(parent):
        parents.append(parent)
        lengths.append(0.0)
        labels.append(None)
        has_length.append(False)
        label_positions.append(i)
        return len(parents) - 1

    def close(node, position):
        if node != 0 and not has_length[node]:
            raise ParseError("Missing branch length", position=position)

    while i < len(text):
        char = text[i]
        if char in " \t\r\n":
            i += 1
        elif char == "[":
            end = text.find("]", i)
            if end < 0:
                raise ParseError("Unterminated comment", position=i)
            i = end + 1
        elif char == "(":
            current = add_child(current)
            depth += 1
            i += 1
        elif char == ",":
            if depth == 0:
                raise ParseError("Comma outside parentheses", position=i)
            close(current, i)
            current = add_child(parents[current])
            i += 1
        elif char == ")":
            if depth == 0:
                raise ParseError("Unbalanced parentheses: unexpected ')'", position=i)
            close(current, i)
            current = parents[current]
            depth -= 1
            i += 1
        elif char == ":":
            i += 1
            start = i
            while i < len(text) and text[i] in _NUMBER_CHARS:
                i += 1
            try:
                value = float(text[start:i])
            except ValueError as e:
                raise ParseError(f"Malformed branch length '{text[start:i]}'", position=start) from e
            if not np.isfinite(value) or value < 0:
                raise ParseError(f"Branch length must be finite and nonnegative, got {value}", position=start)
            lengths[current] = value
            has_length[current] = True
        elif char == ";":
            if depth != 0:
                raise ParseError("Unbalanced parentheses: missing ')'", position=i)
            close(current, i)
            terminated = True
            i += 1
            if text[i:].strip():
                raise ParseError("Unexpected text after ';'", position=i)
            break
        else:
            if labels[current] is not None:
                raise ParseError("Node has two labels", position=i)
            label_positions[current] = i
            labels[current], i = _parse_label(text, i)

    if not terminated:
        if depth != 0:
            raise ParseError("Unbalanced parentheses: missing ')'", position=len(text))
        raise ParseError("Missing terminating ';'", position=len(text))

    child_count = [0] * len(parents)
    for node in range(1, len(parents)):
        child_count[parents[node]] += 1
    seen = {}
    for node in range(len(parents)):
        if child_count[node]:
            continue
        label = labels[node]
        if not label:
            raise ParseError("Unlabeled leaf", position=label_positions[node])
        if label in seen:
            raise ParseError(f"Duplicate leaf label '{label}'", position=label_positions[node])
        seen[label] = node

    return PhyloTree(parents, lengths, labels)


def prune(tree, taxa):
    """
    Tree induced on the leaves named in taxa.

    Unary internal nodes are suppressed with their branch lengths merged
    into the child's; a unary root is dropped.
    """
    taxa = set(str(t) for t in taxa)
    missing = sorted(taxa - set(tree.leaf_labels))
    if missing:
        raise SchemaError(f"Taxa not found among tree leaves: {', '.join(missing[:5])}")
    if not taxa:
        raise DomainError("Cannot prune a tree to zero taxa")

    keep = np.zeros(tree.node_count, dtype=bool)
    for node in tree.postorder():
        if tree.children[node]:
            keep[node] = any(keep[c] for c in tree.children[node])
        else:
            keep[node] = tree.labels[node] in taxa

    parents, lengths, labels = [], [], []
    stack = [(0, -1, 0.0)]
    while stack:
        node, new_parent, length = stack.pop()
        kept_children = [c for c in tree.children[node] if keep[c]]
        if len(kept_children) == 1:
            child = kept_children[0]
            stack.append((child, new_parent, length + tree.lengths[child]))
            continue
        parents.append(new_parent)
        lengths.append(length)
        labels.append(tree.labels[node])
        index = len(parents) - 1
        for child in reversed(kept_children):
            stack.append((child, index, tree.lengths[child]))

    if len(parents) < tree.node_count:
        logger.info(f"Pruned tree from {len(tree.leaves)} to {len(taxa)} leaves")
    return PhyloTree(parents, lengths, labels)


def _leaf_sets(tree):
    """Leaf node indices below each node"""
    below = [[] for _ in range(tree.node_count)]
    for node in tree.postorder():
        if not tree.children[node]:
            below[node] = [node]
        else:
            below[node] = [leaf for c in tree.children[node] for leaf in below[c]]
    return below


def patristic_distances(tree, squared=False):
    """
    Path length between every pair of leaves.

    One post-order pass: every leaf pair is visited exactly once, at its
    lowest common ancestor.

    Args:
        tree (PhyloTree): Labeled tree
        squared (bool): Return squared path lengths (the delta used for DPCoA)
    """
    depth = tree.depths()
    column = {leaf: k for k, leaf in enumerate(tree.leaves)}
    D = np.zeros((len(tree.leaves), len(tree.leaves)))
    below = _leaf_sets(tree)
    for node in tree.postorder():
        children = tree.children[node]
        for a in range(len(children)):
            left = below[children[a]]
            left_cols = [column[leaf] for leaf in left]
            for b in range(a + 1, len(children)):
                right = below[children[b]]
                right_cols = [column[leaf] for leaf in right]
                block = depth[left][:, None] + depth[right][None, :] - 2.0 * depth[node]
                D[np.ix_(left_cols, right_cols)] = block
                D[np.ix_(right_cols, left_cols)] = block.T
    if squared:
        D = D ** 2
    return SquareMatrix(tree.leaf_labels, D)


def _prepare(tree, X, what):
    """Check X against the tree and prune to X's taxa"""
    missing = sorted(set(X.taxon_ids) - set(tree.leaf_labels))
    if missing:
        raise SchemaError(f"{what}: taxa missing from tree: {', '.join(missing[:5])}")
    if np.any(X.values < 0):
        raise DomainError(f"{what}: abundances must be nonnegative")
    return prune(tree, X.taxon_ids)


def _leaf_columns(tree, X):
    """Node-by-sample matrix holding each leaf's abundances (zeros elsewhere)"""
    by_label = tree.leaf_index()
    values = np.zeros((tree.node_count, X.n))
    for k, taxon in enumerate(X.taxon_ids):
        values[by_label[taxon]] = X.values[:, k]
    return values


def unifrac_unweighted(tree, X):
    """
    Unweighted UniFrac distance between every pair of samples.

    A branch is covered by a sample when some taxon below it is present
    (abundance > 0). The distance is the length of branches covered by
    exactly one of the two samples over the length covered by either.

    Raises:
        DomainError: A sample has no present taxa
    """
    empty = np.where(~np.any(X.values > 0, axis=1))[0]
    if empty.size:
        raise DomainError(f"Sample '{X.sample_ids[empty[0]]}' has all-zero abundances")
    pruned = _prepare(tree, X, "UniFrac")

    present = _leaf_columns(pruned, X) > 0
    for node in pruned.postorder():
        for child in pruned.children[node]:
            present[node] |= present[child]

    edges = pruned.edges()
    A = present[edges].astype(float)
    weights = pruned.lengths[edges]
    shared = A.T @ (weights[:, None] * A)
    covered = np.diag(shared)
    union = covered[:, None] + covered[None, :] - shared
    unique = union - shared
    with np.errstate(invalid="ignore", divide="ignore"):
        D = np.where(union > 0, unique / np.where(union > 0, union, 1.0), 0.0)
    D = np.clip(0.5 * (D + D.T), 0.0, 1.0)
    np.fill_diagonal(D, 0.0)
    return SquareMatrix(X.sample_ids, D)


def edge_mass_matrix(tree, X):
    """
    Edge mass difference matrix E.

    For sample i and edge e: (mass on the root side of e) minus (mass on the
    non-root side), with X rows read as proportions. Columns follow the
    post-order of the pruned tree's edges.

    Raises:
        DomainError: A row does not sum to 1 within 1e-8
    """
    sums = X.values.sum(axis=1)
    bad = np.where(np.abs(sums - 1.0) > 1e-8)[0]
    if bad.size:
        raise DomainError(f"Sample '{X.sample_ids[bad[0]]}' is not normalized (row sum {sums[bad[0]]!r})")
    pruned = _prepare(tree, X, "Edge mass")

    mass = _leaf_columns(pruned, X)
    for node in pruned.postorder():
        for child in pruned.children[node]:
            mass[node] += mass[child]

    edges = pruned.edges()
    values = np.clip(1.0 - 2.0 * mass[edges].T, -1.0, 1.0)
    return EdgeMatrix(X.sample_ids, pruned.edge_ids(), values)

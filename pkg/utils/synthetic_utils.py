"""
Utility functions for generating desk-scale synthetic microbiome data:
random ultrametric trees, tree-correlated relative abundances and the
scenario bundles the Monte-Carlo harness runs on.
"""
import logging

import numpy as np
from scipy.special import softmax

from models.results import Scenario
from models.tables import AbundanceTable, DataBundle, ResponseVector
from models.tree import PhyloTree
from services.kernel_service import double_center, edge_kernel, psd_project
from services.phylo_service import edge_mass_matrix, patristic_distances, unifrac_unweighted
from utils.errors import DomainError
from utils.linalg_utils import cholesky_factor
from utils.matio_utils import center_columns

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_DEPTH = 2000


def random_ultrametric_tree(p, rng, height=1.0, prefix="t"):
    """
    Coalescent tree on p leaves named t1..tp.

    Two lineages chosen uniformly at random merge at each event; waiting
    times are exponential with rate C(m, 2) for m lineages, then all node
    times are rescaled so the root sits at `height`.
    """
    p = int(p)
    if p < 2:
        raise DomainError("A random tree needs at least two leaves")
    times = [0.0] * p
    children = [[] for _ in range(p)]
    labels = [f"{prefix}{k + 1}" for k in range(p)]
    lineages = list(range(p))
    now = 0.0
    while len(lineages) > 1:
        m = len(lineages)
        now += rng.exponential(2.0 / (m * (m - 1)))
        a, b = sorted(rng.choice(m, size=2, replace=False), reverse=True)
        merged = [lineages.pop(a), lineages.pop(b)]
        times.append(now)
        children.append(merged)
        labels.append(None)
        lineages.append(len(times) - 1)

    times = np.array(times) * (height / now)
    root = lineages[0]

    parents, lengths, new_labels = [], [], []
    new_index = {}
    stack = [(root, None)]
    while stack:
        node, parent = stack.pop()
        parents.append(-1 if parent is None else new_index[parent])
        lengths.append(0.0 if parent is None else times[parent] - times[node])
        new_labels.append(labels[node])
        new_index[node] = len(parents) - 1
        for child in reversed(children[node]):
            stack.append((child, node))
    return PhyloTree(parents, lengths, new_labels)


def tree_abundances(tree, n, rng, depth=DEFAULT_DEPTH, spread=2.0):
    """
    Relative abundances whose log-means follow Brownian motion on the tree.

    Each sample draws latent log-abundances with covariance equal to the
    shared root-to-ancestor path length, then `depth` reads from the
    resulting multinomial; taxa with no reads give zeros.
    """
    distances = patristic_distances(tree).values
    height = distances.max() / 2.0
    covariance = height - distances / 2.0
    L, _ = cholesky_factor(covariance)
    latent = spread * rng.standard_normal((int(n), L.shape[0])) @ L.T
    probabilities = softmax(latent, axis=1)
    counts = rng.multinomial(int(depth), probabilities)
    sample_ids = [f"s{i + 1}" for i in range(int(n))]
    return AbundanceTable(sample_ids, tree.leaf_labels, counts / float(depth))


def make_bundle(scenario, n=60, p=40, seed=0, depth=DEFAULT_DEPTH):
    """
    Synthetic inputs for one scenario.

    dpcoa carries Q from the double-centered squared patristic distances,
    unifrac carries H from the double-centered UniFrac distances and edge
    carries H = E_c E_c' from the edge mass difference matrix. The design is
    the column-centered relative abundance table; y_seed is standard normal.
    """
    scenario = Scenario(scenario)
    rng = np.random.default_rng(seed)
    tree = random_ultrametric_tree(p, rng)
    raw = tree_abundances(tree, n, rng, depth=depth)
    X = center_columns(raw)
    y_seed = ResponseVector(raw.sample_ids, rng.standard_normal(raw.n))
    logger.info(f"Built synthetic {scenario.value} bundle with n={raw.n}, p={raw.p}")

    if scenario is Scenario.DPCOA:
        delta = patristic_distances(tree, squared=True)
        Q = psd_project(double_center(delta))
        return DataBundle(X, y_seed, q_kernel=Q, tree=tree)
    if scenario is Scenario.UNIFRAC:
        H = psd_project(double_center(unifrac_unweighted(tree, raw)))
        return DataBundle(X, y_seed, h_kernel=H, tree=tree)
    H = edge_kernel(edge_mass_matrix(tree, raw))
    return DataBundle(X, y_seed, h_kernel=H, tree=tree)

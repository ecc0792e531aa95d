"""
Sparse Graph Kernels
Symmetric degree normalization of bipartite relations, light (parameter-free)
propagation with its adjoint, layer pooling and mean-neighbour aggregation
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from services.errors import ShapeError

POOLING_MODES = ('k_plus_one', 'k')
AGGREGATION_DIRECTIONS = ('cols_to_rows', 'rows_to_cols')


@dataclass(frozen=True, eq=False)
class NormalizedBipartite:
    """
    Bipartite adjacency with weight 1 / (sqrt(deg(l)) * sqrt(deg(r))) per edge

    Attributes:
        forward: CSR matrix rows x cols
        backward: CSR transpose of forward, cols x rows
        edges: int64 (E, 2) edge list the weights were computed from
    """
    forward: sp.csr_matrix
    backward: sp.csr_matrix
    edges: np.ndarray

    @property
    def rows(self):
        return self.forward.shape[0]

    @property
    def cols(self):
        return self.forward.shape[1]

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def dtype(self):
        return self.forward.dtype


def _inv_sqrt(degrees):
    # zero-degree nodes get no weight instead of 1/sqrt(0)
    out = np.zeros(len(degrees), dtype=np.float64)
    nonzero = degrees > 0
    out[nonzero] = 1.0 / np.sqrt(degrees[nonzero])
    return out


def normalize_edges(rows, cols, edges, dtype=np.float64):
    """
    Build a NormalizedBipartite directly from an edge list

    Degrees are always taken from the edges passed in, so a thinned edge list
    is re-normalized from its own degrees.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    left, right = edges[:, 0], edges[:, 1]
    inv_left = _inv_sqrt(np.bincount(left, minlength=rows))
    inv_right = _inv_sqrt(np.bincount(right, minlength=cols))
    weights = (inv_left[left] * inv_right[right]).astype(dtype)
    forward = sp.csr_matrix((weights, (left, right)), shape=(rows, cols), dtype=dtype)
    return NormalizedBipartite(forward=forward, backward=forward.T.tocsr(), edges=edges)


def normalize(matrix, dtype=np.float64):
    """
    Normalize an interaction matrix

    Args:
        matrix: InteractionMatrix
        dtype: float dtype of the stored weights

    Returns:
        NormalizedBipartite
    """
    return normalize_edges(matrix.rows, matrix.cols, matrix.edges, dtype=dtype)


def _check_block(name, block, count, dim=None):
    if block.ndim != 2 or block.shape[0] != count or (dim is not None and block.shape[1] != dim):
        expected = (count, dim if dim is not None else 'd')
        raise ShapeError(f"{name} has shape {block.shape}, expected {expected}")


def propagate(graph, left0, right0, layers, perturbation=None):
    """
    Alternating light propagation over a bipartite graph

    left_k = forward @ right_{k-1} and right_k = backward @ left_{k-1}; no
    self-loops, no transform, no nonlinearity.

    Args:
        graph: NormalizedBipartite
        left0: (rows, d) layer-0 embeddings of left entities
        right0: (cols, d) layer-0 embeddings of right entities
        layers: number of propagation layers K >= 1
        perturbation: optional object with forward(side, layer, block) applied to
            every propagated layer k >= 1 (augmentation hook)

    Returns:
        tuple: (left_layers, right_layers), each a list of K + 1 blocks; the
            layer-0 blocks are the inputs themselves
    """
    if layers < 1:
        raise ValueError(f"layers must be >= 1, got {layers}")
    _check_block('left0', left0, graph.rows)
    _check_block('right0', right0, graph.cols, left0.shape[1])

    left_layers, right_layers = [left0], [right0]
    for k in range(1, layers + 1):
        new_left = graph.forward @ right_layers[-1]
        new_right = graph.backward @ left_layers[-1]
        if perturbation is not None:
            new_left = perturbation.forward('left', k, new_left)
            new_right = perturbation.forward('right', k, new_right)
        left_layers.append(new_left)
        right_layers.append(new_right)
    return left_layers, right_layers


def propagate_adjoint(graph, grad_left_layers, grad_right_layers, perturbation=None):
    """
    Reverse pass of propagate

    Args:
        graph: the NormalizedBipartite used in the forward pass
        grad_left_layers: K + 1 gradients w.r.t. each left layer output
        grad_right_layers: K + 1 gradients w.r.t. each right layer output
        perturbation: the same perturbation object used in the forward pass

    Returns:
        tuple: (grad_left0, grad_right0)
    """
    grad_left = [g.copy() for g in grad_left_layers]
    grad_right = [g.copy() for g in grad_right_layers]
    for k in range(len(grad_left) - 1, 0, -1):
        g_left, g_right = grad_left[k], grad_right[k]
        if perturbation is not None:
            g_left = perturbation.backward('left', k, g_left)
            g_right = perturbation.backward('right', k, g_right)
        grad_right[k - 1] += graph.backward @ g_left
        grad_left[k - 1] += graph.forward @ g_right
    return grad_left[0], grad_right[0]


def pool_weight(layers, divisor_mode='k_plus_one'):
    """Scalar every layer is multiplied by in layer_pool"""
    if divisor_mode not in POOLING_MODES:
        raise ValueError(f"Unknown pooling mode: {divisor_mode}")
    divisor = layers + 1 if divisor_mode == 'k_plus_one' else layers
    if divisor <= 0:
        raise ValueError('pooling by K needs at least one propagated layer')
    return 1.0 / divisor


def layer_pool(layers, divisor_mode='k_plus_one'):
    """
    Pool layer-0..K embeddings into one block

    Args:
        layers: list of K + 1 equally shaped blocks
        divisor_mode: 'k_plus_one' divides the sum by K + 1 (mean over layers);
            'k' divides by K

    Returns:
        numpy array with the shape of one layer
    """
    if not layers:
        raise ValueError('layer_pool needs at least one layer')
    shape = layers[0].shape
    for block in layers[1:]:
        if block.shape != shape:
            raise ShapeError(f"layer shapes differ: {block.shape} vs {shape}")
    weight = pool_weight(len(layers) - 1, divisor_mode)
    total = layers[0].copy()
    for block in layers[1:]:
        total += block
    return total * weight


def mean_operator(matrix, direction='cols_to_rows', dtype=np.float64):
    """
    Row-normalized sparse operator averaging source neighbours into targets

    Args:
        matrix: InteractionMatrix
        direction: 'cols_to_rows' (targets are rows) or 'rows_to_cols'
        dtype: float dtype

    Returns:
        CSR matrix (targets x sources); zero-neighbour targets have empty rows
    """
    if direction not in AGGREGATION_DIRECTIONS:
        raise ValueError(f"Unknown aggregation direction: {direction}")
    adjacency = matrix.csr if direction == 'cols_to_rows' else matrix.csr.T.tocsr()
    degrees = np.asarray(adjacency.sum(axis=1)).ravel()
    inv = np.zeros_like(degrees)
    inv[degrees > 0] = 1.0 / degrees[degrees > 0]
    return (sp.diags(inv) @ adjacency).tocsr().astype(dtype)


def mean_aggregate(matrix, source, direction='cols_to_rows'):
    """
    Unweighted mean of neighbour embeddings

    Args:
        matrix: InteractionMatrix
        source: embeddings of the source side
        direction: 'cols_to_rows' or 'rows_to_cols'

    Returns:
        numpy array (targets x d); targets without neighbours get zero vectors
    """
    operator = mean_operator(matrix, direction, dtype=source.dtype)
    _check_block('source', source, operator.shape[1])
    return operator @ source

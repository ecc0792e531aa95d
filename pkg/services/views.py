"""
Multi-View Representations
Builds the user-bundle interaction view, the user-item interaction view and the
bundle-item affiliation view from one embedding table, plus the reverse pass
that maps view gradients back to the table
"""
from dataclasses import dataclass, fields, replace

import numpy as np

from services.data_ingest import InteractionMatrix
from services.errors import ShapeError
from services.sparse_graph import (
    mean_operator, normalize, pool_weight, propagate, propagate_adjoint, layer_pool
)

VIEWS = ('UB', 'UI', 'BI')


@dataclass(eq=False)
class EmbeddingTable:
    """Layer-0 embeddings of users, bundles and items: the only trainable parameters"""
    users: np.ndarray
    bundles: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        dims = {self.users.shape[1], self.bundles.shape[1], self.items.shape[1]}
        if len(dims) != 1:
            raise ShapeError(f"embedding dimensions differ: {sorted(dims)}")

    @classmethod
    def xavier(cls, num_users, num_bundles, num_items, dim, rng, dtype=np.float64):
        """
        Xavier-uniform initialization with fan_in = fan_out = dim

        Args:
            num_users, num_bundles, num_items: entity counts
            dim: embedding size d
            rng: numpy Generator
            dtype: float dtype
        """
        bound = np.sqrt(6.0 / (dim + dim))

        def _block(count):
            return rng.uniform(-bound, bound, size=(count, dim)).astype(dtype)

        return cls(users=_block(num_users), bundles=_block(num_bundles), items=_block(num_items))

    @classmethod
    def zeros_like(cls, other):
        return cls(
            users=np.zeros_like(other.users),
            bundles=np.zeros_like(other.bundles),
            items=np.zeros_like(other.items),
        )

    @property
    def dim(self):
        return self.users.shape[1]

    @property
    def dtype(self):
        return self.users.dtype

    @property
    def counts(self):
        return (len(self.users), len(self.bundles), len(self.items))

    def blocks(self):
        return {'users': self.users, 'bundles': self.bundles, 'items': self.items}

    def copy(self):
        return EmbeddingTable(self.users.copy(), self.bundles.copy(), self.items.copy())

    def astype(self, dtype):
        return EmbeddingTable(
            self.users.astype(dtype), self.bundles.astype(dtype), self.items.astype(dtype)
        )

    def scaled(self, factor):
        return EmbeddingTable(self.users * factor, self.bundles * factor, self.items * factor)

    def add_(self, other):
        """In-place elementwise sum with another table"""
        self.users += other.users
        self.bundles += other.bundles
        self.items += other.items
        return self


@dataclass(eq=False)
class ViewRepresentations:
    """Pooled per-view user and bundle representations; item blocks are for diagnostics"""
    user_ub: np.ndarray
    user_ui: np.ndarray
    user_bi: np.ndarray
    bundle_ub: np.ndarray
    bundle_ui: np.ndarray
    bundle_bi: np.ndarray
    item_ui: np.ndarray
    item_bi: np.ndarray

    @classmethod
    def zeros(cls, num_users, num_bundles, num_items, dim, dtype=np.float64):
        def _z(count):
            return np.zeros((count, dim), dtype=dtype)

        return cls(
            user_ub=_z(num_users), user_ui=_z(num_users), user_bi=_z(num_users),
            bundle_ub=_z(num_bundles), bundle_ui=_z(num_bundles), bundle_bi=_z(num_bundles),
            item_ui=_z(num_items), item_bi=_z(num_items),
        )

    @classmethod
    def zeros_like(cls, other):
        return cls(**{f.name: np.zeros_like(getattr(other, f.name)) for f in fields(cls)})

    @property
    def dim(self):
        return self.user_ub.shape[1]

    def users(self, view):
        return getattr(self, f"user_{view.lower()}")

    def bundles(self, view):
        return getattr(self, f"bundle_{view.lower()}")

    def entity(self, kind, view):
        """Block for kind 'user' or 'bundle' in one view"""
        return self.users(view) if kind == 'user' else self.bundles(view)

    def with_blocks(self, **blocks):
        return replace(self, **blocks)


@dataclass(frozen=True, eq=False)
class GraphSet:
    """
    Normalized propagation graphs of the three views plus the mean-aggregation
    operators used to read bundles out of item_ui and users out of item_bi.

    The aggregation operators always come from the full BI and UI relations.
    """
    ub: object
    ui: object
    bi: object
    bundle_items: object
    user_items: object
    bundle_items_t: object
    user_items_t: object

    def with_propagation(self, **graphs):
        return replace(self, **graphs)


def build_graph_set(dataset, dtype=np.float64):
    """
    Build every graph the views need from a Dataset

    The UB graph uses training interactions only.
    """
    bundle_items = mean_operator(dataset.bi, 'cols_to_rows', dtype=dtype)
    user_items = mean_operator(dataset.ui, 'cols_to_rows', dtype=dtype)
    return GraphSet(
        ub=normalize(dataset.ub_train, dtype=dtype),
        ui=normalize(dataset.ui, dtype=dtype),
        bi=normalize(dataset.bi, dtype=dtype),
        bundle_items=bundle_items,
        user_items=user_items,
        bundle_items_t=bundle_items.T.tocsr(),
        user_items_t=user_items.T.tocsr(),
    )


def _as_operator(relation, dtype):
    if isinstance(relation, InteractionMatrix):
        return mean_operator(relation, 'cols_to_rows', dtype=dtype)
    return relation


def _pooled_pair(graph, left0, right0, layers, pooling, perturbation):
    left_layers, right_layers = propagate(graph, left0, right0, layers, perturbation)
    return layer_pool(left_layers, pooling), layer_pool(right_layers, pooling)


def compute_ub_view(theta, ub_graph, layers, pooling='k_plus_one', perturbation=None):
    """
    User-bundle interaction view

    Returns:
        tuple: (user_ub, bundle_ub)
    """
    if ub_graph.rows != len(theta.users) or ub_graph.cols != len(theta.bundles):
        raise ShapeError(
            f"UB graph {ub_graph.rows}x{ub_graph.cols} does not match "
            f"{len(theta.users)} users x {len(theta.bundles)} bundles"
        )
    return _pooled_pair(ub_graph, theta.users, theta.bundles, layers, pooling, perturbation)


def compute_ui_view(theta, ui_graph, bi_matrix, layers, pooling='k_plus_one', perturbation=None):
    """
    User-item interaction view; bundles read out as the mean of their items

    Args:
        theta: EmbeddingTable
        ui_graph: NormalizedBipartite users x items
        bi_matrix: full BI InteractionMatrix, or its precomputed mean operator
        layers: K
        pooling: layer pooling mode
        perturbation: optional augmentation hook

    Returns:
        tuple: (user_ui, bundle_ui, item_ui)
    """
    if ui_graph.rows != len(theta.users) or ui_graph.cols != len(theta.items):
        raise ShapeError(
            f"UI graph {ui_graph.rows}x{ui_graph.cols} does not match "
            f"{len(theta.users)} users x {len(theta.items)} items"
        )
    operator = _as_operator(bi_matrix, theta.dtype)
    if operator.shape != (len(theta.bundles), len(theta.items)):
        raise ShapeError(f"BI operator shape {operator.shape} does not match the embedding table")
    user_ui, item_ui = _pooled_pair(ui_graph, theta.users, theta.items, layers, pooling, perturbation)
    return user_ui, operator @ item_ui, item_ui


def compute_bi_view(theta, bi_graph, ui_matrix, layers, pooling='k_plus_one', perturbation=None):
    """
    Bundle-item affiliation view; users read out as the mean of their interacted items

    Returns:
        tuple: (user_bi, bundle_bi, item_bi)
    """
    if bi_graph.rows != len(theta.bundles) or bi_graph.cols != len(theta.items):
        raise ShapeError(
            f"BI graph {bi_graph.rows}x{bi_graph.cols} does not match "
            f"{len(theta.bundles)} bundles x {len(theta.items)} items"
        )
    operator = _as_operator(ui_matrix, theta.dtype)
    if operator.shape != (len(theta.users), len(theta.items)):
        raise ShapeError(f"UI operator shape {operator.shape} does not match the embedding table")
    bundle_bi, item_bi = _pooled_pair(bi_graph, theta.bundles, theta.items, layers, pooling, perturbation)
    return operator @ item_bi, bundle_bi, item_bi


def compute_views(theta, graphs, layers, pooling='k_plus_one', enabled=VIEWS, perturbations=None):
    """
    Evaluate every enabled view; disabled views are zero blocks

    Args:
        theta: EmbeddingTable
        graphs: GraphSet
        layers: K
        pooling: layer pooling mode
        enabled: iterable of view names
        perturbations: optional dict view -> perturbation hook

    Returns:
        ViewRepresentations
    """
    perturbations = perturbations or {}
    num_users, num_bundles, num_items = theta.counts
    reps = ViewRepresentations.zeros(num_users, num_bundles, num_items, theta.dim, theta.dtype)
    blocks = {}
    if 'UB' in enabled:
        blocks['user_ub'], blocks['bundle_ub'] = compute_ub_view(
            theta, graphs.ub, layers, pooling, perturbations.get('UB'))
    if 'UI' in enabled:
        blocks['user_ui'], blocks['bundle_ui'], blocks['item_ui'] = compute_ui_view(
            theta, graphs.ui, graphs.bundle_items, layers, pooling, perturbations.get('UI'))
    if 'BI' in enabled:
        blocks['user_bi'], blocks['bundle_bi'], blocks['item_bi'] = compute_bi_view(
            theta, graphs.bi, graphs.user_items, layers, pooling, perturbations.get('BI'))
    return reps.with_blocks(**blocks)


def backward_views(theta, graphs, grads, layers, pooling='k_plus_one', enabled=VIEWS, perturbations=None):
    """
    Map gradients w.r.t. view representations to gradients w.r.t. the table

    Args:
        theta: EmbeddingTable (shapes and dtype only)
        graphs: the GraphSet used in the forward pass
        grads: ViewRepresentations holding d loss / d block
        layers, pooling, enabled, perturbations: as in the forward pass

    Returns:
        EmbeddingTable of gradients
    """
    perturbations = perturbations or {}
    out = EmbeddingTable.zeros_like(theta)
    weight = pool_weight(layers, pooling)
    depth = layers + 1

    def _adjoint(graph, g_left, g_right, perturbation):
        left = [g_left * weight for _ in range(depth)]
        right = [g_right * weight for _ in range(depth)]
        return propagate_adjoint(graph, left, right, perturbation)

    if 'UB' in enabled:
        d_users, d_bundles = _adjoint(graphs.ub, grads.user_ub, grads.bundle_ub, perturbations.get('UB'))
        out.users += d_users
        out.bundles += d_bundles
    if 'UI' in enabled:
        g_items = grads.item_ui + graphs.bundle_items_t @ grads.bundle_ui
        d_users, d_items = _adjoint(graphs.ui, grads.user_ui, g_items, perturbations.get('UI'))
        out.users += d_users
        out.items += d_items
    if 'BI' in enabled:
        g_items = grads.item_bi + graphs.user_items_t @ grads.user_bi
        d_bundles, d_items = _adjoint(graphs.bi, grads.bundle_bi, g_items, perturbations.get('BI'))
        out.bundles += d_bundles
        out.items += d_items
    return out

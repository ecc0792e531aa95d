"""
Augmentation Service
Edge dropout, message dropout and noise perturbations producing the two
augmented representation passes used by the contrastive loss
"""
from dataclasses import dataclass, field

import numpy as np

from services.sparse_graph import normalize_edges
from services.views import VIEWS

AUGMENTATION_KINDS = ('none', 'edge_dropout', 'message_dropout', 'noise')
RESAMPLE_POLICIES = ('per_batch', 'per_epoch')


@dataclass(frozen=True)
class AugmentationSpec:
    """
    Attributes:
        kind: 'none', 'edge_dropout', 'message_dropout' or 'noise'
        edge_drop_rate: edge dropout probability
        message_drop_rate: message dropout ratio rho
        noise_eps: L2 norm of the per-row noise vector
        resample: 'per_batch' draws fresh perturbations every step,
            'per_epoch' reuses one pair of draws for a whole epoch
    """
    kind: str = 'edge_dropout'
    edge_drop_rate: float = 0.2
    message_drop_rate: float = 0.2
    noise_eps: float = 0.1
    resample: str = 'per_batch'

    def validate(self):
        """Return a list of problems, empty when the spec is usable"""
        problems = []
        if self.kind not in AUGMENTATION_KINDS:
            problems.append(f"aug.kind must be one of {AUGMENTATION_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.edge_drop_rate < 1.0:
            problems.append(f"aug.edge_drop_rate must be in [0, 1), got {self.edge_drop_rate}")
        if not 0.0 <= self.message_drop_rate < 1.0:
            problems.append(f"aug.message_drop_rate must be in [0, 1), got {self.message_drop_rate}")
        if self.kind == 'noise' and not self.noise_eps > 0:
            problems.append(f"aug.noise_eps must be > 0 for noise augmentation, got {self.noise_eps}")
        if self.resample not in RESAMPLE_POLICIES:
            problems.append(f"aug.resample must be one of {RESAMPLE_POLICIES}, got {self.resample!r}")
        return problems


# ============ Primitive Perturbations ============

def drop_edges(graph, rate, rng):
    """
    Keep each edge independently with probability 1 - rate

    Args:
        graph: NormalizedBipartite
        rate: drop probability in [0, 1)
        rng: numpy Generator

    Returns:
        NormalizedBipartite re-normalized from the surviving degrees
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"edge drop rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return graph
    keep = rng.random(graph.num_edges) >= rate
    return normalize_edges(graph.rows, graph.cols, graph.edges[keep], dtype=graph.dtype)


def dropout_scale(shape, rho, rng, dtype=np.float64):
    """Inverted-dropout multiplier: 0 with probability rho, else 1 / (1 - rho)"""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"message dropout ratio must be in [0, 1), got {rho}")
    keep = rng.random(shape) >= rho
    return (keep / (1.0 - rho)).astype(dtype)


def message_dropout(block, rho, rng):
    """
    Zero each scalar with probability rho and rescale survivors by 1 / (1 - rho)

    Args:
        block: embedding block
        rho: dropout ratio in [0, 1)
        rng: numpy Generator
    """
    if rho == 0.0:
        return block.copy()
    return block * dropout_scale(block.shape, rho, rng, block.dtype)


def noise_vectors(shape, eps, rng, dtype=np.float64):
    """Rows with uniformly random directions and L2 norm exactly eps"""
    directions = rng.standard_normal(shape)
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    while np.any(norms == 0):
        zero = norms[:, 0] == 0
        directions[zero] = rng.standard_normal((int(zero.sum()), shape[1]))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
    return (directions / norms * eps).astype(dtype)


def add_noise(block, eps, rng):
    """
    Add an independent random-direction vector of norm eps to every row

    Args:
        block: embedding block
        eps: noise norm; 0 returns the block unchanged
        rng: numpy Generator
    """
    if eps < 0:
        raise ValueError(f"noise norm must be >= 0, got {eps}")
    if eps == 0:
        return block.copy()
    return block + noise_vectors(block.shape, eps, rng, block.dtype)


# ============ Frozen Draws ============

class MessageDropoutHook:
    """
    Propagation hook applying message dropout to layers k >= 1

    Masks are drawn on first use and then frozen, so a forward pass can be
    replayed and differentiated with identical draws.
    """

    def __init__(self, rho, rng):
        self.rho = rho
        self.rng = rng
        self._scales = {}

    def forward(self, side, layer, block):
        key = (side, layer)
        if key not in self._scales:
            self._scales[key] = dropout_scale(block.shape, self.rho, self.rng, block.dtype)
        return block * self._scales[key]

    def backward(self, side, layer, grad):
        return grad * self._scales[(side, layer)]


class NoiseHook:
    """Propagation hook adding frozen norm-eps noise to layers k >= 1"""

    def __init__(self, eps, rng):
        self.eps = eps
        self.rng = rng
        self._deltas = {}

    def forward(self, side, layer, block):
        key = (side, layer)
        if key not in self._deltas:
            self._deltas[key] = noise_vectors(block.shape, self.eps, self.rng, block.dtype)
        return block + self._deltas[key]

    def backward(self, side, layer, grad):
        return grad


@dataclass(eq=False)
class AugmentationDraw:
    """
    One sampled perturbation of every view

    Attributes:
        graphs: GraphSet to propagate over (edge-dropped under ED)
        hooks: view -> propagation hook (MD / Noise), empty otherwise
        rng_stamp: seed of the generator all draws came from
    """
    graphs: object
    hooks: dict = field(default_factory=dict)
    rng_stamp: int = 0


def sample_draw(spec, graphs, rng):
    """
    Draw one perturbation of all views

    Args:
        spec: AugmentationSpec
        graphs: clean GraphSet
        rng: the augmentation stream Generator

    Returns:
        AugmentationDraw; for kind 'none' it holds the clean graphs and no hooks
    """
    stamp = int(rng.integers(0, 2 ** 63 - 1))
    if spec.kind == 'none':
        return AugmentationDraw(graphs=graphs, rng_stamp=stamp)

    children = [np.random.default_rng([stamp, index]) for index in range(len(VIEWS))]
    if spec.kind == 'edge_dropout':
        dropped = {
            view.lower(): drop_edges(getattr(graphs, view.lower()), spec.edge_drop_rate, child)
            for view, child in zip(VIEWS, children)
        }
        return AugmentationDraw(graphs=graphs.with_propagation(**dropped), rng_stamp=stamp)
    if spec.kind == 'message_dropout':
        hooks = {view: MessageDropoutHook(spec.message_drop_rate, child) for view, child in zip(VIEWS, children)}
    else:
        hooks = {view: NoiseHook(spec.noise_eps, child) for view, child in zip(VIEWS, children)}
    return AugmentationDraw(graphs=graphs, hooks=hooks, rng_stamp=stamp)

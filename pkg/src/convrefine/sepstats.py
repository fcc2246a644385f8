"""Inter-class correlation matrices and separation-change tallies.

For each layer the class-mean feature vectors are correlated pairwise
(Pearson, across the hidden-unit dimensions), giving an M x M matrix whose
entries live in [-1, 1].  Lower correlation means better separation between
the two classes.  Comparing a layer's matrix against its predecessor's
yields the tallies that drive the refinement planner: n_plus counts ordered
class pairs whose correlation dropped (separation improved), n_minus counts
pairs whose correlation rose.  Counting is over ordered pairs including the
diagonal, so n_total = M^2; the diagonal never moves and always ties.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .featio import ClassMeans
from .netir import NetworkIR


class DegenerateClassError(ValueError):
    """A constant class-mean vector in strict mode."""


class DegenerateClassWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class LayerCorrelation:
    layer_name: str
    matrix: np.ndarray  # (M, M) float64
    degenerate: tuple[int, ...]  # classes with constant mean vectors


@dataclass(frozen=True, eq=False)
class CorrelationStack:
    layers: tuple[LayerCorrelation, ...]
    num_classes: int

    @property
    def per_layer(self) -> list[tuple[str, np.ndarray]]:
        return [(lc.layer_name, lc.matrix) for lc in self.layers]


@dataclass(frozen=True)
class SeparationTally:
    """Separation change of one layer relative to its predecessor."""

    layer_name: str
    n_plus: int  # ordered pairs whose correlation strictly decreased
    n_minus: int  # ordered pairs whose correlation strictly increased
    n_ties: int
    n_total: int

    def __post_init__(self):
        counts = (self.n_plus, self.n_minus, self.n_ties)
        if any(c < 0 for c in counts) or self.n_total < 1:
            raise ValueError("tally counts must be non-negative, total positive")
        if sum(counts) != self.n_total:
            raise ValueError(
                f"tally for {self.layer_name or '<anon>'}: "
                f"{self.n_plus}+{self.n_minus}+{self.n_ties} != {self.n_total}"
            )


def correlation_layer(means: ClassMeans, strict: bool = False) -> LayerCorrelation:
    """Pearson correlation of every ordered pair of class-mean vectors.

    A constant (zero-variance) mean vector has no defined correlation; its
    row and column are set to 0 and the class is flagged, with a warning
    (or an error in strict mode).  Non-degenerate diagonal entries are
    exactly 1 and the matrix is exactly symmetric with entries in [-1, 1].
    """
    g = np.asarray(means.means, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"layer {means.layer_name}: class means must be rank 2")
    if g.shape[1] < 2:
        raise ValueError(
            f"layer {means.layer_name}: need at least 2 hidden units for correlation,"
            f" got {g.shape[1]}"
        )
    centered = g - g.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    degenerate = tuple(int(i) for i in np.flatnonzero(norms == 0.0))
    if degenerate:
        msg = (
            f"layer {means.layer_name}: constant class mean vector(s) for"
            f" class(es) {list(degenerate)}; correlations set to 0"
        )
        if strict:
            raise DegenerateClassError(msg)
        warnings.warn(msg, DegenerateClassWarning, stacklevel=2)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = centered / safe[:, None]
    corr = unit @ unit.T
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    if degenerate:
        idx = list(degenerate)
        corr[idx, :] = 0.0
        corr[:, idx] = 0.0
    return LayerCorrelation(layer_name=means.layer_name, matrix=corr, degenerate=degenerate)


def correlation_matrix(means: ClassMeans, strict: bool = False) -> np.ndarray:
    return correlation_layer(means, strict=strict).matrix


def correlation_stack(means_by_stage, strict: bool = False) -> CorrelationStack:
    """Correlation matrices for a sequence of layers, given in stage order."""
    layers = tuple(correlation_layer(m, strict=strict) for m in means_by_stage)
    if not layers:
        raise ValueError("no layers given")
    sizes = {lc.matrix.shape[0] for lc in layers}
    if len(sizes) != 1:
        raise ValueError(f"layers disagree on the number of classes: {sorted(sizes)}")
    return CorrelationStack(layers=layers, num_classes=layers[0].matrix.shape[0])


def separation_tally(
    prev: np.ndarray,
    cur: np.ndarray,
    tie_tol: float = 1e-6,
    layer_name: str = "",
    ordered: bool = True,
) -> SeparationTally:
    """Count class pairs whose correlation moved between two layers.

    A pair counts toward n_plus when cur < prev - tie_tol, toward n_minus
    when cur > prev + tie_tol, and ties otherwise.  Diagonal pairs always
    tie.  With ordered counting (the default) every off-diagonal pair is
    counted twice, once per direction, and n_total = M^2; with
    ordered=False only unordered pairs i<j are counted and
    n_total = M(M-1)/2.
    """
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    if prev.shape != cur.shape or prev.ndim != 2 or prev.shape[0] != prev.shape[1]:
        raise ValueError(f"matrices must be square and same size, got {prev.shape} vs {cur.shape}")
    if tie_tol < 0:
        raise ValueError("tie_tol must be non-negative")
    m = prev.shape[0]
    diff = cur - prev
    if ordered:
        mask = ~np.eye(m, dtype=bool)
        total = m * m
    else:
        mask = np.triu(np.ones((m, m), dtype=bool), k=1)
        total = m * (m - 1) // 2
    plus = int(np.count_nonzero((diff < -tie_tol) & mask))
    minus = int(np.count_nonzero((diff > tie_tol) & mask))
    return SeparationTally(
        layer_name=layer_name,
        n_plus=plus,
        n_minus=minus,
        n_ties=total - plus - minus,
        n_total=total,
    )


def network_correlations(
    ir: NetworkIR, means_by_layer, strict: bool = False
) -> CorrelationStack:
    """Per-block correlation matrices in analysis (stage, name) order."""
    ordered_means = []
    for b in ir.blocks:
        if b.name not in means_by_layer:
            raise ValueError(f"no class means supplied for block {b.name}")
        ordered_means.append(means_by_layer[b.name])
    return correlation_stack(ordered_means, strict=strict)


def network_tallies(
    ir: NetworkIR,
    means_by_layer,
    tie_tol: float = 1e-6,
    strict: bool = False,
    ordered: bool = True,
) -> dict[str, SeparationTally]:
    """Tallies for every block that has a predecessor.

    A block is compared against the correlation matrix of its direct
    predecessor; when a block consumes several producers, the predecessor
    statistics come from the concatenation of their class-mean features, in
    edge order, which is exactly the channel stack the block sees.
    """
    cache: dict[str, np.ndarray] = {}

    def matrix_of(name: str) -> np.ndarray:
        if name not in cache:
            if name not in means_by_layer:
                raise ValueError(f"no class means supplied for block {name}")
            cache[name] = correlation_layer(means_by_layer[name], strict=strict).matrix
        return cache[name]

    tallies: dict[str, SeparationTally] = {}
    for b in ir.blocks:
        preds = ir.predecessors(b.name)
        if not preds:
            continue
        if len(preds) == 1:
            prev_matrix = matrix_of(preds[0])
        else:
            for p in preds:
                if p not in means_by_layer:
                    raise ValueError(f"no class means supplied for block {p}")
            stacked = np.concatenate(
                [means_by_layer[p].means for p in preds], axis=1
            )
            prev_matrix = correlation_layer(
                ClassMeans(layer_name="+".join(preds), means=stacked), strict=strict
            ).matrix
        tallies[b.name] = separation_tally(
            prev_matrix,
            matrix_of(b.name),
            tie_tol=tie_tol,
            layer_name=b.name,
            ordered=ordered,
        )
    return tallies


def write_correlation_csv(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w") as fh:
        for row in matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_correlation_pgm(path, matrix: np.ndarray) -> None:
    """8-bit P5 heatmap: correlation -1 maps to 0, +1 to 255."""
    matrix = np.asarray(matrix, dtype=np.float64)
    scaled = np.clip(np.rint((matrix + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{matrix.shape[1]} {matrix.shape[0]}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())

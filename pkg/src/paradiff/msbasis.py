"""Coarse multiscale spaces for high-contrast diffusion.

Builds localized basis functions on oversampled coarse blocks in two ways:

* NLMC: per coarse block, one basis function per continuum (the background
  matrix region plus each connected channel component inside the block),
  obtained by minimizing energy subject to prescribed cell-set averages on
  every block of the oversampled patch.
* CEM: per coarse block, auxiliary spectral functions from a local
  generalized eigenproblem, extended by constrained energy minimization.

The NLMC set is then split into two subspaces: V_H1 holds the
mean-subtracted channel bases (the stiff directions integrated implicitly)
and V_H2 holds the global mean field plus the matrix bases (treated
explicitly). Galerkin projections of the fine operators onto the split give
the small dense blocks used by the time integrators, and the largest
principal angle between the subspaces in the fine mass inner product
(gamma) controls the waveform-relaxation rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.ndimage import label as nd_label
from scipy.sparse.linalg import splu

from .fem import (
    FineGrid,
    FineOperators,
    PermeabilityField,
    assemble_mass,
    assemble_mass_on_cells,
    assemble_stiffness_on_cells,
)
from .util import parallel_map

log = logging.getLogger(__name__)

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class CoarsePartition:
    """Uniform partition of the cell grid into nb x nb square blocks.

    Blocks are numbered row-major (block (bx, by) has index by*nb + bx) and
    each block spans cells_per_block cells per axis. The oversampled patch of
    a block extends it by `layers` rings of blocks, clipped at the domain.
    """

    grid: FineGrid
    nb: int
    layers: int = 3

    def __post_init__(self):
        if self.grid.nx % self.nb != 0:
            raise ValueError(f"{self.nb} blocks do not divide {self.grid.nx} cells")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")

    @property
    def H(self) -> float:
        return 1.0 / self.nb

    @property
    def n_blocks(self) -> int:
        return self.nb * self.nb

    @property
    def cells_per_block(self) -> int:
        return self.grid.nx // self.nb

    def block_rect(self, b: int) -> tuple[int, int, int, int]:
        """Cell index rect (x0, x1, y0, y1), half-open, of block b."""
        s = self.cells_per_block
        bx, by = b % self.nb, b // self.nb
        return bx * s, (bx + 1) * s, by * s, (by + 1) * s

    def block_cells(self, b: int) -> np.ndarray:
        x0, x1, y0, y1 = self.block_rect(b)
        cx = np.arange(x0, x1)
        cy = np.arange(y0, y1)
        return (cy[:, None] * self.grid.nx + cx[None, :]).ravel()

    def patch_rect(self, b: int) -> tuple[int, int, int, int]:
        s = self.cells_per_block
        bx, by = b % self.nb, b // self.nb
        x0 = max(bx - self.layers, 0) * s
        x1 = min(bx + self.layers + 1, self.nb) * s
        y0 = max(by - self.layers, 0) * s
        y1 = min(by + self.layers + 1, self.nb) * s
        return x0, x1, y0, y1

    def patch_blocks(self, b: int) -> np.ndarray:
        """Blocks fully contained in the oversampled patch, ascending index."""
        bx, by = b % self.nb, b // self.nb
        xs = np.arange(max(bx - self.layers, 0), min(bx + self.layers + 1, self.nb))
        ys = np.arange(max(by - self.layers, 0), min(by + self.layers + 1, self.nb))
        return (ys[:, None] * self.nb + xs[None, :]).ravel()

    def patch_interior_nodes(self, b: int) -> np.ndarray:
        """Nodes strictly inside the patch rectangle (zero-Dirichlet rim)."""
        x0, x1, y0, y1 = self.patch_rect(b)
        ix = np.arange(x0 + 1, x1)
        iy = np.arange(y0 + 1, y1)
        return (iy[:, None] * (self.grid.nx + 1) + ix[None, :]).ravel()


def build_coarse_partition(grid: FineGrid, nb: int, layers: int = 3) -> CoarsePartition:
    return CoarsePartition(grid, nb, layers)


@dataclass
class BlockContinua:
    """Continuum decomposition of one block: matrix cells plus channel parts."""

    block: int
    matrix_cells: np.ndarray
    channel_parts: list[np.ndarray]

    @property
    def m(self) -> int:
        return len(self.channel_parts)

    def constraint_sets(self) -> list[tuple[int, np.ndarray]]:
        """(component index, cell set) pairs: matrix first, then channel parts."""
        sets = []
        if self.matrix_cells.size:
            sets.append((0, self.matrix_cells))
        sets.extend((n + 1, cells) for n, cells in enumerate(self.channel_parts))
        return sets


@dataclass
class ContinuumDecomposition:
    partition: CoarsePartition
    blocks: list[BlockContinua]

    @property
    def total_channel_parts(self) -> int:
        return sum(b.m for b in self.blocks)

    def m_counts(self) -> list[int]:
        return [b.m for b in self.blocks]


def detect_continua(partition: CoarsePartition, field: PermeabilityField) -> ContinuumDecomposition:
    """Classify each block's cells into matrix and 4-connected channel parts.

    Channel parts are ordered by their smallest cell index, so the
    decomposition is independent of labeling internals. A block whose matrix
    region is empty contributes no matrix continuum (logged).
    """
    grid = partition.grid
    mask = field.channel_mask.reshape(grid.ny, grid.nx)
    blocks = []
    for b in range(partition.n_blocks):
        x0, x1, y0, y1 = partition.block_rect(b)
        local = mask[y0:y1, x0:x1]
        labels, n_comp = nd_label(local, structure=FOUR_CONNECTED)
        cy, cx = np.nonzero(local)
        gcells = (cy + y0) * grid.nx + (cx + x0)
        parts = []
        for lab in range(1, n_comp + 1):
            sel = labels[cy, cx] == lab
            parts.append(np.sort(gcells[sel]))
        parts.sort(key=lambda cells: int(cells[0]))
        bcells = partition.block_cells(b)
        matrix_cells = np.setdiff1d(bcells, gcells, assume_unique=False)
        if matrix_cells.size == 0:
            log.info("block %d has no matrix cells; matrix continuum dropped", b)
        blocks.append(BlockContinua(b, matrix_cells, parts))
    return ContinuumDecomposition(partition, blocks)


def _average_row(grid: FineGrid, cells: np.ndarray) -> np.ndarray:
    """Full-node weight vector w with w^T psi = cell-set average of psi."""
    conn = grid.cell_connectivity()[cells]
    w = np.zeros(grid.n_nodes)
    np.add.at(w, conn.ravel(), grid.h**2 / 4.0)
    return w / (cells.size * grid.h**2)


def _patch_stiffness(ops: FineOperators, nodes: np.ndarray) -> sp.csr_matrix:
    return ops.full_stiffness[nodes][:, nodes].tocsr()


@dataclass
class BlockBasis:
    """Basis columns of one block on the global interior numbering."""

    block: int
    components: list[int]
    columns: np.ndarray  # (n_interior, n_components)
    constraint_residual: float


def build_nlmc_basis(
    partition: CoarsePartition,
    decomp: ContinuumDecomposition,
    ops: FineOperators,
    block: int,
) -> BlockBasis:
    """Energy-minimizing bases of one block under cell-average constraints.

    For every continuum m of the block, solves on the oversampled patch (zero
    Dirichlet rim) the saddle system: minimize the kappa-energy subject to
    the basis having average delta_{ij} delta_{mn} over continuum (j, n) of
    every block j in the patch. One factorization serves all continua of the
    block.
    """
    grid = partition.grid
    pnodes = partition.patch_interior_nodes(block)
    a_loc = _patch_stiffness(ops, pnodes)
    rows = []
    targets = {}
    for j in partition.patch_blocks(block):
        for comp, cells in decomp.blocks[j].constraint_sets():
            if j == block:
                targets[comp] = len(rows)
            rows.append(_average_row(grid, cells)[pnodes])
    c_mat = sp.csr_matrix(np.array(rows))
    kkt = sp.bmat([[a_loc, c_mat.T], [c_mat, None]], format="csc")
    try:
        lu = splu(kkt)
    except RuntimeError as exc:
        raise RuntimeError(f"singular saddle system on block {block}: {exc}") from exc

    n_loc = pnodes.size
    comps, cols, worst = [], [], 0.0
    inv_interior = np.full(grid.n_nodes, -1)
    inv_interior[grid.interior] = np.arange(grid.n_interior)
    local_to_interior = inv_interior[pnodes]
    for comp, row_id in sorted(targets.items()):
        rhs = np.zeros(n_loc + len(rows))
        rhs[n_loc + row_id] = 1.0
        psi_loc = lu.solve(rhs)[:n_loc]
        res = c_mat @ psi_loc
        res[row_id] -= 1.0
        worst = max(worst, float(np.abs(res).max()))
        col = np.zeros(grid.n_interior)
        col[local_to_interior] = psi_loc
        comps.append(comp)
        cols.append(col)
    if worst > 1e-8:
        log.warning("block %d constraint residual %.2e exceeds 1e-8", block, worst)
    return BlockBasis(block, comps, np.array(cols).T, worst)


@dataclass
class AuxSpace:
    """Spectral auxiliary functions of one block (CEM pathway)."""

    block: int
    node_ids: np.ndarray
    eigenvalues: np.ndarray
    vectors: np.ndarray  # (n_block_nodes, n_eig), s-orthonormal
    weight: str


def _kappa_tilde(partition: CoarsePartition, field: PermeabilityField, weight: str) -> np.ndarray:
    """Cell-wise weight for the auxiliary bilinear form s."""
    if weight == "kappa_h2":
        return field.kappa * partition.nb**2
    if weight == "pou":
        # sum over the coarse bilinear hat functions of |grad chi|^2 at the
        # cell center: 2[(1-xi)^2 + xi^2 + (1-eta)^2 + eta^2]/H^2 in local
        # coarse-cell coordinates (xi, eta)
        grid = partition.grid
        centers = grid.cell_centers()
        xi = np.mod(centers[:, 0], partition.H) / partition.H
        eta = np.mod(centers[:, 1], partition.H) / partition.H
        s = 2.0 * ((1 - xi) ** 2 + xi**2 + (1 - eta) ** 2 + eta**2)
        return field.kappa * s * partition.nb**2
    raise ValueError(f"unknown aux weight {weight!r}")


def _block_free_nodes(partition: CoarsePartition, block: int) -> np.ndarray:
    """All nodes of the block rectangle except global Dirichlet boundary nodes."""
    grid = partition.grid
    x0, x1, y0, y1 = partition.block_rect(block)
    ix = np.arange(x0, x1 + 1)
    iy = np.arange(y0, y1 + 1)
    nodes = (iy[:, None] * (grid.nx + 1) + ix[None, :]).ravel()
    gx = nodes % (grid.nx + 1)
    gy = nodes // (grid.nx + 1)
    keep = (gx > 0) & (gx < grid.nx) & (gy > 0) & (gy < grid.ny)
    return nodes[keep]


def aux_eigen_cem(
    partition: CoarsePartition,
    ops: FineOperators,
    field: PermeabilityField,
    block: int,
    n_eig: int,
    weight: str = "kappa_h2",
) -> AuxSpace:
    """Smallest eigenpairs of a(psi, v) = lambda s(psi, v) on one block.

    Both forms integrate over the block's cells only; the boundary of the
    block is natural except where it meets the global Dirichlet boundary.
    Eigenvectors come back s-orthonormal with a deterministic sign (largest
    entry positive).
    """
    grid = partition.grid
    cells = partition.block_cells(block)
    nodes = _block_free_nodes(partition, block)
    kt = _kappa_tilde(partition, field, weight)
    a_blk = assemble_stiffness_on_cells(grid, field.kappa, cells)[nodes][:, nodes].toarray()
    s_blk = assemble_mass_on_cells(grid, cells, weights=kt)[nodes][:, nodes].toarray()
    if n_eig > nodes.size:
        raise ValueError(f"requested {n_eig} eigenpairs, block has {nodes.size} nodes")
    try:
        vals, vecs = sla.eigh(a_blk, s_blk)
    except sla.LinAlgError as exc:
        raise RuntimeError(f"aux eigensolve failed on block {block}: {exc}") from exc
    vals, vecs = vals[:n_eig], vecs[:, :n_eig]
    for k in range(vecs.shape[1]):
        lead = np.argmax(np.abs(vecs[:, k]))
        if vecs[lead, k] < 0:
            vecs[:, k] = -vecs[:, k]
    return AuxSpace(block, nodes, vals, vecs, weight)


def build_cem_basis(
    partition: CoarsePartition,
    ops: FineOperators,
    field: PermeabilityField,
    block: int,
    n_eig: int,
    weight: str = "kappa_h2",
    aux_cache: dict | None = None,
) -> BlockBasis:
    """Constrained energy minimization basis of one block.

    For each auxiliary eigenfunction of the block, minimizes the kappa-energy
    on the oversampled patch subject to s-orthogonality against every
    auxiliary function of every patch block, with unit s-product against the
    target one. aux_cache maps block -> AuxSpace to share eigensolves.
    """
    grid = partition.grid
    kt = _kappa_tilde(partition, field, weight)
    pnodes = partition.patch_interior_nodes(block)
    a_loc = _patch_stiffness(ops, pnodes)

    def aux_for(j: int, k: int) -> AuxSpace:
        if aux_cache is not None and j in aux_cache:
            return aux_cache[j]
        space = aux_eigen_cem(partition, ops, field, j, k, weight)
        if aux_cache is not None:
            aux_cache[j] = space
        return space

    rows, targets = [], {}
    for j in partition.patch_blocks(block):
        aux = aux_for(j, n_eig)
        s_blk = assemble_mass_on_cells(grid, partition.block_cells(j), weights=kt)
        weighted = s_blk[:, aux.node_ids] @ aux.vectors  # (n_nodes, n_eig)
        for k in range(aux.vectors.shape[1]):
            if j == block:
                targets[k] = len(rows)
            rows.append(weighted[pnodes, k])
    c_mat = sp.csr_matrix(np.array(rows))
    kkt = sp.bmat([[a_loc, c_mat.T], [c_mat, None]], format="csc")
    try:
        lu = splu(kkt)
    except RuntimeError as exc:
        raise RuntimeError(f"singular saddle system on block {block}: {exc}") from exc

    n_loc = pnodes.size
    inv_interior = np.full(grid.n_nodes, -1)
    inv_interior[grid.interior] = np.arange(grid.n_interior)
    local_to_interior = inv_interior[pnodes]
    comps, cols, worst = [], [], 0.0
    for k, row_id in sorted(targets.items()):
        rhs = np.zeros(n_loc + len(rows))
        rhs[n_loc + row_id] = 1.0
        phi_loc = lu.solve(rhs)[:n_loc]
        res = c_mat @ phi_loc
        res[row_id] -= 1.0
        worst = max(worst, float(np.abs(res).max()))
        col = np.zeros(grid.n_interior)
        col[local_to_interior] = phi_loc
        comps.append(k)
        cols.append(col)
    if worst > 1e-8:
        log.warning("block %d CEM constraint residual %.2e exceeds 1e-8", block, worst)
    return BlockBasis(block, comps, np.array(cols).T, worst)


@dataclass(frozen=True)
class CoarseSystem:
    """Galerkin projections of the fine mass/stiffness onto the split basis."""

    M11: np.ndarray
    A11: np.ndarray
    M12: np.ndarray
    A12: np.ndarray
    M22: np.ndarray
    A22: np.ndarray

    @property
    def d1(self) -> int:
        return self.M11.shape[0]

    @property
    def d2(self) -> int:
        return self.M22.shape[0]

    def mass_block(self) -> np.ndarray:
        """Full coarse mass [[M11, M12], [M12^T, M22]]."""
        return np.block([[self.M11, self.M12], [self.M12.T, self.M22]])


@dataclass
class MultiscaleSpace:
    """Split coarse space: Psi1 spans V_H1, Psi2 spans V_H2.

    Column 0 of Psi2 is the global mean of all block bases; the rest are the
    matrix-continuum bases. Psi1 holds the channel bases with their
    s-projection onto the mean removed. labels record (block, component) per
    column, component 0 meaning matrix and -1 the mean column.
    """

    partition: CoarsePartition
    decomposition: ContinuumDecomposition
    Psi1: sp.csc_matrix
    Psi2: sp.csc_matrix
    system: CoarseSystem
    labels1: list[tuple[int, int]]
    labels2: list[tuple[int, int]]
    constraint_residual: float = 0.0

    @property
    def d1(self) -> int:
        return self.Psi1.shape[1]

    @property
    def d2(self) -> int:
        return self.Psi2.shape[1]

    def reconstruct(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Fine interior-node vector of the represented function."""
        return self.Psi1 @ u + self.Psi2 @ w


def split_spaces(
    decomp: ContinuumDecomposition,
    bases: list[BlockBasis],
    ops: FineOperators,
) -> tuple[sp.csc_matrix, sp.csc_matrix, list, list]:
    """Split the block bases into (Psi1, Psi2, labels1, labels2).

    The mean field psi_bar is the plain average of every basis column. Each
    channel column is replaced by psi - (m(psi, psi_bar)/m(psi_bar,
    psi_bar)) psi_bar with m the fine mass form, which makes every V_H1
    column mass-orthogonal to psi_bar. The subspace angle gamma is measured
    in the same mass product, and the waveform-relaxation sweep contracts
    like gamma^2, so the subtraction has to happen in this product; a
    kappa-weighted product leaves a near-constant component in V_H1 and
    drives gamma toward 1 at high contrast. V_H2 stacks psi_bar first, then
    the matrix columns. The stacked set is then pruned to full rank (one
    matrix column goes; see _prune_rank_deficiency), so on a channelized
    field d1 equals the continuum count and d2 equals the block count.
    """
    grid = decomp.partition.grid
    s_w = ops.M

    all_cols, chan, mat = [], [], []
    for bb in bases:
        for pos, comp in enumerate(bb.components):
            col = bb.columns[:, pos]
            all_cols.append(col)
            (mat if comp == 0 else chan).append((bb.block, comp, col))
    psi_bar = np.mean(all_cols, axis=0)
    s_bar = s_w @ psi_bar
    denom = float(psi_bar @ s_bar)

    cols1, labels1 = [], []
    for block, comp, col in chan:
        coeff = float(col @ s_bar) / denom
        cols1.append(col - coeff * psi_bar)
        labels1.append((block, comp))
    cols2 = [psi_bar] + [col for _, _, col in mat]
    labels2 = [(-1, -1)] + [(block, comp) for block, comp, _ in mat]

    if not cols1:
        log.info("no channel continua found: V_H1 is empty (d1 = 0)")
    psi1 = sp.csc_matrix(np.array(cols1).T if cols1 else np.zeros((grid.n_interior, 0)))
    psi2 = sp.csc_matrix(np.array(cols2).T)
    psi1, psi2, labels1, labels2 = _prune_rank_deficiency(
        psi1, psi2, labels1, labels2, ops.M
    )
    return psi1, psi2, labels1, labels2


def _prune_rank_deficiency(psi1, psi2, labels1, labels2, m_fine, tol: float = 1e-12):
    """Drop columns until the stacked mass Gram is numerically full rank.

    The stacked set carries one exact dependency by construction: psi_bar is
    a rescaled sum of every raw basis, so {psi_bar, all matrix columns, all
    mean-subtracted channel columns} has one null vector. Columns are removed
    from the matrix side, last block first. Removing a channel column instead
    would leave the combination (L psi_bar - sum of matrix columns) inside
    V_H2; that combination equals the channel-basis sum, whose tiny mass and
    contrast-scaled energy would wreck the explicit stability bound of the
    w-update. The stacked span is unchanged either way.
    """
    while True:
        stacked = sp.hstack([psi2, psi1]).tocsc()
        gram = (stacked.T @ (m_fine @ stacked)).toarray()
        vals, vecs = np.linalg.eigh(gram)
        if gram.shape[0] == 0 or vals[0] > tol * max(vals[-1], 1e-300):
            return psi1, psi2, labels1, labels2
        d2 = psi2.shape[1]
        matrix_cols = [k for k in range(d2) if labels2[k][1] == 0]
        if matrix_cols:
            drop = matrix_cols[-1]
            log.info("stacked basis rank-deficient: dropping V_H2 column %s",
                     labels2[drop])
            keep = [k for k in range(d2) if k != drop]
            psi2 = psi2[:, keep]
            labels2 = [labels2[k] for k in keep]
        elif psi1.shape[1] > 0:
            null = vecs[:, 0]
            j = int(np.argmax(np.abs(null[d2:])))
            log.warning("dropping rank-deficient V_H1 column %s", labels1[j])
            keep = [k for k in range(psi1.shape[1]) if k != j]
            psi1 = psi1[:, keep]
            labels1 = [labels1[k] for k in keep]
        else:
            drop = int(np.argmax(np.abs(vecs[:, 0])))
            log.warning("dropping rank-deficient V_H2 column %s", labels2[drop])
            keep = [k for k in range(d2) if k != drop]
            psi2 = psi2[:, keep]
            labels2 = [labels2[k] for k in keep]


def project_coarse(psi1: sp.csc_matrix, psi2: sp.csc_matrix, ops: FineOperators) -> CoarseSystem:
    """Dense Galerkin blocks Psi_i^T X Psi_j for X in {mass, stiffness}.

    Diagonal blocks are symmetrized; the asymmetry removed this way is logged
    because anything large would point at a broken assembly.
    """

    def blocks(x):
        xp1 = x @ psi1
        xp2 = x @ psi2
        b11 = (psi1.T @ xp1).toarray()
        b22 = (psi2.T @ xp2).toarray()
        b12 = (psi1.T @ xp2).toarray()
        asym = 0.0
        for b in (b11, b22):
            if b.size:
                asym = max(asym, float(np.abs(b - b.T).max()))
        return (b11 + b11.T) / 2, b12, (b22 + b22.T) / 2, asym

    m11, m12, m22, masym = blocks(ops.M)
    a11, a12, a22, aasym = blocks(ops.A)
    log.debug("projection asymmetry: mass %.3e stiffness %.3e", masym, aasym)
    return CoarseSystem(M11=m11, A11=a11, M12=m12, A12=a12, M22=m22, A22=a22)


def project_load(space: MultiscaleSpace, b_fine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coarse load pair (F1, F2) = (Psi1^T b, Psi2^T b)."""
    return space.Psi1.T @ b_fine, space.Psi2.T @ b_fine


def subspace_angle(system: CoarseSystem | MultiscaleSpace) -> float:
    """gamma: largest cosine between V_H1 and V_H2 in the fine mass product.

    Computed as the top singular value of L1^{-1} M12 L2^{-T} with M11 =
    L1 L1^T and M22 = L2 L2^T. Returns 0 for an empty V_H1 (logged), since
    the splitting then has no cross coupling at all.
    """
    sys_ = system.system if isinstance(system, MultiscaleSpace) else system
    if sys_.d1 == 0:
        log.info("gamma requested with d1 = 0; returning 0")
        return 0.0
    l1 = sla.cholesky(sys_.M11, lower=True)
    l2 = sla.cholesky(sys_.M22, lower=True)
    x = sla.solve_triangular(l1, sys_.M12, lower=True)
    y = sla.solve_triangular(l2, x.T, lower=True).T
    return float(sla.svdvals(y)[0])


def build_multiscale_space(
    ops: FineOperators,
    nb: int,
    layers: int = 3,
    workers: int = 1,
) -> MultiscaleSpace:
    """Full NLMC pipeline: partition, continua, block bases, split, projection."""
    partition = build_coarse_partition(ops.grid, nb, layers)
    decomp = detect_continua(partition, ops.field)
    bases = parallel_map(
        lambda b: build_nlmc_basis(partition, decomp, ops, b),
        range(partition.n_blocks),
        workers=workers,
    )
    psi1, psi2, labels1, labels2 = split_spaces(decomp, bases, ops)
    system = project_coarse(psi1, psi2, ops)
    return MultiscaleSpace(
        partition=partition,
        decomposition=decomp,
        Psi1=psi1,
        Psi2=psi2,
        system=system,
        labels1=labels1,
        labels2=labels2,
        constraint_residual=max(bb.constraint_residual for bb in bases),
    )

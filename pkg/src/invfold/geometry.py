"""Rigid-motion-invariant featurization of backbone graphs.

Builds the k-nearest-neighbor residue graph (CA Euclidean distances,
ties broken by ascending residue index) and assembles per-node and
per-directed-edge features that are unchanged under any rotation plus
translation of the input coordinates:

  node:  Gaussian RBF encodings of intra-residue atom distances,
         sin/cos of backbone dihedrals with defined-masks, and a
         secondary-structure one-hot (10 annotation classes plus an
         "unknown" slot used when no annotation is supplied).
  edge:  RBF encodings of the 4x4 inter-residue heavy-atom distances,
         the relative orientation quaternion between the two residues'
         local frames, and a clamped one-hot of sequence separation.

Edge features are stored independently per orientation: the entry for
j->i lives in receiver i's slot for neighbor j and never aliases i->j.

Anything derived from an imputed (flagged) atom is zeroed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFrame, GraphTooSmall, InvalidParameter, ParseError
from .structure_io import ProteinBackbone

_GRAPH_MAGIC = b"IFG1"


@dataclass
class FeatureConfig:
    """Featurization knobs; defaults match the shipped config."""

    k: int = 48
    rbf_count: int = 16
    rbf_min: float = 0.0
    rbf_max: float = 20.0
    use_intra_rbf: bool = True
    use_dihedrals: bool = True
    use_secondary_structure: bool = True
    use_orientations: bool = True
    use_relative_position: bool = True
    relative_position_clamp: int = 32
    ss_classes: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise InvalidParameter(f"k must be >= 1, got {self.k}")
        if self.rbf_count < 2:
            raise InvalidParameter(f"rbf_count must be >= 2, got {self.rbf_count}")
        if not self.rbf_min < self.rbf_max:
            raise InvalidParameter("rbf_min must be < rbf_max")

    @property
    def node_dim(self) -> int:
        dim = 0
        if self.use_intra_rbf:
            dim += 6 * self.rbf_count
        if self.use_dihedrals:
            dim += 9
        if self.use_secondary_structure:
            dim += self.ss_classes + 1
        return dim

    @property
    def edge_dim(self) -> int:
        dim = 16 * self.rbf_count
        if self.use_orientations:
            dim += 4
        if self.use_relative_position:
            dim += 2 * self.relative_position_clamp + 1
        return dim


@dataclass
class LocalFrame:
    """Per-residue orthonormal frame; rows of `basis` are the local axes."""

    origin: np.ndarray
    basis: np.ndarray
    valid: bool = True


@dataclass
class ResidueGraph:
    """k-NN graph with invariant node and directed-edge features."""

    n: int
    k: int
    neighbors: np.ndarray  # (n, k') int32, ordered by ascending CA distance
    node_feats: np.ndarray  # (n, node_dim) float64
    edge_feats: np.ndarray  # (n, k', edge_dim) float64; row i slot m holds e_{neighbors[i,m] -> i}
    node_layout: list
    edge_layout: list
    labels: list
    seq_index: np.ndarray
    chain_id: str
    backbone: ProteinBackbone | None = None
    mask: np.ndarray = field(default=None)  # True where the residue counts toward the loss

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.array([aa != "X" for aa in self.labels], dtype=bool)

    def edge_vector(self, sender: int, receiver: int) -> np.ndarray:
        """The feature vector of the directed edge sender -> receiver."""
        slots = np.nonzero(self.neighbors[receiver] == sender)[0]
        if slots.size == 0:
            raise KeyError(f"{sender} is not a neighbor of {receiver}")
        return self.edge_feats[receiver, slots[0]]


def local_frames(backbone: ProteinBackbone) -> list:
    """Gram-Schmidt frames from (CA->C, CA->N), z = x cross y.

    Residues whose N or C atom is imputed get an identity-basis frame
    marked invalid; genuinely collinear real atoms raise DegenerateFrame.
    """
    if len(backbone) == 0:
        raise InvalidParameter("empty backbone")
    frames = []
    for i, res in enumerate(backbone.residues):
        if "N" in res.imputed or "C" in res.imputed:
            frames.append(LocalFrame(res.ca.copy(), np.eye(3), valid=False))
            continue
        u = res.c - res.ca
        nu = np.linalg.norm(u)
        if nu < 1e-9:
            raise DegenerateFrame(i)
        x = u / nu
        w = res.n - res.ca
        y_raw = w - (w @ x) * x
        ny = np.linalg.norm(y_raw)
        if ny < 1e-9:
            raise DegenerateFrame(i)
        y = y_raw / ny
        z = np.cross(x, y)
        frames.append(LocalFrame(res.ca.copy(), np.stack([x, y, z])))
    return frames


def torsion(p0, p1, p2, p3) -> np.ndarray:
    """Signed dihedral of four points (IUPAC sign), vectorized over rows."""
    p0, p1, p2, p3 = (np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in (p0, p1, p2, p3))
    b1 = p1 - p0
    b2 = p2 - p1
    b3 = p3 - p2
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    # degenerate spans (coincident imputed atoms) are masked by callers
    norm = np.linalg.norm(b2, axis=-1)
    x = np.sum(n1 * n2, axis=-1)
    y = np.sum(b1 * n2, axis=-1) * norm
    return np.arctan2(y, x)


def dihedral_angles(backbone: ProteinBackbone):
    """Backbone (phi, psi, omega) per residue, radians, with defined-mask.

    phi_i   : C_{i-1}, N_i, CA_i, C_i
    psi_i   : N_i, CA_i, C_i, N_{i+1}
    omega_i : CA_{i-1}, C_{i-1}, N_i, CA_i

    Mask is False at chain termini and wherever an involved atom was
    imputed; masked angles are reported as 0.
    """
    n = len(backbone)
    angles = np.zeros((n, 3))
    mask = np.zeros((n, 3), dtype=bool)
    if n < 2:
        return angles, mask
    coords = backbone.coords()
    N, CA, C = coords[:, 0], coords[:, 1], coords[:, 2]
    real_n = np.array(["N" not in r.imputed for r in backbone.residues])
    real_c = np.array(["C" not in r.imputed for r in backbone.residues])

    angles[1:, 0] = torsion(C[:-1], N[1:], CA[1:], C[1:])
    mask[1:, 0] = real_c[:-1] & real_n[1:] & real_c[1:]
    angles[:-1, 1] = torsion(N[:-1], CA[:-1], C[:-1], N[1:])
    mask[:-1, 1] = real_n[:-1] & real_c[:-1] & real_n[1:]
    angles[1:, 2] = torsion(CA[:-1], C[:-1], N[1:], CA[1:])
    mask[1:, 2] = real_c[:-1] & real_n[1:]

    angles[~mask] = 0.0
    return angles, mask


def rbf_centers(cfg: FeatureConfig):
    centers = np.linspace(cfg.rbf_min, cfg.rbf_max, cfg.rbf_count)
    sigma = (cfg.rbf_max - cfg.rbf_min) / (cfg.rbf_count - 1)
    return centers, sigma


def rbf_encode(d: float, cfg: FeatureConfig) -> np.ndarray:
    """Gaussian RBF encoding exp(-(d - c_m)^2 / (2 sigma^2))."""
    if d < 0:
        raise InvalidParameter(f"distance must be >= 0, got {d}")
    centers, sigma = rbf_centers(cfg)
    return np.exp(-((d - centers) ** 2) / (2.0 * sigma**2))


def _rbf_array(d: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    centers, sigma = rbf_centers(cfg)
    return np.exp(-((d[..., None] - centers) ** 2) / (2.0 * sigma**2))


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of rotation matrices (..., 3, 3).

    Uses the largest-denominator branch for stability, normalizes, and
    fixes the sign so the scalar part is >= 0 (ties: first nonzero
    vector component made positive).
    """
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 2
    if single:
        r = r[None]
    shape = r.shape[:-2]
    r = r.reshape(-1, 3, 3)
    m = r.shape[0]

    t = np.empty((m, 4))
    t[:, 0] = 1.0 + r[:, 0, 0] + r[:, 1, 1] + r[:, 2, 2]
    t[:, 1] = 1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2]
    t[:, 2] = 1.0 - r[:, 0, 0] + r[:, 1, 1] - r[:, 2, 2]
    t[:, 3] = 1.0 - r[:, 0, 0] - r[:, 1, 1] + r[:, 2, 2]
    case = np.argmax(t, axis=1)
    q = np.empty((m, 4))

    big = 0.5 * np.sqrt(np.maximum(t[np.arange(m), case], 1e-30))
    denom = 4.0 * big

    for c in range(4):
        sel = case == c
        if not np.any(sel):
            continue
        b = big[sel]
        d4 = denom[sel]
        rs = r[sel]
        if c == 0:
            q[sel, 0] = b
            q[sel, 1] = (rs[:, 2, 1] - rs[:, 1, 2]) / d4
            q[sel, 2] = (rs[:, 0, 2] - rs[:, 2, 0]) / d4
            q[sel, 3] = (rs[:, 1, 0] - rs[:, 0, 1]) / d4
        elif c == 1:
            q[sel, 1] = b
            q[sel, 0] = (rs[:, 2, 1] - rs[:, 1, 2]) / d4
            q[sel, 2] = (rs[:, 0, 1] + rs[:, 1, 0]) / d4
            q[sel, 3] = (rs[:, 0, 2] + rs[:, 2, 0]) / d4
        elif c == 2:
            q[sel, 2] = b
            q[sel, 0] = (rs[:, 0, 2] - rs[:, 2, 0]) / d4
            q[sel, 1] = (rs[:, 0, 1] + rs[:, 1, 0]) / d4
            q[sel, 3] = (rs[:, 1, 2] + rs[:, 2, 1]) / d4
        else:
            q[sel, 3] = b
            q[sel, 0] = (rs[:, 1, 0] - rs[:, 0, 1]) / d4
            q[sel, 1] = (rs[:, 0, 2] + rs[:, 2, 0]) / d4
            q[sel, 2] = (rs[:, 1, 2] + rs[:, 2, 1]) / d4

    q /= np.linalg.norm(q, axis=1, keepdims=True)

    # Canonical sign: scalar part >= 0; exact zeros fall through to the
    # first nonzero vector component.
    flip = q[:, 0] < 0
    zero_w = q[:, 0] == 0
    if np.any(zero_w):
        for i in np.nonzero(zero_w)[0]:
            vec = q[i, 1:]
            nz = np.nonzero(vec)[0]
            if nz.size and vec[nz[0]] < 0:
                flip[i] = True
    q[flip] *= -1.0

    q = q.reshape(*shape, 4)
    return q[0] if single else q


def relative_orientation(frame_i: LocalFrame, frame_j: LocalFrame) -> np.ndarray:
    """Quaternion of the rotation taking frame j's axes onto frame i's.

    With rows-as-axes bases the invariant relative rotation is
    basis_i @ basis_j.T (the map from j-local to i-local coordinates);
    it is unchanged under any global rigid motion.
    """
    return rotation_to_quaternion(frame_i.basis @ frame_j.basis.T)


def build_knn_graph(backbone: ProteinBackbone, cfg: FeatureConfig, ss=None) -> ResidueGraph:
    """Assemble the featurized k-NN residue graph.

    `ss` is an optional per-residue secondary-structure annotation
    (ints in [0, ss_classes)); without it every residue gets the
    dedicated unknown class.
    """
    n = len(backbone)
    if n < 2:
        raise GraphTooSmall(f"need at least 2 residues, got {n}")
    k_eff = min(cfg.k, n - 1)

    coords = backbone.coords()  # (n, 4, 3)
    ca = coords[:, 1]
    diff = ca[:, None, :] - ca[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, np.inf)
    # Stable argsort: equidistant candidates resolve to the lower index.
    neighbors = np.argsort(dist, axis=1, kind="stable")[:, :k_eff].astype(np.int32)

    atom_valid = np.ones((n, 4), dtype=bool)
    for i, res in enumerate(backbone.residues):
        for a, name in enumerate(("N", "CA", "C", "O")):
            if name in res.imputed:
                atom_valid[i, a] = False

    node_blocks = []
    node_layout = []
    offset = 0

    if cfg.use_intra_rbf:
        pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        a_idx = np.array([p[0] for p in pairs])
        b_idx = np.array([p[1] for p in pairs])
        d = np.linalg.norm(coords[:, a_idx] - coords[:, b_idx], axis=-1)  # (n, 6)
        block = _rbf_array(d, cfg)  # (n, 6, rbf)
        valid = atom_valid[:, a_idx] & atom_valid[:, b_idx]
        block *= valid[..., None]
        block = block.reshape(n, -1)
        node_blocks.append(block)
        node_layout.append({"family": "intra_rbf", "offset": offset, "width": block.shape[1]})
        offset += block.shape[1]

    if cfg.use_dihedrals:
        angles, mask = dihedral_angles(backbone)
        trig = np.zeros((n, 6))
        trig[:, 0::2] = np.sin(angles) * mask
        trig[:, 1::2] = np.cos(angles) * mask
        block = np.concatenate([trig, mask.astype(np.float64)], axis=1)
        node_blocks.append(block)
        node_layout.append({"family": "dihedral", "offset": offset, "width": 9})
        offset += 9

    if cfg.use_secondary_structure:
        width = cfg.ss_classes + 1
        block = np.zeros((n, width))
        if ss is None:
            block[:, cfg.ss_classes] = 1.0
        else:
            ss = np.asarray(ss, dtype=np.int64)
            if ss.shape != (n,):
                raise InvalidParameter(f"secondary-structure annotation must have shape ({n},)")
            if np.any(ss < 0) or np.any(ss >= cfg.ss_classes):
                raise InvalidParameter(f"secondary-structure classes must lie in [0, {cfg.ss_classes})")
            block[np.arange(n), ss] = 1.0
        node_blocks.append(block)
        node_layout.append({"family": "secondary_structure", "offset": offset, "width": width})
        offset += width

    node_feats = np.concatenate(node_blocks, axis=1) if node_blocks else np.zeros((n, 0))

    edge_blocks = []
    edge_layout = []
    offset = 0

    # 4x4 heavy-atom distances, receiver atom first.
    recv = coords[:, None, :, None, :]                # (n, 1, 4, 1, 3)
    send = coords[neighbors][:, :, None, :, :]        # (n, k', 1, 4, 3)
    d = np.linalg.norm(recv - send, axis=-1)          # (n, k', 4, 4)
    block = _rbf_array(d, cfg)                        # (n, k', 4, 4, rbf)
    pair_valid = atom_valid[:, None, :, None] & atom_valid[neighbors][:, :, None, :]
    block *= pair_valid[..., None]
    block = block.reshape(n, k_eff, -1)
    edge_blocks.append(block)
    edge_layout.append({"family": "inter_rbf", "offset": offset, "width": block.shape[2]})
    offset += block.shape[2]

    if cfg.use_orientations:
        frames = local_frames(backbone)
        basis = np.stack([f.basis for f in frames])
        valid = np.array([f.valid for f in frames])
        rel = np.einsum("nab,nmcb->nmac", basis, basis[neighbors])
        quat = rotation_to_quaternion(rel)            # (n, k', 4)
        quat *= (valid[:, None] & valid[neighbors])[..., None]
        edge_blocks.append(quat)
        edge_layout.append({"family": "orientation", "offset": offset, "width": 4})
        offset += 4

    if cfg.use_relative_position:
        clamp = cfg.relative_position_clamp
        width = 2 * clamp + 1
        pos = np.arange(n)
        rel = np.clip(neighbors - pos[:, None], -clamp, clamp) + clamp
        block = np.zeros((n, k_eff, width))
        ii, mm = np.meshgrid(np.arange(n), np.arange(k_eff), indexing="ij")
        block[ii, mm, rel] = 1.0
        edge_blocks.append(block)
        edge_layout.append({"family": "relative_position", "offset": offset, "width": width})
        offset += width

    edge_feats = np.concatenate(edge_blocks, axis=2)

    return ResidueGraph(
        n=n,
        k=k_eff,
        neighbors=neighbors,
        node_feats=node_feats,
        edge_feats=edge_feats,
        node_layout=node_layout,
        edge_layout=edge_layout,
        labels=list(backbone.sequence),
        seq_index=np.array([r.seq_index for r in backbone.residues], dtype=np.int32),
        chain_id=backbone.chain_id,
        backbone=backbone,
    )


def serialize_graph(graph: ResidueGraph) -> bytes:
    """Featurized-graph container: JSON header + int32/float32 blocks."""
    header = {
        "format": "graph/1",
        "n": graph.n,
        "k": graph.k,
        "node_dim": int(graph.node_feats.shape[1]),
        "edge_dim": int(graph.edge_feats.shape[2]),
        "node_layout": graph.node_layout,
        "edge_layout": graph.edge_layout,
        "labels": graph.labels,
        "seq_index": [int(s) for s in graph.seq_index],
        "chain_id": graph.chain_id,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return b"".join([
        _GRAPH_MAGIC,
        struct.pack("<I", len(header_bytes)),
        header_bytes,
        graph.neighbors.astype("<i4").tobytes(),
        graph.node_feats.astype("<f4").tobytes(),
        graph.edge_feats.astype("<f4").tobytes(),
    ])


def deserialize_graph(data: bytes) -> ResidueGraph:
    if data[:4] != _GRAPH_MAGIC:
        raise ParseError("not a graph container (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    n, k = header["n"], header["k"]
    node_dim, edge_dim = header["node_dim"], header["edge_dim"]
    off = 8 + hlen
    nbr = np.frombuffer(data, dtype="<i4", count=n * k, offset=off).reshape(n, k)
    off += nbr.nbytes
    node = np.frombuffer(data, dtype="<f4", count=n * node_dim, offset=off)
    off += node.nbytes
    edge = np.frombuffer(data, dtype="<f4", count=n * k * edge_dim, offset=off)
    return ResidueGraph(
        n=n,
        k=k,
        neighbors=nbr.astype(np.int32),
        node_feats=node.astype(np.float64).reshape(n, node_dim),
        edge_feats=edge.astype(np.float64).reshape(n, k, edge_dim),
        node_layout=header["node_layout"],
        edge_layout=header["edge_layout"],
        labels=header["labels"],
        seq_index=np.array(header["seq_index"], dtype=np.int32),
        chain_id=header["chain_id"],
        backbone=None,
    )


def write_graph(graph: ResidueGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_graph(graph))


def read_graph(path) -> ResidueGraph:
    with open(path, "rb") as fh:
        return deserialize_graph(fh.read())

"""Mesh proxies, soft silhouettes, clothing/body matching and the proxy-driven warp.

The synthetic humanoid is a union of closed capsule meshes with per-vertex
region labels; any mesh with the same label vocabulary can stand in for it
(see :func:`read_obj`).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from scipy.special import expit

from ._validation import check_same_shape
from .errors import ConfigError
from .fields import MLP, FrequencyEncoding

log = logging.getLogger(__name__)

REGIONS = ("head", "torso", "arm", "hand", "leg", "foot")
CLOTH_EXCLUDED = ("head", "hand", "foot")
MATCHING_WEIGHTS = (10.0, 1.0)
HUBER_DELTA = 1.0
WARP_NEIGHBOURS = 8
BETA_RANGE = (0.5, 2.0)


# --------------------------------------------------------------------------
# meshes


@dataclass
class MeshProxy:
    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray
    body_shape: tuple = (1.0, 1.0, 1.0)
    pose: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=object).reshape(-1)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ConfigError("face indices out of range")
        if len(self.labels) != len(self.vertices):
            raise ConfigError("need exactly one region label per vertex")

    @property
    def n_vertices(self):
        return len(self.vertices)

    def region_masks(self):
        return {r: self.labels == r for r in np.unique(self.labels)}

    def vertex_mask(self, exclude=CLOTH_EXCLUDED):
        return ~np.isin(self.labels, exclude)

    def faces_excluding(self, exclude=CLOTH_EXCLUDED):
        """Faces none of whose vertices carry an excluded region label."""
        keep = self.vertex_mask(exclude)
        return self.faces[np.all(keep[self.faces], axis=1)]

    def cloth_faces(self):
        return self.faces_excluding(CLOTH_EXCLUDED)

    def cloth_vertex_index(self):
        """Indices of vertices referenced by the clothing faces."""
        return np.unique(self.cloth_faces())

    def height(self):
        return float(np.ptp(self.vertices[:, 1])) if self.n_vertices else 0.0

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def with_vertices(self, vertices):
        return MeshProxy(vertices, self.faces, self.labels, self.body_shape, self.pose)


def _frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return axis, e1, np.cross(axis, e1)


def capsule_mesh(a, b, radius, rings=6, segments=16):
    """Closed, outward-oriented capsule mesh around segment ``a``-``b``.

    ``rings`` latitude rings per hemisphere; a zero-length segment gives a
    UV sphere.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    degenerate = np.linalg.norm(axis) < 1e-12
    if degenerate:
        axis = np.array([0.0, 1.0, 0.0])
    u, e1, e2 = _frame(axis)
    theta = 2.0 * np.pi * np.arange(segments) / segments
    ring_dir = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    verts = [a - radius * u]
    phis = [(-0.5 * np.pi + np.pi * 0.5 * k / rings, a) for k in range(1, rings + 1)]
    # a sphere shares its equator between the two hemispheres
    phis += [(np.pi * 0.5 * k / rings, b) for k in range(int(degenerate), rings)]
    for phi, center in phis:
        verts.extend(center + radius * (np.cos(phi) * ring_dir + np.sin(phi) * u))
    verts.append(b + radius * u)
    verts = np.asarray(verts)
    n_rings = len(phis)
    faces = []
    top = len(verts) - 1

    def ring(k, j):
        return 1 + k * segments + (j % segments)

    for j in range(segments):
        faces.append((0, ring(0, j + 1), ring(0, j)))
    for k in range(n_rings - 1):
        for j in range(segments):
            faces.append((ring(k, j), ring(k, j + 1), ring(k + 1, j + 1)))
            faces.append((ring(k, j), ring(k + 1, j + 1), ring(k + 1, j)))
    for j in range(segments):
        faces.append((ring(n_rings - 1, j), ring(n_rings - 1, j + 1), top))
    return verts, np.asarray(faces, dtype=np.int64)


def sphere_mesh(radius=1.0, center=(0.0, 0.0, 0.0), rings=16, segments=48, label="torso"):
    c = np.asarray(center, dtype=np.float64)
    verts, faces = capsule_mesh(c, c, radius, rings, segments)
    return MeshProxy(verts, faces, np.full(len(verts), label, dtype=object))


@dataclass
class Part:
    name: str
    region: str
    a: np.ndarray
    b: np.ndarray
    radius: float
    chain: tuple = ()


# canonical A-pose, y up, about 1.7 units tall
_PARTS = [
    ("torso", "torso", (0.0, -0.05, 0.0), (0.0, 0.35, 0.0), 0.15, ()),
    ("head", "head", (0.0, 0.62, 0.0), (0.0, 0.62, 0.0), 0.11, ()),
    ("l_upper_arm", "arm", (0.24, 0.36, 0.0), (0.42, 0.12, 0.0), 0.05, ("l_shoulder",)),
    ("l_forearm", "arm", (0.42, 0.12, 0.0), (0.55, -0.10, 0.0), 0.045, ("l_shoulder", "l_elbow")),
    ("l_hand", "hand", (0.59, -0.17, 0.0), (0.59, -0.17, 0.0), 0.05, ("l_shoulder", "l_elbow")),
    ("r_upper_arm", "arm", (-0.24, 0.36, 0.0), (-0.42, 0.12, 0.0), 0.05, ("r_shoulder",)),
    ("r_forearm", "arm", (-0.42, 0.12, 0.0), (-0.55, -0.10, 0.0), 0.045, ("r_shoulder", "r_elbow")),
    ("r_hand", "hand", (-0.59, -0.17, 0.0), (-0.59, -0.17, 0.0), 0.05, ("r_shoulder", "r_elbow")),
    ("l_thigh", "leg", (0.09, -0.12, 0.0), (0.11, -0.48, 0.0), 0.07, ("l_hip",)),
    ("l_shin", "leg", (0.11, -0.48, 0.0), (0.12, -0.80, 0.0), 0.055, ("l_hip", "l_knee")),
    ("l_foot", "foot", (0.12, -0.84, 0.0), (0.12, -0.86, 0.12), 0.04, ("l_hip", "l_knee")),
    ("r_thigh", "leg", (-0.09, -0.12, 0.0), (-0.11, -0.48, 0.0), 0.07, ("r_hip",)),
    ("r_shin", "leg", (-0.11, -0.48, 0.0), (-0.12, -0.80, 0.0), 0.055, ("r_hip", "r_knee")),
    ("r_foot", "foot", (-0.12, -0.84, 0.0), (-0.12, -0.86, 0.12), 0.04, ("r_hip", "r_knee")),
]

_JOINTS = {
    "pelvis": (0.0, -0.1, 0.0), "spine": (0.0, 0.15, 0.0), "neck": (0.0, 0.45, 0.0),
    "head": (0.0, 0.62, 0.0),
    "l_shoulder": (0.24, 0.36, 0.0), "l_elbow": (0.42, 0.12, 0.0), "l_wrist": (0.55, -0.10, 0.0),
    "r_shoulder": (-0.24, 0.36, 0.0), "r_elbow": (-0.42, 0.12, 0.0), "r_wrist": (-0.55, -0.10, 0.0),
    "l_hip": (0.09, -0.12, 0.0), "l_knee": (0.11, -0.48, 0.0), "l_ankle": (0.12, -0.80, 0.0),
    "r_hip": (-0.09, -0.12, 0.0), "r_knee": (-0.11, -0.48, 0.0), "r_ankle": (-0.12, -0.80, 0.0),
}
_JOINT_CHAINS = {
    "l_elbow": ("l_shoulder",), "l_wrist": ("l_shoulder", "l_elbow"),
    "r_elbow": ("r_shoulder",), "r_wrist": ("r_shoulder", "r_elbow"),
    "l_knee": ("l_hip",), "l_ankle": ("l_hip", "l_knee"),
    "r_knee": ("r_hip",), "r_ankle": ("r_hip", "r_knee"),
}
BONES = [
    ("pelvis", "spine"), ("spine", "neck"), ("neck", "head"),
    ("neck", "l_shoulder"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
    ("neck", "r_shoulder"), ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("pelvis", "l_hip"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
    ("pelvis", "r_hip"), ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
]
POSE_JOINTS = ("l_shoulder", "l_elbow", "r_shoulder", "r_elbow", "l_hip", "l_knee", "r_hip", "r_knee")


def _check_shape(body_shape):
    body_shape = np.asarray(body_shape, dtype=np.float64).reshape(3)
    lo, hi = BETA_RANGE
    if np.any(body_shape < lo) or np.any(body_shape > hi) or not np.all(np.isfinite(body_shape)):
        raise ConfigError(f"shape parameters must lie in [{lo}, {hi}], got {body_shape}")
    return body_shape


def _pose_transform(points, chain, joints, pose):
    """Apply the rigid joint rotations of ``chain`` (root first) to points."""
    for name in reversed(chain):
        rotvec = pose.get(name)
        if rotvec is None or not np.any(rotvec):
            continue
        R = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()
        points = (points - joints[name]) @ R.T + joints[name]
    return points


def _scaled_joints(body_shape):
    return {k: np.asarray(v) * body_shape for k, v in _JOINTS.items()}


def humanoid_parts(body_shape=(1.0, 1.0, 1.0), pose=None):
    """Capsule parts of the humanoid after shape scaling and posing.

    Radii are scaled by the mean horizontal shape factor.
    """
    body_shape = _check_shape(body_shape)
    pose = dict(pose or {})
    joints = _scaled_joints(body_shape)
    width = 0.5 * (body_shape[0] + body_shape[2])
    parts = []
    for name, region, a, b, r, chain in _PARTS:
        ends = np.array([a, b]) * body_shape
        ends = _pose_transform(ends, chain, joints, pose)
        parts.append(Part(name, region, ends[0], ends[1], r * width, chain))
    return parts


def synth_humanoid(body_shape=(1.0, 1.0, 1.0), pose=None, rings=4, segments=12):
    """Labelled capsule humanoid.

    Vertices are built in canonical units, scaled per axis by ``body_shape`` and
    then posed by ``pose`` (joint name -> axis-angle vector, see
    ``POSE_JOINTS``).
    """
    body_shape = _check_shape(body_shape)
    pose = {k: np.asarray(v, dtype=np.float64) for k, v in (pose or {}).items()}
    unknown = set(pose) - set(POSE_JOINTS)
    if unknown:
        raise ConfigError(f"unknown pose joints: {sorted(unknown)}")
    joints = _scaled_joints(body_shape)
    verts, faces, labels = [], [], []
    offset = 0
    for name, region, a, b, r, chain in _PARTS:
        v, f = capsule_mesh(a, b, r, rings, segments)
        v = _pose_transform(v * body_shape, chain, joints, pose)
        verts.append(v)
        faces.append(f + offset)
        labels.extend([region] * len(v))
        offset += len(v)
    return MeshProxy(np.concatenate(verts), np.concatenate(faces), np.array(labels, dtype=object),
                     tuple(body_shape), {k: v.tolist() for k, v in pose.items()})


@dataclass
class Skeleton:
    names: list
    joints: np.ndarray
    bones: list


def humanoid_skeleton(body_shape=(1.0, 1.0, 1.0), pose=None):
    body_shape = _check_shape(body_shape)
    pose = {k: np.asarray(v, dtype=np.float64) for k, v in (pose or {}).items()}
    joints = _scaled_joints(body_shape)
    names = list(_JOINTS)
    pts = np.array([_pose_transform(joints[n][None], _JOINT_CHAINS.get(n, ()), joints, pose)[0]
                    for n in names])
    index = {n: i for i, n in enumerate(names)}
    return Skeleton(names, pts, [(index[a], index[b]) for a, b in BONES])


def write_obj(path, mesh):
    """Write ``path`` (OBJ positions + faces) and ``path.with_suffix('.labels')``."""
    path = Path(path)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n")
    path.with_suffix(".labels").write_text("\n".join(str(l) for l in mesh.labels) + "\n")


def read_obj(path, labels_path=None, default_label="torso"):
    path = Path(path)
    verts, faces = [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            faces.extend((idx[0], idx[k], idx[k + 1]) for k in range(1, len(idx) - 1))
    labels_path = path.with_suffix(".labels") if labels_path is None else Path(labels_path)
    if labels_path.exists():
        labels = labels_path.read_text().split()
    else:
        labels = [default_label] * len(verts)
    return MeshProxy(np.array(verts), np.array(faces, dtype=np.int64), np.array(labels, dtype=object))


# --------------------------------------------------------------------------
# soft silhouette rasterizer


class MeshTopology:
    """Edge adjacency and connected components of a face list."""

    def __init__(self, faces, n_vertices):
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        self.faces = faces
        n_faces = len(faces)
        if n_faces == 0:
            self.component = np.zeros(0, dtype=np.int64)
            self.n_components = 0
            self.edges = np.zeros((0, 2), dtype=np.int64)
            self.edge_of = np.zeros((0, 3), dtype=np.int64)
            self.edge_count = np.zeros(0, dtype=np.int64)
            return
        rows = np.repeat(np.arange(n_faces), 3)
        inc = coo_matrix((np.ones(3 * n_faces), (rows, faces.ravel())), shape=(n_faces, n_vertices)).tocsr()
        adj = inc @ inc.T
        self.n_components, self.component = connected_components(adj, directed=False)
        pairs = np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1).reshape(-1, 2)
        keyed = np.sort(pairs, axis=1)
        self.edges, inverse, self.edge_count = np.unique(keyed, axis=0, return_inverse=True,
                                                         return_counts=True)
        self.edge_of = inverse.reshape(n_faces, 3)


@dataclass
class Silhouette:
    """Soft coverage image with its backward pass onto mesh vertices."""

    image: np.ndarray
    camera: object
    sharpness: float
    _cache: dict = field(default=None, repr=False)

    def backward(self, d_image):
        """Gradient of ``sum(d_image * image)`` w.r.t. the mesh vertices."""
        c = self._cache
        n_vertices = c["n_vertices"]
        grad = np.zeros((n_vertices, 3))
        if c["pixels"] is None:
            return grad
        cov = self.image.reshape(-1)[c["pixels"]]
        g = d_image.reshape(-1)[c["pixels"]] * self.sharpness * cov * (1.0 - cov)
        g_sd = g * c["sign"]
        # d(dist)/d(a) = -(1-s) diff/dist, d(dist)/d(b) = -s diff/dist
        unit = c["unit"]
        ga = -(g_sd * (1.0 - c["s"]))[:, None] * unit
        gb = -(g_sd * c["s"])[:, None] * unit
        grad_ndc = np.zeros((n_vertices, 2))
        np.add.at(grad_ndc, c["va"], ga)
        np.add.at(grad_ndc, c["vb"], gb)
        pc, scale, focal = c["pc"], c["scale"], self.camera.focal
        z = pc[:, 2]
        used = np.zeros(n_vertices, bool)
        used[c["va"]] = True
        used[c["vb"]] = True
        zs = np.where(used, z, 1.0)
        d_pc = np.zeros((n_vertices, 3))
        k = scale * focal
        d_pc[:, 0] = grad_ndc[:, 0] * k / zs
        d_pc[:, 1] = grad_ndc[:, 1] * k / zs
        d_pc[:, 2] = -(grad_ndc[:, 0] * pc[:, 0] + grad_ndc[:, 1] * pc[:, 1]) * k / zs ** 2
        return d_pc @ self.camera.rotation.T


def _rescaled_camera(camera, resolution):
    from .render import CameraPose

    if resolution is None:
        return camera
    w = h = int(resolution) if np.isscalar(resolution) else None
    if w is None:
        h, w = (int(r) for r in resolution)
    if (w, h) == (camera.width, camera.height):
        return camera
    return CameraPose(camera.position, camera.rotation, camera.focal * w / camera.width, w, h)


def _inside_components(uv, faces, comp, n_comp, width, height):
    """Boolean (n_comp, H*W): pixel centre inside some projected face."""
    inside = np.zeros((n_comp, width * height), bool)
    if len(faces) == 0:
        return inside
    tri = uv[faces]
    cmin = np.clip(np.ceil(tri[..., 0].min(1) - 0.5), 0, width).astype(np.int64)
    cmax = np.clip(np.floor(tri[..., 0].max(1) - 0.5), -1, width - 1).astype(np.int64)
    rmin = np.clip(np.ceil(tri[..., 1].min(1) - 0.5), 0, height).astype(np.int64)
    rmax = np.clip(np.floor(tri[..., 1].max(1) - 0.5), -1, height - 1).astype(np.int64)
    ncols = np.maximum(cmax - cmin + 1, 0)
    nrows = np.maximum(rmax - rmin + 1, 0)
    sizes = ncols * nrows
    total = int(sizes.sum())
    if total == 0:
        return inside
    fidx = np.repeat(np.arange(len(faces)), sizes)
    start = np.repeat(np.cumsum(sizes) - sizes, sizes)
    local = np.arange(total) - start
    col = cmin[fidx] + local % ncols[fidx]
    row = rmin[fidx] + local // ncols[fidx]
    p = np.stack([col + 0.5, row + 0.5], axis=1)
    a, b, c = tri[fidx, 0], tri[fidx, 1], tri[fidx, 2]

    def edge(p0, p1):
        return (p1[:, 0] - p0[:, 0]) * (p[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p[:, 0] - p0[:, 0])

    e0, e1, e2 = edge(a, b), edge(b, c), edge(c, a)
    hit = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    hit &=~((e0 == 0) & (e1 == 0) & (e2 == 0))
    inside[comp[fidx[hit]], row[hit] * width + col[hit]] = True
    return inside


def rasterize_silhouette(vertices, faces, camera, resolution=None, sharpness=50.0, topology=None,
                         chunk=8192):
    """Soft silhouette ``sigmoid(sharpness * sd)`` of a triangle mesh.

    ``sd`` is the signed screen-space distance (units of half the image width;
    positive inside) to the silhouette, taken as the union over connected
    components of each component's distance to its contour edges.
    """
    if sharpness <= 0:
        raise ConfigError("sharpness must be positive")
    camera = _rescaled_camera(camera, resolution)
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    W, H = camera.width, camera.height
    n_vertices = len(vertices)
    empty = Silhouette(np.zeros((H, W)), camera, sharpness,
                       {"n_vertices": n_vertices, "pixels": None})
    if len(faces) == 0:
        return empty
    pc = camera.world_to_camera(vertices)
    front = np.all(pc[faces][..., 2] > 1e-6, axis=1)
    if not np.any(front):
        log.warning("mesh lies entirely behind the camera; silhouette is empty")
        return empty
    if topology is None or not np.array_equal(topology.faces, faces):
        topology = MeshTopology(faces, n_vertices)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = camera.focal * pc[:, :2] / pc[:, 2:3] + np.array([0.5 * W, 0.5 * H])
    scale = 2.0 / W
    ndc = uv * scale

    tri = uv[faces]
    area = ((tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
            - (tri[:, 1, 1] - tri[:, 0, 1]) * (tri[:, 2, 0] - tri[:, 0, 0]))
    facing = np.where(front, np.sign(area), 0).astype(np.int64)
    n_edges = len(topology.edges)
    emin = np.full(n_edges, 2)
    emax = np.full(n_edges, -2)
    np.minimum.at(emin, topology.edge_of.ravel(), np.repeat(facing, 3))
    np.maximum.at(emax, topology.edge_of.ravel(), np.repeat(facing, 3))
    edge_front = np.zeros(n_edges, bool)
    np.logical_or.at(edge_front, topology.edge_of.ravel(), np.repeat(front, 3))
    contour = edge_front & ((topology.edge_count == 1) | ((emin < 0) & (emax > 0)))
    edge_comp = np.zeros(n_edges, dtype=np.int64)
    edge_comp[topology.edge_of.ravel()] = np.repeat(topology.component, 3)

    inside = _inside_components(uv, faces[front], topology.component[front], topology.n_components, W, H)

    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pix = np.stack([(cols.ravel() + 0.5) * scale, (rows.ravel() + 0.5) * scale], axis=1)
    n_pix = len(pix)
    best = np.full(n_pix, -np.inf)
    best_edge = np.full(n_pix, -1)
    best_s = np.zeros(n_pix)
    best_sign = np.zeros(n_pix)
    best_diff = np.zeros((n_pix, 2))
    for k in range(topology.n_components):
        ids = np.flatnonzero(contour & (edge_comp == k))
        if len(ids) == 0:
            continue
        a = ndc[topology.edges[ids, 0]]
        ab = ndc[topology.edges[ids, 1]] - a
        ab2 = np.maximum(np.sum(ab * ab, axis=1), 1e-30)
        for lo in range(0, n_pix, chunk):
            p = pix[lo:lo + chunk]
            ap = p[:, None, :] - a[None]
            s = np.clip(np.einsum("pei,ei->pe", ap, ab) / ab2, 0.0, 1.0)
            diff = ap - s[..., None] * ab[None]
            d2 = np.einsum("pei,pei->pe", diff, diff)
            j = np.argmin(d2, axis=1)
            r = np.arange(len(p))
            dist = np.sqrt(d2[r, j])
            sign = np.where(inside[k, lo:lo + chunk], 1.0, -1.0)
            sd = sign * dist
            better = sd > best[lo:lo + chunk]
            sl = np.arange(lo, lo + len(p))[better]
            best[sl] = sd[better]
            best_edge[sl] = ids[j[better]]
            best_s[sl] = s[r, j][better]
            best_sign[sl] = sign[better]
            best_diff[sl] = diff[r, j][better]
    if np.all(best_edge < 0):
        return empty
    image = np.where(best_edge >= 0, expit(sharpness * best), 0.0).reshape(H, W)
    pixels = np.flatnonzero(best_edge >= 0)
    dist = np.abs(best[pixels])
    unit = np.where((dist > 0)[:, None], best_diff[pixels] / np.where(dist > 0, dist, 1.0)[:, None], 0.0)
    cache = {
        "n_vertices": n_vertices, "pixels": pixels, "sign": best_sign[pixels], "s": best_s[pixels],
        "unit": unit, "va": topology.edges[best_edge[pixels], 0], "vb": topology.edges[best_edge[pixels], 1],
        "pc": pc, "scale": scale,
    }
    return Silhouette(image, camera, sharpness, cache)


def nerf_cloth_mask(field, camera, n_samples=64, bound=1.0):
    """Accumulated opacity of a clothing field along every pixel ray."""
    from .render import render_image

    _, opacity = render_image([field], camera, n_samples, bound=bound)
    return opacity


# --------------------------------------------------------------------------
# matching losses


def huber(r, delta=HUBER_DELTA):
    a = np.abs(r)
    value = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.where(a <= delta, r, delta * np.sign(r))
    return value, grad


def match_loss(mask_cloth, proxy_cloth, proxy_body, one_sided=False, delta=HUBER_DELTA):
    """Mean Huber penalty of the clothing/body mask residual.

    Returns ``(value, grads)`` with cotangents keyed ``mask_cloth``,
    ``proxy_cloth`` and ``proxy_body``.
    """
    mask_cloth, proxy_cloth = check_same_shape(mask_cloth, proxy_cloth, ("mask_cloth", "proxy_cloth"))
    mask_cloth, proxy_body = check_same_shape(mask_cloth, proxy_body, ("mask_cloth", "proxy_body"))
    n = mask_cloth.size
    if not one_sided:
        r = mask_cloth + proxy_cloth - proxy_body
        value, g = huber(r, delta)
        g = g / n
        return float(value.sum() / n), {"mask_cloth": g, "proxy_cloth": g, "proxy_body": -g}
    union = mask_cloth + proxy_cloth
    capped = np.minimum(1.0, union)
    r = np.maximum(0.0, proxy_body - capped)
    value, g = huber(r, delta)
    g = np.where(r > 0, g, 0.0) / n
    g_union = np.where(union < 1.0, -g, 0.0)
    return float(value.sum() / n), {"mask_cloth": g_union, "proxy_cloth": g_union, "proxy_body": g}


def offset_reg_loss(offsets):
    """``|o|_2`` over all stacked offsets, divided by the vertex count."""
    o = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    n = max(len(o), 1)
    norm = np.linalg.norm(o)
    grad = o / (norm * n) if norm > 0 else np.zeros_like(o)
    return float(norm / n), grad


def matching_stage_loss(l_match, l_offset_reg, weights=MATCHING_WEIGHTS):
    return weights[0] * l_match + weights[1] * l_offset_reg


def total_loss(body, clothing, matching):
    return body + clothing + matching


def uncovered_body_mass(mask_cloth, proxy_cloth, proxy_body):
    """Summed body coverage left outside the clothing union."""
    return float(np.sum(np.maximum(0.0, proxy_body - np.minimum(1.0, mask_cloth + proxy_cloth))))


def silhouette_iou(a, b, threshold=0.5):
    a = np.asarray(a) > threshold
    b = np.asarray(b) > threshold
    union = np.sum(a | b)
    return float(np.sum(a & b) / union) if union else 1.0


# --------------------------------------------------------------------------
# vertex offsets and warping


class VertexOffsetModel:
    """Small MLP mapping canonical vertex positions to bounded offsets.

    The last layer starts at zero, so the initial offsets vanish.  Raw outputs
    are squashed radially: ``o = cap * raw / sqrt(cap**2 + |raw|**2)``.
    """

    def __init__(self, cap=0.2 * 1.7, hidden=(32, 32), num_bands=4, seed=0, params=None):
        self.cap = float(cap)
        self.hidden = tuple(int(h) for h in hidden)
        self.encoder = FrequencyEncoding(num_bands, include_input=True)
        self.mlp = MLP([self.encoder.out_dim, *self.hidden, 3])
        if params is None:
            params = self.mlp.init_params(np.random.default_rng(seed), zero_last=True)
        self.params = np.array(params, dtype=np.float64)
        if self.params.shape != (self.mlp.size,):
            raise ConfigError(f"expected {self.mlp.size} offset-model parameters")

    @property
    def n_params(self):
        return self.params.size

    def descriptor(self):
        return {"kind": "vertex_offsets", "hidden": list(self.hidden),
                "num_bands": self.encoder.num_bands, "cap": self.cap, "activation": "tanh"}

    @classmethod
    def from_descriptor(cls, desc, params):
        if desc.get("kind") != "vertex_offsets":
            raise ConfigError("descriptor is not a vertex-offset model")
        return cls(cap=desc["cap"], hidden=desc["hidden"], num_bands=desc["num_bands"], params=params)

    def forward(self, vertices):
        raw, _, cache = self.mlp.forward(self.params, self.encoder(vertices))
        q = np.sqrt(self.cap ** 2 + np.sum(raw * raw, axis=1, keepdims=True))
        return self.cap * raw / q, (cache, raw, q)

    def __call__(self, vertices):
        return self.forward(vertices)[0]

    def backward(self, cache, d_offsets):
        mlp_cache, raw, q = cache
        radial = np.sum(raw * d_offsets, axis=1, keepdims=True)
        d_raw = self.cap / q * (d_offsets - raw * radial / q ** 2)
        return self.mlp.backward(self.params, mlp_cache, d_raw)


class ProxyWarp:
    """Inverse-distance blend of the ``k`` nearest proxy-vertex offsets.

    ``canonical(x) = x - sum_k w_k o_k`` with ``w_k`` proportional to
    ``1 / (d_k + 1e-6)`` and normalised to sum to one.
    """

    def __init__(self, vertices, offsets, k=WARP_NEIGHBOURS, eps=1e-6):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
        if self.vertices.shape != self.offsets.shape:
            raise ConfigError("need one offset per proxy vertex")
        if not np.all(np.isfinite(self.offsets)):
            raise ConfigError("offsets must be finite")
        self.k = min(int(k), len(self.vertices))
        self.eps = eps
        self.tree = cKDTree(self.vertices)

    def _neighbours(self, x):
        d, idx = self.tree.query(x, k=self.k)
        return d.reshape(len(x), -1), idx.reshape(len(x), -1)

    def displacement(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d, idx = self._neighbours(x)
        u = 1.0 / (d + self.eps)
        w = u / u.sum(axis=1, keepdims=True)
        return np.einsum("nk,nkj->nj", w, self.offsets[idx])

    def canonical(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return x - self.displacement(x)

    def jacobian(self, x):
        """d(canonical)/dx, shape (n, 3, 3)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d, idx = self._neighbours(x)
        u = 1.0 / (d + self.eps)
        U = u.sum(axis=1, keepdims=True)
        w = u / U
        diff = x[:, None, :] - self.vertices[idx]
        dd = diff / np.maximum(d, 1e-12)[..., None]
        du = -(u * u)[..., None] * dd
        dw = (du - w[..., None] * du.sum(axis=1, keepdims=True)) / U[..., None]
        d_disp = np.einsum("nkj,nki->nji", self.offsets[idx], dw)
        return np.eye(3)[None] - d_disp


class WarpedField:
    """A field queried through a :class:`ProxyWarp` (deformed -> canonical)."""

    def __init__(self, field, warp):
        self.field = field
        self.warp = warp
        self.role = field.role
        self.layer_index = field.layer_index

    @property
    def params(self):
        return self.field.params

    @property
    def n_params(self):
        return self.field.n_params

    def forward(self, x, spatial=False):
        xc = self.warp.canonical(x)
        out, cache = self.field.forward(xc, spatial=spatial)
        if spatial:
            out.grad_sigma = np.einsum("nij,ni->nj", self.warp.jacobian(x), out.grad_sigma)
        return out, (cache, spatial)

    def backward(self, cache, d_sigma=None, d_rgb=None, d_normal=None, d_grad_sigma=None):
        inner, _ = cache
        if d_grad_sigma is not None:
            raise NotImplementedError("second-order terms through the warp are not supported")
        return self.field.backward(inner, d_sigma, d_rgb, d_normal)

    def query(self, x):
        out, _ = self.forward(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        return out.sigma, out.rgb, out.normal


def warp_query(field, proxy_vertices, offsets, x, k=WARP_NEIGHBOURS):
    """Query ``field`` at points pulled back by the proxy offsets."""
    return WarpedField(field, ProxyWarp(proxy_vertices, offsets, k)).query(x)

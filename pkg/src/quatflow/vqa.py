"""Templated visual question answering over annotated scenes.

Answers embed quantized 3D tokens for coordinates and distances (and
1024-bin normalized image-location placeholders for the 2D task).  Every
emitted record stores the unquantized ground truth so it can be checked
against a recomputation of the geometry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blobio
from .errors import DegenerateCloud, NoObjects, TooFewPoints
from .scene import (
    Intrinsics,
    OrientedBox3D,
    PointMap,
    SceneObject,
    backproject,
    bbox_vertex_distances,
    compare_depths,
    filter_duplicates,
    keypoints,
    object_distance,
    order_vertices,
    oriented_bbox,
    remove_outliers,
)
from .tokens import TokenVocab3D, encode, render_token

SCENE_FORMAT_VERSION = 1
VQA_FORMAT_VERSION = 1

LOC2D_BINS = 1024

TASK_KINDS = (
    "keypoints_3d",
    "bbox_3d",
    "object_distance",
    "bbox_distance",
    "backprojection",
    "depth_compare",
)

PAIR_TASKS = {"object_distance", "bbox_distance", "depth_compare"}

TEMPLATES = {
    "keypoints_3d": "Give the 3D coordinates of the closest, furthest and center points of the {a}.",
    "bbox_3d": "Give the vertices of the 3D bounding box of the {a}.",
    "object_distance": "How far is the {b} from the {a}? Give the direct distance and its xyz components.",
    "bbox_distance": "Give the per-vertex offsets and the center offset between the bounding boxes of the {a} and the {b}.",
    "backprojection": "Mark the vertices of the 3D bounding box of the {a} on the image.",
    "depth_compare": "What is the distance from the camera to the {a}? What is the distance from the camera to the {b}? Which object is closer to the camera?",
}


@dataclass(frozen=True)
class VqaPair:
    question: str
    answer: str
    task_kind: str
    tokens: list
    ground_truth: dict
    objects: list

    def to_record(self) -> dict:
        return {
            "format_version": VQA_FORMAT_VERSION,
            "task_kind": self.task_kind,
            "question": self.question,
            "answer": self.answer,
            "tokens": [int(t) for t in self.tokens],
            "ground_truth": self.ground_truth,
            "objects": self.objects,
        }


@dataclass
class Scene:
    """An annotated image: dense points, labeled object masks, intrinsics."""

    point_map: PointMap
    objects: list  # of SceneObject
    intrinsics: Intrinsics
    name: str = "scene"
    _boxes: dict = field(default_factory=dict, repr=False)

    def eligible_objects(self) -> list:
        """Unique-label objects whose clouds support box geometry."""
        unique = filter_duplicates(self.objects)
        out = []
        for obj in unique:
            try:
                self.box_of(obj)
            except (DegenerateCloud, TooFewPoints):
                continue
            out.append(obj)
        return out

    def clean_cloud(self, obj: SceneObject) -> np.ndarray:
        cloud = obj.cloud
        if cloud.shape[0] > 20:
            cloud = remove_outliers(cloud)
        return cloud

    def box_of(self, obj: SceneObject) -> OrientedBox3D:
        if obj.label not in self._boxes:
            self._boxes[obj.label] = oriented_bbox(self.clean_cloud(obj))
        return self._boxes[obj.label]


def render_loc2d(idx: int) -> str:
    return f"<loc{idx:04d}>"


def encode_pixels(uv, width: int, height: int) -> np.ndarray:
    """Quantize pixel coordinates into 1024 normalized location bins."""
    uv = np.asarray(uv, dtype=float)
    u = np.clip(np.round(uv[:, 0] / max(width - 1, 1) * (LOC2D_BINS - 1)), 0, LOC2D_BINS - 1)
    v = np.clip(np.round(uv[:, 1] / max(height - 1, 1) * (LOC2D_BINS - 1)), 0, LOC2D_BINS - 1)
    return np.column_stack([u, v]).astype(np.int64).ravel()


def _tokens_text(token_ids) -> str:
    return " ".join(render_token(int(t)) for t in token_ids)


def _build_pair(scene: Scene, kind: str, objs: list, vocab: TokenVocab3D) -> VqaPair:
    labels = [o.label for o in objs]
    question = TEMPLATES[kind].format(a=labels[0], b=labels[-1])
    if kind == "keypoints_3d":
        kp = keypoints(scene.clean_cloud(objs[0]))
        values = np.concatenate([kp["closest"], kp["furthest"], kp["center"]])
        token_ids = encode(values, vocab)
        answer = _tokens_text(token_ids)
        gt = {k: v.tolist() for k, v in kp.items()}
    elif kind == "bbox_3d":
        verts = order_vertices(scene.box_of(objs[0]))
        token_ids = encode(verts, vocab).ravel()
        answer = _tokens_text(token_ids)
        gt = {"vertices": verts.tolist()}
    elif kind == "object_distance":
        d = object_distance(objs[0], objs[1])
        values = np.concatenate([[d["direct"]], d["components"]])
        token_ids = encode(values, vocab)
        answer = _tokens_text(token_ids)
        gt = {"direct": d["direct"], "components": d["components"].tolist()}
    elif kind == "bbox_distance":
        d = bbox_vertex_distances(scene.box_of(objs[0]), scene.box_of(objs[1]))
        values = np.concatenate([d["vertex_offsets"].ravel(), d["center_offset"]])
        token_ids = encode(values, vocab)
        answer = _tokens_text(token_ids)
        gt = {
            "vertex_offsets": d["vertex_offsets"].tolist(),
            "center_offset": d["center_offset"].tolist(),
        }
    elif kind == "backprojection":
        verts = order_vertices(scene.box_of(objs[0]))
        uv = backproject(verts, scene.intrinsics)
        token_ids = encode_pixels(uv, scene.point_map.width, scene.point_map.height)
        answer = " ".join(render_loc2d(int(t)) for t in token_ids)
        gt = {"pixels": uv.tolist()}
    elif kind == "depth_compare":
        d = compare_depths(objs[0], objs[1])
        token_ids = encode(np.array([d["dist_a"], d["dist_b"]]), vocab)
        answer = f"{_tokens_text(token_ids)} the {d['closer']}"
        gt = {
            "dist_a": d["dist_a"],
            "dist_b": d["dist_b"],
            "closer": d["closer"],
            "tie": d["tie"],
        }
    else:
        raise ValueError(f"unknown task kind: {kind}")
    return VqaPair(
        question=question,
        answer=answer,
        task_kind=kind,
        tokens=[int(t) for t in np.asarray(token_ids).ravel()],
        ground_truth=gt,
        objects=labels,
    )


def generate_vqa(
    scene: Scene, vocab: TokenVocab3D, rng: np.random.Generator, n_range=(1, 4)
) -> list:
    """Draw 1..4 question-answer pairs over the scene's eligible objects."""
    objects = scene.eligible_objects()
    if not objects:
        raise NoObjects(f"scene {scene.name!r} has no usable objects")
    kinds = list(TASK_KINDS) if len(objects) >= 2 else [
        k for k in TASK_KINDS if k not in PAIR_TASKS
    ]
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    pairs = []
    for _ in range(n):
        kind = kinds[int(rng.integers(len(kinds)))]
        count = 2 if kind in PAIR_TASKS else 1
        picks = rng.choice(len(objects), size=count, replace=False)
        pairs.append(_build_pair(scene, kind, [objects[i] for i in picks], vocab))
    return pairs


def verify_pair(scene: Scene, vocab: TokenVocab3D, pair: VqaPair) -> bool:
    """Recompute the pair from the scene and compare the token array."""
    objs = {o.label: o for o in scene.eligible_objects()}
    try:
        again = _build_pair(scene, pair.task_kind, [objs[l] for l in pair.objects], vocab)
    except KeyError:
        return False
    return again.tokens == pair.tokens and again.answer == pair.answer


def pairs_to_jsonl(pairs) -> str:
    return "\n".join(json.dumps(p.to_record(), sort_keys=True) for p in pairs) + "\n"


def write_scene(scene_dir, scene: Scene) -> None:
    """Serialize a scene directory: blobs plus a JSON index."""
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    blobio.write_blob(scene_dir / "points.blob", scene.point_map.points.astype("<f4"))
    blobio.write_blob(scene_dir / "validity.blob", scene.point_map.validity.astype("u1"))
    objects = []
    for i, obj in enumerate(scene.objects):
        mask_name = f"mask_{i:03d}.blob"
        blobio.write_blob(scene_dir / mask_name, obj.mask.astype("u1"))
        objects.append({"label": obj.label, "mask": mask_name})
    index = {
        "format_version": SCENE_FORMAT_VERSION,
        "name": scene.name,
        "width": scene.point_map.width,
        "height": scene.point_map.height,
        "intrinsics": {
            "fx": scene.intrinsics.fx,
            "fy": scene.intrinsics.fy,
            "cx": scene.intrinsics.cx,
            "cy": scene.intrinsics.cy,
        },
        "objects": objects,
    }
    blobio.atomic_write_text(scene_dir / "index.json", json.dumps(index, sort_keys=True, indent=1))


def load_scene(scene_dir) -> Scene:
    scene_dir = Path(scene_dir)
    index = json.loads((scene_dir / "index.json").read_text())
    if index.get("format_version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene format: {index.get('format_version')}")
    pm = PointMap(
        points=blobio.read_blob(scene_dir / "points.blob").astype(float),
        validity=blobio.read_blob(scene_dir / "validity.blob").astype(bool),
    )
    k = Intrinsics(**index["intrinsics"])
    objects = []
    for entry in index["objects"]:
        mask = blobio.read_blob(scene_dir / entry["mask"]).astype(bool)
        objects.append(SceneObject.from_point_map(entry["label"], mask, pm))
    return Scene(point_map=pm, objects=objects, intrinsics=k, name=index.get("name", scene_dir.name))


def synthetic_scene(rng: np.random.Generator, name="scene", h=48, w=64, n_objects=3) -> Scene:
    """A synthetic fixture scene: box-shaped objects embedded in a depth map.

    Useful for tests and demos; objects are disjoint image rectangles whose
    points sample distinct oriented boxes in front of the camera.
    """
    from .rotation import quat_to_matrix, sample_uniform_quat

    labels = ["cup", "plate", "bottle", "bowl", "spoon", "brush"]
    k = Intrinsics(fx=60.0, fy=60.0, cx=w / 2, cy=h / 2)
    points = np.zeros((h, w, 3))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base_z = 3.0
    points[..., 0] = (xs - k.cx) / k.fx * base_z
    points[..., 1] = (ys - k.cy) / k.fy * base_z
    points[..., 2] = base_z
    validity = np.ones((h, w), dtype=bool)
    validity[rng.uniform(size=(h, w)) < 0.02] = False  # sensor dropouts
    objects = []
    cols = np.array_split(np.arange(w), n_objects)
    for i in range(n_objects):
        r0, r1 = h // 4, 3 * h // 4
        c0, c1 = cols[i][2], cols[i][-2]
        mask = np.zeros((h, w), dtype=bool)
        mask[r0:r1, c0:c1] = True
        extents = rng.uniform(0.1, 0.4, 3)
        rot = quat_to_matrix(sample_uniform_quat(rng))
        center = np.array([(c0 + c1) / 2 - k.cx, (r0 + r1) / 2 - k.cy, 0.0])
        center = center / k.fx * base_z + [0, 0, base_z + rng.uniform(-0.5, 0.5)]
        sel = mask & validity
        m = sel.sum()
        local = (rng.uniform(-0.5, 0.5, (m, 3)) * extents) @ rot.T
        points[sel] = center + local
        objects.append(SceneObject.from_point_map(labels[i], mask, PointMap(points, validity)))
    pm = PointMap(points=points, validity=validity)
    # Rebuild objects against the final point map so clouds match storage.
    objects = [SceneObject.from_point_map(o.label, o.mask, pm) for o in objects]
    return Scene(point_map=pm, objects=objects, intrinsics=k, name=name)

"""On-disk formats.

Blob files: an 8-byte magic, a little-endian uint64 header length, a JSON header
(sorted keys) listing every array's name, dtype, shape and byte offset, then the
raw little-endian array bytes. Avatar bundles are directories holding a YAML
manifest plus blob and PLY files. Images are 8-bit PNG; depth maps are PFM.
"""
import json
import os
import struct

import numpy as np
import yaml
from PIL import Image

from .avatar import AvatarBundle, DisplacementField, FrameRecord
from .camera import Camera
from .errors import ParameterError
from .geometry import ExpressionParams, HeadModel
from .micronet import Layer, MlpParams
from .splat.cloud import SplatOptions, load_ply, save_ply
from .splat.deform import DeformField, RigidTransform
from .texture import TextureStack

MAGIC = b"HHBLOB1\n"
BUNDLE_VERSION = 1


def save_blob(path, arrays, meta=None, dtype="<f8"):
    """Write named arrays. Floating arrays are stored as ``dtype``; integer and bool arrays keep their kind."""
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if a.dtype.kind == "f":
            a = a.astype(dtype)
        elif a.dtype.kind in "iu":
            a = a.astype("<i8")
        elif a.dtype.kind == "b":
            a = a.astype("|u1")
        else:
            raise ParameterError(f"cannot store array {name} of dtype {a.dtype}")
        raw = np.ascontiguousarray(a).tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "bool": bool(np.asarray(arrays[name]).dtype.kind == "b"),
                        "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_blob(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ParameterError(f"{path} is not a blob file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    base = 16 + n
    arrays = {}
    for e in header["arrays"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        a = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        if e.get("bool"):
            a = a.astype(bool)
        elif a.dtype.kind == "f":
            a = a.astype(np.float64)
        else:
            a = a.astype(np.int64)
        arrays[e["name"]] = a
    return arrays, header["meta"]


# ---------------------------------------------------------------------------
# model pieces


HEAD_FIELDS = ("template_vertices", "faces", "uv_coords", "shape_basis", "expr_basis", "joint_positions",
               "joint_parents", "skin_weights", "scalp_indices")


def head_arrays(model: HeadModel):
    return {k: getattr(model, k) for k in HEAD_FIELDS}


def head_from_arrays(a):
    return HeadModel(**{k: a[k] for k in HEAD_FIELDS})


def save_head(path, model: HeadModel, dtype="<f8"):
    meta = {"n_vertices": model.n_vertices, "n_faces": len(model.faces), "n_shape": model.n_shape,
            "n_expr": model.n_expr, "n_joints": model.n_joints}
    save_blob(path, head_arrays(model), meta, dtype)


def load_head(path) -> HeadModel:
    a, _ = load_blob(path)
    return head_from_arrays(a)


def mlp_arrays(mlp: MlpParams, prefix):
    return mlp.arrays(prefix)


def mlp_meta(mlp: MlpParams):
    return [layer.activation for layer in mlp.layers]


def mlp_from_arrays(a, prefix, activations):
    return MlpParams([Layer(a[f"{prefix}W{k}"], a[f"{prefix}b{k}"], act) for k, act in enumerate(activations)])


def save_mlp(path, mlp: MlpParams, dtype="<f8"):
    save_blob(path, mlp.arrays(""), {"activations": mlp_meta(mlp)}, dtype)


def load_mlp(path) -> MlpParams:
    a, meta = load_blob(path)
    return mlp_from_arrays(a, "", meta["activations"])


# ---------------------------------------------------------------------------
# avatar bundles


def save_avatar(directory, avatar: AvatarBundle, dtype="<f8"):
    os.makedirs(directory, exist_ok=True)
    save_head(os.path.join(directory, "head.blob"), avatar.head, dtype)
    arrays = dict(avatar.textures.arrays("tex."))
    arrays["disp"] = avatar.displacement.grid
    arrays.update(avatar.pix.arrays("pix."))
    meta = {"pix": mlp_meta(avatar.pix)}
    if avatar.field is not None:
        arrays.update(avatar.field.arrays("def."))
        meta["field"] = {"activations": mlp_meta(avatar.field.mlp), "n_psi": avatar.field.n_psi}
    save_blob(os.path.join(directory, "params.blob"), arrays, meta, dtype)
    files = ["head.blob", "params.blob"]
    if avatar.cloud is not None:
        save_ply(os.path.join(directory, "hair.ply"), avatar.cloud, "f8" if dtype == "<f8" else "f4")
        files.append("hair.ply")
    manifest = {
        "version": BUNDLE_VERSION,
        "files": files,
        "splat": avatar.splat.to_dict(),
        "blur_sigma": float(avatar.blur_sigma),
        "use_displacement": bool(avatar.use_displacement),
        "canonical": None if avatar.canonical is None else avatar.canonical.to_dict(),
        "transforms": {int(k): v.to_list(with_scale=True) for k, v in sorted(avatar.transforms.items())},
        "config": avatar.config,
    }
    with open(os.path.join(directory, "manifest.yaml"), "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=True)


def load_avatar(directory) -> AvatarBundle:
    path = os.path.join(directory, "manifest.yaml")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no avatar manifest in {directory}")
    with open(path) as fh:
        manifest = yaml.safe_load(fh)
    if manifest.get("version") != BUNDLE_VERSION:
        raise ParameterError(f"unsupported avatar bundle version {manifest.get('version')}")
    for f in manifest["files"]:
        if not os.path.exists(os.path.join(directory, f)):
            raise FileNotFoundError(f"avatar bundle is missing {f}")
    head = load_head(os.path.join(directory, "head.blob"))
    a, meta = load_blob(os.path.join(directory, "params.blob"))
    textures = TextureStack(a["tex.diffuse"], a["tex.view"], a["tex.dynamic"])
    pix = mlp_from_arrays(a, "pix.", meta["pix"])
    field = None
    if "field" in meta:
        field = DeformField(mlp_from_arrays(a, "def.", meta["field"]["activations"]), a["def.embedding"],
                            meta["field"]["n_psi"])
    cloud = load_ply(os.path.join(directory, "hair.ply")) if "hair.ply" in manifest["files"] else None
    canonical = None if manifest["canonical"] is None else ExpressionParams.from_dict(manifest["canonical"])
    transforms = {int(k): RigidTransform.from_list(v) for k, v in (manifest.get("transforms") or {}).items()}
    return AvatarBundle(head, textures, DisplacementField(a["disp"]), pix, cloud, field, canonical, transforms,
                        SplatOptions(**manifest["splat"]), manifest["blur_sigma"], manifest["use_displacement"],
                        manifest.get("config") or {})


# ---------------------------------------------------------------------------
# frame sets


def save_frames(directory, records, extra=None):
    """All records of a dataset in one blob plus a YAML manifest with cameras and parameters."""
    os.makedirs(directory, exist_ok=True)
    arrays = {}
    items = []
    for i, r in enumerate(records):
        key = f"r{i:05d}."
        arrays[key + "image"] = r.image
        arrays[key + "head"] = r.head
        arrays[key + "hair"] = r.hair
        arrays[key + "hair_mask"] = r.hair_mask
        arrays[key + "coverage"] = r.coverage
        if r.depth is not None:
            arrays[key + "depth"] = r.depth
        items.append({"frame": int(r.frame), "view": int(r.view), "camera": r.camera.to_dict(),
                      "params": r.params.to_dict(), "has_depth": r.depth is not None})
    save_blob(os.path.join(directory, "frames.blob"), arrays)
    manifest = {"records": items}
    manifest.update(extra or {})
    with open(os.path.join(directory, "frames.yaml"), "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=True)


def load_frames(directory):
    """Returns ``(records, manifest)``."""
    path = os.path.join(directory, "frames.yaml")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no frame manifest in {directory}")
    with open(path) as fh:
        manifest = yaml.safe_load(fh)
    arrays, _ = load_blob(os.path.join(directory, "frames.blob"))
    records = []
    for i, it in enumerate(manifest["records"]):
        key = f"r{i:05d}."
        records.append(FrameRecord(
            Camera.from_dict(it["camera"]), ExpressionParams.from_dict(it["params"]),
            arrays[key + "image"], arrays[key + "head"], arrays[key + "hair"], arrays[key + "hair_mask"],
            arrays[key + "coverage"], arrays.get(key + "depth"), it["frame"], it["view"],
        ))
    return records, manifest


# ---------------------------------------------------------------------------
# images


def to_uint8(img):
    """Round [0, 1] values to 8 bits (values are written as-is, i.e. treated as sRGB-encoded)."""
    a = np.asarray(img, dtype=np.float64)
    return np.round(np.clip(np.nan_to_num(a, nan=0.0), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img):
    a = to_uint8(img)
    Image.fromarray(a if a.ndim == 3 else a, mode="RGB" if a.ndim == 3 else "L").save(path)


def load_png(path):
    return np.asarray(Image.open(path)).astype(np.float64) / 255.0


def save_pfm(path, data):
    """Little-endian PFM (grayscale ``Pf`` or color ``PF``), rows stored bottom to top."""
    a = np.asarray(data, dtype="<f4")
    color = a.ndim == 3
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def load_pfm(path):
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        a = np.frombuffer(fh.read(w * h * ch * 4), dtype=dt)
    a = a.reshape((h, w, ch) if ch == 3 else (h, w))[::-1]
    return a.astype(np.float64)

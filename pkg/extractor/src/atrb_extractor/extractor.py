"""Export embeddings from a pretrained vision backbone into the binary
store format consumed by the attribution toolkit.

The extractor is inference-only: no finetuning, no augmentation, a fixed
resize + center-crop + normalize pipeline, and the trunk output (the
pooled features feeding the classifier, not any projection head) as the
embedding. Given the same checkpoint and dataset it produces
byte-identical files.

Store layout (little-endian, no padding):
    magic "ATRB" | version u32 = 1 | n u64 | d u32 | num_classes u32 |
    reserved u32 = 0 | features n*d f32 row-major | labels n i32 | ids n u64
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models
from torchvision import transforms

_MAGIC = b"ATRB"
_VERSION = 1
_HEADER = struct.Struct("<4sIQIII")

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

# MoCo/BYOL/SimCLR-style checkpoints wrap the trunk in wrapper prefixes.
_STRIP_PREFIXES = ("module.", "encoder_q.", "encoder.", "backbone.", "base_encoder.")

_ARCHS = {
    "resnet18": models.resnet18,
    "resnet34": models.resnet34,
    "resnet50": models.resnet50,
}

_PREPROCESS = transforms.Compose(
    [
        transforms.Resize(256),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        transforms.Normalize(mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]),
    ]
)


@dataclass(frozen=True)
class ExtractSpec:
    """One extraction run: backbone, dataset split, batching, output."""

    backbone: str
    data_dir: str
    split: str
    output: str
    checkpoint: str | None = None
    batch_size: int = 32
    device: str = "cpu"

    def __post_init__(self):
        if self.backbone not in _ARCHS:
            raise ValueError(
                f"unknown backbone {self.backbone!r}; supported: {sorted(_ARCHS)}"
            )
        if self.split not in ("train", "val"):
            raise ValueError("split must be 'train' or 'val'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _strip_key(key: str) -> str:
    changed = True
    while changed:
        changed = False
        for prefix in _STRIP_PREFIXES:
            if key.startswith(prefix):
                key = key[len(prefix):]
                changed = True
    return key


def load_backbone(spec: ExtractSpec) -> tuple[torch.nn.Module, int, dict]:
    """Build the trunk and load checkpoint weights; returns (model, d, info).

    The classifier head is replaced by identity so the forward pass emits
    the pooled trunk features. Without a checkpoint the trunk keeps a
    seed-0 random initialization (still deterministic; useful for smoke
    tests only).
    """
    torch.manual_seed(0)
    model = _ARCHS[spec.backbone](weights=None)
    feature_dim = model.fc.in_features
    info: dict = {"matched_keys": 0, "skipped_keys": 0}
    if spec.checkpoint is not None:
        payload = torch.load(spec.checkpoint, map_location="cpu", weights_only=True)
        state = payload.get("state_dict", payload) if isinstance(payload, dict) else payload
        trunk_keys = set(model.state_dict().keys())
        cleaned = {}
        for key, value in state.items():
            key = _strip_key(key)
            if key in trunk_keys and not key.startswith("fc."):
                cleaned[key] = value
            else:
                info["skipped_keys"] += 1
        if not cleaned:
            raise ValueError(
                f"checkpoint {spec.checkpoint} has no keys matching a {spec.backbone} trunk"
            )
        model.load_state_dict(cleaned, strict=False)
        info["matched_keys"] = len(cleaned)
    model.fc = torch.nn.Identity()
    model.eval()
    model.to(spec.device)
    return model, feature_dim, info


def scan_dataset(spec: ExtractSpec) -> tuple[list[Path], np.ndarray, list[str]]:
    """Class-subfolder layout: <data>/<split>/<class>/<image>.

    Classes are the sorted subfolder names; samples are enumerated in
    sorted path order, which fixes the ordinal ids.
    """
    root = Path(spec.data_dir) / spec.split
    if not root.is_dir():
        raise FileNotFoundError(f"dataset split directory {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"{root} contains no class subdirectories")
    paths: list[Path] = []
    labels: list[int] = []
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() in _IMAGE_SUFFIXES:
                paths.append(path)
                labels.append(label)
    if not paths:
        raise FileNotFoundError(f"{root} contains no images")
    return paths, np.asarray(labels, dtype=np.int64), classes


def _embed_batches(model, paths, spec: ExtractSpec) -> np.ndarray:
    chunks = []
    with torch.no_grad():
        for start in range(0, len(paths), spec.batch_size):
            batch_paths = paths[start : start + spec.batch_size]
            tensors = []
            for path in batch_paths:
                with Image.open(path) as image:
                    tensors.append(_PREPROCESS(image.convert("RGB")))
            batch = torch.stack(tensors).to(spec.device)
            chunks.append(model(batch).cpu().numpy().astype(np.float32))
    return np.concatenate(chunks, axis=0)


def write_store(path, features: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    """Emit the documented binary layout."""
    n, d = features.shape
    ids = np.arange(n, dtype=np.uint64)
    header = _HEADER.pack(_MAGIC, _VERSION, n, d, num_classes, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())
        fh.write(ids.astype("<u8").tobytes())


def extract(spec: ExtractSpec) -> Path:
    """Run the extraction; writes the store plus a JSON manifest sidecar."""
    model, feature_dim, load_info = load_backbone(spec)
    paths, labels, classes = scan_dataset(spec)
    features = _embed_batches(model, paths, spec)
    if features.shape[1] != feature_dim:
        raise RuntimeError(
            f"backbone emitted d={features.shape[1]}, expected {feature_dim}"
        )
    if not np.isfinite(features).all():
        raise RuntimeError("backbone emitted non-finite features")
    # The validator requires a label space of at least two classes.
    num_classes = max(2, len(classes))
    output = Path(spec.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    write_store(output, features, labels, num_classes)

    manifest = {
        "backbone": spec.backbone,
        "checkpoint": spec.checkpoint,
        "checkpoint_sha256": (
            hashlib.sha256(Path(spec.checkpoint).read_bytes()).hexdigest()
            if spec.checkpoint
            else None
        ),
        "feature_source": "trunk output (pooled pre-classifier features, no projection head)",
        "preprocessing": "resize 256, center-crop 224, imagenet normalization, no augmentation",
        "data_dir": str(spec.data_dir),
        "split": spec.split,
        "classes": classes,
        "n": int(features.shape[0]),
        "d": int(features.shape[1]),
        "checkpoint_load": load_info,
    }
    output.with_name(output.name + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return output

"""Run an image classifier over a folder tree and dump features plus logits.

The input directory follows the usual image-folder convention: one
subdirectory per source pool. The pool named "in" (or the alphabetically
first pool when none is named that) is treated as in-distribution and
labeled 0; every other pool is labeled 1. A directory holding images
directly, with no subdirectories, is a single all-in pool. Pool names
travel along as source tags.

Inference is eval-mode on a fixed device with a sorted file order, so a
given model and folder always produce the same bytes: re-exports are
checksum-identical. The backbone's penultimate activations (the input of
the final fully connected layer) become the features section.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torchvision.models import resnet18, resnet34

from oodexport import container

log = logging.getLogger("oodexport")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}

MODEL_BUILDERS = {
    "resnet18": resnet18,
    "resnet34": resnet34,
}


class ExportError(Exception):
    """Unresolvable inputs: bad directory, no images, missing weights."""


@dataclass(frozen=True)
class ExportJob:
    """One dump: which model, which images, where the container goes.

    With weights=None the backbone is freshly initialized from the seed,
    which is enough for format and determinism work; point weights at a
    state-dict checkpoint to export a trained model. epsilon > 0 adds a
    logits_perturbed section: each image is nudged against the gradient
    of its top softmax probability (computed at `temperature`), clipped
    back to the valid pixel range, and passed through the model again.
    """

    input_dir: str
    out_path: str
    model: str = "resnet18"
    classes: int = 10
    weights: str | None = None
    batch_size: int = 32
    image_size: int = 32
    device: str = "cpu"
    epsilon: float = 0.0
    temperature: float = 1000.0
    seed: int = 0
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.model not in MODEL_BUILDERS:
            raise ExportError(f"unknown model {self.model!r}, have {sorted(MODEL_BUILDERS)}")
        if self.classes < 2:
            raise ExportError(f"classes must be at least 2, got {self.classes}")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.image_size < 8:
            raise ExportError(f"image_size must be at least 8, got {self.image_size}")
        if self.epsilon < 0:
            raise ExportError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.temperature <= 0:
            raise ExportError(f"temperature must be positive, got {self.temperature}")
        if any(s <= 0 for s in self.std):
            raise ExportError(f"std entries must be positive, got {self.std}")


@dataclass(frozen=True)
class ExportSummary:
    path: str
    count: int
    feature_dim: int
    n_classes: int
    sha256: str


def list_images(input_dir: str) -> tuple[list[Path], np.ndarray, list[str]]:
    """Resolve (paths, in/out labels, pool tags) in deterministic order."""
    root = Path(input_dir)
    if not root.is_dir():
        raise ExportError(f"input directory {input_dir!r} does not exist")

    def images_in(d: Path) -> list[Path]:
        return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)

    pools = [(d.name, images_in(d)) for d in sorted(root.iterdir()) if d.is_dir()]
    pools = [(name, files) for name, files in pools if files]
    if not pools:
        files = images_in(root)
        if not files:
            raise ExportError(f"no images under {input_dir!r}")
        pools = [(root.name, files)]
    in_pool = "in" if any(name == "in" for name, _ in pools) else pools[0][0]

    paths: list[Path] = []
    labels: list[int] = []
    tags: list[str] = []
    for name, files in pools:
        paths.extend(files)
        labels.extend([0 if name == in_pool else 1] * len(files))
        tags.extend([name] * len(files))
    return paths, np.array(labels, dtype="u1"), tags


def build_model(job: ExportJob) -> torch.nn.Module:
    torch.manual_seed(job.seed)
    model = MODEL_BUILDERS[job.model](weights=None, num_classes=job.classes)
    if job.weights is not None:
        if not Path(job.weights).is_file():
            raise ExportError(f"weights file {job.weights!r} does not exist")
        state = torch.load(job.weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    return model.to(job.device).eval()


def _penultimate(model: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    # the resnet forward minus its final fc
    x = model.maxpool(model.relu(model.bn1(model.conv1(x))))
    x = model.layer4(model.layer3(model.layer2(model.layer1(x))))
    return torch.flatten(model.avgpool(x), 1)


def _load_pixels(paths: Sequence[Path], size: int) -> torch.Tensor:
    """Decode to a (b, 3, size, size) float tensor in [0, 1]."""
    rows = []
    for p in paths:
        try:
            with Image.open(p) as img:
                img = img.convert("RGB").resize((size, size), Image.BILINEAR)
                rows.append(np.asarray(img, dtype=np.float32) / 255.0)
        except (OSError, SyntaxError) as exc:
            raise ExportError(f"cannot decode image {p}: {exc}") from exc
    return torch.from_numpy(np.stack(rows)).permute(0, 3, 1, 2).contiguous()


def _perturbed_logits(model, pixels: torch.Tensor, job: ExportJob, mean, std) -> torch.Tensor:
    """Logits of the nudged images: pixels move against the gradient of
    -log(top softmax probability), then clip back to [0, 1]."""
    p = pixels.clone().requires_grad_(True)
    logits = model.fc(_penultimate(model, (p - mean) / std))
    top_logprob = torch.log_softmax(logits / job.temperature, dim=1).max(dim=1).values
    (-top_logprob.sum()).backward()
    nudged = (p.detach() - job.epsilon * p.grad.sign()).clamp(0.0, 1.0)
    with torch.no_grad():
        return model.fc(_penultimate(model, (nudged - mean) / std))


def export(job: ExportJob) -> ExportSummary:
    """Dump features, logits, and labels of every image to the container.

    Fails before touching the output path when inputs are unresolvable;
    the write itself is atomic, so there is never a partial file.
    """
    paths, labels, tags = list_images(job.input_dir)
    model = build_model(job)
    mean = torch.tensor(job.mean, dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.tensor(job.std, dtype=torch.float32).view(1, 3, 1, 1)

    feat_chunks, logit_chunks, perturbed_chunks = [], [], []
    for start in range(0, len(paths), job.batch_size):
        chunk = paths[start : start + job.batch_size]
        pixels = _load_pixels(chunk, job.image_size).to(job.device)
        with torch.no_grad():
            feats = _penultimate(model, (pixels - mean) / std)
            logit_chunks.append(model.fc(feats).cpu())
            feat_chunks.append(feats.cpu())
        if job.epsilon > 0:
            perturbed_chunks.append(_perturbed_logits(model, pixels, job, mean, std).cpu())

    features = torch.cat(feat_chunks).numpy().astype("<f4")
    logits = torch.cat(logit_chunks).numpy().astype("<f4")
    sections: dict[str, np.ndarray] = {
        "features": features,
        "logits": logits,
        "labels": labels,
        "source_tags": container.encode_tags(tags),
    }
    if perturbed_chunks:
        sections["logits_perturbed"] = torch.cat(perturbed_chunks).numpy().astype("<f4")

    digest = container.write_container(job.out_path, sections)
    summary = ExportSummary(
        path=job.out_path,
        count=features.shape[0],
        feature_dim=features.shape[1],
        n_classes=logits.shape[1],
        sha256=digest,
    )
    log.info(
        "exported n=%d d=%d classes=%d sha256=%s -> %s",
        summary.count, summary.feature_dim, summary.n_classes, digest, job.out_path,
    )
    return summary

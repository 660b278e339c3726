"""Synthetic finger-vein image generator and dataset IO.

Each identity class is one fixed pattern of dark meandering strokes on a
bright mottled background; samples within a class are small photometric and
geometric variations of that pattern. Everything is driven by explicit seed
sequences, so a (seed, class, variant) triple always produces the same
pixels regardless of generation order.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


def _vein_pattern(rng, size):
    """Dark-stroke mask for one identity: a few blurred random walks."""
    canvas = np.zeros((size, size), dtype=np.float64)
    n_strokes = int(rng.integers(3, 6))
    for _ in range(n_strokes):
        x = rng.uniform(0.1, 0.9) * size
        y = rng.uniform(0.0, 0.2) * size
        angle = np.pi / 2 + rng.normal(0.0, 0.3)
        thickness = rng.uniform(0.8, 1.6)
        for _ in range(3 * size):
            xi, yi = int(round(x)), int(round(y))
            if 0 <= xi < size and 0 <= yi < size:
                canvas[yi, xi] += thickness
            angle += rng.normal(0.0, 0.12)
            x += np.cos(angle)
            y += np.sin(angle)
            if y >= size or x < 0 or x >= size:
                break
    blurred = ndimage.gaussian_filter(canvas, sigma=1.1)
    peak = blurred.max()
    return blurred / peak if peak > 0 else blurred


def _background(rng, size):
    """Bright base with smooth low-frequency mottling."""
    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=4.0)
    spread = noise.std()
    if spread > 0:
        noise = noise / spread
    return 0.78 + 0.05 * noise


def _render_variant(pattern, background, rng):
    """One sample of a class: jittered geometry and photometry plus sensor noise."""
    angle = rng.uniform(-3.0, 3.0)
    shift = rng.uniform(-2.0, 2.0, size=2)
    veins = ndimage.rotate(pattern, angle, reshape=False, order=1, mode="constant")
    veins = ndimage.shift(veins, shift, order=1, mode="constant")
    img = background - 0.38 * veins
    contrast = rng.uniform(0.9, 1.1)
    brightness = rng.uniform(-0.04, 0.04)
    img = (img - 0.5) * contrast + 0.5 + brightness
    img = img + rng.normal(0.0, rng.uniform(0.004, 0.015), img.shape)
    return np.clip(img, 0.0, 1.0)


def make_vein_dataset(n_classes, n_per_class, image_size=64, seed=0):
    """Generate a labeled dataset: images [n, H, W, 1] float32 in [0, 1], labels int64.

    Samples are class-major: all variants of class 0 first, then class 1, and
    so on. Labels are the class indices.
    """
    if n_classes < 1 or n_per_class < 1:
        raise ValueError("n_classes and n_per_class must be >= 1")
    if image_size < 16 or image_size % 8 != 0:
        raise ValueError("image_size must be >= 16 and divisible by 8")
    images = np.empty((n_classes * n_per_class, image_size, image_size, 1), dtype=np.float32)
    labels = np.empty(n_classes * n_per_class, dtype=np.int64)
    for cls in range(n_classes):
        class_rng = np.random.default_rng(np.random.SeedSequence([seed, cls]))
        pattern = _vein_pattern(class_rng, image_size)
        background = _background(class_rng, image_size)
        for variant in range(n_per_class):
            var_rng = np.random.default_rng(np.random.SeedSequence([seed, cls, variant]))
            idx = cls * n_per_class + variant
            images[idx, :, :, 0] = _render_variant(pattern, background, var_rng).astype(np.float32)
            labels[idx] = cls
    return images, labels


def split_per_class(images, labels, n_train_per_class):
    """Deterministic split: the first k variants of every class go to train.

    Returns (train_images, train_labels, test_images, test_labels). Every
    class must have more than k samples so the test side is never empty.
    """
    labels = np.asarray(labels)
    train_mask = np.zeros(len(labels), dtype=bool)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) <= n_train_per_class:
            raise ValueError(
                f"class {cls} has {len(idx)} samples; need more than {n_train_per_class}")
        train_mask[idx[:n_train_per_class]] = True
    return (images[train_mask], labels[train_mask],
            images[~train_mask], labels[~train_mask])


@dataclass
class DatasetManifest:
    """Description of an on-disk dataset: root/<class_id>/<image files>.

    The split rule is positional: within each class the first `train_k`
    files (sorted by name) are the training/enrollment gallery and the next
    `test_k` are probes.
    """

    root: str
    class_count: int
    images_per_class: int
    train_k: int
    test_k: int
    image_size: int = 64
    channels: int = 1

    def validate(self):
        if self.class_count < 1 or self.images_per_class < 1:
            raise ValueError("class_count and images_per_class must be >= 1")
        if self.train_k < 0 or self.test_k < 1:
            raise ValueError("train_k must be >= 0 and test_k >= 1")
        if self.train_k + self.test_k > self.images_per_class:
            raise ValueError("train_k + test_k exceeds images_per_class")
        if self.image_size < 16 or self.image_size % 8 != 0:
            raise ValueError("image_size must be >= 16 and divisible by 8")
        if self.channels != 1:
            raise ValueError("only single-channel output is supported")
        return self


def _load_image(path, size):
    with Image.open(path) as img:
        img = img.convert("L").resize((size, size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32)[..., None] / 255.0


def load_dataset(manifest):
    """Read a directory dataset and split it per the manifest.

    Returns (train_images, train_labels, test_images, test_labels) with
    labels assigned by the sorted order of the class directories. Ragged
    classes or unreadable files raise with every offender listed.
    """
    manifest.validate()
    root = Path(manifest.root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) != manifest.class_count:
        raise ValueError(
            f"{root} has {len(class_dirs)} class directories, "
            f"manifest says {manifest.class_count}")
    problems = []
    per_class_files = []
    for cls_dir in class_dirs:
        files = sorted(p for p in cls_dir.iterdir() if p.is_file())
        if len(files) != manifest.images_per_class:
            problems.append(f"{cls_dir.name}: {len(files)} files, "
                            f"expected {manifest.images_per_class}")
        per_class_files.append(files)
    if problems:
        raise ValueError("ragged class sizes: " + "; ".join(problems))

    size = manifest.image_size
    train_images, train_labels, test_images, test_labels = [], [], [], []
    for label, files in enumerate(per_class_files):
        selected = files[:manifest.train_k + manifest.test_k]
        for pos, path in enumerate(selected):
            try:
                pixels = _load_image(path, size)
            except Exception as exc:  # noqa: BLE001 - collected and re-raised below
                problems.append(f"{path}: {exc}")
                continue
            if pos < manifest.train_k:
                train_images.append(pixels)
                train_labels.append(label)
            else:
                test_images.append(pixels)
                test_labels.append(label)
    if problems:
        raise ValueError("unreadable files: " + "; ".join(problems))
    shape = (0, size, size, 1)
    return (np.stack(train_images) if train_images else np.empty(shape, np.float32),
            np.asarray(train_labels, dtype=np.int64),
            np.stack(test_images) if test_images else np.empty(shape, np.float32),
            np.asarray(test_labels, dtype=np.int64))


def save_npz(path, images, labels, meta=None):
    """Write images + labels (and a JSON metadata string) to one .npz file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_json = json.dumps(meta or {}, sort_keys=True)
    np.savez_compressed(path, images=images, labels=labels, meta=np.str_(meta_json))


def load_npz(path):
    """Inverse of save_npz: returns (images, labels, meta dict)."""
    with np.load(path, allow_pickle=False) as archive:
        images = archive["images"]
        labels = archive["labels"]
        meta = json.loads(str(archive["meta"])) if "meta" in archive else {}
    return images, labels, meta

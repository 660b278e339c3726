"""Identification pipeline: embedding CNN, enrollment, matching, defense report.

Recognition is identification against enrolled templates: every class is
represented by the mean embedding of its gallery images and a probe is
assigned to the template with the highest cosine similarity. The same
network's class logits are what the attacks differentiate through.
"""

import csv
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import check_image_batch, check_labels, to_nchw

CLASSIFIER_REGISTRY = {}


def register_classifier(name):
    """Class decorator: make a backbone constructible by name from configs."""
    def wrap(cls):
        CLASSIFIER_REGISTRY[name] = cls
        return cls
    return wrap


@register_classifier("veincnn")
class VeinCNN(nn.Module):
    """Two conv blocks, an embedding layer, and a classification head."""

    def __init__(self, n_classes, image_size=64, in_channels=1, embedding_dim=128):
        super().__init__()
        if image_size % 4 != 0:
            raise ValueError("image_size must be a multiple of 4")
        self.hparams = dict(n_classes=n_classes, image_size=image_size,
                            in_channels=in_channels, embedding_dim=embedding_dim)
        self.image_size = image_size
        self.conv1 = nn.Conv2d(in_channels, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, padding=1)
        flat = 64 * (image_size // 4) ** 2
        self.embedding = nn.Linear(flat, embedding_dim)
        self.head = nn.Linear(embedding_dim, n_classes)

    def embed(self, x):
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        return self.embedding(h.flatten(1))

    def forward(self, x):
        return self.head(F.relu(self.embed(x)))


def train_classifier(images, labels, n_classes=None, epochs=30, batch_size=32,
                     lr=1e-3, seed=0, image_size=None, embedding_dim=128,
                     backbone="veincnn"):
    """Fit a registered backbone with cross-entropy; deterministic for a given seed."""
    images = check_image_batch(images, image_size=image_size)
    labels = check_labels(labels, n=len(images))
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if backbone not in CLASSIFIER_REGISTRY:
        raise ValueError(f"unknown backbone {backbone!r}; "
                         f"registered: {sorted(CLASSIFIER_REGISTRY)}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CLASSIFIER_REGISTRY[backbone](
            n_classes, image_size=images.shape[1], in_channels=images.shape[3],
            embedding_dim=embedding_dim)
    model.backbone_name = backbone
    x = to_nchw(images)
    y = torch.from_numpy(labels)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([seed, epoch])).permutation(len(images))
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start:start + batch_size].copy())
            optimizer.zero_grad()
            loss = F.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            optimizer.step()
    model.eval()
    return model


def _batched(fn, x, batch_size=128):
    outs = [fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(outs, dim=0)


def enroll(model, images, labels):
    """Per-class mean embeddings: gallery -> template matrix [n_classes, dim].

    Every class in 0..max(labels) must appear in the gallery.
    """
    images = check_image_batch(images)
    labels = check_labels(labels, n=len(images))
    model.eval()
    with torch.no_grad():
        emb = _batched(model.embed, to_nchw(images)).numpy()
    n_classes = int(labels.max()) + 1
    templates = np.zeros((n_classes, emb.shape[1]), dtype=np.float64)
    for cls in range(n_classes):
        members = emb[labels == cls]
        if len(members) == 0:
            raise ValueError(f"no gallery images for class {cls}")
        templates[cls] = members.mean(axis=0)
    return templates


def cosine_match(embeddings, templates):
    """Assign each embedding to the most-similar template (ties -> lowest index)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    tpl = np.asarray(templates, dtype=np.float64)
    e_norm = np.linalg.norm(emb, axis=1, keepdims=True)
    t_norm = np.linalg.norm(tpl, axis=1, keepdims=True)
    if not (e_norm > 0).all() or not (t_norm > 0).all():
        raise ValueError("degenerate vector: zero-norm embedding or template")
    scores = (emb / e_norm) @ (tpl / t_norm).T
    return np.argmax(scores, axis=1).astype(np.int64)


def predict_identity(model, templates, images):
    """Embed probes and match them against enrolled templates."""
    images = check_image_batch(images)
    model.eval()
    with torch.no_grad():
        emb = _batched(model.embed, to_nchw(images)).numpy()
    return cosine_match(emb, templates)


def identification_accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must align")
    return float((predictions == labels).mean())


DEFENSE_REPORT_COLUMNS = ("classifier_id", "attack", "epsilon", "defense",
                          "accuracy", "n_eval")


def evaluate_defense(model, templates, images, labels, attack_specs, defenses,
                     classifier_id="veincnn", attack_batch=64):
    """Accuracy table over {clean, each attack} x {no defense, each defense}.

    `attack_specs` is a list of AttackSpec instances; `defenses` maps a
    defense name (e.g. "msmemorygan", "cosine-ablation") to a purification
    callable on NHWC float arrays. Returns the report as a list of dicts in a
    fixed row order: the clean row first, then for each attack the undefended
    row followed by one row per defense in the given order.
    """
    images = check_image_batch(images)
    labels = check_labels(labels, n=len(images))
    model.eval()

    def accuracy_of(batch_np):
        return identification_accuracy(predict_identity(model, templates, batch_np), labels)

    def make_row(attack, epsilon, defense, acc):
        return {"classifier_id": classifier_id, "attack": attack,
                "epsilon": float(epsilon), "defense": defense,
                "accuracy": acc, "n_eval": len(images)}

    rows = [make_row("none", 0.0, "none", accuracy_of(images))]
    y = torch.from_numpy(labels)
    x = to_nchw(images)
    for spec in attack_specs:
        adv_parts = []
        for start in range(0, len(x), attack_batch):
            stop = start + attack_batch
            adv_parts.append(spec.run(model, x[start:stop], y[start:stop],
                                      seed_offset=start))
        adv = torch.cat(adv_parts, dim=0).permute(0, 2, 3, 1).numpy()
        rows.append(make_row(spec.family, spec.epsilon, "none", accuracy_of(adv)))
        for defense_name, purify in defenses.items():
            purified = check_image_batch(purify(adv), name="purified")
            rows.append(make_row(spec.family, spec.epsilon, defense_name,
                                 accuracy_of(purified)))
    return rows


def render_defense_table(rows):
    """Human-readable text table of a defense report."""
    headers = list(DEFENSE_REPORT_COLUMNS)
    cells = [[str(r["classifier_id"]), r["attack"], f"{r['epsilon']:g}",
              r["defense"], f"{r['accuracy']:.4f}", str(r["n_eval"])] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    def fmt(parts):
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(c) for c in cells)
    return "\n".join(lines)


def write_defense_report(path, rows):
    """Serialize report rows to CSV with fixed formatting (stable bytes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DEFENSE_REPORT_COLUMNS)
        for row in rows:
            writer.writerow([
                row["classifier_id"], row["attack"], f"{row['epsilon']:g}",
                row["defense"], f"{row['accuracy']:.6f}", row["n_eval"]])
    return path


def read_defense_report(path):
    """Load a defense report CSV back into a list of typed dicts."""
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            row["epsilon"] = float(row["epsilon"])
            row["accuracy"] = float(row["accuracy"])
            row["n_eval"] = int(row["n_eval"])
            rows.append(row)
    return rows


def save_classifier(path, model, templates, config_hash=""):
    """Checkpoint a trained backbone together with its enrolled templates."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": 1,
        "config_hash": config_hash,
        "backbone": getattr(model, "backbone_name", "veincnn"),
        "hparams": dict(model.hparams),
        "state": model.state_dict(),
        "templates": torch.from_numpy(np.asarray(templates, dtype=np.float64)),
    }, path)
    return path


def load_classifier(path):
    """Rebuild (model, templates) saved by save_classifier."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    backbone = payload.get("backbone", "veincnn")
    if backbone not in CLASSIFIER_REGISTRY:
        raise ValueError(f"checkpoint wants unregistered backbone {backbone!r}")
    model = CLASSIFIER_REGISTRY[backbone](**payload["hparams"])
    model.load_state_dict(payload["state"])
    model.backbone_name = backbone
    model.eval()
    return model, payload["templates"].numpy()

"""Command-line entry point: synth-data, train, attack, purify, evaluate.

Every subcommand is driven by one YAML config (see `mempure.config`); flags
only override paths, the seed, or the epoch count. Each run echoes the
resolved config into its output directory so results can be reproduced from
the artifacts alone. Exit codes: 0 success, 1 runtime failure, 2 bad usage
or config.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import config as config_mod
from . import data, recognition, training
from .config import ConfigError
from .validation import check_image_batch, to_nchw, to_nhwc


def _load_split(cfg):
    """(train_images, train_labels, test_images, test_labels) per the config."""
    source = cfg["data"]["source"]
    if source == "synth":
        s = cfg["data"]["synth"]
        images, labels = data.make_vein_dataset(
            s["n_classes"], s["per_class"], s["image_size"], seed=cfg["seed"])
        return data.split_per_class(images, labels, cfg["data"]["train_k"])
    if source == "npz":
        images, labels, _ = data.load_npz(cfg["data"]["npz_path"])
        return data.split_per_class(images, labels, cfg["data"]["train_k"])
    return data.load_dataset(data.DatasetManifest(**cfg["data"]["manifest"]))


def _purify_fn(model, batch_size=64):
    def purify(images_np):
        x = to_nchw(check_image_batch(images_np, image_size=model.image_size))
        model.eval()
        with torch.no_grad():
            parts = [model.purify(x[i:i + batch_size])
                     for i in range(0, len(x), batch_size)]
        return to_nhwc(torch.cat(parts, dim=0))
    return purify


def _prepare_outdir(cfg, out_override):
    out = Path(out_override) if out_override else Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump_config(cfg, out / "effective_config.yaml")
    return out


def cmd_synth_data(args, cfg):
    s = cfg["data"]["synth"]
    out = _prepare_outdir(cfg, args.out)
    images, labels = data.make_vein_dataset(
        s["n_classes"], s["per_class"], s["image_size"], seed=cfg["seed"])
    path = out / "dataset.npz"
    data.save_npz(path, images, labels,
                  meta={"seed": cfg["seed"], **s, "config_hash": config_mod.config_hash(cfg)})
    print(f"wrote {len(images)} images ({s['n_classes']} classes) to {path}")
    return 0


def cmd_train(args, cfg):
    out = _prepare_outdir(cfg, args.out)
    train_images, train_labels, _, _ = _load_split(cfg)
    if len(train_images) == 0:
        raise ConfigError("training split is empty")
    targets = cfg["train"]["targets"]

    if "purifier" in targets:
        tc = config_mod.build_train_config(cfg)
        model = discriminator = states = None
        start_epoch = 0
        if args.resume:
            model, discriminator, payload = training.load_checkpoint(args.resume)
            states = payload["extra"].get("optimizer_states")
            start_epoch = payload["extra"].get("epoch", -1) + 1
            print(f"resuming from {args.resume} at epoch {start_epoch}")

        def hook(row, save):
            every = tc.checkpoint_every
            if every and (row["epoch"] + 1) % every == 0:
                save(out / f"purifier_epoch{row['epoch']:04d}.pt")
            print(f"epoch {row['epoch']}: l1={row['l1']:.4f} total={row['total']:.4f}")

        model, discriminator, history, states = training.train_purifier(
            train_images, tc, model=model, discriminator=discriminator,
            optimizer_states=states, start_epoch=start_epoch, epoch_hook=hook)
        training.save_checkpoint(
            out / "purifier.pt", model, discriminator, config=tc,
            extra={"epoch": tc.epochs - 1, "optimizer_states": states,
                   "config_hash": config_mod.config_hash(cfg)})
        training.write_loss_report(out / "loss_report.csv", history)
        print(f"purifier checkpoint: {out / 'purifier.pt'}")

    if "classifier" in targets:
        cc = cfg["classifier"]
        clf = recognition.train_classifier(
            train_images, train_labels, epochs=cc["epochs"],
            batch_size=cc["batch_size"], lr=cc["lr"], seed=cfg["seed"],
            embedding_dim=cc["embedding_dim"], backbone=cc["backbone"])
        templates = recognition.enroll(clf, train_images, train_labels)
        recognition.save_classifier(out / "classifier.pt", clf, templates,
                                    config_hash=config_mod.config_hash(cfg))
        preds = recognition.predict_identity(clf, templates, train_images)
        acc = recognition.identification_accuracy(preds, train_labels)
        print(f"classifier checkpoint: {out / 'classifier.pt'} "
              f"(train matching accuracy {acc:.3f})")
    return 0


def cmd_attack(args, cfg):
    out = _prepare_outdir(cfg, args.out)
    model, templates = recognition.load_classifier(args.classifier)
    _, _, test_images, test_labels = _load_split(cfg)
    specs = config_mod.build_attack_specs(cfg)
    batch = cfg["evaluate"]["attack_batch"]
    x = to_nchw(test_images)
    y = torch.from_numpy(test_labels)
    for spec in specs:
        adv_dir = out / f"{spec.family}-eps{spec.epsilon:g}"
        adv_dir.mkdir(parents=True, exist_ok=True)
        parts = [spec.run(model, x[i:i + batch], y[i:i + batch], seed_offset=i)
                 for i in range(0, len(x), batch)]
        adv = torch.cat(parts, dim=0)
        gap = float((adv.double() - x.double()).abs().max()) if len(x) else 0.0
        if gap > spec.epsilon:
            raise RuntimeError(f"budget violated: {gap} > {spec.epsilon}")
        filenames = []
        for i, image in enumerate(to_nhwc(adv)):
            name = f"{i:06d}.npy"
            np.save(adv_dir / name, image)
            filenames.append(name)
        manifest = {
            "attack": {k: getattr(spec, k) for k in
                       ("family", "epsilon", "steps", "step_size", "learning_rate",
                        "perturbation_scale", "batch_q", "seed")},
            "files": filenames,
            "labels": test_labels.tolist(),
            "max_perturbation": gap,
            "config_hash": config_mod.config_hash(cfg),
        }
        with open(adv_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        print(f"{spec.family} eps={spec.epsilon:g}: {len(filenames)} images -> {adv_dir}")
    return 0


def cmd_purify(args, cfg):
    model, _, _ = training.load_checkpoint(args.checkpoint)
    in_dir = Path(args.input)
    files = sorted(in_dir.glob("*.npy"))
    if not files:
        raise ConfigError(f"no .npy images found in {in_dir}")
    out = _prepare_outdir(cfg, args.out)
    images = np.stack([np.load(f) for f in files])
    purified = _purify_fn(model)(images)
    for f, image in zip(files, purified):
        np.save(out / f.name, image)
    print(f"purified {len(files)} images -> {out}")
    return 0


def cmd_evaluate(args, cfg):
    out = _prepare_outdir(cfg, args.out)
    clf, templates = recognition.load_classifier(args.classifier)
    purifier, _, _ = training.load_checkpoint(args.purifier)
    defenses = {"msmemorygan": _purify_fn(purifier)}
    if args.ablation:
        ablation, _, _ = training.load_checkpoint(args.ablation)
        defenses["cosine-ablation"] = _purify_fn(ablation)
    _, _, test_images, test_labels = _load_split(cfg)
    rows = recognition.evaluate_defense(
        clf, templates, test_images, test_labels,
        config_mod.build_attack_specs(cfg), defenses,
        classifier_id=cfg["evaluate"]["classifier_id"],
        attack_batch=cfg["evaluate"]["attack_batch"])
    report = recognition.write_defense_report(out / "defense_report.csv", rows)
    table = recognition.render_defense_table(rows)
    (out / "defense_report.txt").write_text(table + "\n")
    print(table)
    print(f"report: {report}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mempure",
        description="Memory-augmented purification of adversarial vein images.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra_flags):
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config (defaults used if omitted)")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--seed", type=int, help="seed override")
        for flag, kwargs in extra_flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(func=fn)
        return p

    add("synth-data", cmd_synth_data)
    add("train", cmd_train,
        **{"--epochs": dict(type=int, help="purifier epoch override"),
           "--resume": dict(help="purifier checkpoint to resume from")})
    add("attack", cmd_attack,
        **{"--classifier": dict(required=True, help="classifier checkpoint")})
    add("purify", cmd_purify,
        **{"--checkpoint": dict(required=True, help="purifier checkpoint"),
           "--input": dict(required=True, help="directory of .npy images")})
    add("evaluate", cmd_evaluate,
        **{"--purifier": dict(required=True, help="purifier checkpoint"),
           "--classifier": dict(required=True, help="classifier checkpoint"),
           "--ablation": dict(help="cosine-addressing purifier checkpoint")})
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed}
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    try:
        cfg = config_mod.load_config(args.config, overrides=overrides)
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

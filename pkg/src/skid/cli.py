"""Command-line entry point: ``skid <subcommand> ...``.

Training subcommands take a JSON config file with optional sections::

    {"model": {"variant": "v3"} | {"miniature": 8, ...SkidConfig overrides},
     "train": {...PretextTrainConfig or DownstreamTrainConfig fields},
     "head":  {...DownstreamConfig fields},
     "n_arrangements": 1000}

The dataset root defaults to ``$SKID_DATA_ROOT``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablation, arrangements, datakit, evalkit, framekit, interpret, skidnet, trainkit

log = logging.getLogger("skid")

ACC_CLAMP = 1e-3


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise SystemExit(f"{path}: config must be a JSON object")
    return cfg


def _skid_config(section: dict, n_classes: int | None = None) -> skidnet.SkidConfig:
    section = dict(section)
    if n_classes is not None:
        section["n_classes"] = n_classes
    if "miniature" in section:
        width = section.pop("miniature")
        return skidnet.SkidConfig.miniature(width, **section)
    variant = section.pop("variant", "v3")
    return skidnet.SkidConfig.preset(variant, **section)


def _data_root(arg: str | None) -> Path:
    root = arg or datakit.default_data_root()
    if root is None:
        raise SystemExit(f"no dataset root: pass --data or set {datakit.DATA_ROOT_ENV}")
    return Path(root)


def _clips(root: Path, split: str, plane: str, schema: str = "mrnet3") -> list[datakit.ClipVolume]:
    return datakit.load_manifest(root, split, plane, schema).clips()


def _write_json(path: str | Path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, default=str))


# -- subcommands ------------------------------------------------------------


def cmd_gen_arrangements(a) -> int:
    aset = arrangements.generate_arrangement_set(a.n, a.k, a.seed)
    arrangements.save_set(aset, a.out)
    print(f"wrote {len(aset)} arrangements of {a.n} patches to {a.out}")
    return 0


def cmd_dump_samples(a) -> int:
    from PIL import Image

    aset = arrangements.load_set(a.arrangements)
    clip = datakit.load_clip(a.clip)
    rng = np.random.default_rng(a.seed)
    spec = framekit.AugmentationSpec.disabled() if a.no_augment else framekit.AugmentationSpec()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(a.count):
        frame = clip.frames[rng.integers(0, clip.n_frames)]
        s = framekit.prepfram(frame, aset, spec, rng)
        grid = framekit.dump_sample_grid(s)
        Image.fromarray(np.rint(grid * 255).astype(np.uint8)).save(out / f"sample_{i:02d}_label{s.label}.png")
    print(f"wrote {a.count} sample grids to {out}")
    return 0


def cmd_synth_data(a) -> int:
    cfg = _read_config(a.config)
    spec = datakit.SyntheticSpec.mrnet_like(a.scale, frame_size=a.frame_size, seed=a.seed)
    spec = replace(spec, **{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
    labels = datakit.generate_synthetic_dataset(a.out, spec)
    for split, y in labels.items():
        print(f"{split}: {len(y)} clips, positives {y.sum(axis=0).tolist()}")
    return 0


def cmd_validate_data(a) -> int:
    root = _data_root(a.data)
    ok = True
    for plane in a.planes:
        try:
            m = datakit.load_manifest(root, a.split, plane, a.schema)
            print(f"{a.split}/{plane}: {len(m)} clips ok")
        except datakit.DatasetError as e:
            print(f"{a.split}/{plane}: {e}", file=sys.stderr)
            ok = False
    return 0 if ok else 1


def cmd_import(a) -> int:
    shape = datakit.import_frames(a.src, a.out, a.size)
    print(f"wrote {a.out}: {shape[0]} frames of {shape[1]}x{shape[2]}")
    return 0


def cmd_pretext_train(a) -> int:
    cfg = _read_config(a.config)
    root = _data_root(a.data)
    if a.arrangements:
        aset = arrangements.load_set(a.arrangements)
    else:
        aset = arrangements.generate_arrangement_set(9, cfg.get("n_arrangements", 1000), a.seed)
    model = skidnet.build_pretext_model(_skid_config(cfg.get("model", {}), len(aset)), seed=a.seed)
    tcfg = trainkit.PretextTrainConfig.from_dict({"seed": a.seed, **cfg.get("train", {})})
    train = _clips(root, "train", a.plane)
    valid = _clips(root, "valid", a.plane) if not a.no_valid else None
    _, tlog = trainkit.train_pretext(train, aset, model, tcfg, valid, a.out)
    print(f"pretext: {len(tlog.rows)} epochs, checkpoint {tlog.checkpoint}")
    return 0


def cmd_geo_train(a) -> int:
    cfg = _read_config(a.config)
    root = _data_root(a.data)
    model = skidnet.build_pretext_model(_skid_config(cfg.get("model", {}), 54), seed=a.seed)
    tcfg = trainkit.PretextTrainConfig.from_dict({"seed": a.seed, **cfg.get("train", {})})
    valid = _clips(root, "valid", a.plane) if not a.no_valid else None
    _, tlog = trainkit.train_geo_baseline(_clips(root, "train", a.plane), model, tcfg, valid, a.out)
    print(f"geo: {len(tlog.rows)} epochs, checkpoint {tlog.checkpoint}")
    return 0


def cmd_downstream_train(a) -> int:
    cfg = _read_config(a.config)
    root = _data_root(a.data)
    tcfg = trainkit.DownstreamTrainConfig.from_dict({"seed": a.seed, **cfg.get("train", {})})
    head = trainkit.config_from_dict(skidnet.DownstreamConfig, cfg.get("head", {}))
    train = _clips(root, "train", a.plane)
    if a.fraction < 1:
        train = ablation.subset_clips(train, a.fraction, a.seed)
    valid = _clips(root, "valid", a.plane) if not a.no_valid else None
    _, tlog = trainkit.train_downstream(train, a.encoder, tcfg, head, valid, a.out)
    print(f"downstream ({a.plane}): {len(tlog.rows)} epochs, checkpoint {tlog.checkpoint}")
    return 0


def cmd_evaluate(a) -> int:
    root = _data_root(a.data)
    model = skidnet.load_model(a.ckpt)
    if not isinstance(model, skidnet.DownstreamModel):
        raise SystemExit(f"{a.ckpt} is not a downstream checkpoint")
    clips = _clips(root, a.split, a.plane)
    probs = trainkit.clip_predictions(model, clips, a.repeats, a.seed)
    recs = [evalkit.PredictionRecord(c.clip_id, a.plane, p, c.labels) for c, p in zip(clips, probs)]
    evalkit.save_records(recs, a.out)
    result = evalkit.metrics_with_ci(recs, n_boot=a.n_boot, seed=a.seed)
    if a.metrics:
        _write_json(a.metrics, result)
    for label, row in result.items():
        print(label, {k: round(v["point"], 4) for k, v in row.items()})
    return 0


def cmd_ensemble(a) -> int:
    planes = evalkit.PLANE_ORDER
    per_plane = {pl: evalkit.load_records(p) for pl, p in zip(planes, a.records)}
    if a.weights:
        acc = np.asarray(json.loads(Path(a.weights).read_text()), dtype=np.float64)
    else:
        acc = evalkit.plane_accuracies({pl: evalkit.load_records(p) for pl, p in zip(planes, a.val_records)})
    # perfect or zero validation accuracy has infinite log-odds; clamp like a
    # one-in-a-thousand error rate before weighting
    acc = np.clip(acc, ACC_CLAMP, 1 - ACC_CLAMP)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        w = evalkit.compute_weights(acc, planes)
    for c in caught:
        print(f"warning: {c.message}", file=sys.stderr)
    recs = evalkit.ensemble_records(per_plane, w)
    result = {
        "weights": w.w.tolist(),
        "planes": list(planes),
        "weight_warnings": w.warnings,
        "metrics": evalkit.metrics_with_ci(recs, n_boot=a.n_boot, seed=a.seed),
    }
    _write_json(a.out, result)
    if a.records_out:
        evalkit.save_records(recs, a.records_out)
    print(f"wrote {a.out}")
    return 0


def cmd_gradcam(a) -> int:
    import torch

    model = skidnet.load_model(a.ckpt)
    clip = datakit.load_clip(a.clip)
    rng = np.random.default_rng(a.seed)
    if isinstance(model, skidnet.DownstreamModel):
        target = evalkit.LABELS.index(a.target) if a.target in evalkit.LABELS else int(a.target)
        idx = evalkit.sample_eval_frames(clip.n_frames, a.frames, rng)
        frames = clip.frames[idx]
        smap = interpret.gradcam(model, torch.from_numpy(frames[None]), target, a.layer)
        files = interpret.render_batch(smap, frames, a.out)
    else:
        frame = clip.frames[a.frame_index if a.frame_index is not None else clip.n_frames // 2]
        patches = framekit.canonical_patches(frame, model.encoder.cfg.n_patches)
        target = int(a.target)
        smap = interpret.gradcam(model, torch.from_numpy(patches[None]), target, a.layer, tiled_side=frame.shape[0])
        files = interpret.render_batch(smap, [frame], a.out)
    _write_json(Path(a.out) / "gradcam.json", {"target": target, "layer": a.layer, "all_zero": smap.all_zero,
                                                 "files": [str(f) for f in files]})
    if smap.all_zero:
        print("warning: all-zero saliency map", file=sys.stderr)
    print(f"wrote {len(files)} overlays to {a.out}")
    return 0


def cmd_ablation(a) -> int:
    cfg = _read_config(a.config)
    root = _data_root(a.data)
    settings = ablation.SweepSettings(
        skid=_skid_config(cfg.get("model", {"miniature": 8})),
        pretext=trainkit.PretextTrainConfig.from_dict(cfg.get("pretext", {})),
        downstream=trainkit.DownstreamTrainConfig.from_dict(cfg.get("train", {})),
        head=trainkit.config_from_dict(skidnet.DownstreamConfig, cfg.get("head", {})),
        seed=a.seed,
    )
    train, valid = _clips(root, "train", a.plane), _clips(root, "valid", a.plane)
    runs = Path(a.out).with_suffix("")
    if a.sweep == "label-efficiency":
        if not a.encoder:
            raise SystemExit("label-efficiency needs --encoder")
        rows = ablation.label_efficiency_sweep(train, valid, skidnet.load_encoder(a.encoder), settings, out_dir=runs)
    elif a.sweep == "class-count":
        rows = ablation.class_count_sweep(train, valid, settings, ks=a.ks, out_dir=runs)
    else:
        rows = ablation.augmentation_sweep(train, valid, settings, k=cfg.get("n_arrangements", 1000), out_dir=runs)
    ablation.write_rows(rows, a.out)
    print(f"wrote {len(rows)} rows to {a.out}")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skid", description="Jigsaw self-supervised pretraining and knee-MRI video classification.")
    p.add_argument("--seed", type=int, default=0, help="global random seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=fn)
        return sp

    def data_args(sp, plane=True):
        sp.add_argument("--data", help=f"dataset root (default ${datakit.DATA_ROOT_ENV})")
        if plane:
            sp.add_argument("--plane", choices=datakit.PLANES, default="sagittal")

    sp = add("gen-arrangements", cmd_gen_arrangements, "generate an arrangement set")
    sp.add_argument("--n", type=int, default=9)
    sp.add_argument("--k", type=int, default=1000)
    sp.add_argument("--out", required=True)

    sp = add("dump-samples", cmd_dump_samples, "write jumbled-patch grids as PNG")
    sp.add_argument("--arrangements", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("synth-data", cmd_synth_data, "generate a synthetic MRNet-layout dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", type=float, default=0.1, help="fraction of the MRNet split sizes")
    sp.add_argument("--frame-size", type=int, default=256)
    sp.add_argument("--config", help="JSON with extra SyntheticSpec fields")

    sp = add("validate-data", cmd_validate_data, "check labels and clip headers of a split")
    data_args(sp, plane=False)
    sp.add_argument("--split", choices=datakit.SPLITS, default="train")
    sp.add_argument("--planes", nargs="+", choices=datakit.PLANES, default=list(datakit.PLANES))
    sp.add_argument("--schema", choices=datakit.SCHEMAS, default="mrnet3")

    sp = add("import", cmd_import, "convert a directory of frame images into a SKIDVOL clip")
    sp.add_argument("--src", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=int, default=256)

    for name, fn, help in (("pretext-train", cmd_pretext_train, "train the jigsaw pretext model"),
                           ("geo-train", cmd_geo_train, "train the 54-way geometric-transform baseline")):
        sp = add(name, fn, help)
        data_args(sp)
        sp.add_argument("--config")
        sp.add_argument("--out", required=True)
        sp.add_argument("--no-valid", action="store_true", help="skip validation and early stopping")
        if name == "pretext-train":
            sp.add_argument("--arrangements", help="arrangement set file (default: generate from --seed)")

    sp = add("downstream-train", cmd_downstream_train, "train one plane's temporal head on a frozen encoder")
    data_args(sp)
    sp.add_argument("--encoder", required=True, help="encoder or pretext checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--fraction", type=float, default=1.0, help="label-efficiency training subset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-valid", action="store_true")

    sp = add("evaluate", cmd_evaluate, "predict one plane and write records plus metrics")
    data_args(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=datakit.SPLITS, default="valid")
    sp.add_argument("--repeats", type=int, default=8)
    sp.add_argument("--n-boot", type=int, default=1000)
    sp.add_argument("--out", required=True, help="prediction records CSV")
    sp.add_argument("--metrics", help="metrics JSON with bootstrap intervals")

    sp = add("ensemble", cmd_ensemble, "combine sagittal/coronal/axial records by log-odds voting")
    sp.add_argument("--records", nargs=3, required=True, metavar=("SAG", "COR", "AX"))
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--val-records", nargs=3, metavar=("SAG", "COR", "AX"), help="validation records for the weights")
    src.add_argument("--weights", help="JSON (classes x planes) validation accuracy matrix")
    sp.add_argument("--n-boot", type=int, default=1000)
    sp.add_argument("--out", required=True)
    sp.add_argument("--records-out")

    sp = add("gradcam", cmd_gradcam, "render Grad-CAM overlays for one clip")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--class", dest="target", default="abn", help="label name (abn/acl/men) or class index")
    sp.add_argument("--layer", default=interpret.DEFAULT_LAYER)
    sp.add_argument("--frames", type=int, default=16)
    sp.add_argument("--frame-index", type=int)
    sp.add_argument("--out", required=True)

    sp = add("ablation", cmd_ablation, "run an ablation sweep and write its metric CSV")
    data_args(sp)
    sp.add_argument("--sweep", choices=("label-efficiency", "class-count", "augmentation"), required=True)
    sp.add_argument("--config")
    sp.add_argument("--encoder")
    sp.add_argument("--ks", type=int, nargs="+", default=[500, 1000])
    sp.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (datakit.DatasetError, arrangements.ArrangementFormatError, datakit.VolumeFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
